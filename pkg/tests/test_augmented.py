import numpy as np
import pytest

from conftest import central_diff, grad_rel_error
from augla.oracles import augmented_oracle, conv_oracle, global_oracle, local_oracle

from augla.augmented import (
    augmented_attention_backward,
    augmented_attention_forward,
    feature_map,
    grouped_global_la_forward,
    local_group_attention_forward,
    masked_dwconv_forward,
    multi_head_augmented,
    multi_head_augmented_backward,
    multi_head_augmented_forward,
)
from augla.errors import ContractError, DimensionError
from augla.reference import AttnConfig, causal_linear_attention_ref, softmax_attention_ref


def test_feature_maps():
    np.testing.assert_array_equal(feature_map(np.array([-1.0, 0.0, 2.0]), "relu"), [0, 0, 2])
    assert feature_map(np.array(0.0), "elu_plus_one") == 1.0
    x = np.array([-2.0, 0.5])
    np.testing.assert_array_equal(feature_map(x, "identity"), x)
    np.testing.assert_allclose(feature_map(x, "elu_plus_one"), [np.exp(-2.0), 1.5])


# ----------------------------------------------------------------- conv


def test_conv_identity_kernel(rng):
    V = rng.normal(size=(6, 3))
    W = np.zeros((4, 3))
    W[-1] = 1.0
    np.testing.assert_array_equal(masked_dwconv_forward(V, W), V)


def test_conv_zero_values():
    assert not masked_dwconv_forward(np.zeros((5, 2)), np.ones((3, 2))).any()


def test_conv_hand_window():
    out = masked_dwconv_forward(np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([[0.5], [0.25], [0.25]]))
    np.testing.assert_allclose(out.ravel(), [0.25, 0.75, 1.75, 2.75], atol=1e-15)


@pytest.mark.parametrize("unmasked", [False, True])
def test_conv_matches_loop_oracle(rng, unmasked):
    V = rng.normal(size=(11, 3))
    W = rng.normal(size=(5, 3))
    np.testing.assert_allclose(masked_dwconv_forward(V, W, unmasked), conv_oracle(V, W, unmasked), atol=1e-14)


def test_conv_linear_in_values_and_taps(rng):
    V1, V2 = rng.normal(size=(2, 9, 3))
    W1, W2 = rng.normal(size=(2, 4, 3))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(
        masked_dwconv_forward(a * V1 + b * V2, W1),
        a * masked_dwconv_forward(V1, W1) + b * masked_dwconv_forward(V2, W1), atol=1e-10,
    )
    np.testing.assert_allclose(
        masked_dwconv_forward(V1, a * W1 + b * W2),
        a * masked_dwconv_forward(V1, W1) + b * masked_dwconv_forward(V1, W2), atol=1e-10,
    )


# ---------------------------------------------------------------- local


def test_local_single_group_is_causal_softmax(rng):
    Q, K, V = rng.normal(size=(3, 5, 4))
    out, _ = local_group_attention_forward(Q, K, V, 8)
    np.testing.assert_allclose(out, softmax_attention_ref(Q, K, V, causal=True), atol=1e-14)


def test_local_group_one_returns_values(rng):
    Q, K, V = rng.normal(size=(3, 6, 2))
    np.testing.assert_allclose(local_group_attention_forward(Q, K, V, 1)[0], V, atol=1e-15)


def test_local_two_blocks(rng):
    Q, K, V = rng.normal(size=(3, 4, 3))
    out, _ = local_group_attention_forward(Q, K, V, 2)
    np.testing.assert_allclose(out[:2], softmax_attention_ref(Q[:2], K[:2], V[:2]), atol=1e-14)
    np.testing.assert_allclose(out[2:], softmax_attention_ref(Q[2:], K[2:], V[2:]), atol=1e-14)


@pytest.mark.parametrize("n,G", [(7, 3), (9, 3), (1, 4), (13, 5)])
def test_local_partial_last_group(rng, n, G):
    Q, K, V = rng.normal(size=(3, n, 3))
    np.testing.assert_allclose(local_group_attention_forward(Q, K, V, G)[0], local_oracle(Q, K, V, G), atol=1e-13)


# --------------------------------------------------------------- global


def test_global_single_group_is_zero(rng):
    Q, K, V = rng.normal(size=(3, 5, 3))
    assert not grouped_global_la_forward(Q, K, V, 5)[0].any()


def test_global_group_one_is_strict_linear_attention(rng):
    Q, K, V = rng.normal(size=(3, 12, 4))
    for kind in ("relu", "elu_plus_one", "identity"):
        np.testing.assert_allclose(
            grouped_global_la_forward(Q, K, V, 1, kind)[0],
            causal_linear_attention_ref(Q, K, V, kind, include_current=False), atol=1e-12,
        )


def test_global_hand_group_sum():
    K = np.array([[1.0], [2.0], [3.0], [4.0]])
    out, _ = grouped_global_la_forward(np.ones((4, 1)), K, np.ones((4, 1)), 2, "identity")
    np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 3.0, 3.0])


@pytest.mark.parametrize("scale", ["none", "inverse_count"])
def test_global_matches_loop_oracle(rng, scale):
    Q, K, V = rng.normal(size=(3, 14, 3))
    out, _ = grouped_global_la_forward(Q, K, V, 4, "elu_plus_one", scale)
    np.testing.assert_allclose(out, global_oracle(Q, K, V, 4, "elu_plus_one", scale), atol=1e-12)


# ------------------------------------------------------------- combined


def test_alpha_zero_zero_kernel_is_local(rng):
    cfg = AttnConfig(d_model=3, group_size=2, conv_kernel=3, alpha=0.0)
    Q, K, V = rng.normal(size=(3, 7, 3))
    out, _ = augmented_attention_forward(Q, K, V, np.zeros((3, 3)), cfg)
    np.testing.assert_array_equal(out, local_group_attention_forward(Q, K, V, 2)[0])


def test_single_group_zero_kernel_is_softmax(rng):
    for alpha in (0.0, 0.5, 3.0):
        cfg = AttnConfig(d_model=4, group_size=8, conv_kernel=2, alpha=alpha)
        Q, K, V = rng.normal(size=(3, 6, 4))
        out, _ = augmented_attention_forward(Q, K, V, np.zeros((2, 4)), cfg)
        np.testing.assert_allclose(out, softmax_attention_ref(Q, K, V), atol=1e-14)


def test_branch_sum_oracle(rng):
    cfg = AttnConfig(d_model=4, group_size=2, conv_kernel=3, alpha=0.5)
    Q, K, V = rng.normal(size=(3, 8, 4))
    W = rng.normal(size=(3, 4))
    out, _ = augmented_attention_forward(Q, K, V, W, cfg)
    assert np.abs(out - augmented_oracle(Q, K, V, W, cfg)).max() <= 1e-12


def test_batched_leading_dims_match_loop(rng):
    cfg = AttnConfig(d_model=3, group_size=3, conv_kernel=4, alpha=0.8)
    Q, K, V = rng.normal(size=(3, 2, 5, 10, 3))
    W = rng.normal(size=(5, 4, 3))
    out, _ = augmented_attention_forward(Q, K, V, W, cfg)
    for b in range(2):
        for h in range(5):
            ref, _ = augmented_attention_forward(Q[b, h], K[b, h], V[b, h], W[h], cfg)
            np.testing.assert_allclose(out[b, h], ref, atol=1e-13)


def test_shape_errors(rng):
    cfg = AttnConfig(d_model=4, group_size=2, conv_kernel=3)
    Q = rng.normal(size=(5, 4))
    with pytest.raises(DimensionError):
        augmented_attention_forward(Q, Q, Q, np.zeros((2, 4)), cfg)
    with pytest.raises(DimensionError):
        augmented_attention_forward(Q[:, :3], Q[:, :3], Q[:, :3], np.zeros((3, 3)), cfg)


def _perturb_after(rng, arrays, which, t):
    out = [a.copy() for a in arrays]
    out[which][t + 1 :] += rng.normal(size=out[which][t + 1 :].shape)
    return out


@pytest.mark.parametrize("which", [0, 1, 2])
def test_masked_is_causal_bitwise(rng, which):
    cfg = AttnConfig(d_model=3, group_size=3, conv_kernel=4, alpha=0.6)
    Q, K, V = rng.normal(size=(3, 11, 3))
    W = rng.normal(size=(4, 3))
    base, _ = augmented_attention_forward(Q, K, V, W, cfg)
    for t in range(10):
        out, _ = augmented_attention_forward(*_perturb_after(rng, (Q, K, V), which, t), W, cfg)
        assert np.array_equal(out[: t + 1], base[: t + 1])


def test_unmasked_conv_leaks(rng):
    cfg = AttnConfig(d_model=3, group_size=3, conv_kernel=5, alpha=0.6, unmasked_conv=True)
    Q, K, V = rng.normal(size=(3, 11, 3))
    W = rng.normal(size=(5, 3))
    base, _ = augmented_attention_forward(Q, K, V, W, cfg)
    out, _ = augmented_attention_forward(Q, K, _perturb_after(rng, (V,), 0, 4)[0], W, cfg)
    assert not np.array_equal(out[:5], base[:5])


# ------------------------------------------------------------- backward


def _check_grads(rng, cfg, n, tol=1e-4):
    Q, K, V = rng.normal(size=(3, n, cfg.head_dim))
    W = rng.normal(size=(cfg.conv_kernel, cfg.head_dim))
    R = rng.normal(size=(n, cfg.head_dim))
    _, cache = augmented_attention_forward(Q, K, V, W, cfg)
    grads = augmented_attention_backward(cache, R)
    inputs = [Q, K, V, W]
    for i in range(4):
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return float((augmented_attention_forward(*args, cfg)[0] * R).sum())

        assert grad_rel_error(grads[i], central_diff(f, inputs[i])) < tol, f"input {i}"


def test_backward_zero_upstream(rng):
    cfg = AttnConfig(d_model=3, group_size=2, conv_kernel=3, alpha=0.7)
    Q, K, V = rng.normal(size=(3, 6, 3))
    _, cache = augmented_attention_forward(Q, K, V, rng.normal(size=(3, 3)), cfg)
    for g in augmented_attention_backward(cache, np.zeros((6, 3))):
        assert not g.any()


def test_backward_softmax_only(rng):
    _check_grads(rng, AttnConfig(d_model=3, group_size=8, conv_kernel=2, alpha=0.0), 5)


def test_backward_full_config(rng):
    _check_grads(rng, AttnConfig(d_model=3, group_size=2, conv_kernel=3, alpha=0.7), 6)


@pytest.mark.parametrize("kind", ["relu", "elu_plus_one", "identity"])
@pytest.mark.parametrize("scale", ["none", "inverse_count"])
def test_backward_feature_maps(rng, kind, scale):
    cfg = AttnConfig(d_model=2, group_size=3, conv_kernel=4, alpha=1.3, feature_map=kind, global_scale=scale)
    _check_grads(rng, cfg, 8)


def test_backward_unmasked(rng):
    _check_grads(rng, AttnConfig(d_model=2, group_size=3, conv_kernel=5, alpha=0.4, unmasked_conv=True), 7)


def test_cache_is_single_use(rng):
    cfg = AttnConfig(d_model=2, group_size=2, conv_kernel=2)
    Q, K, V = rng.normal(size=(3, 4, 2))
    _, cache = augmented_attention_forward(Q, K, V, np.zeros((2, 2)), cfg)
    with pytest.raises(ContractError):
        augmented_attention_backward(cache, np.zeros((5, 2)))
    augmented_attention_backward(cache, np.zeros((4, 2)))
    with pytest.raises(ContractError):
        augmented_attention_backward(cache, np.zeros((4, 2)))


# ----------------------------------------------------------- multi-head


def _mh_weights(rng, cfg):
    d = cfg.d_model
    return [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)] + [
        rng.normal(size=(cfg.n_heads, cfg.conv_kernel, cfg.head_dim))
    ]


def test_multihead_single_head_composition(rng):
    cfg = AttnConfig(d_model=4, n_heads=1, group_size=3, conv_kernel=2, alpha=0.5)
    X = rng.normal(size=(7, 4))
    Wq, Wk, Wv, Wo, Wc = _mh_weights(rng, cfg)
    single, _ = augmented_attention_forward(X @ Wq, X @ Wk, X @ Wv, Wc[0], cfg)
    np.testing.assert_allclose(multi_head_augmented(X, Wq, Wk, Wv, Wo, Wc, cfg), single @ Wo, atol=1e-13)


def test_multihead_identical_heads(rng):
    cfg = AttnConfig(d_model=4, n_heads=2, group_size=3, conv_kernel=2, alpha=0.5)
    X = rng.normal(size=(6, 4))
    Wq, Wk, Wv = (np.hstack([m, m]) for m in rng.normal(size=(3, 4, 2)))
    taps = rng.normal(size=(2, 2))
    out = multi_head_augmented(X, Wq, Wk, Wv, np.eye(4), np.stack([taps, taps]), cfg)
    np.testing.assert_array_equal(out[:, :2], out[:, 2:])


def test_multihead_matches_manual_loop(rng):
    cfg = AttnConfig(d_model=6, n_heads=2, group_size=3, conv_kernel=3, alpha=0.9)
    X = rng.normal(size=(8, 6))
    Wq, Wk, Wv, Wo, Wc = _mh_weights(rng, cfg)
    heads = []
    for h in range(2):
        cols = slice(3 * h, 3 * h + 3)
        o, _ = augmented_attention_forward(X @ Wq[:, cols], X @ Wk[:, cols], X @ Wv[:, cols], Wc[h], cfg)
        heads.append(o)
    np.testing.assert_allclose(multi_head_augmented(X, Wq, Wk, Wv, Wo, Wc, cfg), np.hstack(heads) @ Wo, atol=1e-13)


def test_multihead_backward(rng):
    cfg = AttnConfig(d_model=4, n_heads=2, group_size=2, conv_kernel=3, alpha=0.6, feature_map="elu_plus_one")
    X = rng.normal(size=(2, 5, 4))
    weights = _mh_weights(rng, cfg)
    R = rng.normal(size=(2, 5, 4))
    _, cache = multi_head_augmented_forward(X, *weights, cfg)
    grads = multi_head_augmented_backward(cache, R)
    inputs = [X] + weights
    for i in range(len(inputs)):
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return float((multi_head_augmented(*args, cfg) * R).sum())

        assert grad_rel_error(grads[i], central_diff(f, inputs[i])) < 1e-4, f"input {i}"
