import numpy as np
import pytest

from augla.augmented import augmented_attention_forward
from augla.decode import DecodeState, decode_step, fold_group, init_state, prefill
from augla.errors import ConfigError, ContractError, DimensionError
from augla.features import feature_map
from augla.reference import AttnConfig


def make(rng, d=3, G=2, k=3, alpha=0.7, **kw):
    cfg = AttnConfig(d_model=d, group_size=G, conv_kernel=k, alpha=alpha, **kw)
    return cfg, rng.normal(size=(k, d))


def stepwise(state, Q, K, V):
    return np.array([decode_step(state, Q[i], K[i], V[i]) for i in range(len(Q))]).reshape(len(Q), -1)


def test_init_state_is_empty():
    cfg = AttnConfig(d_model=4, group_size=3, conv_kernel=5)
    s = init_state(cfg)
    assert s.pos == 0 and not s.S.any() and s.group_K.shape == (0, 4)
    assert s.conv_tail.shape == (4, 4) and not s.conv_tail.any()
    assert s.fields_equal(init_state(cfg))


def test_first_step_empty_history(rng):
    cfg, W = make(rng)
    s = init_state(cfg, W)
    q, k, v = rng.normal(size=(3, 3))
    out = decode_step(s, q, k, v)
    np.testing.assert_allclose(out, v + W[-1] * v, atol=1e-15)


def test_group_boundary_fold_by_hand(rng):
    cfg = AttnConfig(d_model=2, group_size=2, conv_kernel=1, alpha=0.4, feature_map="elu_plus_one")
    s = init_state(cfg)
    Q, K, V = rng.normal(size=(3, 3, 2))
    decode_step(s, Q[0], K[0], V[0])
    decode_step(s, Q[1], K[1], V[1])
    S = np.outer(feature_map(K[0], "elu_plus_one"), V[0]) + np.outer(feature_map(K[1], "elu_plus_one"), V[1])
    out = decode_step(s, Q[2], K[2], V[2])
    # third token is alone in its group: local = v3, conv (k=1, zero tap) = 0
    expected = V[2] + 0.4 * feature_map(Q[2], "elu_plus_one") @ S
    np.testing.assert_allclose(out, expected, atol=1e-14)


@pytest.mark.parametrize("G", [1, 2, 3, 64])
@pytest.mark.parametrize("k", [1, 3, 63])
def test_stepwise_matches_batched(rng, G, k):
    cfg, W = make(rng, d=4, G=G, k=k, alpha=0.5)
    Q, K, V = rng.normal(size=(3, 150, 4))
    out = stepwise(init_state(cfg, W), Q, K, V)
    ref, _ = augmented_attention_forward(Q, K, V, W, cfg)
    assert np.abs(out - ref).max() <= 1e-12


def test_prefill_fresh_is_forward(rng):
    cfg, W = make(rng, G=3, k=4, global_scale="inverse_count")
    Q, K, V = rng.normal(size=(3, 20, 3))
    s = init_state(cfg, W)
    out = prefill(s, Q, K, V)
    np.testing.assert_allclose(out, augmented_attention_forward(Q, K, V, W, cfg)[0], atol=1e-13)
    assert s.pos == 20


def test_prefill_split_points(rng):
    cfg, W = make(rng, d=3, G=3, k=4)
    Q, K, V = rng.normal(size=(3, 25, 3))
    whole = init_state(cfg, W)
    ref = prefill(whole, Q, K, V)
    for cut in range(26):
        s = init_state(cfg, W)
        out = np.vstack([prefill(s, Q[:cut], K[:cut], V[:cut]), prefill(s, Q[cut:], K[cut:], V[cut:])])
        assert np.abs(out - ref).max() <= 1e-12
        assert s.fields_equal(whole, atol=1e-12)


def test_prefill_state_equals_stepwise_state(rng):
    cfg, W = make(rng, d=3, G=4, k=5)
    Q, K, V = rng.normal(size=(3, 19, 3))
    a, b = init_state(cfg, W), init_state(cfg, W)
    prefill(a, Q, K, V)
    stepwise(b, Q, K, V)
    assert a.fields_equal(b, atol=1e-12)


def test_prefill_empty(rng):
    cfg, W = make(rng)
    s = init_state(cfg, W)
    prefill(s, *rng.normal(size=(3, 5, 3)))
    before = s.clone()
    out = prefill(s, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    assert out.shape == (0, 3)
    assert s.fields_equal(before)


def test_fold_group_outer_products(rng):
    cfg = AttnConfig(d_model=3, group_size=4, conv_kernel=2)
    s = init_state(cfg)
    K, V = rng.normal(size=(2, 4, 3))
    s.group_K, s.group_V = K.copy(), V.copy()
    fold_group(s)
    brute = sum(np.outer(np.maximum(K[i], 0), V[i]) for i in range(4))
    np.testing.assert_allclose(s.S, brute, atol=1e-15)
    assert s.group_K.shape == (0, 3)


def test_fold_group_single_row_and_zero_rows(rng):
    cfg = AttnConfig(d_model=2, group_size=1, conv_kernel=1, feature_map="identity")
    s = init_state(cfg)
    k, v = rng.normal(size=(2, 2))
    s.group_K, s.group_V = k[None], v[None]
    fold_group(s)
    np.testing.assert_array_equal(s.S, np.outer(k, v))
    prev = s.S.copy()
    s.group_K, s.group_V = np.zeros((1, 2)), np.zeros((1, 2))
    fold_group(s)
    np.testing.assert_array_equal(s.S, prev)


def test_fold_group_rejects_partial():
    s = init_state(AttnConfig(d_model=2, group_size=3, conv_kernel=1))
    s.group_K = s.group_V = np.zeros((2, 2))
    with pytest.raises(ContractError):
        fold_group(s)


def test_bounded_buffers(rng):
    cfg, W = make(rng, d=2, G=5, k=4)
    s = init_state(cfg, W)
    size = s.nbytes()
    for q, k, v in rng.normal(size=(40, 3, 2)):
        decode_step(s, q, k, v)
        s.check_invariants()
        assert s.group_K.shape[0] < 5 and s.conv_tail.shape[0] == 3
        assert s.pos == s.folded + s.group_K.shape[0]
        assert s.nbytes() <= size + 4 * 2 * 2 * 8
    assert s.pos == 40


def test_replay_is_bitwise(rng):
    cfg, W = make(rng, G=3, k=4)
    Q, K, V = rng.normal(size=(3, 30, 3))
    a = stepwise(init_state(cfg, W), Q, K, V)
    b = stepwise(init_state(cfg, W), Q, K, V)
    assert a.tobytes() == b.tobytes()


def test_errors(rng):
    cfg, W = make(rng)
    s = init_state(cfg, W)
    with pytest.raises(DimensionError):
        decode_step(s, np.ones(2), np.ones(3), np.ones(3))
    with pytest.raises(DimensionError):
        prefill(s, np.ones((2, 4)), np.ones((2, 4)), np.ones((2, 4)))
    with pytest.raises(ConfigError):
        init_state(AttnConfig(d_model=3, unmasked_conv=True))
    with pytest.raises(ConfigError):
        init_state("not a config")
    with pytest.raises(DimensionError):
        init_state(cfg, np.zeros((2, 3)))


def test_snapshot_roundtrip(rng):
    cfg, W = make(rng, d=3, G=4, k=3)
    s = init_state(cfg, W)
    prefill(s, *rng.normal(size=(3, 10, 3)))
    blob = s.to_bytes()
    assert blob[:4] == b"ALDS"
    restored = DecodeState.from_bytes(blob, cfg, W)
    assert restored.fields_equal(s)
    q, k, v = rng.normal(size=(3, 3))
    assert np.array_equal(decode_step(restored, q, k, v), decode_step(s, q, k, v))


def test_snapshot_layout(rng):
    cfg = AttnConfig(d_model=2, group_size=3, conv_kernel=2)
    s = init_state(cfg)
    decode_step(s, *np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    blob = s.to_bytes()
    # header: magic, u16 version, u32 d, G, k, rows, u64 pos
    assert len(blob) == 4 + 2 + 4 * 4 + 8 + 8 * (4 + 2 + 2 + 2)
    body = np.frombuffer(blob[30:], dtype="<f8")
    np.testing.assert_array_equal(body[4:6], [3.0, 4.0])  # group_K row
    np.testing.assert_array_equal(body[6:8], [5.0, 6.0])  # group_V row
    np.testing.assert_array_equal(body[8:10], [5.0, 6.0])  # conv tail


def test_snapshot_rejects_mismatch(rng):
    cfg = AttnConfig(d_model=2, group_size=3, conv_kernel=2)
    blob = init_state(cfg).to_bytes()
    with pytest.raises(ConfigError):
        DecodeState.from_bytes(blob, AttnConfig(d_model=2, group_size=4, conv_kernel=2))
    with pytest.raises(ContractError):
        DecodeState.from_bytes(b"XXXX" + blob[4:], cfg)
    with pytest.raises(ContractError):
        DecodeState.from_bytes(blob[:-8], cfg)
