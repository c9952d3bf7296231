"""Elementwise kernel feature maps for linear attention."""

import numpy as np

from .errors import ConfigError

FEATURE_MAPS = ("relu", "elu_plus_one", "identity")


def feature_map(x, kind: str = "relu"):
    """Apply the feature map ``kind`` elementwise.

    relu: ``max(x, 0)``; elu_plus_one: ``x + 1`` for ``x >= 0`` else ``exp(x)``;
    identity: ``x``.
    """
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "elu_plus_one":
        return np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "identity":
        return x
    raise ConfigError(f"unknown feature map {kind!r}; expected one of {FEATURE_MAPS}")


def feature_map_grad(x, kind: str = "relu"):
    """Derivative of :func:`feature_map` with respect to its input."""
    x = np.asarray(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "elu_plus_one":
        return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype)
    if kind == "identity":
        return np.ones_like(x)
    raise ConfigError(f"unknown feature map {kind!r}; expected one of {FEATURE_MAPS}")
