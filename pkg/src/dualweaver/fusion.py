"""Length-agnostic feature-fusion modules ``(..., T, C) -> (..., T, C)``.

Two variants share one interface: a per-timestep two-layer MLP and a
two-block 1D CNN over time with replicate padding. Parameters live in a
name -> ndarray dict so that the optimizer and the gradient-stability log
can address tensors by name (``fc1.weight``, ``conv2.bias``, ...).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import (
    DTYPE,
    RngStream,
    dropout_backward,
    dropout_forward,
    layer_norm_backward,
    layer_norm_forward,
    silu,
    silu_grad,
)


class FusionError(ValueError):
    pass


def hidden_dim(n_vars: int) -> int:
    """min(max(2**ceil(log2 V), 32), 512)."""
    if n_vars < 1:
        raise FusionError("need at least one variable")
    return min(max(2 ** math.ceil(math.log2(n_vars)), 32), 512)


def _uniform(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)


class Fusion:
    kind = "base"
    final_layer: tuple[str, ...] = ()

    def __init__(self, params: dict[str, np.ndarray], n_channels: int, dropout: float = 0.1):
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()}
        self.n_channels = int(n_channels)
        self.dropout = float(dropout)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim < 2 or X.shape[-1] != self.n_channels:
            raise FusionError(f"{self.kind} fusion expects (..., T, {self.n_channels}) input, got {X.shape}")
        return X

    def zero_init_final(self) -> "Fusion":
        """Zero the last layer's weight and bias in place so the module outputs 0."""
        for name in self.final_layer:
            self.params[name] = np.zeros_like(self.params[name])
        return self

    def forward(self, X, train: bool = False, rng: RngStream | None = None, *extra: int):
        raise NotImplementedError

    def backward(self, cache, upstream):
        raise NotImplementedError

    def __call__(self, X):
        return self.forward(X)[0]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_channels": self.n_channels, "dropout": self.dropout,
                "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                           for k, v in self.params.items()}}

    def copy(self) -> "Fusion":
        return type(self)({k: v.copy() for k, v in self.params.items()}, self.n_channels, self.dropout)


class MlpFusion(Fusion):
    """``W2 @ dropout(silu(W1 @ x_t + b1)) + b2`` at every timestep."""

    kind = "mlp"
    final_layer = ("fc2.weight", "fc2.bias")

    @classmethod
    def init(cls, n_channels: int, hidden: int | None = None, dropout: float = 0.1,
             rng: RngStream | None = None, zero_final: bool = True) -> "MlpFusion":
        D = hidden_dim(n_channels) if hidden is None else int(hidden)
        C = n_channels
        gen = (rng or RngStream("init", 0)).generator(1)
        params = {
            "fc1.weight": _uniform(gen, (D, C), C),
            "fc1.bias": _uniform(gen, (D,), C),
            "fc2.weight": _uniform(gen, (C, D), D),
            "fc2.bias": _uniform(gen, (C,), D),
        }
        m = cls(params, C, dropout)
        return m.zero_init_final() if zero_final else m

    @property
    def hidden(self) -> int:
        return self.params["fc1.weight"].shape[0]

    def forward(self, X, train=False, rng=None, *extra):
        X = self._check(X)
        p = self.params
        h = X @ p["fc1.weight"].T + p["fc1.bias"]
        a = silu(h)
        a_d, mask = dropout_forward(a, self.dropout, train, rng, *extra)
        out = a_d @ p["fc2.weight"].T + p["fc2.bias"]
        return out, (X, h, a_d, mask)

    def backward(self, cache, upstream):
        X, h, a_d, mask = cache
        G = np.asarray(upstream, dtype=DTYPE)
        if G.shape != X.shape:
            raise FusionError(f"upstream shape {G.shape} does not match forward input {X.shape}")
        p = self.params
        G2 = G.reshape(-1, G.shape[-1])
        grads = {
            "fc2.weight": G2.T @ a_d.reshape(-1, a_d.shape[-1]),
            "fc2.bias": G2.sum(axis=0),
        }
        da = dropout_backward(mask, G @ p["fc2.weight"])
        dh = da * silu_grad(h)
        dh2 = dh.reshape(-1, dh.shape[-1])
        grads["fc1.weight"] = dh2.T @ X.reshape(-1, X.shape[-1])
        grads["fc1.bias"] = dh2.sum(axis=0)
        dX = dh @ p["fc1.weight"]
        return grads, dX


# ---------------------------------------------------------------------------
# CNN
# ---------------------------------------------------------------------------


def _replicate_pad(x, pad: int):
    """Pad the time axis (-2) by repeating the edge rows."""
    first = np.repeat(x[..., :1, :], pad, axis=-2)
    last = np.repeat(x[..., -1:, :], pad, axis=-2)
    return np.concatenate([first, x, last], axis=-2)


def conv1d_forward(x, weight, bias):
    """Same-length conv over time with replicate padding.

    ``x``: (..., T, Cin); ``weight``: (Cout, Cin, K) with odd K; returns
    (..., T, Cout) and the padded-input windows needed for backward.
    """
    K = weight.shape[-1]
    xp = _replicate_pad(x, K // 2)
    win = sliding_window_view(xp, K, axis=-2)  # (..., T, Cin, K)
    out = np.einsum("...tik,oik->...to", win, weight) + bias
    return out, win


def conv1d_backward(win, weight, upstream, T: int):
    K = weight.shape[-1]
    pad = K // 2
    u2 = upstream.reshape((-1,) + upstream.shape[-2:])
    d_weight = np.einsum("nto,ntik->oik", u2, win.reshape((-1,) + win.shape[-3:]))
    d_bias = upstream.reshape(-1, upstream.shape[-1]).sum(axis=0)
    contrib = np.einsum("...to,oik->...tik", upstream, weight)
    lead = upstream.shape[:-2]
    d_xp = np.zeros(lead + (T + 2 * pad, weight.shape[1]))
    for k in range(K):
        d_xp[..., k:k + T, :] += contrib[..., k]
    d_x = d_xp[..., pad:pad + T, :].copy()
    d_x[..., :1, :] += d_xp[..., :pad, :].sum(axis=-2, keepdims=True)
    d_x[..., -1:, :] += d_xp[..., pad + T:, :].sum(axis=-2, keepdims=True)
    return d_x, d_weight, d_bias


class CnnFusion(Fusion):
    """conv(C->D) -> layer norm over D -> SiLU -> dropout -> conv(D->C); kernel 5, replicate padding."""

    kind = "cnn"
    final_layer = ("conv2.weight", "conv2.bias")
    kernel = 5

    @classmethod
    def init(cls, n_channels: int, hidden: int | None = None, dropout: float = 0.1,
             rng: RngStream | None = None, zero_final: bool = True) -> "CnnFusion":
        D = hidden_dim(n_channels) if hidden is None else int(hidden)
        C, K = n_channels, cls.kernel
        gen = (rng or RngStream("init", 0)).generator(2)
        params = {
            "conv1.weight": _uniform(gen, (D, C, K), C * K),
            "conv1.bias": _uniform(gen, (D,), C * K),
            "norm.weight": np.ones(D),
            "norm.bias": np.zeros(D),
            "conv2.weight": _uniform(gen, (C, D, K), D * K),
            "conv2.bias": _uniform(gen, (C,), D * K),
        }
        m = cls(params, C, dropout)
        return m.zero_init_final() if zero_final else m

    @property
    def hidden(self) -> int:
        return self.params["conv1.weight"].shape[0]

    def forward(self, X, train=False, rng=None, *extra):
        X = self._check(X)
        p = self.params
        h, win1 = conv1d_forward(X, p["conv1.weight"], p["conv1.bias"])
        n, ln_cache = layer_norm_forward(h, p["norm.weight"], p["norm.bias"])
        a = silu(n)
        a_d, mask = dropout_forward(a, self.dropout, train, rng, *extra)
        out, win2 = conv1d_forward(a_d, p["conv2.weight"], p["conv2.bias"])
        return out, (X.shape, win1, ln_cache, n, mask, win2)

    def backward(self, cache, upstream):
        shape, win1, ln_cache, n, mask, win2 = cache
        G = np.asarray(upstream, dtype=DTYPE)
        if G.shape != shape:
            raise FusionError(f"upstream shape {G.shape} does not match forward input {shape}")
        T = shape[-2]
        p = self.params
        grads = {}
        da, grads["conv2.weight"], grads["conv2.bias"] = conv1d_backward(win2, p["conv2.weight"], G, T)
        da = dropout_backward(mask, da)
        dn = da * silu_grad(n)
        dh, grads["norm.weight"], grads["norm.bias"] = layer_norm_backward(ln_cache, dn)
        dX, grads["conv1.weight"], grads["conv1.bias"] = conv1d_backward(win1, p["conv1.weight"], dh, T)
        return grads, dX


FUSIONS = {"mlp": MlpFusion, "cnn": CnnFusion}


def make_fusion(kind: str, n_channels: int, hidden: int | None = None, dropout: float = 0.1,
                rng: RngStream | None = None) -> Fusion:
    try:
        cls = FUSIONS[kind]
    except KeyError:
        raise FusionError(f"unknown fusion kind {kind!r}; choose from {sorted(FUSIONS)}") from None
    return cls.init(n_channels, hidden, dropout, rng)


def fusion_from_dict(d: dict) -> Fusion:
    cls = FUSIONS[d["kind"]]
    params = {k: np.asarray(v["data"], dtype=DTYPE).reshape(v["shape"]) for k, v in d["params"].items()}
    return cls(params, d["n_channels"], d["dropout"])
