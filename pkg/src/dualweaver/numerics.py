"""Dense float64 kernels shared by the rest of the package.

Everything here works on plain ``numpy.ndarray`` objects in float64. The only
state is carried by :class:`RngStream`, which is counter addressed so that a
draw never depends on how many draws happened before it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float64


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Named, seeded, counter-addressed random stream.

    ``generator(*extra)`` returns a fresh ``numpy.random.Generator`` that is a
    pure function of ``(seed, name, counter, *extra)``.
    """

    name: str
    seed: int
    counter: int = 0

    def at(self, counter: int) -> "RngStream":
        return RngStream(self.name, self.seed, counter)

    def generator(self, *extra: int) -> np.random.Generator:
        key = [int(self.seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(self.name.encode()), int(self.counter)]
        key.extend(int(e) for e in extra)
        return np.random.default_rng(np.random.SeedSequence(key))


def streams(seed: int) -> dict[str, RngStream]:
    """Fan a single top-level seed into the named streams used by the package."""
    return {name: RngStream(name, seed) for name in ("init", "dropout", "data", "noise")}


# ---------------------------------------------------------------------------
# activations / normalization / dropout
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x). Accepts scalars or arrays."""
    xa = np.asarray(x, dtype=DTYPE)
    out = xa * sigmoid(xa)
    return float(out) if out.ndim == 0 else out


def silu_grad(x):
    """Derivative of :func:`silu`: s(x) * (1 + x * (1 - s(x)))."""
    xa = np.asarray(x, dtype=DTYPE)
    s = sigmoid(xa)
    out = s * (1.0 + xa * (1.0 - s))
    return float(out) if out.ndim == 0 else out


def layer_norm_forward(v, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis.

    Returns ``(out, cache)``; ``cache`` holds the normalized values and the
    inverse standard deviation needed by :func:`layer_norm_backward`.
    """
    v = np.asarray(v, dtype=DTYPE)
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, np.asarray(gamma, dtype=DTYPE))


def layer_norm_backward(cache, upstream):
    """Return ``(d_input, d_gamma, d_beta)``; parameter grads are summed over leading axes."""
    xhat, inv_std, gamma = cache
    g = np.asarray(upstream, dtype=DTYPE)
    lead = tuple(range(g.ndim - 1))
    d_gamma = (g * xhat).sum(axis=lead)
    d_beta = g.sum(axis=lead)
    gx = g * gamma
    n = xhat.shape[-1]
    d_in = inv_std / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
    return d_in, d_gamma, d_beta


def dropout_forward(m, rate: float, train: bool, rng: RngStream | None = None, *extra: int):
    """Inverted dropout.

    Returns ``(out, mask)`` where ``mask`` already includes the ``1/(1-rate)``
    scale (``None`` when dropout is inactive). Eval mode is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    m = np.asarray(m, dtype=DTYPE)
    if not train or rate == 0.0:
        return m, None
    if rng is None:
        raise ValueError("train-mode dropout needs an RngStream")
    keep = rng.generator(*extra).random(m.shape) >= rate
    mask = keep.astype(DTYPE) / (1.0 - rate)
    return m * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_param_index: tuple
    h: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a, n):
    """Elementwise |a-n| / max(1, |a|, |n|)."""
    a = np.asarray(a, dtype=DTYPE)
    n = np.asarray(n, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time.

    ``theta`` may have any shape; the result has the same shape.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    theta = np.array(theta, dtype=DTYPE)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(theta))
        flat[k] = orig - h
        fm = float(f(theta))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def check_gradient(name: str, analytic, f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> GradCheckReport:
    numeric = finite_diff_grad(f, theta, h)
    err = rel_error(analytic, numeric)
    if err.size == 0:
        return GradCheckReport(name, 0.0, (), h)
    idx = np.unravel_index(int(np.argmax(err)), err.shape)
    return GradCheckReport(name, float(err[idx]), tuple(int(i) for i in idx), h)
