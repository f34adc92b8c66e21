"""Frozen univariate forecasters.

Each forecaster maps a lookback of length ``L`` to a forecast of length ``H``
and exposes the vector-Jacobian product of that map (``input_grad``) so that
losses measured on its outputs can be pushed back into its inputs. All
methods broadcast over leading axes: ``(..., L) -> (..., H)``.

Parameters are read-only arrays; nothing in the package mutates a forecaster
after construction.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .data import MultivariateSeries, windows
from .numerics import DTYPE, RngStream


class ForecasterError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=DTYPE)
    a.flags.writeable = False
    return a


class FrozenForecaster:
    kind = "base"
    odd_linear = True  # M(-x) == -M(x)
    linear = True  # M(a x + b y) == a M(x) + b M(y)

    def __init__(self, L: int, H: int):
        if L < 1 or H < 1:
            raise ForecasterError("L and H must be positive")
        self.L = int(L)
        self.H = int(H)

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1:] != (self.L,):
            raise ForecasterError(f"{self.kind}: expected lookback length {self.L}, got shape {x.shape}")
        return x

    def _check_upstream(self, x, upstream) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_x(x)
        g = np.asarray(upstream, dtype=DTYPE)
        if g.shape != x.shape[:-1] + (self.H,):
            raise ForecasterError(f"{self.kind}: upstream shape {g.shape} does not match {x.shape[:-1] + (self.H,)}")
        return x, g

    def predict(self, x) -> np.ndarray:
        raise NotImplementedError

    def input_grad(self, x, upstream) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "L": self.L, "H": self.H}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Persistence(FrozenForecaster):
    """Repeats the last observed value."""

    kind = "persistence"

    def predict(self, x):
        x = self._check_x(x)
        return np.repeat(x[..., -1:], self.H, axis=-1)

    def input_grad(self, x, upstream):
        x, g = self._check_upstream(x, upstream)
        out = np.zeros_like(x)
        out[..., -1] = g.sum(axis=-1)
        return out


class SeasonalNaive(FrozenForecaster):
    """Repeats the last observed season of length ``m``."""

    kind = "seasonal_naive"

    def __init__(self, L: int, H: int, m: int):
        super().__init__(L, H)
        if not 1 <= m <= L:
            raise ForecasterError(f"season m={m} must lie in [1, L={L}]")
        self.m = int(m)
        self._idx = L - m + (np.arange(H) % m)

    def predict(self, x):
        x = self._check_x(x)
        return x[..., self._idx]

    def input_grad(self, x, upstream):
        x, g = self._check_upstream(x, upstream)
        out = np.zeros_like(x)
        # np.add.at accumulates repeated indices
        np.add.at(out, (..., self._idx), g)
        return out

    def to_dict(self):
        return {**super().to_dict(), "m": self.m}


class RidgeAR(FrozenForecaster):
    """Direct multi-horizon autoregression on the last ``p`` values.

    With ``projection`` set, the regressors are ``[x_p, tanh(projection @ x_p)]``
    instead of just ``x_p``; tanh is odd, so the map stays odd as long as
    there is no bias.
    """

    kind = "ridge_ar"

    def __init__(self, L: int, H: int, coefficients, ridge_lambda: float = 0.0, bias=None, projection=None,
                 offsets=None):
        super().__init__(L, H)
        coef = _frozen(coefficients)
        self.projection = None if projection is None else _frozen(projection)
        self.offsets = None if offsets is None else _frozen(offsets)
        n_proj = 0 if self.projection is None else self.projection.shape[0]
        p = coef.shape[1] - n_proj
        if coef.ndim != 2 or coef.shape[0] != H or not 1 <= p <= L:
            raise ForecasterError(f"coefficient shape {coef.shape} incompatible with H={H}, L={L}")
        if self.projection is not None and self.projection.shape[1] != p:
            raise ForecasterError("projection width must equal the AR order")
        if not np.all(np.isfinite(coef)):
            raise ForecasterError("non-finite coefficients")
        self.order = p
        self.coefficients = coef
        self.ridge_lambda = float(ridge_lambda)
        self.bias = None if bias is None else _frozen(bias)
        if self.offsets is not None and (self.projection is None or self.offsets.shape != (n_proj,)):
            raise ForecasterError("offsets need a projection with one row per offset")
        self.odd_linear = self.bias is None and self.offsets is None
        self.linear = self.bias is None and self.projection is None

    def _features(self, xp):
        if self.projection is None:
            return xp, None
        z = xp @ self.projection.T
        th = np.tanh(z if self.offsets is None else z + self.offsets)
        return np.concatenate([xp, th], axis=-1), th

    def predict(self, x):
        x = self._check_x(x)
        phi, _ = self._features(x[..., self.L - self.order:])
        y = phi @ self.coefficients.T
        return y if self.bias is None else y + self.bias

    def input_grad(self, x, upstream):
        x, g = self._check_upstream(x, upstream)
        p = self.order
        d_phi = g @ self.coefficients
        _, th = self._features(x[..., self.L - p:])
        d_xp = d_phi[..., :p]
        if th is not None:
            d_xp = d_xp + (d_phi[..., p:] * (1.0 - th * th)) @ self.projection
        out = np.zeros_like(x)
        out[..., self.L - p:] = d_xp
        return out

    def to_dict(self):
        d = {**super().to_dict(), "order": self.order, "ridge_lambda": self.ridge_lambda,
             "coefficients": self.coefficients.reshape(-1).tolist(),
             "coefficient_shape": list(self.coefficients.shape)}
        d["bias"] = None if self.bias is None else self.bias.tolist()
        d["projection"] = None if self.projection is None else self.projection.tolist()
        d["offsets"] = None if self.offsets is None else self.offsets.tolist()
        return d


def fit_ridge_ar(train_series: MultivariateSeries, p: int, ridge_lambda: float, L: int, H: int,
                 bias: bool = False, n_features: int = 0, seed: int = 0, feature_scale: float = 1.0,
                 feature_offsets: float = 0.0) -> RidgeAR:
    """Closed-form ridge fit pooled over every channel of ``train_series``.

    ``n_features > 0`` adds that many ``tanh`` random projections of the
    lags (drawn from the ``"init"`` stream of ``seed``) as extra regressors;
    ``feature_offsets > 0`` shifts each projection by a uniform draw from
    ``[-feature_offsets, feature_offsets]``, which breaks oddness.
    """
    if not 1 <= p <= L:
        raise ForecasterError(f"order p={p} must lie in [1, L={L}]")
    if ridge_lambda < 0:
        raise ForecasterError("ridge_lambda must be non-negative")
    w = windows(train_series, (0, train_series.T), L, H)
    if len(w) == 0:
        raise ForecasterError("training series too short for a single window")
    xs = np.moveaxis(w.X, 2, 1).reshape(-1, L)[:, L - p:]
    ys = np.moveaxis(w.Y, 2, 1).reshape(-1, H)
    proj = offs = None
    if n_features > 0:
        gen = RngStream("init", seed).generator(0xF0)
        proj = gen.standard_normal((n_features, p)) * (feature_scale / np.sqrt(p))
        u = xs @ proj.T
        if feature_offsets > 0:
            offs = gen.uniform(-feature_offsets, feature_offsets, n_features)
            u = u + offs
        z = np.concatenate([xs, np.tanh(u)], axis=1)
    else:
        z = xs
    if bias:
        z = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
    gram = z.T @ z + ridge_lambda * np.eye(z.shape[1])
    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise ForecasterError("normal matrix is singular; use ridge_lambda > 0")
    try:
        sol = np.linalg.solve(gram, z.T @ ys).T  # (H, F)
    except np.linalg.LinAlgError as exc:
        raise ForecasterError(f"ridge solve failed ({exc}); use ridge_lambda > 0") from None
    b = None
    if bias:
        sol, b = sol[:, :-1], sol[:, -1]
    return RidgeAR(L, H, sol, ridge_lambda, bias=b, projection=proj, offsets=offs)


def forecaster_from_dict(d: dict) -> FrozenForecaster:
    kind = d["kind"]
    if kind == "persistence":
        return Persistence(d["L"], d["H"])
    if kind == "seasonal_naive":
        return SeasonalNaive(d["L"], d["H"], d["m"])
    if kind == "ridge_ar":
        coef = np.asarray(d["coefficients"], dtype=DTYPE).reshape(d["coefficient_shape"])
        return RidgeAR(d["L"], d["H"], coef, d.get("ridge_lambda", 0.0), bias=d.get("bias"),
                       projection=d.get("projection"), offsets=d.get("offsets"))
    raise ForecasterError(f"unknown forecaster kind {kind!r}")


def predict_channels(forecaster: FrozenForecaster, X) -> np.ndarray:
    """Apply ``forecaster`` to every channel of ``X`` (B, L, C) -> (B, H, C)."""
    return np.moveaxis(forecaster.predict(np.moveaxis(X, -1, -2)), -1, -2)


def input_grad_channels(forecaster: FrozenForecaster, X, upstream) -> np.ndarray:
    """Channel-wise VJP: (B, L, C), (B, H, C) -> (B, L, C)."""
    g = forecaster.input_grad(np.moveaxis(X, -1, -2), np.moveaxis(upstream, -1, -2))
    return np.moveaxis(g, -1, -2)
