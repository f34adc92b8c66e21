"""Dual surrogates, their targets, and the parameter-free reconstruction.

Shapes follow ``(B, T, C)`` throughout: batch, time, channel. Channel weights
broadcast over batch and time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .forecaster import FrozenForecaster, forecaster_from_dict, predict_channels
from .fusion import Fusion, fusion_from_dict, make_fusion
from .numerics import DTYPE, RngStream

DENOM_FLOOR = 1e-6

X_PASS = 0
Y_PASS = 1


class DenominatorError(FloatingPointError):
    """|w_alpha + w_beta| fell to the floor; reconstruction is undefined."""


class UnsupportedOperation(RuntimeError):
    pass


def check_denominator(w_alpha, w_beta, floor: float = DENOM_FLOOR) -> np.ndarray:
    s = np.asarray(w_alpha, dtype=DTYPE) + np.asarray(w_beta, dtype=DTYPE)
    bad = np.flatnonzero(~(np.abs(s) > floor))
    if bad.size:
        raise DenominatorError(
            f"|w_alpha + w_beta| <= {floor} on channel(s) {bad.tolist()}; the bound regularizer "
            "is supposed to keep this denominator away from zero")
    return s


@dataclass
class DualWeaverModel:
    fusion: Fusion
    forecaster: FrozenForecaster
    w_alpha: np.ndarray
    w_beta: np.ndarray
    variant: str = "dual"  # or "single"

    @classmethod
    def create(cls, forecaster: FrozenForecaster, n_channels: int, fusion: str = "mlp",
               hidden: int | None = None, dropout: float = 0.1, seed: int = 0,
               variant: str = "dual") -> "DualWeaverModel":
        if variant not in ("dual", "single"):
            raise ValueError(f"unknown variant {variant!r}")
        f = make_fusion(fusion, n_channels, hidden, dropout, RngStream("init", seed))
        return cls(f, forecaster, np.ones(n_channels), np.ones(n_channels), variant)

    @property
    def n_channels(self) -> int:
        return self.fusion.n_channels

    def params(self) -> dict[str, np.ndarray]:
        """Every trainable tensor by name. Arrays are shared, not copied."""
        out = dict(self.fusion.params)
        out["w_alpha"] = self.w_alpha
        if self.variant == "dual":
            out["w_beta"] = self.w_beta
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k == "w_alpha":
                self.w_alpha = np.array(v, dtype=DTYPE)
            elif k == "w_beta":
                self.w_beta = np.array(v, dtype=DTYPE)
            else:
                self.fusion.params[k] = np.array(v, dtype=DTYPE)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.params().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"variant": self.variant, "fusion": self.fusion.to_dict(),
                "w_alpha": self.w_alpha.tolist(), "w_beta": self.w_beta.tolist(),
                "forecaster": self.forecaster.to_dict(), "forecaster_digest": self.forecaster.digest()}

    @classmethod
    def from_dict(cls, d: dict) -> "DualWeaverModel":
        fc = forecaster_from_dict(d["forecaster"])
        if "forecaster_digest" in d and fc.digest() != d["forecaster_digest"]:
            raise ValueError("checkpoint forecaster digest mismatch")
        return cls(fusion_from_dict(d["fusion"]), fc, np.asarray(d["w_alpha"], dtype=DTYPE),
                   np.asarray(d["w_beta"], dtype=DTYPE), d.get("variant", "dual"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check_panel(model: DualWeaverModel, A, length: int | None, what: str) -> np.ndarray:
    A = np.asarray(A, dtype=DTYPE)
    if A.ndim != 3 or A.shape[-1] != model.n_channels or (length is not None and A.shape[1] != length):
        want = f"(B, {length if length is not None else 'T'}, {model.n_channels})"
        raise ValueError(f"{what} must have shape {want}, got {A.shape}")
    return A


def _surrogate_pair(model, A, train, rng, pass_id):
    F, cache = model.fusion.forward(A, train, rng, pass_id)
    return F + model.w_alpha * A, F - model.w_beta * A, cache


def make_input_surrogates(model: DualWeaverModel, X, train: bool = False, rng: RngStream | None = None):
    """``S_alpha = f(X) + w_alpha*X``, ``S_beta = f(X) - w_beta*X``; f evaluated once."""
    X = _check_panel(model, X, model.forecaster.L, "X")
    return _surrogate_pair(model, X, train, rng, X_PASS)


def make_target_surrogates(model: DualWeaverModel, Y, train: bool = False, rng: RngStream | None = None):
    """Targets for the surrogate forecasts, built from ``Y`` with the same fusion parameters."""
    Y = _check_panel(model, Y, None, "Y")
    return _surrogate_pair(model, Y, train, rng, Y_PASS)


def reconstruct(S_hat_alpha, S_hat_beta, w_alpha, w_beta) -> np.ndarray:
    """``(S_hat_alpha - S_hat_beta) / (w_alpha + w_beta)`` channel-wise."""
    s = check_denominator(w_alpha, w_beta)
    return (np.asarray(S_hat_alpha, dtype=DTYPE) - np.asarray(S_hat_beta, dtype=DTYPE)) / s


@dataclass
class SurrogateBatch:
    S_alpha: np.ndarray
    S_beta: np.ndarray
    S_hat_alpha: np.ndarray
    S_hat_beta: np.ndarray
    x_cache: tuple
    S_tilde_alpha: np.ndarray | None = None
    S_tilde_beta: np.ndarray | None = None
    y_cache: tuple | None = None
    extra: dict = field(default_factory=dict)


def forward(model: DualWeaverModel, X, train: bool = False, rng: RngStream | None = None):
    """Surrogates -> frozen forecaster per channel -> reconstruction.

    Returns ``(Y_hat, SurrogateBatch)``.
    """
    if model.variant != "dual":
        raise UnsupportedOperation("the single-surrogate variant has no reconstruction to the original space")
    S_a, S_b, cache = make_input_surrogates(model, X, train, rng)
    Sh_a = predict_channels(model.forecaster, S_a)
    Sh_b = predict_channels(model.forecaster, S_b)
    Y_hat = reconstruct(Sh_a, Sh_b, model.w_alpha, model.w_beta)
    return Y_hat, SurrogateBatch(S_a, S_b, Sh_a, Sh_b, cache)


def single_forward(model: DualWeaverModel, X, Y=None, train: bool = False, rng: RngStream | None = None):
    """Single-surrogate path: ``S = f(X) + w_alpha*X`` and its target from ``Y``.

    Returns a :class:`SurrogateBatch` whose beta fields are ``None``.
    """
    X = _check_panel(model, X, model.forecaster.L, "X")
    F, cache = model.fusion.forward(X, train, rng, X_PASS)
    S = F + model.w_alpha * X
    batch = SurrogateBatch(S, None, predict_channels(model.forecaster, S), None, cache)
    if Y is not None:
        Y = _check_panel(model, Y, model.forecaster.H, "Y")
        FY, ycache = model.fusion.forward(Y, train, rng, Y_PASS)
        batch.S_tilde_alpha = FY + model.w_alpha * Y
        batch.y_cache = ycache
    return batch


def predict(model: DualWeaverModel, X) -> np.ndarray:
    """Eval-mode reconstructed forecast."""
    return forward(model, X)[0]
