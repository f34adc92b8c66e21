"""Surrogate losses, the per-channel error bound, and gradient assembly.

Per-channel MSEs average over batch and horizon first, then the scalar
losses average over channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .forecaster import input_grad_channels, predict_channels
from .numerics import DTYPE, RngStream
from .weaver import (
    DualWeaverModel,
    check_denominator,
    make_input_surrogates,
    make_target_surrogates,
    reconstruct,
    single_forward,
)


def _pair(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def channel_mse(a, b) -> np.ndarray:
    """MSE per channel (last axis), averaged over every other axis."""
    a, b = _pair(a, b)
    d = (a - b) ** 2
    return d.reshape(-1, d.shape[-1]).mean(axis=0)


def channel_mae(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    d = np.abs(a - b)
    return d.reshape(-1, d.shape[-1]).mean(axis=0)


@dataclass
class LossBreakdown:
    l_alpha: float
    l_beta: float
    omega: np.ndarray
    e_ori: np.ndarray
    l_bound: float
    l_total: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omega"] = self.omega.tolist()
        d["e_ori"] = self.e_ori.tolist()
        return d


@dataclass
class ChannelBaseline:
    Y_hat_ori: np.ndarray
    E_ori: np.ndarray


def channel_baseline(forecaster, X, Y) -> ChannelBaseline:
    """Channel-independent forecasts of the frozen model and their per-channel MSE."""
    Y_hat = predict_channels(forecaster, X)
    return ChannelBaseline(Y_hat, channel_mse(Y_hat, Y))


def surrogate_losses(S_hat_alpha, S_tilde_alpha, S_hat_beta, S_tilde_beta):
    """Returns ``(l_alpha, l_beta, E_alpha, E_beta)``."""
    E_a = channel_mse(S_hat_alpha, S_tilde_alpha)
    E_b = channel_mse(S_hat_beta, S_tilde_beta)
    return float(E_a.mean()), float(E_b.mean()), E_a, E_b


def omega(w_alpha, w_beta, E_alpha, E_beta) -> np.ndarray:
    """2 (E_alpha + E_beta) / (w_alpha + w_beta)^2 per channel."""
    s = check_denominator(w_alpha, w_beta)
    return 2.0 * (np.asarray(E_alpha, dtype=DTYPE) + np.asarray(E_beta, dtype=DTYPE)) / (s * s)


def bound_active(omega_, e_ori) -> np.ndarray:
    """Channels where the MAX takes the Omega branch; ties go to Omega."""
    return np.asarray(omega_) >= np.asarray(e_ori)


def l_bound(omega_, e_ori) -> float:
    omega_, e_ori = _pair(omega_, e_ori)
    return float(np.mean(np.maximum(omega_, e_ori)))


def total_loss(l_alpha: float, l_beta: float, l_bound_: float, lam: float = 1.0) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return (l_alpha + l_beta) / 2.0 + lam * l_bound_


def evaluate_loss(model: DualWeaverModel, X, Y, baseline: ChannelBaseline | None = None, lam: float = 1.0,
                  use_bound: bool = True, train: bool = False, rng: RngStream | None = None) -> LossBreakdown:
    """Forward-only loss; used as the finite-difference target for :func:`batch_grads`."""
    return batch_grads(model, X, Y, baseline, lam, use_bound, train, rng, need_grads=False)[0]


def batch_grads(model: DualWeaverModel, X, Y, baseline: ChannelBaseline | None = None, lam: float = 1.0,
                use_bound: bool = True, train: bool = False, rng: RngStream | None = None,
                need_grads: bool = True):
    """Loss breakdown and gradients of ``l_total`` for every trainable tensor.

    Gradients flow through both surrogate families along the input path
    (via the forecaster's VJP) and the target path, plus the Omega branch of
    the MAX regularizer on channels where it is active. ``use_bound=False``
    drops the regularizer from the objective (its value is still reported).
    """
    if model.variant == "single":
        return _single_grads(model, X, Y, train, rng, need_grads)
    fc = model.forecaster
    X = np.asarray(X, dtype=DTYPE)
    Y = np.asarray(Y, dtype=DTYPE)
    if baseline is None:
        baseline = channel_baseline(fc, X, Y)
    S_a, S_b, xc = make_input_surrogates(model, X, train, rng)
    T_a, T_b, yc = make_target_surrogates(model, Y, train, rng)
    Sh_a = predict_channels(fc, S_a)
    Sh_b = predict_channels(fc, S_b)
    l_a, l_b, E_a, E_b = surrogate_losses(Sh_a, T_a, Sh_b, T_b)
    s = check_denominator(model.w_alpha, model.w_beta)
    om = 2.0 * (E_a + E_b) / (s * s)
    e_ori = baseline.E_ori
    lb = l_bound(om, e_ori)
    lam_eff = lam if use_bound else 0.0
    breakdown = LossBreakdown(l_a, l_b, om, e_ori.copy(), lb, total_loss(l_a, l_b, lb, lam_eff))
    if not need_grads:
        return breakdown, None

    C = model.n_channels
    active = bound_active(om, e_ori).astype(DTYPE) if lam_eff > 0 else np.zeros(C)
    # dL/dE_alpha^i == dL/dE_beta^i
    dE = 1.0 / (2 * C) + lam_eff / C * active * 2.0 / (s * s)
    ds = lam_eff / C * active * (-2.0 * om / s)
    n_per_channel = Y.shape[0] * Y.shape[1]

    R_a = (Sh_a - T_a) * (2.0 * dE / n_per_channel)  # dL/dSh_alpha; targets get the negative
    R_b = (Sh_b - T_b) * (2.0 * dE / n_per_channel)
    dS_a = input_grad_channels(fc, S_a, R_a)
    dS_b = input_grad_channels(fc, S_b, R_b)

    dF_x = dS_a + dS_b
    dF_y = -R_a - R_b
    d_wa = (dS_a * X).sum(axis=(0, 1)) - (R_a * Y).sum(axis=(0, 1)) + ds
    d_wb = -(dS_b * X).sum(axis=(0, 1)) + (R_b * Y).sum(axis=(0, 1)) + ds

    gx, _ = model.fusion.backward(xc, dF_x)
    gy, _ = model.fusion.backward(yc, dF_y)
    grads = {k: gx[k] + gy[k] for k in gx}
    grads["w_alpha"] = d_wa
    grads["w_beta"] = d_wb
    return breakdown, grads


def _single_grads(model, X, Y, train, rng, need_grads):
    X = np.asarray(X, dtype=DTYPE)
    Y = np.asarray(Y, dtype=DTYPE)
    b = single_forward(model, X, Y, train, rng)
    E = channel_mse(b.S_hat_alpha, b.S_tilde_alpha)
    C = model.n_channels
    l_a = float(E.mean())
    nan = np.full(C, np.nan)
    breakdown = LossBreakdown(l_a, float("nan"), nan, nan, float("nan"), l_a)
    if not need_grads:
        return breakdown, None
    R = (b.S_hat_alpha - b.S_tilde_alpha) * (2.0 / (C * Y.shape[0] * Y.shape[1]))
    dS = input_grad_channels(model.forecaster, b.S_alpha, R)
    gx, _ = model.fusion.backward(b.x_cache, dS)
    gy, _ = model.fusion.backward(b.y_cache, -R)
    grads = {k: gx[k] + gy[k] for k in gx}
    grads["w_alpha"] = (dS * X).sum(axis=(0, 1)) - (R * Y).sum(axis=(0, 1))
    return breakdown, grads


def reconstruction_report(model: DualWeaverModel, X, Y) -> dict:
    """Original-space and surrogate-space metrics of an eval-mode pass over ``(X, Y)``."""
    fc = model.forecaster
    base = channel_baseline(fc, X, Y)
    S_a, S_b, _ = make_input_surrogates(model, X)
    T_a, T_b, _ = make_target_surrogates(model, Y)
    Sh_a = predict_channels(fc, S_a)
    Sh_b = predict_channels(fc, S_b)
    Y_hat = reconstruct(Sh_a, Sh_b, model.w_alpha, model.w_beta)
    _, _, E_a, E_b = surrogate_losses(Sh_a, T_a, Sh_b, T_b)
    om = omega(model.w_alpha, model.w_beta, E_a, E_b)
    return {
        "Y_hat": Y_hat,
        "Y_hat_ori": base.Y_hat_ori,
        "mse_ori": channel_mse(base.Y_hat_ori, Y),
        "mae_ori": channel_mae(base.Y_hat_ori, Y),
        "mse_our": channel_mse(Y_hat, Y),
        "mae_our": channel_mae(Y_hat, Y),
        "omega": om,
        "E_alpha": E_a,
        "E_beta": E_b,
    }
