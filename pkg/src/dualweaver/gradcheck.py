"""Finite-difference verification of every analytic backward path on a tiny instance."""

from __future__ import annotations

import numpy as np

from .data import gen_coupled_ar
from .forecaster import Persistence, SeasonalNaive, fit_ridge_ar
from .fusion import CnnFusion, MlpFusion
from .numerics import GradCheckReport, RngStream, check_gradient
from .objective import batch_grads, channel_baseline, evaluate_loss
from .weaver import DualWeaverModel

TINY = {"B": 2, "L": 8, "H": 4, "C": 3, "D": 4}


def _perturbed(params: dict, gen: np.random.Generator, scale: float = 0.5) -> None:
    for v in params.values():
        v[...] = v + scale * gen.standard_normal(v.shape)


def _check_tensor(name, analytic, loss, tensor, h):
    def f(theta):
        old = tensor.copy()
        tensor[...] = theta
        try:
            return loss()
        finally:
            tensor[...] = old
    return check_gradient(name, analytic, f, tensor.copy(), h)


def fusion_checks(fusion, X, G, h, prefix) -> list[GradCheckReport]:
    """Gradients of sum(G * f(X)) w.r.t. every parameter tensor and the input."""
    _, cache = fusion.forward(X)
    grads, dX = fusion.backward(cache, G)
    loss = lambda: float(np.sum(G * fusion.forward(X)[0]))  # noqa: E731
    out = [_check_tensor(f"{prefix}.{k}", grads[k], loss, fusion.params[k], h) for k in fusion.params]
    out.append(_check_tensor(f"{prefix}.input", dX, loss, X, h))
    return out


def forecaster_checks(forecasters, x, g, h) -> list[GradCheckReport]:
    out = []
    for name, fc in forecasters.items():
        analytic = fc.input_grad(x, g)
        out.append(check_gradient(f"forecaster.{name}.input", analytic,
                                  lambda th, fc=fc: float(np.sum(g * fc.predict(th))), x.copy(), h))
    return out


def objective_checks(model, X, Y, baseline, lam, h, prefix, corrupt=False) -> list[GradCheckReport]:
    _, grads = batch_grads(model, X, Y, baseline, lam)
    if corrupt:
        k = next(iter(grads))
        grads[k] = grads[k] * 1.5 + 1e-2
    loss = lambda: evaluate_loss(model, X, Y, baseline, lam).l_total  # noqa: E731
    return [_check_tensor(f"{prefix}.{k}", grads[k], loss, p, h) for k, p in model.params().items()]


def run_gradcheck(seed: int = 0, h: float = 1e-5, corrupt: bool = False) -> list[GradCheckReport]:
    """Every finite-difference suite on the tiny (B=2, L=8, H=4, C=3, D=4) instance, dropout off."""
    B, L, H, C, D = (TINY[k] for k in ("B", "L", "H", "C", "D"))
    gen = RngStream("gradcheck", seed).generator()
    reports: list[GradCheckReport] = []

    for cls in (MlpFusion, CnnFusion):
        fus = cls.init(C, D, dropout=0.0, rng=RngStream("init", seed), zero_final=False)
        _perturbed(fus.params, gen, 0.3)
        reports += fusion_checks(fus, gen.standard_normal((B, 7, C)), gen.standard_normal((B, 7, C)), h,
                                 f"fusion.{cls.kind}")

    train = gen_coupled_ar(seed, 300, C, 0.8, 0.9)
    forecasters = {
        "persistence": Persistence(L, H),
        "seasonal_naive": SeasonalNaive(L, H, 3),
        "ridge_ar": fit_ridge_ar(train, 4, 1e-3, L, H),
        "ridge_ar_tanh": fit_ridge_ar(train, 4, 1e-3, L, H, n_features=6, seed=seed, feature_scale=2.0),
    }
    reports += forecaster_checks(forecasters, gen.standard_normal((5, L)), gen.standard_normal((5, H)), h)

    X = gen.standard_normal((B, L, C))
    Y = gen.standard_normal((B, H, C))
    for fc_name in ("ridge_ar", "ridge_ar_tanh"):
        fc = forecasters[fc_name]
        for kind in ("mlp", "cnn"):
            model = DualWeaverModel.create(fc, C, kind, hidden=D, dropout=0.0, seed=seed)
            _perturbed(model.fusion.params, gen, 0.3)
            model.w_alpha[:] = gen.uniform(0.6, 1.4, C)
            model.w_beta[:] = gen.uniform(0.6, 1.4, C)
            base = channel_baseline(fc, X, Y)
            # push channels onto both MAX branches so both paths are exercised
            om = evaluate_loss(model, X, Y, base).omega
            base.E_ori = om * np.array([0.5, 2.0, 0.5])[:C]
            reports += objective_checks(model, X, Y, base, 1.0, h, f"objective.{fc_name}.{kind}",
                                        corrupt=corrupt and fc_name == "ridge_ar" and kind == "mlp")
    return reports
