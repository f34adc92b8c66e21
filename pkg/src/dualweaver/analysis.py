"""Cross-variate correlation, surrogate-space predictability, and sweep drivers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import MultivariateSeries, inject_noise_channels, take_first_channels
from .forecaster import predict_channels
from .numerics import RngStream
from .weaver import DualWeaverModel, make_input_surrogates, make_target_surrogates


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cross-time cross-variate correlation
# ---------------------------------------------------------------------------


@dataclass
class CorrelationSpec:
    patch_sizes: list[int] = field(default_factory=lambda: [32, 64, 96, 128])
    samples: int = 2000
    seed: int = 0
    min_std: float = 1e-8
    lags: list[int] | None = None  # t' = t + lag; None -> t' sampled freely
    pairs: list[tuple[int, int]] | None = None  # None -> every ordered pair i != j

    def __post_init__(self):
        if not self.patch_sizes or min(self.patch_sizes) < 2:
            raise AnalysisError("patch sizes must be >= 2")
        if self.samples < 1:
            raise AnalysisError("need at least one sample")


def ctcv_corr(values, i: int, j: int, t: int, t_prime: int, P: int, min_std: float = 1e-8) -> float | None:
    """Standardized product of two P+1 point patches, divided by P.

    ``values`` is a (T, C) array. Patches are z-scored with their own mean and
    sample standard deviation (divisor P), so a patch against itself gives 1.
    Returns ``None`` when either patch is flat.
    """
    values = np.asarray(values)
    T = values.shape[0]
    if min(t, t_prime) < 0 or max(t, t_prime) + P >= T:
        raise AnalysisError(f"patches at t={t}, t'={t_prime} with P={P} exceed series length {T}")
    a = values[t:t + P + 1, i]
    b = values[t_prime:t_prime + P + 1, j]
    sa = a.std(ddof=1)
    sb = b.std(ddof=1)
    if sa < min_std or sb < min_std:
        return None
    return float(np.dot((a - a.mean()) / sa, (b - b.mean()) / sb) / P)


def dataset_corr(series: MultivariateSeries, spec: CorrelationSpec | None = None) -> dict:
    """Mean R per patch size over sampled (i, j, t, t') tuples, plus their average.

    The signed mean is the headline figure; ``per_patch_abs`` and
    ``average_abs`` carry the mean magnitude, which for finite patches has a
    floor of about sqrt(2 / (pi P)) even on independent channels.
    """
    spec = spec or CorrelationSpec()
    values = series.values
    T, C = values.shape
    pairs = spec.pairs if spec.pairs is not None else [(i, j) for i in range(C) for j in range(C) if i != j]
    if not pairs:
        raise AnalysisError("correlation needs at least two channels")
    out: dict = {"per_patch": {}, "per_patch_abs": {}, "skipped": {}}
    for P in spec.patch_sizes:
        if P + 1 > T:
            raise AnalysisError(f"patch size {P} does not fit a length-{T} series")
        gen = RngStream("data", spec.seed).generator(0xC0, P)
        pair_idx = gen.integers(0, len(pairs), spec.samples)
        lo = 0
        if spec.lags is not None:
            lag = np.asarray(spec.lags)[gen.integers(0, len(spec.lags), spec.samples)]
            lo_t = np.maximum(0, -lag)
            hi_t = np.minimum(T - P - 1, T - P - 1 - lag)
            if np.any(hi_t < lo_t):
                raise AnalysisError(f"lags {spec.lags} do not fit P={P}")
            t = lo_t + (gen.random(spec.samples) * (hi_t - lo_t + 1)).astype(int)
            tp = t + lag
        else:
            t = gen.integers(lo, T - P, spec.samples)
            tp = gen.integers(lo, T - P, spec.samples)
        vals = []
        skipped = 0
        for k in range(spec.samples):
            i, j = pairs[pair_idx[k]]
            r = ctcv_corr(values, i, j, int(t[k]), int(tp[k]), P, spec.min_std)
            if r is None:
                skipped += 1
            else:
                vals.append(r)
        if not vals:
            raise AnalysisError(f"every sampled patch pair was degenerate at P={P}")
        out["per_patch"][str(P)] = float(np.mean(vals))
        out["per_patch_abs"][str(P)] = float(np.mean(np.abs(vals)))
        out["skipped"][str(P)] = skipped
    out["average"] = float(np.mean(list(out["per_patch"].values())))
    out["average_abs"] = float(np.mean(list(out["per_patch_abs"].values())))
    return out


# ---------------------------------------------------------------------------
# surrogate-space predictability
# ---------------------------------------------------------------------------


def rolling_mean(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


@dataclass
class ErrorProfile:
    squared: np.ndarray
    absolute: np.ndarray
    window: int = 100

    @property
    def rolling_squared(self) -> np.ndarray:
        return rolling_mean(self.squared, self.window)

    @property
    def rolling_absolute(self) -> np.ndarray:
        return rolling_mean(self.absolute, self.window)

    @property
    def mse(self) -> float:
        return float(self.squared.mean())

    @property
    def mae(self) -> float:
        return float(self.absolute.mean())


def reduction(orig: float, surr: float) -> float:
    return 0.0 if orig == surr else (orig - surr) / orig


def surrogate_predictability(model: DualWeaverModel, X, Y, window: int = 100) -> dict:
    """Per-window errors of the frozen forecaster on the original channels vs on the surrogates.

    Each window contributes one point (mean over horizon and channels); the
    surrogate profile pools the alpha and beta families.
    """
    fc = model.forecaster
    d_ori = predict_channels(fc, X) - Y
    S_a, S_b, _ = make_input_surrogates(model, X)
    T_a, T_b, _ = make_target_surrogates(model, Y)
    d_a = predict_channels(fc, S_a) - T_a
    d_b = predict_channels(fc, S_b) - T_b
    orig = ErrorProfile((d_ori ** 2).mean(axis=(1, 2)), np.abs(d_ori).mean(axis=(1, 2)), window)
    surr = ErrorProfile(((d_a ** 2).mean(axis=(1, 2)) + (d_b ** 2).mean(axis=(1, 2))) / 2,
                        (np.abs(d_a).mean(axis=(1, 2)) + np.abs(d_b).mean(axis=(1, 2))) / 2, window)
    return {
        "original": orig,
        "surrogate": surr,
        "mse_reduction": reduction(orig.mse, surr.mse),
        "mae_reduction": reduction(orig.mae, surr.mae),
        "surrogate_alpha_mse": float((d_a ** 2).mean()),
        "surrogate_beta_mse": float((d_b ** 2).mean()),
    }


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def noise_sweep(series: MultivariateSeries, k_list: list[int], cfg) -> list[dict]:
    """Append k N(0,1) channels (after standardization) and re-run adaptation for each k.

    The frozen forecaster is fitted once on the original channels; errors
    are measured on the original channels only.
    """
    from .experiment import adapt, fit_forecaster, prepare

    if not k_list or k_list[0] != 0 or list(k_list) != sorted(k_list):
        raise AnalysisError("k_list must be sorted ascending and start at 0")
    prep = prepare(series, cfg)
    fc = fit_forecaster(prep, cfg)
    C0 = prep.scaled.C
    rows = []
    for k in k_list:
        noisy = inject_noise_channels(prep.scaled, k, cfg.seed)
        res = adapt(prep.with_scaled(noisy), fc, cfg)
        ev = res.test_eval
        rows.append({"k": k, "channels": noisy.C,
                     "test_mse": float(ev["mse_our"][:C0].mean()),
                     "test_mae": float(ev["mae_our"][:C0].mean()),
                     "baseline_mse": float(ev["mse_ori"][:C0].mean()),
                     "best_lr": res.grid.best.config["lr"]})
    return rows


def scale_sweep(series: MultivariateSeries, n_list: list[int], cfg) -> list[dict]:
    """Keep the first N channels and re-run adaptation for each N.

    The frozen forecaster is fitted once on the full standardized panel.
    """
    from .experiment import adapt, fit_forecaster, prepare

    if not n_list:
        raise AnalysisError("n_list is empty")
    if max(n_list) > series.C:
        raise AnalysisError(f"N={max(n_list)} exceeds the {series.C} available channels")
    prep = prepare(series, cfg)
    fc = fit_forecaster(prep, cfg)
    rows = []
    for n in n_list:
        sub = take_first_channels(prep.scaled, n)
        res = adapt(prep.with_scaled(sub), fc, cfg)
        ev = res.test_eval
        base = float(ev["mse_ori"].mean())
        ours = float(ev["mse_our"].mean())
        rows.append({"N": n, "baseline_mse": base, "adapted_mse": ours, "gain": reduction(base, ours),
                     "best_lr": res.grid.best.config["lr"]})
    return rows
