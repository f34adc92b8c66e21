"""AdamW + cosine-annealed adaptation loop with early stopping and a LR grid."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .data import WindowBatch
from .forecaster import predict_channels
from .numerics import RngStream
from .objective import ChannelBaseline, batch_grads, channel_mse, mae, mse
from .weaver import DenominatorError, DualWeaverModel, check_denominator, forward, single_forward


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    patience: int = 3
    batch_size: int = 32
    lam: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-3
    t_max: int = 10
    eta_min: float = 1e-8
    adam_eps: float = 1e-8
    seed: int = 0
    lr_grid: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    use_bound_reg: bool = True
    variant: str = "dual"
    train_dropout: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if self.variant not in ("dual", "single"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def adamw_step(state: AdamWState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
               cfg: TrainConfig) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam step, applied in place to ``params``."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p -= lr * update + lr * cfg.weight_decay * p
    return params


def cosine_lr(epoch: int, lr0: float, t_max: int = 10, eta_min: float = 1e-8) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch == 0:
        return lr0
    e = min(epoch, t_max)
    if e == t_max:
        return eta_min
    return eta_min + (lr0 - eta_min) * (1.0 + math.cos(math.pi * e / t_max)) / 2.0


# ---------------------------------------------------------------------------
# gradient stability
# ---------------------------------------------------------------------------


def grad_stability_log(current: dict[str, np.ndarray], previous: dict[str, np.ndarray] | None) -> dict[str, float]:
    """L2 distance between consecutive gradients, per named tensor."""
    if previous is None:
        return {}
    return {k: float(np.linalg.norm((current[k] - previous[k]).ravel())) for k in current if k in previous}


def aggregate(series: list[float], every: int = 4) -> list[float]:
    """Mean over consecutive blocks of ``every`` values (last block may be short)."""
    return [float(np.mean(series[i:i + every])) for i in range(0, len(series), every)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    config: dict
    init_val: dict
    epochs: list[dict]
    best_epoch: int
    best_val_mse: float
    best_params: dict[str, np.ndarray]
    baseline_val_mse: float
    grad_distances: dict[str, list[float]]
    init_digest: str
    forecaster_digest: str
    peak_buffer_bytes: int
    stopped_early: bool
    epoch_seconds: list[float] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)
    aborted: str | None = None
    diagnostic_params: dict[str, np.ndarray] | None = None

    @property
    def val_mse_history(self) -> list[float]:
        return [self.init_val["val_mse"]] + [e["val_mse"] for e in self.epochs]

    def grad_stability(self, every: int = 4) -> dict[str, list[float]]:
        return {k: aggregate(v, every) for k, v in self.grad_distances.items()}

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready dict. Wall-clock fields are excluded by default so that the
        serialized report is a pure function of (seed, config, data)."""
        d = {
            "config": self.config,
            "init_val": self.init_val,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse,
            "baseline_val_mse": self.baseline_val_mse,
            "best_params": {k: v.tolist() for k, v in self.best_params.items()},
            "grad_stability": self.grad_stability(),
            "init_digest": self.init_digest,
            "forecaster_digest": self.forecaster_digest,
            "peak_buffer_bytes": self.peak_buffer_bytes,
            "stopped_early": self.stopped_early,
            "aborted": self.aborted,
        }
        if self.diagnostic_params is not None:
            d["diagnostic_params"] = {k: v.tolist() for k, v in self.diagnostic_params.items()}
        if include_timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d


def validation_metrics(model: DualWeaverModel, w: WindowBatch, batch_size: int = 256) -> dict:
    """Eval-mode metrics. Dual: reconstructed forecast vs Y. Single: surrogate MSE."""
    if len(w) == 0:
        return {"val_mse": float("nan"), "val_mae": float("nan")}
    if model.variant == "single":
        se, n = 0.0, 0
        for i in range(0, len(w), batch_size):
            b = single_forward(model, w.X[i:i + batch_size], w.Y[i:i + batch_size])
            se += float(np.sum((b.S_hat_alpha - b.S_tilde_alpha) ** 2))
            n += b.S_hat_alpha.size
        return {"val_mse": se / n, "val_mae": float("nan")}
    preds = np.concatenate([forward(model, w.X[i:i + batch_size])[0] for i in range(0, len(w), batch_size)])
    return {"val_mse": mse(preds, w.Y), "val_mae": mae(preds, w.Y)}


def _mean_breakdowns(rows: list[dict]) -> dict:
    if not rows:
        return {}
    keys = ("l_alpha", "l_beta", "l_bound", "l_total")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def train(model: DualWeaverModel, train_w: WindowBatch, val_w: WindowBatch, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None) -> TrainReport:
    """Adapt ``model`` in place and return a report; the model ends at its best checkpoint.

    The forecaster is only read. Selection is by validation MSE of the
    reconstructed forecast (surrogate MSE for the single variant); epoch 0
    in the history is the initialization state.
    """
    if cfg.variant != model.variant:
        raise ValueError(f"config variant {cfg.variant!r} does not match model variant {model.variant!r}")
    fc = model.forecaster
    fc_digest = fc.digest()
    init_digest = model.param_digest()
    yhat_ori = predict_channels(fc, train_w.X) if len(train_w) else np.zeros_like(train_w.Y)
    base_val = mse(predict_channels(fc, val_w.X), val_w.Y) if len(val_w) else float("nan")

    params = model.params()
    state = AdamWState()
    param_bytes = sum(p.nbytes for p in params.values())
    peak = 0

    init_val = validation_metrics(model, val_w)
    best = {"epoch": 0, "val_mse": init_val["val_mse"], "params": model.snapshot()}
    history: list[dict] = []
    seconds: list[float] = []
    distances: dict[str, list[float]] = {k: [] for k in params}
    step_log: list[dict] = []
    prev_grads = None
    wait = 0
    stopped = False
    global_step = 0
    dropout_rng = RngStream("dropout", cfg.seed)
    data_rng = RngStream("data", cfg.seed)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.lr, cfg.t_max, cfg.eta_min)
        order = data_rng.at(epoch).generator().permutation(len(train_w))
        rows = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            X, Y = train_w.X[idx], train_w.Y[idx]
            baseline = ChannelBaseline(yhat_ori[idx], channel_mse(yhat_ori[idx], Y))
            br, grads = batch_grads(model, X, Y, baseline, cfg.lam, cfg.use_bound_reg,
                                    train=cfg.train_dropout, rng=dropout_rng.at(global_step))
            adamw_step(state, params, grads, lr, cfg)
            batch_bytes = X.nbytes + Y.nbytes
            hidden = getattr(model.fusion, "hidden", model.n_channels)
            act_bytes = batch_bytes * (4 + 3 * hidden // max(model.n_channels, 1))
            peak = max(peak, 3 * param_bytes + state.nbytes() + act_bytes)
            for k, d in grad_stability_log(grads, prev_grads).items():
                distances[k].append(d)
            prev_grads = {k: g.copy() for k, g in grads.items()}
            rec = {"epoch": epoch + 1, "step": global_step, "lr": lr, **br.to_dict()}
            rows.append(rec)
            step_log.append(rec)
            if on_step is not None:
                on_step(rec)
            global_step += 1
            if model.variant == "dual":
                try:
                    check_denominator(model.w_alpha, model.w_beta)
                except DenominatorError as exc:
                    report = _report(cfg, init_val, history, best, base_val, distances, init_digest,
                                     fc_digest, peak, True, seconds, step_log)
                    report.aborted = f"epoch {epoch + 1}, step {global_step}: {exc}"
                    report.diagnostic_params = model.snapshot()
                    model.load_params(best["params"])
                    raise TrainingAborted(report.aborted, report) from exc
        val = validation_metrics(model, val_w)
        seconds.append(time.perf_counter() - t0)
        history.append({"epoch": epoch + 1, "lr": lr, "train": _mean_breakdowns(rows), **val,
                        "w_alpha": model.w_alpha.tolist(),
                        "w_beta": model.w_beta.tolist() if model.variant == "dual" else None})
        if val["val_mse"] < best["val_mse"]:
            best = {"epoch": epoch + 1, "val_mse": val["val_mse"], "params": model.snapshot()}
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break

    model.load_params(best["params"])
    if fc.digest() != fc_digest:
        raise RuntimeError("frozen forecaster changed during training")
    return _report(cfg, init_val, history, best, base_val, distances, init_digest, fc_digest, peak,
                   stopped, seconds, step_log)


def _report(cfg, init_val, history, best, base_val, distances, init_digest, fc_digest, peak, stopped,
            seconds, step_log):
    return TrainReport(
        config=cfg.to_dict(), init_val=init_val, epochs=history, best_epoch=best["epoch"],
        best_val_mse=best["val_mse"], best_params=best["params"], baseline_val_mse=base_val,
        grad_distances=distances, init_digest=init_digest, forecaster_digest=fc_digest,
        peak_buffer_bytes=int(peak), stopped_early=stopped, epoch_seconds=seconds, step_log=step_log)


@dataclass
class GridResult:
    best_index: int
    reports: list[TrainReport]
    models: list[DualWeaverModel]

    @property
    def best(self) -> TrainReport:
        return self.reports[self.best_index]

    @property
    def best_model(self) -> DualWeaverModel:
        return self.models[self.best_index]


def grid_search(model_factory: Callable[[], DualWeaverModel], train_w: WindowBatch, val_w: WindowBatch,
                cfg: TrainConfig, on_step: Callable[[dict], None] | None = None) -> GridResult:
    """One run per learning rate in ``cfg.lr_grid``, each from a fresh factory model.

    A run that trips the denominator floor keeps its pre-abort best
    checkpoint and stays in the competition; its report records the abort.
    """
    if not cfg.lr_grid:
        raise ValueError("lr_grid is empty")
    reports, models = [], []
    for lr in cfg.lr_grid:
        model = model_factory()
        sink = None if on_step is None else (lambda rec, lr=lr: on_step({"grid_lr": lr, **rec}))
        try:
            reports.append(train(model, train_w, val_w, replace(cfg, lr=lr), sink))
        except TrainingAborted as exc:
            reports.append(exc.report)
        models.append(model)
    scores = [r.best_val_mse for r in reports]
    return GridResult(int(np.argmin(scores)), reports, models)
