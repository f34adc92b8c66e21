"""Experiment configuration and the shared data -> forecaster -> adaptation pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from .forecaster import FrozenForecaster, Persistence, SeasonalNaive, fit_ridge_ar
from .objective import reconstruction_report
from .trainer import GridResult, TrainConfig, grid_search
from .weaver import DualWeaverModel


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "csv"
    path: str | None = None
    T: int = 6000
    C: int = 5
    phi: float = 0.8
    coupling: float = 0.9
    noise_std: float = 1.0
    noise_channels: int = 0
    first_channels: int | None = None


@dataclass
class SplitConfig:
    train: int | None = None  # None -> 70 / 10 / 20 fractions of T
    val: int | None = None
    test: int | None = None


@dataclass
class WindowConfig:
    L: int = 16
    H: int = 4
    stride: int = 1


@dataclass
class ForecasterConfig:
    kind: str = "ridge_ar"  # ridge_ar | persistence | seasonal_naive
    order: int = 4
    ridge_lambda: float = 1e-3
    season: int = 4
    bias: bool = False
    n_features: int = 0
    feature_scale: float = 1.0
    feature_offsets: float = 0.0


@dataclass
class FusionConfig:
    kind: str = "mlp"
    hidden: int | None = None
    dropout: float = 0.1


@dataclass
class AnalysisConfig:
    patch_sizes: list[int] = field(default_factory=lambda: [32, 64, 96, 128])
    samples: int = 2000
    k_list: list[int] = field(default_factory=lambda: [0, 2, 4, 6, 8, 10])
    n_list: list[int] = field(default_factory=lambda: [1, 2, 5])


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        # the single top-level seed drives every stream
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, val in d.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "seed":
                kwargs["seed"] = int(val)
                continue
            klass = {"data": DataConfig, "split": SplitConfig, "window": WindowConfig,
                     "forecaster": ForecasterConfig, "fusion": FusionConfig, "train": TrainConfig,
                     "analysis": AnalysisConfig}[key]
            known = {f.name for f in fields(klass)}
            extra = set(val) - known
            if extra:
                raise ConfigError(f"unknown key(s) in {key!r}: {sorted(extra)}")
            try:
                kwargs[key] = klass(**val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {key!r} section: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    def validate(self) -> None:
        dc = self.data
        if dc.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {dc.source!r}")
        if dc.source == "csv" and (dc.path is None or not Path(dc.path).exists()):
            raise ConfigError(f"data.path {dc.path!r} does not exist")
        if self.forecaster.kind not in ("ridge_ar", "persistence", "seasonal_naive"):
            raise ConfigError(f"unknown forecaster kind {self.forecaster.kind!r}")
        if self.fusion.kind not in ("mlp", "cnn"):
            raise ConfigError(f"unknown fusion kind {self.fusion.kind!r}")
        if self.window.L < 1 or self.window.H < 1:
            raise ConfigError("window L and H must be positive")
        if self.forecaster.kind == "ridge_ar" and not 1 <= self.forecaster.order <= self.window.L:
            raise ConfigError("forecaster.order must lie in [1, L]")
        if self.forecaster.kind == "seasonal_naive" and not 1 <= self.forecaster.season <= self.window.L:
            raise ConfigError("forecaster.season must lie in [1, L]")
        if not 0 <= self.fusion.dropout < 1:
            raise ConfigError("fusion.dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def load_series(cfg: ExperimentConfig) -> D.MultivariateSeries:
    dc = cfg.data
    if dc.source == "csv":
        s = D.load_csv(dc.path)
    else:
        s = D.gen_coupled_ar(cfg.seed, dc.T, dc.C, dc.phi, dc.coupling, dc.noise_std)
    if dc.first_channels is not None:
        s = D.take_first_channels(s, dc.first_channels)
    return s


def split_for(cfg: ExperimentConfig, T: int) -> D.SplitSpec:
    sc = cfg.split
    if sc.train is None:
        return D.SplitSpec.from_fractions(T)
    if sc.val is None or sc.test is None:
        raise ConfigError("split needs train, val and test counts together")
    return D.SplitSpec(sc.train, sc.val, sc.test)


@dataclass
class Prepared:
    raw: D.MultivariateSeries
    scaled: D.MultivariateSeries
    scaler: D.ScalerState
    split: D.SplitSpec
    L: int
    H: int
    stride: int

    def with_scaled(self, scaled: D.MultivariateSeries) -> "Prepared":
        return Prepared(self.raw, scaled, self.scaler, self.split, self.L, self.H, self.stride)

    def windows(self, name: str) -> D.WindowBatch:
        return D.windows(self.scaled, self.split.ranges()[name], self.L, self.H, self.stride)

    def train_rows(self) -> D.MultivariateSeries:
        a, b = self.split.ranges()["train"]
        return self.scaled.with_values(self.scaled.values[a:b])


def prepare(series: D.MultivariateSeries, cfg: ExperimentConfig) -> Prepared:
    """Split, fit the scaler on training rows, standardize, then append any noise channels."""
    split = split_for(cfg, series.T)
    split.validate(series.T, cfg.window.L, cfg.window.H)
    scaler = D.fit_scaler(series, split.ranges()["train"])
    scaled = D.apply_scaler(series, scaler)
    if cfg.data.noise_channels:
        scaled = D.inject_noise_channels(scaled, cfg.data.noise_channels, cfg.seed)
    return Prepared(series, scaled, scaler, split, cfg.window.L, cfg.window.H, cfg.window.stride)


def fit_forecaster(prep: Prepared, cfg: ExperimentConfig) -> FrozenForecaster:
    fc = cfg.forecaster
    L, H = cfg.window.L, cfg.window.H
    if fc.kind == "persistence":
        return Persistence(L, H)
    if fc.kind == "seasonal_naive":
        return SeasonalNaive(L, H, fc.season)
    return fit_ridge_ar(prep.train_rows(), fc.order, fc.ridge_lambda, L, H, bias=fc.bias,
                        n_features=fc.n_features, seed=cfg.seed, feature_scale=fc.feature_scale,
                        feature_offsets=fc.feature_offsets)


def model_factory(fc: FrozenForecaster, n_channels: int, cfg: ExperimentConfig):
    def make() -> DualWeaverModel:
        return DualWeaverModel.create(fc, n_channels, cfg.fusion.kind, cfg.fusion.hidden, cfg.fusion.dropout,
                                      seed=cfg.seed, variant=cfg.train.variant)
    return make


def evaluate(model: DualWeaverModel, w: D.WindowBatch) -> dict:
    """Per-channel baseline vs reconstruction metrics, Omega, and the sufficient-condition verdict."""
    rep = reconstruction_report(model, w.X, w.Y)
    rep.pop("Y_hat")
    rep.pop("Y_hat_ori")
    rep["condition_holds"] = rep["omega"] <= rep["mse_ori"]
    return rep


def eval_summary(ev: dict, channel_names) -> dict:
    per_channel = []
    for i, name in enumerate(channel_names):
        per_channel.append({
            "channel": name,
            "mse_ori": float(ev["mse_ori"][i]), "mae_ori": float(ev["mae_ori"][i]),
            "mse_our": float(ev["mse_our"][i]), "mae_our": float(ev["mae_our"][i]),
            "omega": float(ev["omega"][i]), "condition_holds": bool(ev["condition_holds"][i]),
        })
    return {
        "baseline": {"mse": float(np.mean(ev["mse_ori"])), "mae": float(np.mean(ev["mae_ori"]))},
        "dualweaver": {"mse": float(np.mean(ev["mse_our"])), "mae": float(np.mean(ev["mae_our"]))},
        "per_channel": per_channel,
    }


@dataclass
class AdaptResult:
    grid: GridResult
    model: DualWeaverModel
    test_eval: dict


def adapt(prep: Prepared, fc: FrozenForecaster, cfg: ExperimentConfig, on_step=None) -> AdaptResult:
    """Grid-search adaptation on train/val windows; evaluate the selected model on test."""
    train_w, val_w, test_w = prep.windows("train"), prep.windows("val"), prep.windows("test")
    grid = grid_search(model_factory(fc, prep.scaled.C, cfg), train_w, val_w, cfg.train, on_step)
    model = grid.best_model
    test_eval = evaluate(model, test_w) if model.variant == "dual" else {}
    return AdaptResult(grid, model, test_eval)
