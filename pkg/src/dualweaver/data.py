"""Panel ingestion, scaling, windowing, and synthetic / perturbed panels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DTYPE, RngStream


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class MultivariateSeries:
    values: np.ndarray  # (T, C)
    channel_names: tuple[str, ...]
    frequency: str = ""
    had_timestamp: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=DTYPE)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"series values must be a non-empty T x C array, got shape {v.shape}")
        if len(self.channel_names) != v.shape[1]:
            raise DataError(f"{len(self.channel_names)} channel names for {v.shape[1]} channels")
        if not np.all(np.isfinite(v)):
            raise DataError("series contains non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, channel_names=None) -> "MultivariateSeries":
        return MultivariateSeries(values, self.channel_names if channel_names is None else channel_names,
                                  self.frequency, self.had_timestamp)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse_float(cell: str) -> float:
    s = cell.strip()
    if not s:
        raise ValueError("empty cell")
    x = float(s)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {s!r}")
    return x


def load_csv(path, frequency: str = "") -> MultivariateSeries:
    """Read a header-first CSV into a series.

    A leading column whose first data cell is not numeric is treated as a
    timestamp and dropped. Every remaining cell must parse as a finite float.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot read ({exc})") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    # keep 1-based file line numbers for error messages; blank lines are skipped
    numbered = [(i + 2, r) for i, r in enumerate(rows[1:]) if r]
    body = [r for _, r in numbered]
    if not body:
        raise DataError(f"{path}: no data rows")
    try:
        _parse_float(body[0][0])
        skip = 0
    except ValueError:
        skip = 1
    names = header[skip:]
    if not names:
        raise DataError(f"{path}: no channel columns")
    values = np.empty((len(body), len(names)), dtype=DTYPE)
    for r, (line, row) in enumerate(numbered):
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        for c, cell in enumerate(row[skip:]):
            try:
                values[r, c] = _parse_float(cell)
            except ValueError as exc:
                raise DataError(f"{path}:{line}: column {names[c]!r}: cannot parse {cell!r} ({exc})") from None
    return MultivariateSeries(values, tuple(names), frequency, had_timestamp=bool(skip))


def write_csv(series: MultivariateSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.channel_names)
        for row in series.values:
            w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# splits and scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train: int
    val: int
    test: int

    def ranges(self) -> dict[str, tuple[int, int]]:
        """Contiguous blocks: train, then val, then test."""
        a = self.train
        b = a + self.val
        return {"train": (0, a), "val": (a, b), "test": (b, b + self.test)}

    def validate(self, T: int, L: int, H: int) -> None:
        if self.train + self.val + self.test > T:
            raise DataError(f"split {self} needs {self.train + self.val + self.test} rows, series has {T}")
        for name, n in (("train", self.train), ("val", self.val), ("test", self.test)):
            if n < L + H:
                raise DataError(f"{name} split has {n} rows, fewer than L+H={L + H}")

    @classmethod
    def from_fractions(cls, T: int, train: float = 0.7, val: float = 0.1) -> "SplitSpec":
        n_tr = int(T * train)
        n_va = int(T * val)
        return cls(n_tr, n_va, T - n_tr - n_va)


@dataclass(frozen=True)
class ScalerState:
    mean: np.ndarray
    std: np.ndarray


def fit_scaler(series: MultivariateSeries, train_range: tuple[int, int]) -> ScalerState:
    a, b = train_range
    if b <= a:
        raise DataError("empty training range for scaler")
    rows = series.values[a:b]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    for name, s in zip(series.channel_names, std):
        if not s > 1e-12:
            raise DataError(f"channel {name!r} has zero variance on the training rows")
    return ScalerState(mean, std)


def apply_scaler(series: MultivariateSeries, state: ScalerState) -> MultivariateSeries:
    return series.with_values((series.values - state.mean) / state.std)


def invert_scaler(series: MultivariateSeries, state: ScalerState) -> MultivariateSeries:
    return series.with_values(series.values * state.std + state.mean)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowBatch:
    X: np.ndarray  # (B, L, C)
    Y: np.ndarray  # (B, H, C)
    start_indices: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.X[idx], self.Y[idx], self.start_indices[idx])

    def select_channels(self, n: int) -> "WindowBatch":
        return WindowBatch(self.X[..., :n], self.Y[..., :n], self.start_indices)


def windows(series: MultivariateSeries, rng_range: tuple[int, int], L: int, H: int, stride: int = 1) -> WindowBatch:
    """Every (lookback, horizon) pair inside ``rng_range``; nothing is dropped at the tail.

    ``start_indices`` are absolute row indices of each lookback's first row.
    """
    if L < 1 or H < 1 or stride < 1:
        raise DataError("L, H and stride must be positive")
    a, b = rng_range
    C = series.C
    n = (b - a - L - H) // stride + 1 if b - a >= L + H else 0
    if n <= 0:
        return WindowBatch(np.zeros((0, L, C)), np.zeros((0, H, C)), np.zeros(0, dtype=np.int64))
    starts = a + stride * np.arange(n, dtype=np.int64)
    span = np.arange(L + H)
    block = series.values[starts[:, None] + span[None, :]]  # (n, L+H, C)
    return WindowBatch(block[:, :L].copy(), block[:, L:].copy(), starts)


# ---------------------------------------------------------------------------
# synthetic panels and perturbations
# ---------------------------------------------------------------------------


def gen_coupled_ar(seed: int, T: int, C: int, phi: float, coupling: float, noise_std: float = 1.0,
                   burn_in: int = 200) -> MultivariateSeries:
    """Lag-coupled chain of AR channels.

    Channel 0 is AR(1) with coefficient ``phi``; channel j >= 1 follows
    ``x_j[t] = coupling * x_{j-1}[t-1] + (1 - coupling) * noise_std * e_j[t]``.
    The first ``burn_in`` steps are discarded.
    """
    if not abs(phi) < 1:
        raise DataError("|phi| must be < 1")
    if not 0.0 <= coupling <= 1.0:
        raise DataError("coupling must lie in [0, 1]")
    n = T + burn_in
    e = RngStream("data", seed).generator(0).standard_normal((n, C)) * noise_std
    x = np.zeros((n, C))
    for t in range(n):
        prev = x[t - 1] if t > 0 else np.zeros(C)
        x[t, 0] = phi * prev[0] + e[t, 0]
        x[t, 1:] = coupling * prev[:-1] + (1.0 - coupling) * e[t, 1:]
    return MultivariateSeries(x[burn_in:], tuple(f"x{j}" for j in range(C)), frequency="synthetic")


def inject_noise_channels(series: MultivariateSeries, k: int, seed: int) -> MultivariateSeries:
    """Append ``k`` channels of i.i.d. N(0, 1) draws named ``noise_1..k``."""
    if k < 0:
        raise DataError("k must be non-negative")
    if k == 0:
        return series
    noise = RngStream("noise", seed).generator(k).standard_normal((series.T, k))
    names = series.channel_names + tuple(f"noise_{i + 1}" for i in range(k))
    return series.with_values(np.concatenate([series.values, noise], axis=1), names)


def take_first_channels(series: MultivariateSeries, n: int) -> MultivariateSeries:
    if not 1 <= n <= series.C:
        raise DataError(f"N={n} out of range for a {series.C}-channel series")
    return series.with_values(series.values[:, :n], series.channel_names[:n])
