"""Dataset ingestion, chronological splits, channel-independent windowing and synthetic corpora."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-8
SPLITS = ("train", "val", "test")
ETT_RATIO = (0.6, 0.2, 0.2)
DEFAULT_RATIO = (0.7, 0.1, 0.2)
_TIMESTAMP_HEADERS = {"date", "time", "timestamp", "datetime", "ds"}


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    values: np.ndarray  # (timesteps, channels)
    split_ratio: tuple[float, float, float] = DEFAULT_RATIO
    channel_names: list[str] = field(default_factory=list)
    rejected_rows: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if np.isnan(self.values).any():
            raise ValueError(f"dataset {self.name!r} contains NaN values")
        if len(self.split_ratio) != 3 or min(self.split_ratio) < 0:
            raise ValueError(f"bad split ratio {self.split_ratio}")
        if not math.isclose(sum(self.split_ratio), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratio {self.split_ratio} does not sum to 1")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.channels)]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def timesteps(self) -> int:
        return self.values.shape[0]

    def split_bounds(self) -> dict[str, tuple[int, int]]:
        n = self.timesteps
        n_train = math.floor(n * self.split_ratio[0] + 1e-9)
        n_val = math.floor(n * self.split_ratio[1] + 1e-9)
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n),
        }

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        lo, hi = self.split_bounds()[name]
        return self.values[lo:hi]


@dataclass
class SeriesWindow:
    x: np.ndarray
    y: dict[int, np.ndarray]
    channel_id: int = 0
    norm_stats: tuple[float, float] | None = None
    domain_id: int | None = None
    start: int = 0

    @property
    def is_constant(self) -> bool:
        return float(np.std(self.x)) < EPS


@dataclass(frozen=True)
class SyntheticSpec:
    domain_id: int
    components: tuple[tuple[float, float, float], ...]  # (cycles per window, amplitude, phase)
    noise_std: float = 0.0
    length: int = 512

    def __post_init__(self):
        for freq, amp, _ in self.components:
            if not 0 <= freq < self.length / 2:
                raise ValueError(f"frequency {freq} must lie in [0, {self.length / 2})")
            if amp <= 0:
                raise ValueError(f"amplitude must be positive, got {amp}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def default_split_ratio(name: str) -> tuple[float, float, float]:
    return ETT_RATIO if name.upper().startswith("ETT") else DEFAULT_RATIO


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in {"nan", "na", "null"}:
        return math.nan
    return float(text)


def load_csv(path, split_ratio: Sequence[float] | None = None, name: str | None = None) -> Dataset:
    """Read a headed CSV of numeric channels, optionally preceded by a timestamp column.

    Rows holding missing values are dropped and counted; any other unparsable
    field raises :class:`ParseError` naming the data row (1-based, header excluded).
    """
    path = Path(path)
    name = name or path.stem
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise ParseError(f"{path}: file is empty or has no data rows")
    header, body = rows[0], rows[1:]

    skip_first = header[0].strip().lower() in _TIMESTAMP_HEADERS
    if not skip_first:
        try:
            _parse_float(body[0][0])
        except ValueError:
            skip_first = True
    columns = header[1:] if skip_first else header

    values, rejected = [], 0
    for i, row in enumerate(body, start=1):
        cells = row[1:] if skip_first else row
        if len(cells) != len(columns):
            raise ParseError(f"{path}: row {i} has {len(cells)} fields, expected {len(columns)}")
        try:
            parsed = [_parse_float(c) for c in cells]
        except ValueError as exc:
            raise ParseError(f"{path}: row {i} (line {i + 1}) is not numeric: {exc}") from None
        if any(math.isnan(v) for v in parsed):
            rejected += 1
            continue
        values.append(parsed)
    if rejected:
        logger.warning("%s: rejected %d rows with missing values", path, rejected)
    if not values:
        raise ParseError(f"{path}: no complete data rows")

    ratio = tuple(split_ratio) if split_ratio is not None else default_split_ratio(name)
    return Dataset(name=name, values=np.array(values), split_ratio=ratio,
                   channel_names=[c.strip() for c in columns], rejected_rows=rejected)


def make_windows(dataset: Dataset, split: str, lookback: int, horizons: Sequence[int],
                 stride: int = 1, require_all: bool = True) -> list[SeriesWindow]:
    """Slice every channel of a split into lookback/target windows, ordered by (channel, start).

    With ``require_all=False`` a window is kept as soon as its shortest horizon
    fits, and ``y`` holds only the horizons that fit.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    horizons = sorted(horizons)
    block = dataset.split(split)
    n = block.shape[0]
    need = horizons[-1] if require_all else horizons[0]
    last_start = n - lookback - need
    if last_start < 0:
        warnings.warn(f"{dataset.name}/{split}: {n} steps is too short for lookback "
                      f"{lookback} + horizon {need}; no windows produced", stacklevel=2)
        return []
    windows = []
    for c in range(dataset.channels):
        series = np.ascontiguousarray(block[:, c])
        for s in range(0, last_start + 1, stride):
            end = s + lookback
            y = {h: series[end:end + h] for h in horizons if end + h <= n}
            windows.append(SeriesWindow(x=series[s:end], y=y, channel_id=c, start=s))
    return windows


def normalize_window(window: SeriesWindow) -> SeriesWindow:
    """Z-score the lookback; targets stay raw. Re-normalizing composes the stored stats."""
    mean = float(np.mean(window.x))
    std = max(float(np.std(window.x)), EPS)
    x = (window.x - mean) / std
    if window.norm_stats is not None:
        m0, s0 = window.norm_stats
        mean, std = m0 + s0 * mean, s0 * std
    return replace(window, x=x, norm_stats=(mean, std))


def denormalize(values, norm_stats: tuple[float, float] | None):
    if norm_stats is None:
        return values
    mean, std = norm_stats
    return values * std + mean


def subsample_train(windows: Sequence[SeriesWindow], fraction: float, seed: int = 0) -> list[SeriesWindow]:
    """Chronologically earliest ceil(fraction * N) windows of each channel.

    ``seed`` is accepted for interface stability; the selection is not random.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    by_channel: dict[int, list[SeriesWindow]] = {}
    for w in windows:
        by_channel.setdefault(w.channel_id, []).append(w)
    keep = set()
    for group in by_channel.values():
        for w in group[:math.ceil(fraction * len(group) - 1e-9)]:
            keep.add(id(w))
    return [w for w in windows if id(w) in keep]


# --------------------------------------------------------------------------
# synthetic data


def synthesize_series(spec: SyntheticSpec, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_steps, dtype=np.float64)
    out = np.zeros(n_steps)
    for freq, amp, phase in spec.components:
        out += amp * np.cos(2 * np.pi * freq * t / spec.length + phase)
    if spec.noise_std > 0:
        out += rng.normal(0.0, spec.noise_std, size=n_steps)
    return out


def generate_synthetic(spec: SyntheticSpec, n_windows: int, seed: int,
                       horizons: Sequence[int] = (), stride: int | None = None) -> list[SeriesWindow]:
    """Consecutive windows of one continuous sum-of-sinusoids realisation; window 0 starts at t=0."""
    stride = stride or max(1, spec.length // 4)
    max_h = max(horizons, default=0)
    total = spec.length + max_h + (n_windows - 1) * stride
    series = synthesize_series(spec, total, np.random.default_rng(seed))
    windows = []
    for i in range(n_windows):
        s = i * stride
        end = s + spec.length
        windows.append(SeriesWindow(x=series[s:end], y={h: series[end:end + h] for h in horizons},
                                    channel_id=0, domain_id=spec.domain_id, start=s))
    return windows


def band_specs(n_series: int, band: tuple[float, float], rng: np.random.Generator, *,
               length: int, n_components: int = 2, noise_std: float = 0.0,
               domain_id: int = 0) -> list[SyntheticSpec]:
    """Random sum-of-sinusoid specs whose frequencies all fall inside ``band``."""
    specs = []
    for _ in range(n_series):
        comps = tuple(
            (float(rng.uniform(*band)), float(rng.uniform(0.5, 1.5)), float(rng.uniform(0, 2 * np.pi)))
            for _ in range(n_components)
        )
        specs.append(SyntheticSpec(domain_id=domain_id, components=comps, noise_std=noise_std, length=length))
    return specs


def synthetic_dataset(specs: Sequence[SyntheticSpec], timesteps: int, seed: int, name: str = "synthetic",
                      split_ratio: Sequence[float] = DEFAULT_RATIO) -> Dataset:
    """Multichannel dataset with one channel per spec."""
    rng = np.random.default_rng(seed)
    values = np.stack([synthesize_series(s, timesteps, rng) for s in specs], axis=1)
    return Dataset(name=name, values=values, split_ratio=tuple(split_ratio))
