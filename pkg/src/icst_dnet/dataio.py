"""Speed-series ingestion, normalization, windowing, and synthetic data.

The synthetic generator plants a known directed causal structure between
nearby roads so that causal-recovery quality can be scored exactly.
"""

from __future__ import annotations

import datetime as dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GenerationError,
    NormalizationError,
)
from .roadnet import RoadNetwork, enumerate_road_pairs, make_network


@dataclass(frozen=True)
class SpeedSeries:
    """Traffic speeds as a (T, N, 1) tensor plus calendar anchoring."""

    values: np.ndarray = field(repr=False)  # float64 (T, N, 1)
    start_timestamp: dt.datetime
    slot_minutes: int

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 1:
            raise FormatError(f"expected (T, N, 1) values, got {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise FormatError(f"empty series: shape {self.values.shape}")
        if np.isnan(self.values).any():
            raise DataError("series contains NaN after ingestion")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_roads(self) -> int:
        return self.values.shape[1]

    def timestamp_of(self, step: int) -> dt.datetime:
        return self.start_timestamp + dt.timedelta(minutes=step * self.slot_minutes)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise NormalizationError(f"std must be positive, got {self.std}")


@dataclass(frozen=True)
class TimeFilterArray:
    """Strictly decreasing nonpositive timestep offsets, starting at 0."""

    offsets: tuple

    def __post_init__(self):
        o = self.offsets
        if not o or o[0] != 0:
            raise ConfigError(f"offsets must start at 0, got {o[:3]}...")
        if any(b >= a for a, b in zip(o, o[1:])):
            raise ConfigError("offsets must be strictly decreasing")
        if any(x > 0 for x in o):
            raise ConfigError("offsets must be nonpositive")

    @property
    def num_selected(self) -> int:
        return len(self.offsets)

    @property
    def depth(self) -> int:
        """Raw window length implied by the deepest offset."""
        return -self.offsets[-1] + 1

    def ascending(self) -> np.ndarray:
        """Offsets in ascending time order (deepest history first)."""
        return np.array(self.offsets[::-1], dtype=np.int64)


@dataclass(frozen=True)
class WindowedSample:
    """One training sample: filtered history plus the Q-step target block."""

    history: np.ndarray  # (P, N, 1)
    history_indices: np.ndarray  # (P,) absolute, strictly increasing
    future: np.ndarray  # (Q, N, 1)
    future_indices: np.ndarray  # (Q,) absolute, origin+1 .. origin+Q

    @property
    def origin(self) -> int:
        return int(self.history_indices[-1])


@dataclass(frozen=True)
class SyntheticTruth:
    """Planted directed causal structure behind a synthetic series."""

    causal_adjacency: np.ndarray  # bool (N, N), [src, dst], no diagonal
    lags: np.ndarray  # int (N, N), >= 1 where edge
    gains: np.ndarray  # float (N, N)

    def __post_init__(self):
        if self.causal_adjacency.diagonal().any():
            raise GenerationError("self-loops are not allowed in the planted graph")
        if (self.lags[self.causal_adjacency] < 1).any():
            raise GenerationError("planted edges must have lag >= 1")

    def edge_list(self) -> list:
        """Edges as dicts {"src", "dst", "lag", "gain"}, sorted by (src, dst)."""
        out = []
        for src, dst in zip(*np.nonzero(self.causal_adjacency)):
            out.append(
                {
                    "src": int(src),
                    "dst": int(dst),
                    "lag": int(self.lags[src, dst]),
                    "gain": float(self.gains[src, dst]),
                }
            )
        return sorted(out, key=lambda e: (e["src"], e["dst"]))

    def edge_set(self) -> set:
        return {(e["src"], e["dst"]) for e in self.edge_list()}


def save_truth(truth: SyntheticTruth, path) -> None:
    Path(path).write_text(json.dumps({"edges": truth.edge_list()}, indent=1))


def load_truth(path, num_roads: int) -> SyntheticTruth:
    doc = json.loads(Path(path).read_text())
    adj = np.zeros((num_roads, num_roads), dtype=bool)
    lags = np.zeros((num_roads, num_roads), dtype=np.int64)
    gains = np.zeros((num_roads, num_roads), dtype=np.float64)
    for e in doc["edges"]:
        adj[e["src"], e["dst"]] = True
        lags[e["src"], e["dst"]] = e["lag"]
        gains[e["src"], e["dst"]] = e["gain"]
    return SyntheticTruth(causal_adjacency=adj, lags=lags, gains=gains)


def save_stats(stats: NormalizationStats, path) -> None:
    Path(path).write_text(json.dumps({"mean": stats.mean, "std": stats.std}))


def load_stats(path) -> NormalizationStats:
    doc = json.loads(Path(path).read_text())
    return NormalizationStats(mean=float(doc["mean"]), std=float(doc["std"]))


# ---------------------------------------------------------------------------
# ingestion


def ingest_csv(path, slot_minutes: int, start_timestamp: dt.datetime) -> SpeedSeries:
    """Read a speed CSV (rows = timesteps, columns = roads, header optional).

    Blank cells are imputed by linear interpolation along time per road, with
    edge extension at the series boundaries.
    """
    path = Path(path)
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if lineno == 1 and any(not _is_float_or_blank(c) for c in cells):
                continue  # header row
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise FormatError(
                    f"{path}:{lineno}: ragged row, expected {width} cells, got {len(cells)}"
                )
            rows.append([float(c) if c else np.nan for c in cells])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    values = _impute_linear(values, source=path)
    return SpeedSeries(
        values=values[:, :, None],
        start_timestamp=start_timestamp,
        slot_minutes=slot_minutes,
    )


def _is_float_or_blank(s: str) -> bool:
    if s == "":
        return True
    try:
        float(s)
        return True
    except ValueError:
        return False


def _impute_linear(values: np.ndarray, source="") -> np.ndarray:
    """Fill NaN cells per column via linear interpolation + edge extension."""
    out = values.copy()
    t = np.arange(values.shape[0])
    for col in range(values.shape[1]):
        good = ~np.isnan(values[:, col])
        if not good.any():
            raise DataError(f"{source}: column {col} has no observed values")
        if good.all():
            continue
        out[:, col] = np.interp(t, t[good], values[good, col])
    return out


def write_speed_csv(series: SpeedSeries, path) -> None:
    header = ",".join(f"road_{i}" for i in range(series.num_roads))
    body = "\n".join(
        ",".join(_fmt(v) for v in row) for row in series.values[:, :, 0]
    )
    Path(path).write_text(header + "\n" + body + "\n")


def _fmt(v: float) -> str:
    return np.format_float_scientific(v, precision=17) if abs(v) > 1e16 else repr(float(v))


# ---------------------------------------------------------------------------
# normalization and splitting


def zscore_fit_transform(
    series: SpeedSeries, train_len: int | None = None
) -> tuple[SpeedSeries, NormalizationStats]:
    """Z-score the whole series using statistics of the training prefix only."""
    if train_len is None:
        train_len = int(np.floor(0.7 * series.num_steps))
    train = series.values[:train_len]
    std = float(train.std())
    if std == 0.0:
        raise NormalizationError("training split has zero standard deviation")
    stats = NormalizationStats(mean=float(train.mean()), std=std)
    normalized = (series.values - stats.mean) / stats.std
    return (
        SpeedSeries(normalized, series.start_timestamp, series.slot_minutes),
        stats,
    )


def zscore_inverse(series: SpeedSeries, stats: NormalizationStats) -> SpeedSeries:
    return SpeedSeries(
        series.values * stats.std + stats.mean,
        series.start_timestamp,
        series.slot_minutes,
    )


def split_boundaries(num_steps: int, ratios=(7, 1, 2)) -> tuple[int, int]:
    if len(ratios) != 3 or sum(ratios) != 10:
        raise ConfigError(f"split ratios must be three tenths summing to 10, got {ratios}")
    b1 = int(np.floor(num_steps * ratios[0] / 10))
    b2 = int(np.floor(num_steps * (ratios[0] + ratios[1]) / 10))
    return b1, b2


def chronological_split(series: SpeedSeries, ratios=(7, 1, 2)):
    """Contiguous, order-preserving train/val/test slices of the series."""
    if series.num_steps < 10:
        raise ConfigError(f"need at least 10 timesteps to split, got {series.num_steps}")
    b1, b2 = split_boundaries(series.num_steps, ratios)
    parts = []
    for lo, hi in ((0, b1), (b1, b2), (b2, series.num_steps)):
        parts.append(
            SpeedSeries(
                series.values[lo:hi],
                series.timestamp_of(lo),
                series.slot_minutes,
            )
        )
    return tuple(parts)


# ---------------------------------------------------------------------------
# time filtering and windowing


def steps_per_day(slot_minutes: int) -> int:
    if slot_minutes <= 0 or 1440 % slot_minutes != 0:
        raise ConfigError(f"slot_minutes must divide 1440, got {slot_minutes}")
    return 1440 // slot_minutes


def build_time_filter(
    recent: int, daily: int, weekly: int, slot_minutes: int
) -> TimeFilterArray:
    """Offsets for the recent steps plus daily- and weekly-periodic steps.

    With S = steps per day: {0..-(recent-1)} | {-d*S : d=1..daily} |
    {-7*w*S : w=1..weekly}, deduplicated, descending.
    """
    if recent < 1:
        raise ConfigError("recent must be >= 1 (the window origin itself)")
    if daily < 0 or weekly < 0:
        raise ConfigError("daily and weekly counts must be >= 0")
    s = steps_per_day(slot_minutes)
    offsets = {-k for k in range(recent)}
    offsets |= {-d * s for d in range(1, daily + 1)}
    offsets |= {-7 * w * s for w in range(1, weekly + 1)}
    return TimeFilterArray(offsets=tuple(sorted(offsets, reverse=True)))


def recent_only_filter(num_selected: int) -> TimeFilterArray:
    """Contiguous window of the most recent ``num_selected`` steps."""
    return TimeFilterArray(offsets=tuple(-k for k in range(num_selected)))


def valid_origins(num_steps: int, filt: TimeFilterArray, horizon: int) -> np.ndarray:
    """Origins t with full history (t + deepest offset >= 0) and future (t + Q < T)."""
    lo = -int(filt.offsets[-1])
    hi = num_steps - horizon  # exclusive
    return np.arange(lo, hi, dtype=np.int64)


def make_windows(series: SpeedSeries, filt: TimeFilterArray, horizon: int) -> list:
    """One WindowedSample per valid origin, history in ascending time order."""
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    origins = valid_origins(series.num_steps, filt, horizon)
    if origins.size == 0:
        warnings.warn("no valid window origins for this series/filter/horizon")
        return []
    asc = filt.ascending()
    samples = []
    for t in origins:
        hist_idx = t + asc
        fut_idx = np.arange(t + 1, t + horizon + 1, dtype=np.int64)
        samples.append(
            WindowedSample(
                history=series.values[hist_idx],
                history_indices=hist_idx,
                future=series.values[fut_idx],
                future_indices=fut_idx,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic diffusion


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted-diffusion generator."""

    base: float = 60.0
    daily_amplitude: float = 3.0
    noise_std: float = 1.0
    first_order_plant_prob: float = 0.9
    second_order_plant_prob: float = 0.5
    first_order_gain: tuple = (2.5, 4.5)
    second_order_gain: tuple = (1.5, 3.0)
    max_lag: int = 3


def simulate_diffusion(
    network: RoadNetwork,
    truth: SyntheticTruth,
    num_steps: int,
    slot_minutes: int,
    seed: int,
    cfg: SynthConfig = SynthConfig(),
    start_timestamp: dt.datetime | None = None,
) -> SpeedSeries:
    """Simulate speeds driven by a shared daily sinusoid plus planted coupling.

    x_i(t) = base + amp*sin(2*pi*t/S) + sum_{j->i} gain_ji*tanh(x_j(t-lag_ji)-base)
             + Gaussian noise. Couplings with t-lag < 0 contribute zero.
    """
    rng = np.random.default_rng(seed)
    n = network.num_roads
    s = steps_per_day(slot_minutes)
    srcs, dsts = np.nonzero(truth.causal_adjacency)
    lags = truth.lags[srcs, dsts]
    gains = truth.gains[srcs, dsts]

    t_axis = np.arange(num_steps)
    seasonal = cfg.base + cfg.daily_amplitude * np.sin(2 * np.pi * t_axis / s)
    noise = rng.normal(0.0, cfg.noise_std, size=(num_steps, n))
    x = np.empty((num_steps, n), dtype=np.float64)
    for t in range(num_steps):
        xt = seasonal[t] + noise[t]
        live = lags <= t
        if live.any():
            contrib = gains[live] * np.tanh(x[t - lags[live], srcs[live]] - cfg.base)
            np.add.at(xt, dsts[live], contrib)
        x[t] = xt
    if x.std() == 0.0:
        raise GenerationError("generated series is constant; adjust amplitude/noise")
    if start_timestamp is None:
        start_timestamp = dt.datetime(2024, 1, 1)  # a Monday
    return SpeedSeries(x[:, :, None], start_timestamp, slot_minutes)


def synth_diffusion(
    n_roads: int,
    num_steps: int,
    slot_minutes: int,
    edge_prob: float,
    seed: int,
    cfg: SynthConfig = SynthConfig(),
) -> tuple[SpeedSeries, RoadNetwork, SyntheticTruth]:
    """Sample a road network, plant causal edges on nearby pairs, simulate.

    At most one directed edge is planted per unordered pair; first-order pairs
    get stronger gains than second-order ones. Fully reproducible from seed.
    """
    if n_roads < 3:
        raise ConfigError(f"need at least 3 roads, got {n_roads}")
    if num_steps < 4 * steps_per_day(slot_minutes):
        raise ConfigError("need at least 4 days of data for stable statistics")
    rng = np.random.default_rng(seed)

    edges = [
        (m, n)
        for m in range(n_roads)
        for n in range(m + 1, n_roads)
        if rng.random() < edge_prob
    ]
    network = make_network(n_roads, edges)

    adj = np.zeros((n_roads, n_roads), dtype=bool)
    lags = np.zeros((n_roads, n_roads), dtype=np.int64)
    gains = np.zeros((n_roads, n_roads), dtype=np.float64)
    pair_set = enumerate_road_pairs(network)
    for (a, b), order in zip(pair_set.pairs, pair_set.order_tags):
        prob = cfg.first_order_plant_prob if order == 1 else cfg.second_order_plant_prob
        lo, hi = cfg.first_order_gain if order == 1 else cfg.second_order_gain
        if rng.random() >= prob:
            continue
        src, dst = (a, b) if rng.random() < 0.5 else (b, a)
        adj[src, dst] = True
        lags[src, dst] = rng.integers(1, cfg.max_lag + 1)
        gains[src, dst] = rng.uniform(lo, hi)
    truth = SyntheticTruth(causal_adjacency=adj, lags=lags, gains=gains)

    sim_seed = int(rng.integers(0, 2**31 - 1))
    series = simulate_diffusion(network, truth, num_steps, slot_minutes, sim_seed, cfg)
    return series, network, truth
