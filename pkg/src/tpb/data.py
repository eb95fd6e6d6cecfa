"""Synthetic multi-city traffic data: generation, patching, masking, splits.

Everything here is pure numpy over immutable arrays; rng objects are passed
explicitly, so parallel determinism is the caller's contract.

A "window" is ``P`` consecutive patches of ``T0`` steps on one node. Window
enumeration uses non-overlapping strides of ``T0 * P`` for reconstruction
pre-training and bank building, and a sliding stride of ``T0`` when
enumerating supervised forecasting samples.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigError, DataError
from .seeding import derive_seed, rng_from

HOURS_PER_WEEK = 168
MINUTES_PER_WEEK = HOURS_PER_WEEK * 60
DEFAULT_T0 = 12
DEFAULT_P = 24
DEFAULT_INTERVAL_MINUTES = 5


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class TrafficSeries:
    """One city's raw tensor: values[node, step, channel] plus clock metadata.

    ``start_timestamp`` is minutes since Monday 00:00, modulo one week.
    """

    city_id: str
    values: np.ndarray
    interval_minutes: int = DEFAULT_INTERVAL_MINUTES
    start_timestamp: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise DataError(f"series values must be [N, T, C], got shape {v.shape}")
        if not np.isfinite(v).all():
            raise DataError("series contains non-finite values")
        if self.interval_minutes <= 0 or 60 % self.interval_minutes != 0:
            raise DataError(f"interval {self.interval_minutes} min must divide 60")
        object.__setattr__(self, "start_timestamp", int(self.start_timestamp) % MINUTES_PER_WEEK)

    @property
    def node_count(self) -> int:
        return self.values.shape[0]

    @property
    def step_count(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def hour_of_week(self, step: int) -> int:
        minutes = self.start_timestamp + step * self.interval_minutes
        return (minutes // 60) % HOURS_PER_WEEK

    def time_slice(self, start_step: int, n_steps: int, city_id: str | None = None) -> "TrafficSeries":
        if start_step < 0 or start_step + n_steps > self.step_count:
            raise DataError("time_slice outside series")
        return TrafficSeries(
            city_id=city_id or self.city_id,
            values=self.values[:, start_step : start_step + n_steps, :],
            interval_minutes=self.interval_minutes,
            start_timestamp=self.start_timestamp + start_step * self.interval_minutes,
        )


@dataclass(frozen=True)
class PatchWindow:
    """Per-node window of P patches; mask[j] is True when patch j is hidden."""

    patches: np.ndarray  # [P, T0, C]
    mask: np.ndarray  # [P] bool
    hour_of_week: np.ndarray  # [P] int, each in [0, 168)

    def __post_init__(self):
        p = self.patches
        if p.ndim != 3:
            raise DataError(f"patches must be [P, T0, C], got {p.shape}")
        if self.mask.shape != (p.shape[0],) or self.hour_of_week.shape != (p.shape[0],):
            raise DataError("mask/hour index length must equal patch count")

    def with_mask(self, mask: np.ndarray) -> "PatchWindow":
        return dataclasses.replace(self, mask=np.asarray(mask, dtype=bool))

    def flatten_steps(self) -> np.ndarray:
        """Concatenate patches back into the original [P*T0, C] slice."""
        P, T0, C = self.patches.shape
        return self.patches.reshape(P * T0, C)


@dataclass(frozen=True)
class CityCorpus:
    cities: list[TrafficSeries]
    role: str  # "source" | "target" | "test"

    def __post_init__(self):
        if self.role not in ("source", "target", "test"):
            raise DataError(f"unknown corpus role {self.role!r}")
        if self.role == "source" and not self.cities:
            raise DataError("source corpus needs at least one city")
        if self.role == "target" and len(self.cities) != 1:
            raise DataError("target corpus holds exactly one city")

    def city_ids(self) -> list[str]:
        return [s.city_id for s in self.cities]


class WindowRef(NamedTuple):
    """Addresses one per-node window inside a corpus."""

    city_index: int
    node: int
    start_step: int


# ---------------------------------------------------------------------------
# Synthetic specification


@dataclass(frozen=True)
class CitySpec:
    node_count: int
    day_count: int
    mixture: tuple[float, ...]
    role: str = "source"
    few_shot_days: int = 2

    def __post_init__(self):
        if self.node_count < 1 or self.day_count < 1:
            raise ConfigError("city needs at least one node and one day")
        if self.role not in ("source", "target"):
            raise ConfigError(f"city role must be source or target, got {self.role!r}")
        w = np.asarray(self.mixture, dtype=float)
        if w.ndim != 1 or len(w) < 1 or (w < 0).any():
            raise ConfigError("mixture must be non-negative weights")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1, got {w.sum()}")
        if self.role == "target" and self.few_shot_days >= self.day_count:
            raise ConfigError("target city needs days beyond the few-shot span for testing")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic multi-city benchmark.

    Each node draws one latent motif per hour-of-week slot (motifs persist
    over ``block_hours`` consecutive slots so recent history is informative
    about the near future); values are level + smooth daily baseline + motif
    + Gaussian noise.
    """

    pattern_count: int
    motifs: np.ndarray  # [K*, steps_per_hour, C]
    noise_std: float
    cities: dict[str, CitySpec]
    seed: int = 0
    interval_minutes: int = DEFAULT_INTERVAL_MINUTES
    level: float = 60.0
    baseline_amplitude: float = 0.5
    block_hours: int = 4

    def __post_init__(self):
        if self.pattern_count < 2:
            raise ConfigError("need at least two latent motifs")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.motifs.shape[0] != self.pattern_count:
            raise ConfigError("motif library size must equal pattern_count")
        if self.block_hours < 1:
            raise ConfigError("block_hours must be positive")
        for cs in self.cities.values():
            if len(cs.mixture) != self.pattern_count:
                raise ConfigError("every city mixture must weight all motifs")

    @property
    def steps_per_hour(self) -> int:
        return 60 // self.interval_minutes

    @property
    def steps_per_day(self) -> int:
        return 24 * self.steps_per_hour

    @property
    def channels(self) -> int:
        return self.motifs.shape[2]

    def source_city_ids(self) -> list[str]:
        return [cid for cid, cs in self.cities.items() if cs.role == "source"]

    def target_city_id(self) -> str:
        ids = [cid for cid, cs in self.cities.items() if cs.role == "target"]
        if len(ids) != 1:
            raise ConfigError(f"spec must name exactly one target city, found {ids}")
        return ids[0]


def draw_motif_library(
    pattern_count: int,
    steps: int,
    channels: int = 1,
    amplitude: float = 3.0,
    seed: int = 0,
) -> np.ndarray:
    """Sample smooth, mutually separated motifs (each a sum of <= 3 sinusoids).

    Redraws a motif while it sits too close to an already accepted one, so
    the planted clusters are recoverable; the loop is deterministic given the
    seed.
    """
    rng = np.random.default_rng(derive_seed(seed, "motifs"))
    pos = (np.arange(steps) + 0.5) / steps
    motifs = np.zeros((pattern_count, steps, channels))
    min_gap = 0.9 * amplitude
    for k in range(pattern_count):
        for _attempt in range(200):
            n_terms = int(rng.integers(2, 4))
            shape = np.zeros(steps)
            for _ in range(n_terms):
                freq = float(rng.choice([0.5, 1.0, 1.5, 2.0, 3.0]))
                phase = float(rng.uniform(0, 2 * np.pi))
                weight = float(rng.uniform(0.4, 1.0))
                shape += weight * np.sin(2 * np.pi * freq * pos + phase)
            shape *= amplitude / max(np.abs(shape).max(), 1e-9)
            ok = all(
                np.sqrt(np.mean((motifs[j, :, 0] - shape) ** 2)) >= min_gap for j in range(k)
            )
            if ok:
                break
        for c in range(channels):
            motifs[k, :, c] = shape
    return motifs


def default_synth_spec(
    seed: int = 0,
    noise_std: float = 0.1,
    source_cities: int = 3,
    nodes_per_city: int = 20,
    source_days: int = 14,
    pattern_count: int = 5,
    target_days: int = 7,
    few_shot_days: int = 2,
) -> SynthSpec:
    """Benchmark spec: concentrated per-city mixtures rotated so every motif
    is common somewhere and source/target patterns overlap."""
    base = np.array([0.55, 0.2, 0.1, 0.08, 0.07])
    if pattern_count != len(base):
        base = np.full(pattern_count, 1.0 / pattern_count)
    cities: dict[str, CitySpec] = {}
    for i in range(source_cities):
        mixture = tuple(np.roll(base, i * 2))
        cities[f"src{i}"] = CitySpec(nodes_per_city, source_days, mixture, role="source")
    target_mixture = tuple(np.roll(base, 1))
    cities["tgt"] = CitySpec(
        nodes_per_city, target_days, target_mixture, role="target", few_shot_days=few_shot_days
    )
    steps = 60 // DEFAULT_INTERVAL_MINUTES
    motifs = draw_motif_library(pattern_count, steps, seed=seed)
    return SynthSpec(
        pattern_count=pattern_count,
        motifs=motifs,
        noise_std=noise_std,
        cities=cities,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Generation


def planted_motif_slots(spec: SynthSpec, city_id: str) -> np.ndarray:
    """Motif index per (node, hour-of-week slot), [N, 168].

    The same draw feeds :func:`generate_synthetic_city`, so tests can score
    clustering against the planted assignment.
    """
    if city_id not in spec.cities:
        raise DataError(f"unknown city {city_id!r}")
    cs = spec.cities[city_id]
    rng = np.random.default_rng(derive_seed(spec.seed, "assign", city_id))
    n_blocks = math.ceil(HOURS_PER_WEEK / spec.block_hours)
    weights = np.asarray(cs.mixture, dtype=float)
    block_motifs = rng.choice(spec.pattern_count, size=(cs.node_count, n_blocks), p=weights)
    slots = np.arange(HOURS_PER_WEEK) // spec.block_hours
    return block_motifs[:, slots]


def _daily_baseline(spec: SynthSpec, minutes_of_day: np.ndarray) -> np.ndarray:
    u = minutes_of_day / 1440.0
    return spec.baseline_amplitude * (
        0.6 * np.sin(2 * np.pi * u) + 0.4 * np.sin(4 * np.pi * u + 1.0)
    )


def generate_synthetic_city(spec: SynthSpec, city_id: str, start_timestamp: int = 0) -> TrafficSeries:
    """Deterministic synthetic series for one city (seeded per city id)."""
    if city_id not in spec.cities:
        raise DataError(f"unknown city {city_id!r}")
    cs = spec.cities[city_id]
    slot_motifs = planted_motif_slots(spec, city_id)  # [N, 168]
    noise_rng = np.random.default_rng(derive_seed(spec.seed, "noise", city_id))

    T = cs.day_count * spec.steps_per_day
    minutes = (start_timestamp + np.arange(T) * spec.interval_minutes) % MINUTES_PER_WEEK
    slot = minutes // 60  # [T] hour-of-week
    pos = (minutes % 60) // spec.interval_minutes  # [T] position within the hour
    baseline = _daily_baseline(spec, minutes % 1440)  # [T]

    motif_idx = slot_motifs[:, slot]  # [N, T]
    values = spec.motifs[motif_idx, pos, :]  # [N, T, C]
    values = values + (spec.level + baseline)[None, :, None]
    if spec.noise_std > 0:
        values = values + noise_rng.normal(0.0, spec.noise_std, size=values.shape)
    return TrafficSeries(
        city_id=city_id,
        values=values.astype(np.float32),
        interval_minutes=spec.interval_minutes,
        start_timestamp=start_timestamp,
    )


@dataclass(frozen=True)
class CorpusBundle:
    """Source/target/test corpora realized from one SynthSpec."""

    source: CityCorpus
    target: CityCorpus
    test: CityCorpus
    spec: SynthSpec


def generate_corpus(spec: SynthSpec) -> CorpusBundle:
    source_series = [generate_synthetic_city(spec, cid) for cid in spec.source_city_ids()]
    tgt_id = spec.target_city_id()
    tgt_full = generate_synthetic_city(spec, tgt_id)
    cut = spec.cities[tgt_id].few_shot_days * spec.steps_per_day
    target = tgt_full.time_slice(0, cut)
    test = tgt_full.time_slice(cut, tgt_full.step_count - cut)
    return CorpusBundle(
        source=CityCorpus(source_series, "source"),
        target=CityCorpus([target], "target"),
        test=CityCorpus([test], "test"),
        spec=spec,
    )


def prior_adjacency(node_count: int) -> np.ndarray:
    """Fixed synthetic prior graph: ring lattice with self loops, row-normalized."""
    if node_count < 2:
        raise DataError("prior graph needs at least two nodes")
    A = np.eye(node_count)
    idx = np.arange(node_count)
    A[idx, (idx + 1) % node_count] = 1.0
    A[idx, (idx - 1) % node_count] = 1.0
    return A / A.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Patching and masking


def patch_stack(
    series: TrafficSeries, start_step: int, T0: int = DEFAULT_T0, P: int = DEFAULT_P
) -> tuple[np.ndarray, np.ndarray]:
    """All-node window as (patches [N, P, T0, C], hour_of_week [P])."""
    T = series.step_count
    if start_step < 0 or start_step + T0 * P > T:
        raise DataError(
            f"window [{start_step}, {start_step + T0 * P}) exceeds series length {T}"
        )
    N, _, C = series.values.shape
    block = series.values[:, start_step : start_step + T0 * P, :]
    patches = block.reshape(N, P, T0, C)
    hours = np.array([series.hour_of_week(start_step + j * T0) for j in range(P)], dtype=np.int64)
    return patches, hours


def patchify(
    series: TrafficSeries, start_step: int, T0: int = DEFAULT_T0, P: int = DEFAULT_P
) -> list[PatchWindow]:
    """One unmasked PatchWindow per node."""
    patches, hours = patch_stack(series, start_step, T0, P)
    blank = np.zeros(P, dtype=bool)
    return [PatchWindow(patches[n], blank.copy(), hours.copy()) for n in range(series.node_count)]


def sample_mask(P: int, mask_ratio: float, rng: int | np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly round(mask_ratio * P) True entries.

    Masked patches are drawn uniformly without replacement and need not be
    contiguous. Uses Python's round (half-to-even), documented behavior.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise DataError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    rng = rng_from(rng)
    count = int(round(mask_ratio * P))
    mask = np.zeros(P, dtype=bool)
    if count:
        mask[rng.choice(P, size=count, replace=False)] = True
    return mask


def enumerate_windows(
    corpus: CityCorpus, T0: int = DEFAULT_T0, P: int = DEFAULT_P
) -> list[WindowRef]:
    """Non-overlapping windows of length T0*P per (city, node), corpus order."""
    refs: list[WindowRef] = []
    span = T0 * P
    for ci, series in enumerate(corpus.cities):
        starts = range(0, series.step_count - span + 1, span)
        for node in range(series.node_count):
            refs.extend(WindowRef(ci, node, s) for s in starts)
    return refs


def split_source(
    corpus: CityCorpus,
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1),
    rng: int | np.random.Generator = 0,
    T0: int = DEFAULT_T0,
    P: int = DEFAULT_P,
) -> tuple[list[WindowRef], list[WindowRef], list[WindowRef]]:
    """Random disjoint train/val/test cover of all source windows.

    Val and test sizes are floored; the remainder goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    refs = enumerate_windows(corpus, T0, P)
    rng = rng_from(rng)
    order = rng.permutation(len(refs))
    n_val = int(math.floor(fractions[1] * len(refs)))
    n_test = int(math.floor(fractions[2] * len(refs)))
    n_train = len(refs) - n_val - n_test
    train = [refs[i] for i in order[:n_train]]
    val = [refs[i] for i in order[n_train : n_train + n_val]]
    test = [refs[i] for i in order[n_train + n_val :]]
    return train, val, test


def supervised_starts(
    series: TrafficSeries, T0: int = DEFAULT_T0, P: int = DEFAULT_P, horizon: int = 6
) -> list[int]:
    """Start steps for forecasting samples: sliding stride T0."""
    span = T0 * P + horizon
    return list(range(0, series.step_count - span + 1, T0))


def forecast_arrays(
    series: TrafficSeries,
    starts: list[int],
    T0: int = DEFAULT_T0,
    P: int = DEFAULT_P,
    horizon: int = 6,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assemble (inputs [B, N, P, T0, C], hours [B, P], labels [B, N, horizon, C])."""
    inputs, hours, labels = [], [], []
    span = T0 * P
    for s in starts:
        patches, hrs = patch_stack(series, s, T0, P)
        inputs.append(patches)
        hours.append(hrs)
        labels.append(series.values[:, s + span : s + span + horizon, :])
    return np.stack(inputs), np.stack(hours), np.stack(labels)


# ---------------------------------------------------------------------------
# Interval alignment


def align_interval(series: TrafficSeries, target_interval_minutes: int) -> TrafficSeries:
    """Linear interpolation onto a new sampling interval."""
    src = series.interval_minutes
    tgt = int(target_interval_minutes)
    if tgt <= 0 or 60 % tgt != 0:
        raise DataError(f"target interval {tgt} must divide 60")
    if src % tgt != 0 and tgt % src != 0:
        raise DataError(f"intervals {src} and {tgt} are not commensurate")
    T = series.step_count
    new_T = math.ceil((T - 1) * src / tgt) + 1
    t_src = np.arange(T) * src
    t_new = np.arange(new_T) * tgt
    N, _, C = series.values.shape
    out = np.empty((N, new_T, C), dtype=np.float32)
    for n in range(N):
        for c in range(C):
            out[n, :, c] = np.interp(t_new, t_src, series.values[n, :, c])
    return TrafficSeries(
        city_id=series.city_id,
        values=out,
        interval_minutes=tgt,
        start_timestamp=series.start_timestamp,
    )


# ---------------------------------------------------------------------------
# Series files


def save_series(path: str | Path, series: TrafficSeries) -> None:
    header = {
        "kind": "traffic_series",
        "city_id": series.city_id,
        "n_nodes": series.node_count,
        "n_steps": series.step_count,
        "channels": series.channels,
        "interval_minutes": series.interval_minutes,
        "start_timestamp": series.start_timestamp,
    }
    save_archive(path, header, {"values": series.values.astype(np.float32)})


def load_series(path: str | Path) -> TrafficSeries:
    header, arrays = load_archive(path)
    if header.get("kind") != "traffic_series" or "values" not in arrays:
        raise DataError(f"{path}: not a traffic series file")
    values = arrays["values"]
    expect = (header["n_nodes"], header["n_steps"], header["channels"])
    if values.shape != expect:
        raise DataError(f"{path}: header shape {expect} != array shape {values.shape}")
    return TrafficSeries(
        city_id=str(header["city_id"]),
        values=values,
        interval_minutes=int(header["interval_minutes"]),
        start_timestamp=int(header["start_timestamp"]),
    )
