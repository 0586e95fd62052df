"""Dataset ingestion, synthesis, and node partitioning.

Supports the household power-consumption CSV format (semicolon separated,
"?" for missing values) and a synthetic regression generator. Cleaned
datasets can be cached on disk keyed by the source file's content hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .rng import substream

EXPECTED_HEADER = [
    "Date",
    "Time",
    "Global_active_power",
    "Global_reactive_power",
    "Voltage",
    "Global_intensity",
    "Sub_metering_1",
    "Sub_metering_2",
    "Sub_metering_3",
]
TARGET_COLUMN = "Global_active_power"
N_FEATURES = 6
VALIDATION_FRACTION = 0.20
MALFORMED_LIMIT = 0.05

CACHE_VERSION = 1

# Ground truth for the synthetic generator: target is linear in the six
# uniform features plus Gaussian noise, clipped back into [0, 1].
SYNTH_WEIGHTS = np.array([0.25, 0.15, 0.20, 0.10, 0.05, 0.15])
SYNTH_INTERCEPT = 0.05


class IngestionError(ValueError):
    """Raised when a source file cannot be turned into samples."""


@dataclass(frozen=True)
class Sample:
    """One normalized observation: six features and a scalar target."""

    features: np.ndarray
    target: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if feats.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} features, got {feats.shape}")
        if not np.all(np.isfinite(feats)) or not np.isfinite(self.target):
            raise ValueError("sample contains non-finite values")


@dataclass(frozen=True)
class NodeShard:
    """A node's local data: training samples plus a held-out validation split."""

    node_id: int
    train: tuple[Sample, ...]
    validation: tuple[Sample, ...]

    @cached_property
    def train_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_samples(self.train)

    @cached_property
    def validation_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_samples(self.validation)


@dataclass
class BatchSampler:
    """Deterministic mini-batch iterator over a shard's training samples.

    Each epoch draws a fresh permutation from a counter-keyed substream,
    so batch order depends only on (seed, tags, epoch), never on
    scheduling. Every batch has exactly ``batch_size`` samples except
    possibly the last of an epoch.
    """

    x: np.ndarray
    y: np.ndarray
    batch_size: int
    seed: int
    stream_tags: tuple = ()
    _epoch: int = field(default=0, init=False)
    _order: np.ndarray = field(default=None, init=False, repr=False)
    _cursor: int = field(default=0, init=False)

    @classmethod
    def for_shard(cls, shard: NodeShard, batch_size: int, seed: int, *tags) -> "BatchSampler":
        x, y = shard.train_xy
        return cls(x=x, y=y, batch_size=batch_size, seed=seed,
                   stream_tags=("batch",) + tuple(tags))

    def _reshuffle(self) -> None:
        rng = substream(self.seed, *self.stream_tags, self._epoch)
        self._order = rng.permutation(len(self.y))
        self._cursor = 0
        self._epoch += 1

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._order is None or self._cursor >= len(self._order):
            self._reshuffle()
        idx = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.x[idx], self.y[idx]


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (X, y) arrays; empty input yields empty arrays."""
    if len(samples) == 0:
        return np.empty((0, N_FEATURES)), np.empty((0,))
    x = np.stack([s.features for s in samples])
    y = np.array([s.target for s in samples], dtype=np.float64)
    return x, y


def _normalize_columns(values: np.ndarray) -> np.ndarray:
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    span = hi - lo
    out = np.zeros_like(values)
    ok = span > 0
    out[:, ok] = (values[:, ok] - lo[ok]) / span[ok]
    # degenerate columns (min == max) map to 0
    return out


def _samples_from_matrix(matrix: np.ndarray) -> list[Sample]:
    normalized = _normalize_columns(matrix)
    target_idx = EXPECTED_HEADER.index(TARGET_COLUMN) - 2  # numeric columns start after Date;Time
    feature_idx = [i for i in range(matrix.shape[1]) if i != target_idx]
    return [
        Sample(features=row[feature_idx], target=float(row[target_idx]))
        for row in normalized
    ]


def ingest_csv(path, policy: str = "drop", cache_dir=None) -> list[Sample]:
    """Parse the semicolon-separated power-consumption CSV into samples.

    Rows containing any "?" are treated as missing; ``policy`` is either
    "drop" (discard those rows, the default) or "fail" (refuse the file).
    Retained rows are min-max normalized per column. If ``cache_dir`` is
    given, a cleaned copy keyed by the file's content hash is reused or
    written (see ``cache_path``).
    """
    if policy not in ("drop", "fail"):
        raise ValueError(f"unknown missing-value policy: {policy!r}")

    raw = open(path, "rb").read()
    if cache_dir is not None:
        cached = cache_path(cache_dir, raw)
        if cached.exists():
            return load_cache(cached)

    text = raw.decode("utf-8-sig")
    lines = text.splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise IngestionError(f"{path}: empty file")

    header = [h.strip() for h in lines[0].split(";")]
    if header != EXPECTED_HEADER:
        raise IngestionError(f"{path}: unexpected header {header}")

    rows: list[list[float]] = []
    malformed: list[int] = []
    missing = 0
    n_data_lines = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        n_data_lines += 1
        fields = line.split(";")
        if len(fields) != len(EXPECTED_HEADER):
            malformed.append(lineno)
            continue
        numeric = fields[2:]
        if any(f.strip() == "?" for f in numeric):
            if policy == "fail":
                raise IngestionError(f"{path}: missing value at line {lineno}")
            missing += 1
            continue
        try:
            rows.append([float(f) for f in numeric])
        except ValueError:
            malformed.append(lineno)

    if n_data_lines == 0:
        raise IngestionError(f"{path}: no data rows")
    if len(malformed) > MALFORMED_LIMIT * n_data_lines:
        shown = ", ".join(str(n) for n in malformed[:20])
        raise IngestionError(
            f"{path}: {len(malformed)} malformed rows (> {MALFORMED_LIMIT:.0%}), e.g. lines {shown}"
        )
    if not rows:
        raise IngestionError(f"{path}: all rows missing or malformed")

    samples = _samples_from_matrix(np.array(rows, dtype=np.float64))
    if cache_dir is not None:
        save_cache(cache_path(cache_dir, raw), samples)
    return samples


def cache_path(cache_dir, raw_bytes: bytes):
    """Cache file location for a source file's content."""
    from pathlib import Path

    digest = hashlib.sha256(raw_bytes).hexdigest()
    return Path(cache_dir) / f"{digest}.npz"


def save_cache(path, samples: Sequence[Sample]) -> None:
    """Write cleaned samples as an .npz cache (see README for the format)."""
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    x, y = stack_samples(samples)
    np.savez(path, version=CACHE_VERSION, features=x, target=y)


def load_cache(path) -> list[Sample]:
    with np.load(path) as archive:
        if int(archive["version"]) != CACHE_VERSION:
            raise IngestionError(f"{path}: unsupported cache version {archive['version']}")
        x = archive["features"]
        y = archive["target"]
    return [Sample(features=xi, target=float(yi)) for xi, yi in zip(x, y)]


def synthesize(n_samples: int, seed: int, noise_scale: float = 0.05) -> list[Sample]:
    """Generate samples from a fixed linear ground truth plus Gaussian noise.

    Features are uniform on [0, 1]; the target is clipped back into [0, 1]
    after the noise is added so sample invariants hold. Deterministic
    given the seed.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = substream(seed, "synthesize")
    x = rng.uniform(0.0, 1.0, size=(n_samples, N_FEATURES))
    y = x @ SYNTH_WEIGHTS + SYNTH_INTERCEPT
    if noise_scale > 0:
        y = y + rng.normal(0.0, noise_scale, size=n_samples)
    y = np.clip(y, 0.0, 1.0)
    return [Sample(features=xi, target=float(yi)) for xi, yi in zip(x, y)]


def partition(data: Sequence[Sample], k: int, seed: int) -> list[NodeShard]:
    """Split data IID across ``k`` nodes into near-equal shards.

    Shard sizes differ by at most one (the first ``len(data) % k`` shards
    take the extra sample). Within each shard, round(20%) of the samples
    are held out as the node's validation split.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(data) < k:
        raise ValueError(f"need at least {k} samples to fill {k} shards, got {len(data)}")

    rng = substream(seed, "partition")
    order = rng.permutation(len(data))
    base, extra = divmod(len(data), k)

    shards = []
    start = 0
    for node_id in range(k):
        size = base + (1 if node_id < extra else 0)
        idx = order[start:start + size]
        start += size
        members = tuple(data[i] for i in idx)
        n_val = round(VALIDATION_FRACTION * size)
        shards.append(
            NodeShard(
                node_id=node_id,
                train=members[: size - n_val],
                validation=members[size - n_val:],
            )
        )
    return shards


def split_holdout(data: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Carve a server-side holdout off the front of a shuffled copy.

    Returns (holdout, rest); the rest is what gets partitioned across
    nodes. fraction = 0 yields an empty holdout.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = substream(seed, "holdout")
    order = rng.permutation(len(data))
    n_hold = round(fraction * len(data))
    holdout = [data[i] for i in order[:n_hold]]
    rest = [data[i] for i in order[n_hold:]]
    return holdout, rest


def iter_all_samples(shards: Sequence[NodeShard]) -> Iterator[Sample]:
    for shard in shards:
        yield from shard.train
        yield from shard.validation


def pooled_validation(shards: Sequence[NodeShard]) -> tuple[np.ndarray, np.ndarray]:
    """Union of every shard's validation split, in node-id order."""
    xs, ys = [], []
    for shard in sorted(shards, key=lambda s: s.node_id):
        x, y = shard.validation_xy
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)
