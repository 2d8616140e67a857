"""Trajectory files, dataset manifests, normalization and observation grids.

Trajectory file layout (little endian)::

    magic "VGPL" | version u32 | env_kind u32 | N u32 | T u32 | M u32 | n_params u32
    params f32[n_params] | grouping u32[N] | rigidness u8[M]
    positions f32[T*N*3] | actuation f32[T*3]
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    BadMagicError,
    ContractViolation,
    TrajectoryParseError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .nn import rng_stream
from .sim import EnvConfig, EnvKind, Trajectory, simulate

logger = logging.getLogger("pinfer")

MAGIC = b"VGPL"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
HEADER_BYTES = _HEADER.size
MANIFEST_NAME = "manifest.json"
STATS_NAME = "stats.json"
STD_FLOOR = 1e-6
LABEL_SMOOTHING = 0.1


# -- trajectory files -----------------------------------------------------------------

def trajectory_nbytes(n_params: int, n: int, t: int, m: int) -> int:
    return HEADER_BYTES + 4 * n_params + 4 * n + m + 12 * t * n + 12 * t


def encode_trajectory(traj: Trajectory) -> bytes:
    t, n, m = traj.n_steps, traj.n_particles, traj.n_objects
    params = np.asarray(traj.params, dtype="<f4").reshape(-1)
    head = _HEADER.pack(MAGIC, VERSION, traj.env_kind.code, n, t, m, len(params))
    return b"".join([
        head,
        params.tobytes(),
        np.asarray(traj.grouping, dtype="<u4").tobytes(),
        np.asarray(traj.rigidness, dtype=np.uint8).tobytes(),
        np.asarray(traj.positions, dtype="<f4").tobytes(),
        np.asarray(traj.actuation, dtype="<f4").tobytes(),
    ])


def decode_trajectory(blob: bytes) -> Trajectory:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(0, f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    if len(blob) < HEADER_BYTES:
        raise TruncatedPayloadError(len(blob), "truncated header")
    _, version, env_code, n, t, m, n_params = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionMismatchError(4, f"unsupported version {version}, expected {VERSION}")
    try:
        kind = EnvKind.from_code(env_code)
    except ContractViolation as e:
        raise TrajectoryParseError(8, str(e)) from None
    expected = trajectory_nbytes(n_params, n, t, m)
    if len(blob) < expected:
        raise TruncatedPayloadError(len(blob), f"payload needs {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrajectoryParseError(expected, f"{len(blob) - expected} trailing bytes after payload")

    offset = HEADER_BYTES

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).copy()
        offset += arr.nbytes
        return arr

    params = take("<f4", n_params).astype(np.float32)
    grouping = take("<u4", n).astype(np.uint32)
    rigidness = take("u1", m).astype(bool)
    positions = take("<f4", t * n * 3).astype(np.float32).reshape(t, n, 3)
    actuation = take("<f4", t * 3).astype(np.float32).reshape(t, 3)
    if np.any(grouping >= m):
        raise TrajectoryParseError(HEADER_BYTES + 4 * n_params, "grouping label out of range")
    return Trajectory(kind, params, grouping, rigidness, positions, actuation)


def write_trajectory(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_trajectory(traj))
    return path


def read_trajectory(path: str | Path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes())


# -- normalization -----------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "std", np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), STD_FLOOR))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))

    def matches(self, other: "NormStats") -> bool:
        return bool(np.allclose(self.mean, other.mean, rtol=0, atol=1e-6)
                    and np.allclose(self.std, other.std, rtol=0, atol=1e-6))


def normalize(positions, stats: NormStats) -> np.ndarray:
    return (np.asarray(positions, dtype=np.float64) - stats.mean) / stats.std


def denormalize(positions, stats: NormStats) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64) * stats.std + stats.mean


def norm_stats_from_arrays(arrays: Iterable[np.ndarray] | None = None, *, source=None) -> NormStats:
    """Two-pass population mean/std over every position in ``arrays``.

    ``source`` may be a zero-argument callable returning a fresh iterable, which
    lets the second pass re-read files instead of holding them in memory.
    """
    if source is None:
        cached = [np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in arrays or ()]

        def source():
            return cached

    total = np.zeros(3)
    count = 0
    for a in source():
        a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
        total += a.sum(axis=0)
        count += len(a)
    if count == 0:
        raise ContractViolation("cannot compute normalization stats from zero positions")
    mean = total / count
    sq = np.zeros(3)
    for a in source():
        d = np.asarray(a, dtype=np.float64).reshape(-1, 3) - mean
        sq += np.sum(d * d, axis=0)
    return NormStats(mean, np.sqrt(sq / count))


def save_stats(stats: NormStats, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_stats(path: str | Path) -> NormStats:
    return NormStats.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- manifests ----------------------------------------------------------------------------

def split_for(index: int) -> str:
    return "test" if index % 10 == 0 else "train"


@dataclass
class DatasetManifest:
    root: Path
    env: EnvConfig
    seed: int
    files: list[dict] = field(default_factory=list)
    stats_file: str | None = None

    @property
    def env_kind(self) -> EnvKind:
        return self.env.kind

    def entries(self, split: str | None = None) -> list[dict]:
        return [e for e in self.files if split is None or e["split"] == split]

    def paths(self, split: str | None = None) -> list[Path]:
        return [self.root / e["path"] for e in self.entries(split)]

    def trajectories(self, split: str | None = None) -> Iterator[Trajectory]:
        for path in self.paths(split):
            logger.debug("dataset read path=%s", path)
            yield read_trajectory(path)

    def stats(self) -> NormStats:
        if self.stats_file is None:
            raise ContractViolation(f"manifest under {self.root} has no stats file; run `pinfer stats`")
        return load_stats(self.root / self.stats_file)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "seed": self.seed,
            "files": self.files,
            "stats_file": self.stats_file,
        }

    def save(self) -> Path:
        missing = [p for p in self.paths() if not p.exists()]
        if missing:
            raise ContractViolation(f"manifest references missing files: {missing[:3]}")
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ContractViolation(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        return DatasetManifest(
            root=path.parent,
            env=EnvConfig.from_dict(d["env"]),
            seed=int(d["seed"]),
            files=list(d["files"]),
            stats_file=d.get("stats_file"),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ContractViolation(f"malformed manifest {path}: {e!r}") from e


def compute_norm_stats(manifest: DatasetManifest) -> NormStats:
    if not manifest.entries("train"):
        raise ContractViolation("manifest has no training trajectories")
    return norm_stats_from_arrays(
        source=lambda: (t.positions for t in manifest.trajectories("train"))
    )


def write_norm_stats(manifest: DatasetManifest) -> NormStats:
    stats = compute_norm_stats(manifest)
    save_stats(stats, manifest.root / STATS_NAME)
    manifest.stats_file = STATS_NAME
    manifest.save()
    logger.info("stats mean=%s std=%s", np.round(stats.mean, 4).tolist(), np.round(stats.std, 4).tolist())
    return stats


def generate_dataset(config: EnvConfig, n_sims: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Simulate ``n_sims`` trajectories with uniformly drawn parameters and write them
    with a manifest and normalization stats."""
    if n_sims < 1:
        raise ContractViolation(f"n_sims must be >= 1, got {n_sims}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lo, hi = config.param_range
    draws = rng_stream(seed, "dataset", config.kind.value)
    manifest = DatasetManifest(root=root, env=config, seed=seed)
    t0 = time.perf_counter()
    for i in range(n_sims):
        param = float(draws.uniform(lo, hi))
        sim_seed = int(draws.integers(0, 2 ** 63 - 1))
        traj = simulate(config, [param], sim_seed)
        name = f"traj_{i:05d}.vgpl"
        write_trajectory(traj, root / name)
        manifest.files.append({"path": name, "split": split_for(i), "params": [param], "seed": sim_seed})
        if (i + 1) % 10 == 0:
            logger.info("gen env=%s done=%s/%s", config.kind.value, i + 1, n_sims)
    manifest.save()
    write_norm_stats(manifest)
    logger.info("gen env=%s n_sims=%s seed=%s took=%.1fs", config.kind.value, n_sims, seed,
                time.perf_counter() - t0)
    return manifest


def training_windows(n_steps: int, length: int, stride: int = 1) -> list[int]:
    """Start indices of every window of ``length`` frames, in order."""
    if length < 1 or stride < 1:
        raise ContractViolation("window length and stride must be >= 1")
    return list(range(0, n_steps - length + 1, stride))


# -- observations -------------------------------------------------------------------------

RASTER_HALF_WIDTH = 2.5
RASTER_SIGMA = 0.75


def rasterize(positions, norm_stats: NormStats, grid_size: int = 32) -> np.ndarray:
    """Orthographic front view of one frame as a [2, H, W] grid (occupancy, depth).

    Row index follows y, column index follows x, over the normalized
    [-2.5, 2.5]^2 window. Depth is the nearest normalized z mapped to [0, 1];
    empty cells read 1.
    """
    x = normalize(np.asarray(positions).reshape(-1, 3), norm_stats)
    cell = 2.0 * RASTER_HALF_WIDTH / grid_size
    occ = np.zeros((grid_size, grid_size))
    depth = np.ones((grid_size, grid_size))
    inside = np.all(np.abs(x[:, :2]) < RASTER_HALF_WIDTH, axis=1) & np.all(np.isfinite(x), axis=1)
    x = x[inside]
    if len(x):
        centers = -RASTER_HALF_WIDTH + (np.arange(grid_size) + 0.5) * cell
        gx = np.exp(-0.5 * ((centers[None, :] - x[:, 0:1]) / (RASTER_SIGMA * cell)) ** 2)
        gy = np.exp(-0.5 * ((centers[None, :] - x[:, 1:2]) / (RASTER_SIGMA * cell)) ** 2)
        occ = np.clip(np.einsum("nh,nw->hw", gy, gx), 0.0, 1.0)
        col = np.clip(((x[:, 0] + RASTER_HALF_WIDTH) / cell).astype(np.int64), 0, grid_size - 1)
        row = np.clip(((x[:, 1] + RASTER_HALF_WIDTH) / cell).astype(np.int64), 0, grid_size - 1)
        z = np.clip((x[:, 2] + RASTER_HALF_WIDTH) / (2.0 * RASTER_HALF_WIDTH), 0.0, 1.0)
        np.minimum.at(depth, (row, col), z)
    return np.stack([occ, depth])


def rasterize_sequence(positions, norm_stats: NormStats, grid_size: int = 32) -> np.ndarray:
    return np.stack([rasterize(frame, norm_stats, grid_size) for frame in np.asarray(positions)])


# -- proposals -----------------------------------------------------------------------------

@dataclass
class ProposalSequence:
    positions: np.ndarray   # [T, N, 3], normalized space
    grouping: np.ndarray    # [T, N, M], rows are distributions

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.grouping = np.asarray(self.grouping, dtype=np.float64)
        if self.positions.ndim != 3 or self.grouping.ndim != 3:
            raise ContractViolation("proposals must be [T, N, 3] and [T, N, M]")
        if self.positions.shape[:2] != self.grouping.shape[:2]:
            raise ContractViolation(
                f"proposal shapes disagree: {self.positions.shape} vs {self.grouping.shape}"
            )
        if np.any(self.grouping < 0) or not np.allclose(self.grouping.sum(axis=-1), 1.0, atol=1e-6):
            raise ContractViolation("grouping rows must be non-negative and sum to 1")

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def n_objects(self) -> int:
        return self.grouping.shape[2]

    def hard_grouping(self) -> np.ndarray:
        return np.argmax(self.grouping.mean(axis=0), axis=-1)

    def window(self, start: int, length: int) -> "ProposalSequence":
        return ProposalSequence(self.positions[start:start + length], self.grouping[start:start + length])


def smoothed_one_hot(labels: np.ndarray, m: int, eps: float = LABEL_SMOOTHING) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if m == 1:
        return np.ones(labels.shape + (1,))
    out = np.full(labels.shape + (m,), eps / (m - 1))
    np.put_along_axis(out, labels[..., None], 1.0 - eps, axis=-1)
    return out


def corrupt_proposals(traj: Trajectory, noise_sigma: float, group_flip_rate: float, seed: int,
                      *, norm_stats: NormStats) -> ProposalSequence:
    """Synthetic visual-prior output: noisy normalized truth and smoothed, occasionally
    flipped grouping. A flipped particle keeps its wrong label for the whole sequence."""
    if noise_sigma < 0:
        raise ContractViolation(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 0.0 <= group_flip_rate < 1.0:
        raise ContractViolation(f"group_flip_rate must be in [0, 1), got {group_flip_rate}")
    rng = rng_stream(seed, "corrupt")
    truth = normalize(traj.positions, norm_stats)
    positions = truth + rng.normal(0.0, 1.0, size=truth.shape) * noise_sigma
    m = traj.n_objects
    labels = np.asarray(traj.grouping, dtype=np.int64).copy()
    flips = rng.random(len(labels)) < group_flip_rate
    if m > 1 and np.any(flips):
        shift = rng.integers(1, m, size=int(flips.sum()))
        labels[flips] = (labels[flips] + shift) % m
    grouping = np.broadcast_to(smoothed_one_hot(labels, m), (traj.n_steps, len(labels), m)).copy()
    return ProposalSequence(positions, grouping)
