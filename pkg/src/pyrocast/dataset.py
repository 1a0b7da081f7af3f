"""Training and ensemble-testing datasets built from CA trajectories.

A trajectory of ``n_steps + 1`` states is subsampled every ``stride`` steps
(``s_0, s_10, ..., s_50`` by default) and consecutive subsampled frames form
the input/target pairs. Ensemble targets replace the single next frame by the
mean of ``m`` binarised CA continuations from the same state.

On disk a dataset is a ``PCDS`` file plus a UTF-8 ``key=value`` manifest::

    b"PCDS" | u32 version | u32 n_pairs | u32 H | u32 W | u8 kind
    n_pairs x ( input plane | target plane )     # float32 LE, row-major

``kind`` is 0 for binary training pairs and 1 for ensemble pairs.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .ca import CaParams, CellState, TerrainLayers, ensemble_next, simulate
from .errors import CorruptFile, NoBurnableCells, RangeViolation, VersionMismatch
from .rng import derive_seed, make_rng

MAGIC = b"PCDS"
VERSION = 1
HEADER = struct.Struct("<4sIIIIB")
KIND_TRAIN = 0
KIND_ENSEMBLE = 1

TRAJ_MAGIC = b"PCTR"
TRAJ_HEADER = struct.Struct("<4sIIII")

# stream tags keep training and ensemble trajectories in disjoint seed spaces
TRAIN_TAG = 1
ENSEMBLE_TAG = 2


def binarize(grid) -> np.ndarray:
    """Burning and burnt cells -> 1.0, unburnt and unburnable -> 0.0."""
    grid = np.asarray(grid)
    return (grid >= CellState.BURNING).astype(np.float32)


@dataclass
class TrainingPair:
    x_n: np.ndarray
    x_next: np.ndarray
    frame_index: int


@dataclass
class PairDataset:
    """Stacked ``(N, H, W)`` inputs and targets plus provenance.

    ``kind`` is ``KIND_TRAIN`` (binary targets) or ``KIND_ENSEMBLE``
    (targets are means of ``ensemble_size`` binary continuations).
    """

    inputs: np.ndarray
    targets: np.ndarray
    kind: int = KIND_TRAIN
    ensemble_size: int = 1
    frame_index: np.ndarray | None = None
    sample_index: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        n = len(self.inputs)
        if self.frame_index is None:
            self.frame_index = np.zeros(n, dtype=np.int64)
        if self.sample_index is None:
            self.sample_index = np.arange(n, dtype=np.int64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.sample_index = np.asarray(self.sample_index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.inputs.shape[1:])

    def pairs(self) -> Iterator[TrainingPair]:
        for x, y, k in zip(self.inputs, self.targets, self.frame_index):
            yield TrainingPair(x, y, int(k))

    def seeds(self) -> list[int]:
        return [int(s) for s in self.manifest.get("seeds", [])]

    def ignition_keys(self) -> set[tuple[int, tuple]]:
        """``(seed, ignition)`` tuple per trajectory, for disjointness checks."""
        return set(zip(self.seeds(), (tuple(map(tuple, i)) for i in self.manifest.get("ignitions", []))))


def sample_ignition(terrain: TerrainLayers, rng: np.random.Generator) -> tuple[int, int]:
    burnable = np.flatnonzero(~terrain.unburnable_mask.ravel())
    if burnable.size == 0:
        raise NoBurnableCells("terrain has no burnable cell to ignite")
    flat = int(burnable[rng.integers(burnable.size)])
    return divmod(flat, terrain.shape[1])


def _frame_steps(n_steps: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    steps = list(range(0, n_steps + 1, stride))
    if len(steps) < 2:
        raise ValueError(f"stride {stride} leaves fewer than two frames in {n_steps} steps")
    return steps


def _trajectory_seeds(master_seed: int, tag: int, n: int, exclude) -> list[int]:
    seeds, i = [], 0
    exclude = set(exclude)
    while len(seeds) < n:
        s = derive_seed(master_seed, tag, i)
        i += 1
        if s not in exclude:
            seeds.append(s)
    return seeds


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def make_training_dataset(terrain: TerrainLayers, params: CaParams, n_samples: int, subsample_stride: int = 10,
                          n_steps: int = 50, master_seed: int | None = None, workers: int = 1) -> PairDataset:
    """Simulate ``n_samples`` trajectories and emit consecutive subsampled pairs."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    master_seed = params.seed if master_seed is None else master_seed
    steps = _frame_steps(n_steps, subsample_stride)
    seeds = _trajectory_seeds(master_seed, TRAIN_TAG, n_samples, ())

    def run(seed):
        ignition = sample_ignition(terrain, make_rng(seed, 0))
        traj = simulate(terrain, params, [ignition], n_steps, seed=seed)
        return ignition, binarize(traj.states[steps])

    results = _map(run, seeds, workers)
    inputs, targets, frame_idx, sample_idx = [], [], [], []
    for j, (_, frames) in enumerate(results):
        inputs.append(frames[:-1])
        targets.append(frames[1:])
        frame_idx.extend(range(len(frames) - 1))
        sample_idx.extend([j] * (len(frames) - 1))
    manifest = {
        "kind": "train", "n_samples": n_samples, "stride": subsample_stride, "n_steps": n_steps,
        "master_seed": master_seed, "params_hash": params.digest(),
        "seeds": seeds, "ignitions": [[r[0]] for r in results],
    }
    return PairDataset(np.concatenate(inputs), np.concatenate(targets), KIND_TRAIN, 1,
                       np.array(frame_idx), np.array(sample_idx), manifest)


def make_ensemble_dataset(terrain: TerrainLayers, params: CaParams, n_samples: int = 50, m: int = 50,
                          stride: int = 10, n_steps: int = 50, master_seed: int | None = None,
                          exclude_seeds=(), workers: int = 1) -> PairDataset:
    """Pairs ``(x_n, mean of m continuations of s_n over stride steps)``.

    Trajectory seeds come from a stream disjoint from the training set, and
    any seed listed in ``exclude_seeds`` is skipped as well.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    master_seed = params.seed if master_seed is None else master_seed
    steps = _frame_steps(n_steps, stride)[:-1]
    seeds = _trajectory_seeds(master_seed, ENSEMBLE_TAG, n_samples, exclude_seeds)

    def run(seed):
        ignition = sample_ignition(terrain, make_rng(seed, 0))
        traj = simulate(terrain, params, [ignition], n_steps, seed=seed)
        xs, ys = [], []
        for k, s in enumerate(steps):
            state = traj.states[s]
            xs.append(binarize(state))
            ys.append(ensemble_next(state, terrain, params, m, stride, seed=derive_seed(seed, 1, k)))
        return ignition, np.stack(xs), np.stack(ys)

    results = _map(run, seeds, workers)
    n_pairs = len(steps)
    manifest = {
        "kind": "ensemble", "n_samples": n_samples, "m": m, "stride": stride, "n_steps": n_steps,
        "master_seed": master_seed, "params_hash": params.digest(),
        "seeds": seeds, "ignitions": [[r[0]] for r in results],
    }
    return PairDataset(
        np.concatenate([r[1] for r in results]),
        np.concatenate([r[2] for r in results]),
        KIND_ENSEMBLE, m,
        np.tile(np.arange(n_pairs), n_samples),
        np.repeat(np.arange(n_samples), n_pairs),
        manifest,
    )


# ---------------------------------------------------------------- file formats

def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def _format_value(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_format_value(x) if not isinstance(x, (list, tuple)) else
                        ":".join(_format_value(y) for y in x) for x in v)
    return str(v)


def write_manifest(path, dataset: PairDataset) -> None:
    lines = []
    for key, value in dataset.manifest.items():
        if key == "ignitions":
            value = ";".join("|".join(f"{r}:{c}" for r, c in cells) for cells in value)
        lines.append(f"{key}={_format_value(value)}")
    lines.append(f"ensemble_size={dataset.ensemble_size}")
    lines.append(f"frame_index={_format_value(dataset.frame_index.tolist())}")
    lines.append(f"sample_index={_format_value(dataset.sample_index.tolist())}")
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    mp = manifest_path(path)
    if not mp.exists():
        return {}
    out = {}
    for line in mp.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _parse_manifest(raw: dict[str, str]) -> tuple[dict, dict]:
    extra = {}
    for key in ("frame_index", "sample_index"):
        if raw.get(key):
            extra[key] = np.array([int(v) for v in raw.pop(key).split(",")], dtype=np.int64)
        else:
            raw.pop(key, None)
    if "ensemble_size" in raw:
        extra["ensemble_size"] = int(raw.pop("ensemble_size"))
    manifest: dict = {}
    for key, value in raw.items():
        if key == "seeds":
            manifest[key] = [int(v) for v in value.split(",")] if value else []
        elif key == "ignitions":
            manifest[key] = [[tuple(int(x) for x in cell.split(":")) for cell in traj.split("|")]
                             for traj in value.split(";")] if value else []
        elif value.lstrip("-").isdigit():
            manifest[key] = int(value)
        else:
            manifest[key] = value
    return manifest, extra


def save_dataset(path, dataset: PairDataset) -> None:
    n = len(dataset)
    h, w = dataset.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, n, h, w, dataset.kind))
        planes = np.stack([dataset.inputs, dataset.targets], axis=1)
        f.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())
    write_manifest(path, dataset)


def load_dataset(path) -> PairDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, version, n, h, w, kind = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: dataset version {version}, expected {VERSION}")
    if h == 0 or w == 0 or kind not in (KIND_TRAIN, KIND_ENSEMBLE):
        raise CorruptFile(f"{path}: invalid header (H={h}, W={w}, kind={kind})")
    if len(raw) != HEADER.size + n * 2 * h * w * 4:
        raise CorruptFile(f"{path}: payload size does not match header")
    planes = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, 2, h, w).astype(np.float32)
    if not np.all(np.isfinite(planes)) or planes.min(initial=0) < 0 or planes.max(initial=0) > 1:
        raise RangeViolation(f"{path}: frame values outside [0, 1]")
    binary = np.all((planes[:, 0] == 0) | (planes[:, 0] == 1))
    if kind == KIND_TRAIN:
        binary = binary and np.all((planes[:, 1] == 0) | (planes[:, 1] == 1))
    if not binary:
        raise RangeViolation(f"{path}: non-binary values in binary frames")
    manifest, extra = _parse_manifest(read_manifest(path))
    return PairDataset(planes[:, 0], planes[:, 1], kind, manifest=manifest, **extra)


def save_trajectory(path, states: np.ndarray) -> None:
    """Raw CA states: ``b"PCTR" | u32 version | u32 n | u32 H | u32 W`` + u8 planes."""
    n, h, w = states.shape
    with open(path, "wb") as f:
        f.write(TRAJ_HEADER.pack(TRAJ_MAGIC, VERSION, n, h, w))
        f.write(np.ascontiguousarray(states, dtype=np.uint8).tobytes())


def load_trajectory(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < TRAJ_HEADER.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, version, n, h, w = TRAJ_HEADER.unpack_from(raw)
    if magic != TRAJ_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: trajectory version {version}, expected {VERSION}")
    if len(raw) != TRAJ_HEADER.size + n * h * w:
        raise CorruptFile(f"{path}: payload size does not match header")
    states = np.frombuffer(raw, dtype=np.uint8, offset=TRAJ_HEADER.size).reshape(n, h, w).copy()
    if states.max(initial=0) > CellState.BURNT:
        raise RangeViolation(f"{path}: invalid cell state")
    return states


def to_uint8(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return np.floor(255.0 * np.clip(frame, 0.0, 1.0) + 0.5).astype(np.uint8)


def export_png(frame, path) -> None:
    """8-bit grayscale PNG with pixel = round-half-up(255 * value)."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {frame.shape}")
    Image.fromarray(to_uint8(frame)).save(path, format="PNG")
