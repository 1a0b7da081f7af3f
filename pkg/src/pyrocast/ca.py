"""Stochastic cellular-automaton wildfire simulator.

The lattice holds one of four states per cell. At every step each burning cell
tries to ignite each of its eight unburnt neighbours with an independent
Bernoulli trial whose probability is

    p_burn = p_h * (1 + p_veg) * (1 + p_den) * p_wind * p_slope

clamped to [0, 1]. Burning cells burn out after exactly one step; unburnable
and burnt cells never change.

Grids are plain ``uint8`` numpy arrays of ``CellState`` values, indexed
``[row, col]`` with row 0 at the northern edge.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IgnitionOnUnburnable,
    InvalidEnsembleSize,
    NonAdjacentCells,
)
from .rng import make_rng


class CellState(IntEnum):
    UNBURNABLE = 0
    UNBURNT = 1
    BURNING = 2
    BURNT = 3


# (d_row, d_col) from a burning cell to the neighbour it may ignite.
NEIGHBOR_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def bearing_deg(d_row: int, d_col: int) -> float:
    """Compass bearing (0 = north, 90 = east) of a grid offset."""
    return math.degrees(math.atan2(d_col, -d_row)) % 360.0


@dataclass(frozen=True)
class WindField:
    speed: float = 0.0
    direction_deg: float = 0.0
    c1: float = 0.045
    c2: float = 0.131

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"wind speed must be >= 0, got {self.speed}")
        object.__setattr__(self, "direction_deg", float(self.direction_deg) % 360.0)


@dataclass(frozen=True)
class CaParams:
    p_h: float = 0.58
    a_slope: float = 0.078
    wind: WindField = field(default_factory=WindField)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_h <= 1.0:
            raise ValueError(f"p_h must lie in [0, 1], got {self.p_h}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def digest(self) -> str:
        text = (
            f"p_h={self.p_h!r};a_slope={self.a_slope!r};speed={self.wind.speed!r};"
            f"dir={self.wind.direction_deg!r};c1={self.wind.c1!r};c2={self.wind.c2!r}"
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class TerrainLayers:
    """Per-cell inputs of the burn-probability model.

    ``slope_deg`` is used as the target-cell slope when ``elevation`` is absent;
    with elevation the slope is taken along each propagation direction, using
    ``cell_size`` (same length unit as elevation) as the cardinal spacing.
    """

    p_veg: np.ndarray
    p_den: np.ndarray
    slope_deg: np.ndarray
    elevation: np.ndarray | None = None
    unburnable_mask: np.ndarray | None = None
    cell_size: float = 1.0

    def __post_init__(self):
        self.p_veg = np.asarray(self.p_veg, dtype=np.float64)
        shape = self.p_veg.shape
        if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
            raise DimensionMismatch(f"terrain layers must be 2-D, got shape {shape}")
        self.p_den = np.asarray(self.p_den, dtype=np.float64)
        self.slope_deg = np.asarray(self.slope_deg, dtype=np.float64)
        if self.elevation is not None:
            self.elevation = np.asarray(self.elevation, dtype=np.float64)
        if self.unburnable_mask is None:
            self.unburnable_mask = np.zeros(shape, dtype=bool)
        self.unburnable_mask = np.asarray(self.unburnable_mask, dtype=bool)
        for name in ("p_den", "slope_deg", "elevation", "unburnable_mask"):
            layer = getattr(self, name)
            if layer is not None and layer.shape != shape:
                raise DimensionMismatch(f"layer {name} has shape {layer.shape}, expected {shape}")
        if np.any(self.p_veg < -1) or np.any(self.p_den < -1):
            raise ValueError("p_veg and p_den must be >= -1")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.p_veg.shape

    @classmethod
    def uniform(cls, height: int, width: int, p_veg: float = 0.0, p_den: float = 0.0,
                slope_deg: float = 0.0) -> "TerrainLayers":
        shape = (height, width)
        return cls(np.full(shape, p_veg), np.full(shape, p_den), np.full(shape, slope_deg))


def wind_factor(wind: WindField, neighbor_bearing_deg: float) -> float:
    theta = math.radians(wind.direction_deg - neighbor_bearing_deg)
    v = wind.speed
    return math.exp(wind.c1 * v) * math.exp(v * wind.c2 * (math.cos(theta) - 1.0))


def slope_factor(a_slope: float, slope_deg):
    return np.exp(a_slope * np.asarray(slope_deg, dtype=np.float64))


def _directional_slope(terrain: TerrainLayers, src: tuple[int, int], dst: tuple[int, int]) -> float:
    if terrain.elevation is None:
        return float(terrain.slope_deg[dst])
    dr, dc = dst[0] - src[0], dst[1] - src[1]
    dist = terrain.cell_size * (math.sqrt(2.0) if dr and dc else 1.0)
    rise = terrain.elevation[dst] - terrain.elevation[src]
    return math.degrees(math.atan(rise / dist))


def _as_rc(index, width: int) -> tuple[int, int]:
    if isinstance(index, (tuple, list)):
        return int(index[0]), int(index[1])
    return divmod(int(index), width)


def burn_probability(params: CaParams, terrain: TerrainLayers, src, dst) -> float:
    """Probability that a burning ``src`` cell ignites ``dst`` in one step.

    Cells are ``(row, col)`` pairs or flat row-major indices.
    """
    h, w = terrain.shape
    src, dst = _as_rc(src, w), _as_rc(dst, w)
    for r, c in (src, dst):
        if not (0 <= r < h and 0 <= c < w):
            raise NonAdjacentCells(f"cell {(r, c)} lies outside the {h}x{w} grid")
    dr, dc = dst[0] - src[0], dst[1] - src[1]
    if (dr, dc) not in NEIGHBOR_OFFSETS:
        raise NonAdjacentCells(f"{dst} is not an 8-neighbour of {src}")
    if terrain.unburnable_mask[dst]:
        return 0.0
    p = (
        params.p_h
        * (1.0 + terrain.p_veg[dst])
        * (1.0 + terrain.p_den[dst])
        * wind_factor(params.wind, bearing_deg(dr, dc))
        * float(slope_factor(params.a_slope, _directional_slope(terrain, src, dst)))
    )
    return min(max(p, 0.0), 1.0)


def burn_probability_field(terrain: TerrainLayers, params: CaParams) -> np.ndarray:
    """Vectorised ``burn_probability`` for every (direction, target cell).

    Entry ``[k, r, c]`` is the probability that a burning cell at
    ``(r, c) - NEIGHBOR_OFFSETS[k]`` ignites ``(r, c)``; it is 0 where that
    source would lie off the grid or the target is unburnable.
    """
    h, w = terrain.shape
    base = params.p_h * (1.0 + terrain.p_veg) * (1.0 + terrain.p_den)
    out = np.zeros((len(NEIGHBOR_OFFSETS), h, w))
    for k, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        # targets (r, c) whose source (r - dr, c - dc) is on the grid
        rows = slice(max(dr, 0), h + min(dr, 0))
        cols = slice(max(dc, 0), w + min(dc, 0))
        if terrain.elevation is None:
            slope = terrain.slope_deg[rows, cols]
        else:
            src_rows = slice(max(-dr, 0), h + min(-dr, 0))
            src_cols = slice(max(-dc, 0), w + min(-dc, 0))
            dist = terrain.cell_size * (math.sqrt(2.0) if dr and dc else 1.0)
            rise = terrain.elevation[rows, cols] - terrain.elevation[src_rows, src_cols]
            slope = np.degrees(np.arctan(rise / dist))
        p = base[rows, cols] * wind_factor(params.wind, bearing_deg(dr, dc)) * slope_factor(params.a_slope, slope)
        out[k, rows, cols] = p
    out[:, terrain.unburnable_mask] = 0.0
    return np.clip(out, 0.0, 1.0)


def _shift_sources(burning: np.ndarray) -> np.ndarray:
    """``src[k, r, c]`` is True when ``(r, c) - offset_k`` is burning."""
    h, w = burning.shape
    src = np.zeros((len(NEIGHBOR_OFFSETS), h, w), dtype=bool)
    for k, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        src[k, max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)] = \
            burning[max(-dr, 0):h + min(-dr, 0), max(-dc, 0):w + min(-dc, 0)]
    return src


def step(grid: np.ndarray, terrain: TerrainLayers, params: CaParams, rng: np.random.Generator,
         prob_field: np.ndarray | None = None) -> np.ndarray:
    """Advance the automaton by one synchronous step.

    Exactly ``8 * H * W`` uniforms are drawn per call whatever the grid holds,
    so the stream position depends only on the number of steps taken.
    ``prob_field`` may be passed to skip recomputing ``burn_probability_field``.
    """
    grid = np.asarray(grid)
    if grid.shape != terrain.shape:
        raise DimensionMismatch(f"grid {grid.shape} does not match terrain {terrain.shape}")
    if prob_field is None:
        prob_field = burn_probability_field(terrain, params)
    u = rng.random(prob_field.shape)
    burning = grid == CellState.BURNING
    ignite = ((u < prob_field) & _shift_sources(burning)).any(axis=0)
    ignite &= grid == CellState.UNBURNT
    new = grid.copy()
    new[burning] = CellState.BURNT
    new[ignite] = CellState.BURNING
    return new


def initial_grid(terrain: TerrainLayers, ignition: Iterable) -> np.ndarray:
    h, w = terrain.shape
    grid = np.full((h, w), CellState.UNBURNT, dtype=np.uint8)
    grid[terrain.unburnable_mask] = CellState.UNBURNABLE
    for cell in ignition:
        r, c = _as_rc(cell, w)
        if not (0 <= r < h and 0 <= c < w):
            raise IgnitionOnUnburnable(f"ignition cell {(r, c)} lies outside the grid")
        if terrain.unburnable_mask[r, c]:
            raise IgnitionOnUnburnable(f"ignition cell {(r, c)} is unburnable")
        grid[r, c] = CellState.BURNING
    return grid


@dataclass
class Trajectory:
    """CA states ``s_0 .. s_n`` stacked as an ``(n + 1, H, W)`` uint8 array."""

    states: np.ndarray
    seed: int
    ignition: tuple[tuple[int, int], ...]
    params_hash: str

    @property
    def frames(self) -> np.ndarray:
        from .dataset import binarize
        return binarize(self.states)

    def __len__(self):
        return len(self.states)


def simulate(terrain: TerrainLayers, params: CaParams, ignition: Sequence, n_steps: int = 50,
             seed: int | None = None) -> Trajectory:
    """Run one trajectory of ``n_steps`` steps (``n_steps + 1`` frames).

    The stream is keyed by ``seed`` (``params.seed`` when omitted).
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    seed = params.seed if seed is None else seed
    grid = initial_grid(terrain, ignition)
    rng = make_rng(seed)
    field_ = burn_probability_field(terrain, params)
    states = np.empty((n_steps + 1,) + grid.shape, dtype=np.uint8)
    states[0] = grid
    for i in range(1, n_steps + 1):
        grid = step(grid, terrain, params, rng, field_)
        states[i] = grid
    w = terrain.shape[1]
    return Trajectory(states, int(seed), tuple(_as_rc(c, w) for c in ignition), params.digest())


def run_member(state: np.ndarray, terrain: TerrainLayers, params: CaParams, steps: int,
               rng: np.random.Generator, prob_field: np.ndarray | None = None) -> np.ndarray:
    if prob_field is None:
        prob_field = burn_probability_field(terrain, params)
    grid = np.asarray(state, dtype=np.uint8)
    for _ in range(steps):
        grid = step(grid, terrain, params, rng, prob_field)
    return grid


def ensemble_next(state: np.ndarray, terrain: TerrainLayers, params: CaParams, m: int,
                  steps_per_frame: int = 10, seed: int | None = None, workers: int = 1) -> np.ndarray:
    """Mean binarised outcome of ``m`` independent continuations from ``state``.

    Member ``i`` uses the stream ``make_rng(seed, i)``; the result does not
    depend on ``workers``.
    """
    from .dataset import binarize

    if m < 1:
        raise InvalidEnsembleSize(f"ensemble size must be >= 1, got {m}")
    if steps_per_frame < 1:
        raise ValueError("steps_per_frame must be >= 1")
    state = np.asarray(state, dtype=np.uint8)
    if state.shape != terrain.shape:
        raise DimensionMismatch(f"state {state.shape} does not match terrain {terrain.shape}")
    seed = params.seed if seed is None else seed
    field_ = burn_probability_field(terrain, params)

    def member(i: int) -> np.ndarray:
        final = run_member(state, terrain, params, steps_per_frame, make_rng(seed, i), field_)
        return binarize(final)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = sum(pool.map(member, range(m)), np.zeros(state.shape))
    else:
        counts = np.zeros(state.shape)
        for i in range(m):
            counts += member(i)
    # binary members: the sum is an exact integer count, so the mean is exact
    return counts / m
