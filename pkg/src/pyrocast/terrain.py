"""Terrain raster I/O and a synthetic terrain generator.

Binary layout (little-endian)::

    b"PCST" | u32 version | u32 H | u32 W | u32 n_layers
    n_layers x ( 16-byte NUL-padded ASCII name | H*W float32, row-major )

Recognised layer names are ``p_veg``, ``p_den``, ``slope_deg``, ``elevation``
and ``unburnable`` (non-zero = unburnable). The text format holds the same
layers as ``[name]`` sections followed by whitespace-separated rows.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .ca import TerrainLayers
from .errors import CorruptFile, VersionMismatch
from .rng import make_rng

MAGIC = b"PCST"
VERSION = 1
NAME_BYTES = 16
LAYER_NAMES = ("p_veg", "p_den", "slope_deg", "elevation", "unburnable")

MPH_TO_MS = 0.44704
# average wind speed per study region, mph
REGION_WIND_MPH = {"chimney": 23.56, "ferguson": 18.54}


def region_wind_speed(region: str) -> float:
    """Average wind speed of a named study region, in m/s."""
    return REGION_WIND_MPH[region.lower()] * MPH_TO_MS


def _layers_of(terrain: TerrainLayers) -> dict[str, np.ndarray]:
    layers = {"p_veg": terrain.p_veg, "p_den": terrain.p_den, "slope_deg": terrain.slope_deg}
    if terrain.elevation is not None:
        layers["elevation"] = terrain.elevation
    layers["unburnable"] = terrain.unburnable_mask.astype(np.float64)
    return layers


def _terrain_from(layers: dict[str, np.ndarray], shape, cell_size: float) -> TerrainLayers:
    unknown = set(layers) - set(LAYER_NAMES)
    if unknown:
        raise CorruptFile(f"unknown terrain layers: {sorted(unknown)}")
    zeros = np.zeros(shape)
    return TerrainLayers(
        p_veg=layers.get("p_veg", zeros),
        p_den=layers.get("p_den", zeros),
        slope_deg=layers.get("slope_deg", zeros),
        elevation=layers.get("elevation"),
        unburnable_mask=layers.get("unburnable", zeros) != 0,
        cell_size=cell_size,
    )


def save_terrain(path, terrain: TerrainLayers) -> None:
    h, w = terrain.shape
    layers = _layers_of(terrain)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", VERSION, h, w, len(layers)))
        for name, data in layers.items():
            f.write(name.encode("ascii").ljust(NAME_BYTES, b"\0"))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_terrain(path, cell_size: float = 1.0) -> TerrainLayers:
    """Load a binary ``PCST`` raster, or the text format for other suffixes."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        return parse_terrain_text(raw.decode("utf-8"), cell_size)
    if len(raw) < 20:
        raise CorruptFile(f"{path}: truncated header")
    version, h, w, n = struct.unpack_from("<4I", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: terrain version {version}, expected {VERSION}")
    plane = 4 * h * w
    if len(raw) != 20 + n * (NAME_BYTES + plane):
        raise CorruptFile(f"{path}: size does not match header")
    layers, off = {}, 20
    for _ in range(n):
        name = raw[off:off + NAME_BYTES].rstrip(b"\0").decode("ascii")
        off += NAME_BYTES
        layers[name] = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w).astype(np.float64)
        off += plane
    return _terrain_from(layers, (h, w), cell_size)


def parse_terrain_text(text: str, cell_size: float = 1.0) -> TerrainLayers:
    """Parse ``[layer]`` sections of whitespace-separated numbers.

    ``#`` starts a comment. All layers must share one shape.
    """
    layers: dict[str, list[list[float]]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            layers[current] = []
            continue
        if current is None:
            raise CorruptFile(f"line {lineno}: values before the first [layer] header")
        try:
            layers[current].append([float(v) for v in line.split()])
        except ValueError as exc:
            raise CorruptFile(f"line {lineno}: {exc}") from None
    if not layers:
        raise CorruptFile("no terrain layers found")
    arrays = {}
    for name, rows in layers.items():
        if not rows or len({len(r) for r in rows}) != 1:
            raise CorruptFile(f"layer {name!r} is empty or ragged")
        arrays[name] = np.array(rows)
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1:
        raise CorruptFile(f"layers disagree on shape: {sorted(shapes)}")
    return _terrain_from(arrays, shapes.pop(), cell_size)


def format_terrain_text(terrain: TerrainLayers) -> str:
    out = []
    for name, data in _layers_of(terrain).items():
        out.append(f"[{name}]")
        out.extend(" ".join(repr(float(v)) for v in row) for row in data)
    return "\n".join(out) + "\n"


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    f -= f.mean()
    std = f.std()
    return f / std if std > 0 else f


def synthetic_terrain(height: int = 64, width: int = 64, seed: int = 0, *, veg_range=(-0.4, 0.3),
                      den_range=(-0.4, 0.3), relief: float = 1.0, unburnable_fraction: float = 0.05,
                      correlation: float = 4.0, cell_size: float = 1.0) -> TerrainLayers:
    """Spatially correlated random terrain, a stand-in for real rasters.

    ``relief`` is the elevation standard deviation in units of ``cell_size``;
    the lowest ``unburnable_fraction`` of an independent smooth field is
    marked unburnable (think lakes and rock outcrops).
    """
    rng = make_rng(seed, 0x7E44)
    shape = (height, width)

    def scaled(lo, hi):
        z = _smooth_field(rng, shape, correlation)
        return lo + (hi - lo) * (np.tanh(z) + 1.0) / 2.0

    p_veg = scaled(*veg_range)
    p_den = scaled(*den_range)
    elevation = _smooth_field(rng, shape, 2 * correlation) * relief * cell_size
    gy, gx = np.gradient(elevation, cell_size)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    water = _smooth_field(rng, shape, correlation)
    mask = np.zeros(shape, dtype=bool)
    if unburnable_fraction > 0:
        mask = water <= np.quantile(water, unburnable_fraction)
    return TerrainLayers(p_veg, p_den, slope, elevation, mask, cell_size)
