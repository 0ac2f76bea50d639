"""Deterministic propagation surrogate producing per-transmitter 3-D RSRP grids.

A log-distance model with separate line-of-sight / obstructed exponents,
per-wall penetration loss and an optional spatially correlated shadowing
field.  It replaces an external ray tracer while keeping the structure the
learning task needs: sharp LOS/NLOS boundaries and altitude-dependent LOS
probability.  Everything is seeded and bit-reproducible; the target-domain
shift is emulated by re-simulating with shifted parameters.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError
from .geoscene import Scene, Transmitter

CELL_SIZE_DEFAULT = 10.0  # meters per voxel edge, horizontal and vertical
N_LEVELS_DEFAULT = 20  # 200 m ceiling at the default cell size


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid geometry: origin corner, dims (nx, ny, nz), cubic cell size."""

    origin: tuple[float, float, float]
    dims: tuple[int, int, int]
    cell_size: float

    def centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of voxel center coordinates."""
        o = np.asarray(self.origin)
        axes = [o[k] + (np.arange(self.dims[k]) + 0.5) * self.cell_size for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """Nearest-voxel indices, clipped to the grid. points: (..., 3)."""
        rel = (np.asarray(points, dtype=float) - np.asarray(self.origin)) / self.cell_size
        idx = np.floor(rel).astype(int)
        return np.clip(idx, 0, np.asarray(self.dims) - 1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        rel = (np.asarray(points, dtype=float) - np.asarray(self.origin)) / self.cell_size
        lo = np.all(rel >= 0.0, axis=-1)
        hi = np.all(rel < np.asarray(self.dims), axis=-1)
        return lo & hi


def grid_for_scene(
    scene: Scene, cell_size: float = CELL_SIZE_DEFAULT, n_levels: int = N_LEVELS_DEFAULT
) -> GridSpec:
    nx = int(round(scene.extent_x / cell_size))
    ny = int(round(scene.extent_y / cell_size))
    if nx < 1 or ny < 1 or n_levels < 1:
        raise ConfigError("grid spec would be empty; check extent, cell size, levels")
    return GridSpec((0.0, 0.0, 0.0), (nx, ny, n_levels), cell_size)


@dataclass(frozen=True)
class PropagationParams:
    pl_exponent_los: float = 2.0
    pl_exponent_nlos: float = 3.2
    reference_loss: float = 40.0  # dB at 1 m
    wall_penetration: float = 15.0  # dB per counted wall crossing
    max_counted_walls: int = 3
    shadowing_sigma: float = 0.0  # dB
    shadowing_corr_len: float = 50.0  # meters
    rsrp_floor: float = -140.0  # dBm
    seed: int = 0

    def __post_init__(self):
        if self.pl_exponent_los < 1.5:
            raise ConfigError("pl_exponent_los must be >= 1.5")
        if self.pl_exponent_nlos < self.pl_exponent_los:
            raise ConfigError("pl_exponent_nlos must be >= pl_exponent_los")
        if self.wall_penetration < 0 or self.shadowing_sigma < 0:
            raise ConfigError("wall_penetration and shadowing_sigma must be >= 0")
        if self.rsrp_floor >= -100.0:
            raise ConfigError("rsrp_floor must be below -100 dBm")


def shifted_params(
    params: PropagationParams,
    d_nlos: float = 0.4,
    d_wall: float = 5.0,
    sigma: float = 4.0,
    seed_offset: int = 1,
) -> PropagationParams:
    """Target-domain variant of ``params`` emulating a sim-to-real gap."""
    return replace(
        params,
        pl_exponent_nlos=params.pl_exponent_nlos + d_nlos,
        wall_penetration=params.wall_penetration + d_wall,
        shadowing_sigma=sigma,
        seed=params.seed + seed_offset,
    )


@dataclass
class RadioMap:
    """Per-transmitter RSRP (dBm) on a voxel grid."""

    cell_id: str
    grid: GridSpec
    values: np.ndarray  # (nx, ny, nz) float64, dBm

    def value_at(self, points: np.ndarray) -> np.ndarray:
        idx = self.grid.index_of(points)
        return self.values[idx[..., 0], idx[..., 1], idx[..., 2]]


def trace_occlusion(scene: Scene, a, b, cap: int | None = None) -> int:
    """Count building-surface crossings of segment a->b (symmetric in a, b).

    A box traversed end to end contributes 2 (entry + exit); an endpoint
    inside a box contributes 1 for that box.  ``cap`` optionally truncates
    the count early.
    """
    boxes = scene.building_boxes()
    if boxes.shape[0] == 0:
        return 0
    n = _segment_crossings(boxes, np.asarray(a, float), np.asarray(b, float)[None, :])
    total = int(n[0])
    return total if cap is None else min(total, cap)


def _segment_crossings(boxes: np.ndarray, a: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Surface-crossing counts for segments a->ends[k] against all boxes.

    boxes: (B, 6) [x0 y0 z0 x1 y1 z1]; ends: (V, 3).  Returns (V,) int counts,
    summing per-box endpoint-in-(0,1) indicators of the slab intersection
    interval.  Vectorized over voxels, looped over boxes.
    """
    v = ends.shape[0]
    counts = np.zeros(v, dtype=np.int64)
    d = ends - a[None, :]  # (V, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(boxes.shape[0]):
            lo, hi = boxes[k, :3], boxes[k, 3:]
            t1 = (lo[None, :] - a[None, :]) / d
            t2 = (hi[None, :] - a[None, :]) / d
            # Axis-parallel segments: inside the slab -> (-inf, inf), else empty.
            par = d == 0.0
            if np.any(par):
                inside = (a[None, :] >= lo[None, :]) & (a[None, :] <= hi[None, :])
                t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
                t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
            tmin = np.max(np.minimum(t1, t2), axis=1)
            tmax = np.min(np.maximum(t1, t2), axis=1)
            hit = tmax > tmin
            counts += hit & (tmin > 0.0) & (tmin < 1.0)
            counts += hit & (tmax > 0.0) & (tmax < 1.0)
    return counts


def _shadowing_field(grid: GridSpec, params: PropagationParams, cell_id: str) -> np.ndarray:
    """Correlated shadowing draw (dB), seeded per (params.seed, cell_id)."""
    if params.shadowing_sigma == 0.0:
        return np.zeros(grid.dims)
    ss = np.random.SeedSequence([params.seed & 0xFFFFFFFF, zlib.crc32(cell_id.encode())])
    white = np.random.default_rng(ss).standard_normal(grid.dims)
    smooth = gaussian_filter(white, sigma=params.shadowing_corr_len / grid.cell_size, mode="reflect")
    std = smooth.std()
    if std == 0.0:
        return np.zeros(grid.dims)
    return (smooth - smooth.mean()) / std * params.shadowing_sigma


def compute_radio_map(
    scene: Scene,
    tx: Transmitter,
    params: PropagationParams,
    grid: GridSpec | None = None,
) -> RadioMap:
    """Full RSRP map for one transmitter.

    Per voxel v:  tx_power - reference_loss - 10 n log10(d(v)) -
    wall_penetration * min(walls, max_counted_walls) - shadowing(v),
    with n switching from the LOS to the NLOS exponent as soon as the
    segment tx->v crosses a wall; clamped to [rsrp_floor, tx_power].
    """
    if grid is None:
        grid = grid_for_scene(scene)
    centers = grid.centers().reshape(-1, 3)
    d = np.linalg.norm(centers - tx.position[None, :], axis=1)
    d = np.maximum(d, grid.cell_size / 2.0)  # no singularity at the tx voxel

    boxes = scene.building_boxes()
    if boxes.shape[0]:
        walls = _segment_crossings(boxes, tx.position, centers)
    else:
        walls = np.zeros(centers.shape[0], dtype=np.int64)

    n = np.where(walls == 0, params.pl_exponent_los, params.pl_exponent_nlos)
    rsrp = (
        tx.tx_power
        - params.reference_loss
        - 10.0 * n * np.log10(d)
        - params.wall_penetration * np.minimum(walls, params.max_counted_walls)
    )
    rsrp = rsrp.reshape(grid.dims) - _shadowing_field(grid, params, tx.cell_id)
    np.clip(rsrp, params.rsrp_floor, tx.tx_power, out=rsrp)
    return RadioMap(tx.cell_id, grid, rsrp)


def compute_all(
    scene: Scene,
    params: PropagationParams,
    grid: GridSpec | None = None,
    threads: int = 1,
) -> list[RadioMap]:
    """One map per transmitter, in scene order.

    Transmitters are independent, so the work may be spread over threads;
    the result is identical to the sequential order either way.
    """
    if grid is None:
        grid = grid_for_scene(scene)
    if threads <= 1 or len(scene.transmitters) <= 1:
        return [compute_radio_map(scene, tx, params, grid) for tx in scene.transmitters]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(compute_radio_map, scene, tx, params, grid) for tx in scene.transmitters]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# Radio-map binary format
#
# 64-byte header:
#   magic   "RMAP"            4 bytes
#   version u16 little-endian 2
#   id_len  u16               2
#   cell_id utf-8, zero-padded to 12 bytes
#   origin  3 x f64           24
#   dims    3 x u32           12
#   cell    f64               8
# then nx*ny*nz f32 little-endian values, x-fastest.
# ---------------------------------------------------------------------------

_RMAP_MAGIC = b"RMAP"
_RMAP_VERSION = 1
_RMAP_ID_BYTES = 12
_RMAP_HEADER = struct.Struct("<4sHH12s3d3Id")


def save_radio_map(rmap: RadioMap, path) -> None:
    ident = rmap.cell_id.encode("utf-8")
    if len(ident) > _RMAP_ID_BYTES:
        raise FormatError(f"cell_id {rmap.cell_id!r} exceeds {_RMAP_ID_BYTES} bytes")
    header = _RMAP_HEADER.pack(
        _RMAP_MAGIC,
        _RMAP_VERSION,
        len(ident),
        ident.ljust(_RMAP_ID_BYTES, b"\0"),
        *rmap.grid.origin,
        *rmap.grid.dims,
        rmap.grid.cell_size,
    )
    assert len(header) == 64
    body = np.asarray(rmap.values, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_radio_map(path) -> RadioMap:
    with open(path, "rb") as fh:
        header = fh.read(_RMAP_HEADER.size)
        if len(header) != _RMAP_HEADER.size:
            raise FormatError(f"{path}: truncated radio-map header")
        magic, version, id_len, ident, ox, oy, oz, nx, ny, nz, cell = _RMAP_HEADER.unpack(header)
        if magic != _RMAP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != _RMAP_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if id_len > _RMAP_ID_BYTES:
            raise FormatError(f"{path}: corrupt cell_id length {id_len}")
        body = fh.read(4 * nx * ny * nz)
        if len(body) != 4 * nx * ny * nz:
            raise FormatError(f"{path}: truncated value block")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    grid = GridSpec((ox, oy, oz), (nx, ny, nz), cell)
    return RadioMap(ident[:id_len].decode("utf-8"), grid, values)
