"""Observation artifacts consumed by training and evaluation.

Covers distance-biased retention masks, masked two-channel grids, synthetic
ground/aerial measurement sets with the ground-heavy sparsity pattern of
crowdsourced data, evaluation routes, and the voxel rasterizer that turns
point measurements back into network inputs.

Every operation derives its RNG stream from (seed, operation tag), so
concurrent callers sharing a seed cannot perturb each other's draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .geoscene import Scene
from .propsim import GridSpec, RadioMap

NORM_WINDOW_DEFAULT = (-140.0, -40.0)  # dBm span mapped onto [0, 1]
MASK_R1_DEFAULT = 150.0
MASK_R2_DEFAULT = 400.0
MASK_PROBS_DEFAULT = (0.8, 0.2, 0.1)
GROUND_ALTITUDE = 1.5  # handset height above terrain, meters
GROUND_REPORT_SIGMA = 2.0  # dB

# Operation tags for seed derivation.
_TAG_MASK = 1
_TAG_GROUND = 2
_TAG_ROUTES = 3
_TAG_ROUTE_SAMPLES = 4


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag]))


@dataclass
class Mask:
    """Binary retention mask over a voxel grid."""

    dims: tuple[int, int, int]
    bits: np.ndarray  # bool (nx, ny, nz)


@dataclass
class GridSample:
    """Masked observation grid: normalized values plus an observed-bit channel.

    ``values`` is zero wherever ``mask`` is zero; observed entries are RSRP
    normalized to [0, 1] by ``norm`` = (lo, hi) dBm.
    """

    values: np.ndarray  # float64 (nx, ny, nz), in [0, 1] where observed
    mask: np.ndarray  # float64 (nx, ny, nz), 0 or 1
    grid: GridSpec
    norm: tuple[float, float]

    def channels(self) -> np.ndarray:
        """(2, nx, ny, nz) network input: value channel then mask channel."""
        return np.stack([self.values, self.mask], axis=0)


@dataclass(frozen=True)
class Measurement:
    x: float
    y: float
    z: float
    rsrp: float  # dBm
    cell_id: str
    domain: str  # "ground" | "aerial"

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass
class MeasurementSet:
    """Measurements sharing a domain tag; "mixed" unions ground and aerial."""

    measurements: list[Measurement]
    domain: str

    def __post_init__(self):
        if self.domain not in ("ground", "aerial", "mixed"):
            raise ConfigError(f"unknown measurement domain {self.domain!r}")
        for m in self.measurements:
            if self.domain != "mixed" and m.domain != self.domain:
                raise ConfigError("measurement set must be homogeneous in domain")
            if m.domain == "ground" and m.z >= 50.0:
                raise ConfigError(f"ground measurement at altitude {m.z} m (must stay below 50 m)")
            if not math.isfinite(m.rsrp):
                raise ConfigError("non-finite RSRP value")

    def __len__(self) -> int:
        return len(self.measurements)

    def positions(self) -> np.ndarray:
        return np.array([[m.x, m.y, m.z] for m in self.measurements]).reshape(-1, 3)

    def values(self) -> np.ndarray:
        return np.array([m.rsrp for m in self.measurements])

    def for_cell(self, cell_id: str) -> "MeasurementSet":
        return MeasurementSet([m for m in self.measurements if m.cell_id == cell_id], self.domain)


@dataclass
class Route:
    waypoints: np.ndarray  # (k, 3) meters
    sample_spacing: float

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.shape[0] < 2:
            raise ConfigError("route needs at least two waypoints")
        if self.sample_spacing <= 0:
            raise ConfigError("route sample spacing must be positive")

    def points(self) -> np.ndarray:
        """Sample points at fixed arc-length spacing along the polyline."""
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        total = cum[-1]
        n = int(math.floor(total / self.sample_spacing)) + 1
        s = np.arange(n) * self.sample_spacing
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
        frac = np.where(seg_len[idx] > 0, (s - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0), 0.0)
        return self.waypoints[idx] + frac[:, None] * seg[idx]


def retention_probability(
    dist: np.ndarray, r1: float, r2: float, probs: tuple[float, float, float]
) -> np.ndarray:
    """Piecewise-constant retention probability by distance band."""
    p_near, p_mid, p_far = probs
    return np.where(dist <= r1, p_near, np.where(dist <= r2, p_mid, p_far))


def _check_mask_config(r1: float, r2: float, probs: tuple[float, float, float]) -> None:
    if not r1 < r2:
        raise ConfigError(f"mask thresholds need r1 < r2, got {r1} >= {r2}")
    p_near, p_mid, p_far = probs
    if not (0.0 < p_far < p_mid < p_near < 1.0):
        raise ConfigError(f"retention probabilities must satisfy 0 < p_far < p_mid < p_near < 1, got {probs}")


def sample_mask(
    dims: tuple[int, int, int],
    tx_pos,
    r1: float,
    r2: float,
    probs: tuple[float, float, float],
    seed: int,
    grid: GridSpec | None = None,
) -> Mask:
    """Independent per-voxel retention with the band probability at d(v).

    Distances are from voxel centers to ``tx_pos``; ``grid`` supplies the
    geometry (defaults to origin 0, 10 m cells matching ``dims``).
    """
    _check_mask_config(r1, r2, probs)
    if grid is None:
        grid = GridSpec((0.0, 0.0, 0.0), tuple(dims), 10.0)
    centers = grid.centers()
    dist = np.linalg.norm(centers - np.asarray(tx_pos, dtype=float), axis=-1)
    p = retention_probability(dist, r1, r2, probs)
    u = _rng(seed, _TAG_MASK).random(tuple(dims))
    return Mask(tuple(dims), u < p)


def apply_mask(rmap: RadioMap, mask: Mask, norm: tuple[float, float] = NORM_WINDOW_DEFAULT) -> GridSample:
    """Masked, normalized observation grid from a full map."""
    lo, hi = norm
    if not lo < hi:
        raise ConfigError("normalization window needs lo < hi")
    if tuple(mask.dims) != tuple(rmap.grid.dims):
        raise ConfigError(f"mask dims {mask.dims} do not match map dims {rmap.grid.dims}")
    bits = mask.bits.astype(np.float64)
    values = np.clip((rmap.values - lo) / (hi - lo), 0.0, 1.0) * bits
    return GridSample(values, bits, rmap.grid, (lo, hi))


def normalize_rsrp(rsrp, norm: tuple[float, float] = NORM_WINDOW_DEFAULT) -> np.ndarray:
    lo, hi = norm
    return (np.asarray(rsrp, dtype=float) - lo) / (hi - lo)


def denormalize_rsrp(value, norm: tuple[float, float] = NORM_WINDOW_DEFAULT) -> np.ndarray:
    lo, hi = norm
    return np.asarray(value, dtype=float) * (hi - lo) + lo


def synthesize_ground(
    rmap: RadioMap,
    scene: Scene,
    n_samples: int,
    seed: int,
    r1: float = MASK_R1_DEFAULT,
    r2: float = MASK_R2_DEFAULT,
    probs: tuple[float, float, float] = MASK_PROBS_DEFAULT,
    report_sigma: float = GROUND_REPORT_SIGMA,
) -> MeasurementSet:
    """Ground measurement set with a near-transmitter-heavy spatial density.

    Samples sit 1.5 m above terrain at outdoor voxel centers, drawn without
    replacement with probability proportional to the distance-band weights
    around the map's transmitter; readings carry seeded reporting noise.
    """
    if n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    _check_mask_config(r1, r2, probs)
    grid = rmap.grid
    nx, ny, _ = grid.dims
    ox, oy, _ = grid.origin
    cx = ox + (np.arange(nx) + 0.5) * grid.cell_size
    cy = oy + (np.arange(ny) + 0.5) * grid.cell_size
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    elev = np.array([[scene.terrain_elevation(x, y) for y in cy] for x in cx])
    gz = elev + GROUND_ALTITUDE

    outdoor = np.ones((nx, ny), dtype=bool)
    for b in scene.buildings:
        inside = (gx >= b.x0) & (gx <= b.x1) & (gy >= b.y0) & (gy <= b.y1)
        outdoor &= ~inside

    xs, ys, zs = gx[outdoor], gy[outdoor], gz[outdoor]
    if n_samples > xs.size:
        raise ConfigError(f"requested {n_samples} ground samples but only {xs.size} outdoor voxels")

    tx = [t for t in scene.transmitters if t.cell_id == rmap.cell_id]
    if not tx:
        raise ConfigError(f"scene has no transmitter {rmap.cell_id!r}")
    dist = np.linalg.norm(np.stack([xs, ys, zs], axis=1) - tx[0].position[None, :], axis=1)
    w = retention_probability(dist, r1, r2, probs)
    rng = _rng(seed, _TAG_GROUND)
    chosen = rng.choice(xs.size, size=n_samples, replace=False, p=w / w.sum())
    noise = rng.normal(0.0, report_sigma, size=n_samples) if report_sigma > 0 else np.zeros(n_samples)

    points = np.stack([xs[chosen], ys[chosen], zs[chosen]], axis=1)
    rsrp = rmap.value_at(points) + noise
    ms = [
        Measurement(float(p[0]), float(p[1]), float(p[2]), float(v), rmap.cell_id, "ground")
        for p, v in zip(points, rsrp)
    ]
    return MeasurementSet(ms, "ground")


def generate_routes(
    scene: Scene,
    n_routes: int,
    altitude_band: tuple[float, float],
    seed: int,
    sample_spacing: float = 10.0,
    margin_frac: float = 0.08,
) -> list[Route]:
    """Piecewise-linear constant-altitude routes inside the scene extent."""
    lo, hi = altitude_band
    if not (60.0 <= lo <= hi <= 200.0):
        raise ConfigError(f"altitude band {altitude_band} must lie within [60, 200] m")
    rng = _rng(seed, _TAG_ROUTES)
    mx, my = margin_frac * scene.extent_x, margin_frac * scene.extent_y
    routes = []
    for _ in range(n_routes):
        k = int(rng.integers(3, 7))
        alt = rng.uniform(lo, hi)
        pts = np.stack(
            [
                rng.uniform(mx, scene.extent_x - mx, size=k),
                rng.uniform(my, scene.extent_y - my, size=k),
                np.full(k, alt),
            ],
            axis=1,
        )
        routes.append(Route(pts, sample_spacing))
    return routes


def sample_route_measurements(
    target_map: RadioMap,
    routes: list[Route],
    keep_prob: float,
    seed: int,
    max_ratio: float | None = 1e-3,
    ground_count: int | None = None,
) -> MeasurementSet:
    """Sparse aerial samples along routes, capped against the ground set size.

    Route points are kept independently with ``keep_prob``; if both
    ``max_ratio`` and ``ground_count`` are given, a seeded subsample enforces
    count <= max_ratio * ground_count.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError("keep_prob must be in (0, 1]")
    rng = _rng(seed, _TAG_ROUTE_SAMPLES)
    points = []
    for route in routes:
        pts = route.points()
        keep = rng.random(pts.shape[0]) < keep_prob if keep_prob < 1.0 else np.ones(pts.shape[0], bool)
        points.append(pts[keep])
    pts = np.concatenate(points, axis=0) if points else np.zeros((0, 3))

    if max_ratio is not None and ground_count is not None:
        cap = int(math.floor(max_ratio * ground_count))
        if pts.shape[0] > cap:
            idx = np.sort(rng.choice(pts.shape[0], size=cap, replace=False))
            pts = pts[idx]

    rsrp = target_map.value_at(pts) if pts.shape[0] else np.zeros(0)
    ms = [
        Measurement(float(p[0]), float(p[1]), float(p[2]), float(v), target_map.cell_id, "aerial")
        for p, v in zip(pts, rsrp)
    ]
    return MeasurementSet(ms, "aerial")


def rasterize(
    ms: MeasurementSet,
    grid: GridSpec,
    norm: tuple[float, float] = NORM_WINDOW_DEFAULT,
) -> GridSample:
    """Voxelize measurements: per-voxel mean of falling samples, mask where occupied."""
    lo, hi = norm
    if not lo < hi:
        raise ConfigError("normalization window needs lo < hi")
    sums = np.zeros(grid.dims)
    counts = np.zeros(grid.dims)
    if len(ms):
        pos = ms.positions()
        ok = grid.contains(pos)
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise ConfigError(f"measurement {bad} at {pos[bad]} falls outside the grid")
        idx = grid.index_of(pos)
        np.add.at(sums, (idx[:, 0], idx[:, 1], idx[:, 2]), ms.values())
        np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
    mask = (counts > 0).astype(np.float64)
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0)
    values = np.clip((mean - lo) / (hi - lo), 0.0, 1.0) * mask
    return GridSample(values, mask, grid, (lo, hi))


# ---------------------------------------------------------------------------
# Measurement file format: CSV with header x,y,z,cell_id,rsrp_dbm,domain;
# coordinates carry 3 decimals, RSRP 2.  Round-trips exactly at the printed
# precision.
# ---------------------------------------------------------------------------

_MEAS_HEADER = "x,y,z,cell_id,rsrp_dbm,domain"


def save_measurements(ms: MeasurementSet, path) -> None:
    lines = [_MEAS_HEADER]
    for m in ms.measurements:
        lines.append(f"{m.x:.3f},{m.y:.3f},{m.z:.3f},{m.cell_id},{m.rsrp:.2f},{m.domain}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_measurements(path) -> MeasurementSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MEAS_HEADER:
        raise FormatError(f"{path}: expected header {_MEAS_HEADER!r}")
    out = []
    domain = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
        x, y, z, cell_id, rsrp, dom = parts
        if not cell_id:
            raise FormatError(f"{path}: line {lineno}: missing cell_id")
        if dom not in ("ground", "aerial"):
            raise FormatError(f"{path}: line {lineno}: unknown domain {dom!r}")
        try:
            m = Measurement(float(x), float(y), float(z), float(rsrp), cell_id, dom)
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        if domain is None:
            domain = dom
        elif dom != domain:
            raise FormatError(f"{path}: line {lineno}: mixed domains in one file")
        out.append(m)
    if domain is None:
        raise FormatError(f"{path}: no measurements")
    return MeasurementSet(out, domain)
