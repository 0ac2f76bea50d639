"""Urban scene model: terrain heightfield, axis-aligned buildings, transmitters.

Scenes are either generated procedurally (seeded, deterministic) or ingested
from a plain-text scene file.  Buildings are axis-aligned boxes sitting on the
terrain, which keeps segment occlusion queries exact and cheap.  The module
also derives the adjacent-transmitter pair set consumed by the dual-stream
network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

TX_MAST_HEIGHT_DEFAULT = 25.0  # typical urban macro-cell mast, meters
ADJACENCY_MAX_DIST_DEFAULT = 600.0


@dataclass(frozen=True)
class Building:
    """Axis-aligned rectangular footprint with a height above local terrain."""

    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    def validate(self, index: int | None = None) -> None:
        tag = "" if index is None else f" (building {index})"
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise FormatError(f"degenerate footprint{tag}: need x0 < x1 and y0 < y1")
        if self.height < 0:
            raise FormatError(f"negative building height{tag}")


@dataclass(frozen=True)
class Transmitter:
    cell_id: str
    x: float
    y: float
    z: float
    tx_power: float  # dBm
    frequency: float  # GHz

    def validate(self) -> None:
        if not (0.0 <= self.tx_power <= 60.0):
            raise FormatError(f"tx_power {self.tx_power} dBm outside [0, 60] for {self.cell_id}")
        if not (0.4 < self.frequency < 6.0):
            raise FormatError(f"frequency {self.frequency} GHz outside (0.4, 6.0) for {self.cell_id}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass
class Scene:
    """A rectangular world with terrain, buildings and transmitters.

    ``terrain`` holds elevations in meters on a regular grid with node
    spacing ``terrain_spacing``;  node (i, j) sits at (i*spacing, j*spacing).
    """

    extent_x: float
    extent_y: float
    terrain: np.ndarray
    terrain_spacing: float
    buildings: list[Building] = field(default_factory=list)
    transmitters: list[Transmitter] = field(default_factory=list)

    def validate(self) -> None:
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise FormatError("scene extent must be positive")
        if not np.all(np.isfinite(self.terrain)):
            raise FormatError("terrain contains non-finite elevations")
        for i, b in enumerate(self.buildings):
            b.validate(i)
            if b.x0 < 0 or b.y0 < 0 or b.x1 > self.extent_x or b.y1 > self.extent_y:
                raise FormatError(f"building {i} footprint exceeds scene extent")
        if not self.transmitters:
            raise FormatError("at least one transmitter required")
        for tx in self.transmitters:
            tx.validate()
            if not (0 <= tx.x <= self.extent_x and 0 <= tx.y <= self.extent_y):
                raise FormatError(f"transmitter {tx.cell_id} outside scene extent")
            if tx.z < self.terrain_elevation(tx.x, tx.y):
                raise FormatError(f"transmitter {tx.cell_id} below terrain")

    def terrain_elevation(self, x: float, y: float) -> float:
        """Bilinear terrain elevation at (x, y), clamped to the grid."""
        t = self.terrain
        gx = np.clip(x / self.terrain_spacing, 0.0, t.shape[0] - 1.0)
        gy = np.clip(y / self.terrain_spacing, 0.0, t.shape[1] - 1.0)
        i0, j0 = int(gx), int(gy)
        i1, j1 = min(i0 + 1, t.shape[0] - 1), min(j0 + 1, t.shape[1] - 1)
        fx, fy = gx - i0, gy - j0
        top = t[i0, j0] * (1 - fx) + t[i1, j0] * fx
        bot = t[i0, j1] * (1 - fx) + t[i1, j1] * fx
        return float(top * (1 - fy) + bot * fy)

    def building_boxes(self) -> np.ndarray:
        """Buildings as an (n, 6) array of [x0, y0, z0, x1, y1, z1] boxes.

        The base elevation is the terrain at the footprint center.
        """
        if not self.buildings:
            return np.zeros((0, 6))
        rows = []
        for b in self.buildings:
            base = self.terrain_elevation(0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1))
            rows.append([b.x0, b.y0, base, b.x1, b.y1, base + b.height])
        return np.asarray(rows, dtype=float)


@dataclass(frozen=True)
class AdjacencySet:
    """Unordered transmitter index pairs within the adjacency radius.

    ``pairs`` stores each pair once as (i, j) with i < j; ``unpaired``
    reports transmitters that ended up in no pair.
    """

    pairs: frozenset[tuple[int, int]]
    unpaired: tuple[int, ...]


@dataclass
class SceneConfig:
    extent_x: float = 1000.0
    extent_y: float = 1000.0
    n_buildings: int = 80
    building_side_min: float = 15.0
    building_side_max: float = 60.0
    building_height_min: float = 8.0
    building_height_max: float = 35.0
    n_transmitters: int = 10
    tx_min_separation: float = 120.0
    mast_height_min: float = TX_MAST_HEIGHT_DEFAULT
    mast_height_max: float = TX_MAST_HEIGHT_DEFAULT
    tx_power: float = 30.0
    frequency: float = 2.6
    terrain_spacing: float = 100.0
    terrain_amplitude: float = 0.0  # sinusoidal relief, 0 keeps the ground flat
    terrain_period: float = 500.0

    def validate(self) -> None:
        if min(self.extent_x, self.extent_y) < 100.0:
            raise ConfigError("scene extent must be at least 100 m")
        if self.n_buildings < 0 or self.n_transmitters < 1:
            raise ConfigError("need n_buildings >= 0 and n_transmitters >= 1")
        if self.building_side_min <= 0 or self.building_side_max < self.building_side_min:
            raise ConfigError("invalid building side range")
        if self.mast_height_max < self.mast_height_min or self.mast_height_min < 0:
            raise ConfigError("invalid mast height range")


_PLACEMENT_RETRIES = 2000


def generate_scene(seed: int, cfg: SceneConfig) -> Scene:
    """Procedurally generate a scene; bit-identical for a fixed (seed, cfg)."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))

    nx = int(math.floor(cfg.extent_x / cfg.terrain_spacing)) + 1
    ny = int(math.floor(cfg.extent_y / cfg.terrain_spacing)) + 1
    xs = np.arange(nx) * cfg.terrain_spacing
    ys = np.arange(ny) * cfg.terrain_spacing
    if cfg.terrain_amplitude > 0:
        terrain = cfg.terrain_amplitude * (
            np.sin(2 * np.pi * xs[:, None] / cfg.terrain_period)
            * np.cos(2 * np.pi * ys[None, :] / cfg.terrain_period)
            + 1.0
        )
    else:
        terrain = np.zeros((nx, ny))

    buildings: list[Building] = []
    tries = 0
    while len(buildings) < cfg.n_buildings:
        if tries >= _PLACEMENT_RETRIES:
            raise ConfigError(
                f"could not place {cfg.n_buildings} buildings within the retry budget "
                f"(placed {len(buildings)})"
            )
        tries += 1
        w = rng.uniform(cfg.building_side_min, cfg.building_side_max)
        d = rng.uniform(cfg.building_side_min, cfg.building_side_max)
        x0 = rng.uniform(0.0, cfg.extent_x - w)
        y0 = rng.uniform(0.0, cfg.extent_y - d)
        cand = Building(x0, y0, x0 + w, y0 + d, rng.uniform(cfg.building_height_min, cfg.building_height_max))
        if any(_footprints_overlap(cand, b) for b in buildings):
            continue
        buildings.append(cand)

    scene = Scene(cfg.extent_x, cfg.extent_y, terrain, cfg.terrain_spacing, buildings, [])

    transmitters: list[Transmitter] = []
    tries = 0
    margin = 0.05 * min(cfg.extent_x, cfg.extent_y)
    while len(transmitters) < cfg.n_transmitters:
        if tries >= _PLACEMENT_RETRIES:
            raise ConfigError("could not place transmitters within the retry budget")
        tries += 1
        x = rng.uniform(margin, cfg.extent_x - margin)
        y = rng.uniform(margin, cfg.extent_y - margin)
        if any(math.hypot(x - t.x, y - t.y) < cfg.tx_min_separation for t in transmitters):
            continue
        mast = rng.uniform(cfg.mast_height_min, cfg.mast_height_max)
        z = scene.terrain_elevation(x, y) + mast
        transmitters.append(
            Transmitter(f"tx{len(transmitters):02d}", x, y, z, cfg.tx_power, cfg.frequency)
        )

    scene.transmitters = transmitters
    scene.validate()
    return scene


def _footprints_overlap(a: Building, b: Building) -> bool:
    return a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1


def build_adjacency(scene: Scene, max_dist: float = ADJACENCY_MAX_DIST_DEFAULT) -> AdjacencySet:
    """Pair transmitters whose horizontal distance is at most ``max_dist``."""
    if max_dist <= 0:
        raise ConfigError("max_dist must be positive")
    txs = scene.transmitters
    pairs = set()
    for i in range(len(txs)):
        for j in range(i + 1, len(txs)):
            if math.hypot(txs[i].x - txs[j].x, txs[i].y - txs[j].y) <= max_dist:
                pairs.add((i, j))
    paired = {i for p in pairs for i in p}
    unpaired = tuple(i for i in range(len(txs)) if i not in paired)
    return AdjacencySet(frozenset(pairs), unpaired)


def matched_pairs(scene: Scene, adj: AdjacencySet) -> list[tuple[int, int]]:
    """Greedy min-distance perfect-ish matching over the adjacency pairs.

    Returns disjoint pairs so each transmitter feeds exactly one dual-stream
    sample; leftover transmitters are simply not matched (they are excluded
    from dual-stream training).
    """
    txs = scene.transmitters
    ranked = sorted(
        adj.pairs,
        key=lambda p: (math.hypot(txs[p[0]].x - txs[p[1]].x, txs[p[0]].y - txs[p[1]].y), p),
    )
    used: set[int] = set()
    out: list[tuple[int, int]] = []
    for i, j in ranked:
        if i in used or j in used:
            continue
        used.update((i, j))
        out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# Scene file format
#
# Plain text, fixed section order:
#   scene-file 1
#   extent <x> <y>
#   terrain <nx> <ny> <spacing>
#   <ny rows of nx elevations, row-major over y>
#   buildings <count>
#   <x0 y0 x1 y1 height> per line
#   transmitters <count>
#   <cell_id x y z tx_power frequency> per line
#
# Floats are written with repr(), i.e. shortest exact decimal (>= 9
# significant digits where needed), so write -> read -> write is
# byte-identical.
# ---------------------------------------------------------------------------

_SCENE_MAGIC = "scene-file 1"


def save_scene(scene: Scene, path) -> None:
    scene.validate()

    def f(v) -> str:  # shortest exact decimal; round-trips bit-exactly
        return repr(float(v))

    lines = [_SCENE_MAGIC]
    lines.append(f"extent {f(scene.extent_x)} {f(scene.extent_y)}")
    t = scene.terrain
    lines.append(f"terrain {t.shape[0]} {t.shape[1]} {f(scene.terrain_spacing)}")
    for j in range(t.shape[1]):
        lines.append(" ".join(f(v) for v in t[:, j]))
    lines.append(f"buildings {len(scene.buildings)}")
    for b in scene.buildings:
        lines.append(f"{f(b.x0)} {f(b.y0)} {f(b.x1)} {f(b.y1)} {f(b.height)}")
    lines.append(f"transmitters {len(scene.transmitters)}")
    for tx in scene.transmitters:
        lines.append(f"{tx.cell_id} {f(tx.x)} {f(tx.y)} {f(tx.z)} {f(tx.tx_power)} {f(tx.frequency)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0
        self.path = path

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.lines):
            raise FormatError(f"{self.path}: unexpected end of file, expected {what}")
        self.pos += 1
        return self.pos, self.lines[self.pos - 1]


def _parse_floats(line: str, n: int, lineno: int, what: str) -> list[float]:
    parts = line.split()
    if len(parts) != n:
        raise FormatError(f"line {lineno}: expected {n} fields for {what}, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: bad number in {what}: {exc}") from None


def ingest_scene(path) -> Scene:
    """Read a scene file; inverse of :func:`save_scene`."""
    rd = _LineReader(path)
    lineno, line = rd.next("header")
    if line.strip() != _SCENE_MAGIC:
        raise FormatError(f"line {lineno}: not a scene file (bad header {line!r})")

    lineno, line = rd.next("extent")
    parts = line.split()
    if len(parts) != 3 or parts[0] != "extent":
        raise FormatError(f"line {lineno}: expected 'extent <x> <y>'")
    extent_x, extent_y = float(parts[1]), float(parts[2])

    lineno, line = rd.next("terrain header")
    parts = line.split()
    if len(parts) != 4 or parts[0] != "terrain":
        raise FormatError(f"line {lineno}: expected 'terrain <nx> <ny> <spacing>'")
    nx, ny, spacing = int(parts[1]), int(parts[2]), float(parts[3])
    terrain = np.zeros((nx, ny))
    for j in range(ny):
        lineno, line = rd.next(f"terrain row {j}")
        terrain[:, j] = _parse_floats(line, nx, lineno, f"terrain row {j}")

    lineno, line = rd.next("buildings header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "buildings":
        raise FormatError(f"line {lineno}: expected 'buildings <count>'")
    buildings = []
    for i in range(int(parts[1])):
        lineno, line = rd.next(f"building {i}")
        v = _parse_floats(line, 5, lineno, f"building {i}")
        b = Building(*v)
        try:
            b.validate(i)
        except FormatError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        buildings.append(b)

    lineno, line = rd.next("transmitters header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "transmitters":
        raise FormatError(f"line {lineno}: expected 'transmitters <count>'")
    n_tx = int(parts[1])
    if n_tx < 1:
        raise FormatError(f"line {lineno}: at least one transmitter required")
    transmitters = []
    for i in range(n_tx):
        lineno, line = rd.next(f"transmitter {i}")
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields for transmitter {i}")
        vals = _parse_floats(" ".join(parts[1:]), 5, lineno, f"transmitter {i}")
        transmitters.append(Transmitter(parts[0], *vals))

    scene = Scene(extent_x, extent_y, terrain, spacing, buildings, transmitters)
    scene.validate()
    return scene
