"""Route-level RMSE protocol, method comparison, ablation harness, figure data.

Ground truth on the synthetic benchmark is the shifted-parameter target map
sampled along each route.  Reports carry per-route errors alongside the
best/mean/worst aggregates so statistical checks do not need to re-run
anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .baselines import AutoencoderBaseline, GpInterpolator, KrigingInterpolator
from .datasets import MeasurementSet, Route
from .errors import ConfigError
from .pipeline import Benchmark, TrainConfig, predict_route, run_pipeline
from .propsim import RadioMap


def route_rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Root mean square error between two dB profiles of equal length."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape or pred.size == 0:
        raise ConfigError(f"profile shapes differ or empty: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def aggregate(per_route: list[float]) -> tuple[float, float, float]:
    """(best, mean, worst) = (min, arithmetic mean, max)."""
    if not per_route:
        raise ConfigError("cannot aggregate an empty RMSE list")
    arr = np.asarray(per_route, dtype=float)
    return float(arr.min()), float(arr.mean()), float(arr.max())


def improvement_pct(ours_mean: float, baseline_mean: float) -> float:
    """Relative error reduction of ours against a baseline, in percent."""
    if baseline_mean <= 0:
        raise ConfigError("baseline mean must be positive")
    return 100.0 * (baseline_mean - ours_mean) / baseline_mean


@dataclass
class RouteReport:
    method: str
    per_route: list[float]

    def __post_init__(self):
        if any(r < 0 or not math.isfinite(r) for r in self.per_route):
            raise ConfigError("route RMSE values must be finite and non-negative")

    @property
    def best(self) -> float:
        return aggregate(self.per_route)[0]

    @property
    def mean(self) -> float:
        return aggregate(self.per_route)[1]

    @property
    def worst(self) -> float:
        return aggregate(self.per_route)[2]

    @property
    def route_count(self) -> int:
        return len(self.per_route)


def truth_profile(bench: Benchmark, route_index: int) -> np.ndarray:
    """Target-domain map values along a benchmark route (the evaluation truth)."""
    cell = bench.route_cells[route_index]
    return bench.maps_tgt[cell].value_at(bench.routes[route_index].points())


def merged_training_set(bench: Benchmark, cell: str) -> MeasurementSet:
    """Ground plus aerial measurements of one cell: the baselines' budget."""
    return MeasurementSet(
        bench.ground[cell].measurements + bench.aerial[cell].measurements, "mixed"
    )


def _baseline_xy(bench: Benchmark, cell: str) -> tuple[np.ndarray, np.ndarray]:
    ms = merged_training_set(bench, cell)
    pos = np.array([[m.x, m.y, m.z] for m in ms.measurements])
    vals = np.array([m.rsrp for m in ms.measurements])
    return pos, vals


def evaluate_pipeline(bench: Benchmark, cfg: TrainConfig, stage_cache: dict | None = None,
                      method: str = "proposed") -> RouteReport:
    """Train the configured stages and score every benchmark route."""
    model, _ = run_pipeline(bench, cfg, stage_cache)
    per_route = []
    for r, route in enumerate(bench.routes):
        cell = bench.route_cells[r]
        pred = predict_route(model, bench.ground[cell], route, cell, bench.grid)
        per_route.append(route_rmse(pred, truth_profile(bench, r)))
    return RouteReport(method, per_route)


def evaluate_kriging(bench: Benchmark, seed: int = 0) -> RouteReport:
    per_route = []
    fitted: dict[str, KrigingInterpolator] = {}
    for r, route in enumerate(bench.routes):
        cell = bench.route_cells[r]
        if cell not in fitted:
            fitted[cell] = KrigingInterpolator(seed=seed).fit(*_baseline_xy(bench, cell))
        pred = fitted[cell].predict(route.points())
        per_route.append(route_rmse(pred, truth_profile(bench, r)))
    return RouteReport("kriging", per_route)


def evaluate_gp(bench: Benchmark, seed: int = 0) -> RouteReport:
    per_route = []
    fitted: dict[str, GpInterpolator] = {}
    for r, route in enumerate(bench.routes):
        cell = bench.route_cells[r]
        if cell not in fitted:
            fitted[cell] = GpInterpolator(seed=seed).fit(*_baseline_xy(bench, cell))
        pred = fitted[cell].predict(route.points())
        per_route.append(route_rmse(pred, truth_profile(bench, r)))
    return RouteReport("gp", per_route)


def evaluate_autoencoder(bench: Benchmark, cfg: TrainConfig) -> RouteReport:
    ae = AutoencoderBaseline(
        bench.grid, bench.cells, bench.norm,
        base_channels=cfg.base_channels, depth=cfg.depth,
        lr=cfg.lr_pretrain, epochs=cfg.epochs_finetune, seed=cfg.seed,
    )
    ae.fit(bench.ground, bench.aerial)
    per_route = []
    for r, route in enumerate(bench.routes):
        cell = bench.route_cells[r]
        pred = ae.predict_profile(bench.ground, route, cell)
        per_route.append(route_rmse(pred, truth_profile(bench, r)))
    return RouteReport("autoencoder", per_route)


def comparison_suite(bench: Benchmark, cfg: TrainConfig,
                     stage_cache: dict | None = None) -> list[RouteReport]:
    """All four methods on identical data: the method-comparison table."""
    return [
        evaluate_kriging(bench, cfg.seed),
        evaluate_gp(bench, cfg.seed),
        evaluate_autoencoder(bench, cfg),
        evaluate_pipeline(bench, cfg, stage_cache),
    ]


ABLATION_ROWS: tuple[dict, ...] = (
    {"pretrain": True, "adda": True, "finetune": True, "dual_cell": True},
    {"pretrain": True, "adda": False, "finetune": True, "dual_cell": True},
    {"pretrain": True, "adda": True, "finetune": False, "dual_cell": True},
    {"pretrain": True, "adda": True, "finetune": True, "dual_cell": False},
    {"pretrain": False, "adda": False, "finetune": True, "dual_cell": True},
    {"pretrain": True, "adda": False, "finetune": False, "dual_cell": True},
)


def row_label(toggles: dict) -> str:
    marks = ["y" if toggles[k] else "n" for k in ("pretrain", "adda", "finetune", "dual_cell")]
    return "pre={} adda={} fine={} dual={}".format(*marks)


@dataclass
class AblationRow:
    toggles: dict
    report: RouteReport


def ablation_suite(bench: Benchmark, cfg: TrainConfig,
                   rows: tuple[dict, ...] = ABLATION_ROWS,
                   stage_cache: dict | None = None) -> list[AblationRow]:
    """One report per toggle row, identical data and seeds throughout.

    Rows differ from the base config only in the four stage toggles; the
    returned toggles dict doubles as the config diff.
    """
    if stage_cache is None:
        stage_cache = {}
    seen = set()
    out = []
    for toggles in rows:
        key = tuple(sorted(toggles.items()))
        if key in seen:
            raise ConfigError(f"duplicate ablation row {toggles}")
        seen.add(key)
        row_cfg = replace(cfg, **toggles)
        report = evaluate_pipeline(bench, row_cfg, stage_cache, method=row_label(toggles))
        out.append(AblationRow(dict(toggles), report))
    return out


# ---------------------------------------------------------------------------
# Report and figure-data files
# ---------------------------------------------------------------------------


def save_route_reports(reports: list[RouteReport], path, config_digest: str = "", seed: int = 0) -> None:
    lines = ["route-report 1", f"config_digest {config_digest}", f"seed {seed}"]
    for rep in reports:
        lines.append(f"method {rep.method}")
        lines.append(f"routes {rep.route_count}")
        lines.append("route,rmse_db")
        for r, v in enumerate(rep.per_route):
            lines.append(f"{r},{v!r}")
        best, mean, worst = aggregate(rep.per_route)
        lines.append(f"aggregate {best!r} {mean!r} {worst!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_route_reports(path) -> list[RouteReport]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "route-report 1":
        raise ConfigError(f"{path}: not a route report file")
    reports = []
    i = 3
    while i < len(lines):
        method = lines[i].split(" ", 1)[1]
        n = int(lines[i + 1].split(" ", 1)[1])
        vals = [float(lines[i + 3 + k].split(",")[1]) for k in range(n)]
        reports.append(RouteReport(method, vals))
        i += n + 4
    return reports


def emit_profile(route: Route, pred: np.ndarray, truth: np.ndarray, path) -> None:
    """Plot-ready CSV: arc length, predicted dBm, true dBm per route point.

    Values are written with full precision so the truth column matches the
    RMSE inputs bit for bit.
    """
    pts = route.points()
    if len(pred) != pts.shape[0] or len(truth) != pts.shape[0]:
        raise ConfigError("profile lengths do not match the route sampling")
    arc = np.arange(pts.shape[0]) * route.sample_spacing
    lines = ["arc_length_m,pred_dbm,truth_dbm"]
    for s, p, t in zip(arc, pred, truth):
        lines.append(f"{float(s)!r},{float(p)!r},{float(t)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_slice(rmap: RadioMap, level: int, path) -> None:
    """Horizontal dBm slice of a map at one altitude level, as CSV rows over y."""
    nz = rmap.grid.dims[2]
    if not 0 <= level < nz:
        raise ConfigError(f"altitude level {level} outside [0, {nz})")
    sl = rmap.values[:, :, level]
    lines = [",".join(repr(float(v)) for v in sl[:, j]) for j in range(sl.shape[1])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
