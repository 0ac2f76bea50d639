"""Command-line driver chaining every stage into reproducible runs.

Each subcommand reads its prerequisites from the run directory, writes its
artifact under a fixed name, and updates ``manifest.json``.  All outputs are
byte-reproducible from the manifest's config echo and seed; wall-clock data
never lands in artifacts.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical divergence, 5 file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    benchmark_config,
    canonical_lines,
    config_digest,
    load_config,
    scene_config,
    train_config,
)
from .datasets import (
    MeasurementSet,
    Route,
    load_measurements,
    save_measurements,
)
from .errors import ConfigError, DivergenceError, FormatError, MissingArtifactError
from .evaluate import (
    ABLATION_ROWS,
    ablation_suite,
    aggregate,
    comparison_suite,
    emit_profile,
    emit_slice,
    evaluate_autoencoder,
    evaluate_gp,
    evaluate_kriging,
    improvement_pct,
    row_label,
    save_route_reports,
    truth_profile,
)
from .geoscene import build_adjacency, generate_scene, ingest_scene, matched_pairs, save_scene
from .neural.model import SOURCE_ENCODER, TARGET_ENCODER, DualTxModel, load_model, save_model
from .pipeline import (
    Benchmark,
    adapt,
    adaptation_inputs,
    build_pair_samples,
    domain_probe_accuracy,
    finetune,
    finetune_samples,
    predict_route,
    pretrain,
    save_report,
)
from .propsim import compute_all, grid_for_scene, load_radio_map, save_radio_map, shifted_params
from .config import prop_params

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
EXIT_FORMAT = 5


# ---------------------------------------------------------------------------
# Run directory layout and manifest
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, root: Path, cfg: dict):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        for sub in ("maps", "data", "models", "reports", "figures"):
            (self.root / sub).mkdir(exist_ok=True)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifactError(
                f"missing {rel}; run `routecast {producer}` in this run directory first"
            )
        return p

    # - manifest -

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def _lock(self):
        return _ManifestLock(self.root / "manifest.lock")

    def read_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"tool_version": __version__, "stages": {}, "artifacts": {}}

    def update_manifest(self, stage: str, artifacts: list[str]) -> None:
        with self._lock():
            m = self.read_manifest()
            m["tool_version"] = __version__
            m["config_digest"] = config_digest(self.cfg)
            m["config"] = canonical_lines(self.cfg)
            m["seed"] = self.cfg["run.seed"]
            m["stages"][stage] = True
            for a in sorted(artifacts):
                m["artifacts"][a] = True
            self.manifest_path.write_text(json.dumps(m, sort_keys=True, indent=2) + "\n")

    def stage_done(self, stage: str) -> bool:
        return bool(self.read_manifest()["stages"].get(stage))


class _ManifestLock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"{self.path} exists: another command is writing this run directory"
            ) from None
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


# ---------------------------------------------------------------------------
# Routes file: waypoints plus the serving cell per route
# ---------------------------------------------------------------------------


def save_routes(routes: list[Route], cells: list[str], path) -> None:
    lines = ["routes-file 1", f"routes {len(routes)}"]
    for route, cell in zip(routes, cells):
        lines.append(f"route {route.waypoints.shape[0]} {route.sample_spacing!r} {cell}")
        for wp in route.waypoints:
            lines.append(f"{wp[0]!r} {wp[1]!r} {wp[2]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_routes(path) -> tuple[list[Route], list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "routes-file 1":
        raise FormatError(f"{path}: not a routes file")
    n = int(lines[1].split()[1])
    routes, cells = [], []
    i = 2
    for _ in range(n):
        parts = lines[i].split()
        if parts[0] != "route" or len(parts) != 4:
            raise FormatError(f"{path}: line {i + 1}: expected 'route <k> <spacing> <cell>'")
        k, spacing, cell = int(parts[1]), float(parts[2]), parts[3]
        wps = [[float(v) for v in lines[i + 1 + j].split()] for j in range(k)]
        routes.append(Route(np.asarray(wps), spacing))
        cells.append(cell)
        i += 1 + k
    return routes, cells


# ---------------------------------------------------------------------------
# Benchmark reconstruction from run-dir artifacts
# ---------------------------------------------------------------------------


def _load_maps(run: RunDir, kind: str) -> dict:
    out = {}
    for p in sorted(run.path("maps").glob(f"{kind}_*.rmap")):
        m = load_radio_map(p)
        out[m.cell_id] = m
    if not out:
        raise MissingArtifactError(f"no {kind} maps found; run `routecast simulate` first")
    return out


def _split_by_cell(ms: MeasurementSet, cells: list[str], domain: str) -> dict:
    return {c: MeasurementSet([m for m in ms.measurements if m.cell_id == c], domain) for c in cells}


def load_benchmark(run: RunDir) -> Benchmark:
    cfg = run.cfg
    scene = ingest_scene(run.require("scene.txt", "gen-scene"))
    grid = grid_for_scene(scene, cfg["prop.cell_size"], cfg["prop.n_levels"])
    maps_src = _load_maps(run, "src")
    maps_tgt = _load_maps(run, "tgt")
    adj = build_adjacency(scene, cfg["scene.adjacency_max_dist"])
    pairs = [
        (scene.transmitters[i].cell_id, scene.transmitters[j].cell_id)
        for i, j in matched_pairs(scene, adj)
    ]
    cells = sorted(maps_tgt)
    ground = _split_by_cell(load_measurements(run.require("data/ground.csv", "make-dataset")), cells, "ground")
    aerial = _split_by_cell(load_measurements(run.require("data/aerial.csv", "make-dataset")), cells, "aerial")
    routes, route_cells = load_routes(run.require("data/routes.txt", "make-dataset"))
    return Benchmark(scene, grid, maps_src, maps_tgt, pairs, ground, aerial, routes, route_cells,
                     (cfg["data.norm_lo"], cfg["data.norm_hi"]))


def _model_for_stage(run: RunDir, tcfg) -> tuple[DualTxModel, str]:
    """Latest checkpoint consistent with the stage toggles, else a fresh model."""
    if tcfg.finetune and run.path("models/final.dtxm").exists():
        return load_model(run.path("models/final.dtxm")), "final"
    if tcfg.adda and run.path("models/adapt.dtxm").exists():
        return load_model(run.path("models/adapt.dtxm")), "adapt"
    if tcfg.pretrain and run.path("models/pretrain.dtxm").exists():
        return load_model(run.path("models/pretrain.dtxm")), "pretrain"
    bench = load_benchmark(run)
    model = DualTxModel.create(tcfg.arch(), bench.norm, bench.pairs, tcfg.seed)
    return model, "init"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(run: RunDir, args) -> None:
    scene = generate_scene(run.cfg["run.seed"], scene_config(run.cfg))
    save_scene(scene, run.path("scene.txt"))
    run.update_manifest("gen-scene", ["scene.txt"])
    print(f"scene: {len(scene.buildings)} buildings, {len(scene.transmitters)} transmitters")


def cmd_simulate(run: RunDir, args) -> None:
    from dataclasses import replace as _replace

    cfg = run.cfg
    scene = ingest_scene(run.require("scene.txt", "gen-scene"))
    grid = grid_for_scene(scene, cfg["prop.cell_size"], cfg["prop.n_levels"])
    from .pipeline import _sub_seed

    prop_src = _replace(prop_params(cfg), seed=_sub_seed(cfg["run.seed"], 41))
    prop_tgt = shifted_params(prop_src, cfg["prop.shift_nlos"], cfg["prop.shift_wall"], cfg["prop.shift_sigma"])
    wrote = []
    for kind, prop in (("src", prop_src), ("tgt", prop_tgt)):
        for rmap in compute_all(scene, prop, grid, threads=args.threads):
            rel = f"maps/{kind}_{rmap.cell_id}.rmap"
            save_radio_map(rmap, run.path(rel))
            wrote.append(rel)
    run.update_manifest("simulate", wrote)
    print(f"simulated {len(wrote)} maps on a {grid.dims} grid")


def cmd_make_dataset(run: RunDir, args) -> None:
    from .datasets import generate_routes, sample_route_measurements, synthesize_ground
    from .pipeline import _sub_seed

    cfg = run.cfg
    seed = cfg["run.seed"]
    scene = ingest_scene(run.require("scene.txt", "gen-scene"))
    maps_tgt = _load_maps(run, "tgt")
    cells = sorted(maps_tgt)

    ground_all = []
    ground_by_cell = {}
    for k, cell in enumerate(cells):
        ms = synthesize_ground(maps_tgt[cell], scene, cfg["data.n_ground_per_cell"],
                               _sub_seed(seed, 42, k))
        ground_by_cell[cell] = ms
        ground_all.extend(ms.measurements)
    save_measurements(MeasurementSet(ground_all, "ground"), run.path("data/ground.csv"))

    routes = generate_routes(scene, cfg["data.n_routes"],
                             (cfg["data.route_alt_min"], cfg["data.route_alt_max"]),
                             _sub_seed(seed, 43), cfg["data.route_spacing"])

    aerial_all = []
    for k, cell in enumerate(cells):
        ms = sample_route_measurements(maps_tgt[cell], routes, cfg["data.aerial_keep_prob"],
                                       _sub_seed(seed, 44, k), cfg["data.aerial_max_ratio"],
                                       len(ground_by_cell[cell]))
        aerial_all.extend(ms.measurements)
    save_measurements(MeasurementSet(aerial_all, "aerial"), run.path("data/aerial.csv"))

    adj = build_adjacency(scene, cfg["scene.adjacency_max_dist"])
    pairs = [(scene.transmitters[i].cell_id, scene.transmitters[j].cell_id)
             for i, j in matched_pairs(scene, adj)]
    paired = sorted({c for p in pairs for c in p})
    tx_by_cell = {t.cell_id: t for t in scene.transmitters}
    route_cells = []
    for route in routes:
        mid = route.points().mean(axis=0)
        route_cells.append(min(paired, key=lambda c: (tx_by_cell[c].x - mid[0]) ** 2
                                                     + (tx_by_cell[c].y - mid[1]) ** 2))
    save_routes(routes, route_cells, run.path("data/routes.txt"))
    run.update_manifest("make-dataset", ["data/ground.csv", "data/aerial.csv", "data/routes.txt"])
    n_a = len(aerial_all)
    print(f"dataset: {len(ground_all)} ground, {n_a} aerial "
          f"(ratio {n_a / max(len(ground_all), 1):.2e}), {len(routes)} routes")


def cmd_pretrain(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    if not tcfg.pretrain:
        print("train.pretrain = false; writing randomly initialized checkpoint")
    bench = load_benchmark(run)
    model = DualTxModel.create(tcfg.arch(), bench.norm, bench.pairs, tcfg.seed)
    if tcfg.pretrain:
        samples = build_pair_samples(bench.scene, bench.maps_src, bench.pairs, bench.norm, tcfg.dual_cell)
        report = pretrain(model, samples, tcfg)
        save_report(report, run.path("reports/pretrain.txt"))
        print(f"pretrain: {len(report.losses)} epochs, loss {report.losses[0]:.4f} -> {report.losses[-1]:.4f}")
    save_model(model, run.path("models/pretrain.dtxm"))
    run.update_manifest("pretrain", ["models/pretrain.dtxm", "reports/pretrain.txt"])


def cmd_adapt(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    run.require("models/pretrain.dtxm", "pretrain")
    model = load_model(run.path("models/pretrain.dtxm"), expect_arch=tcfg.arch())
    if tcfg.adda:
        src_in, tgt_in = adaptation_inputs(bench, tcfg)
        acc_before = domain_probe_accuracy(model, src_in, tgt_in, tcfg.seed)
        report = adapt(model, src_in, tgt_in, tcfg)
        acc_after = domain_probe_accuracy(model, src_in, tgt_in, tcfg.seed)
        report.aux["probe_acc_before"] = [acc_before] * len(report.losses)
        report.aux["probe_acc_after"] = [acc_after] * len(report.losses)
        save_report(report, run.path("reports/adapt.txt"))
        print(f"adapt: probe accuracy {acc_before:.3f} -> {acc_after:.3f}")
    else:
        model.copy_block(SOURCE_ENCODER, TARGET_ENCODER)
        print("train.adda = false; target encoder copied from source")
    save_model(model, run.path("models/adapt.dtxm"))
    run.update_manifest("adapt", ["models/adapt.dtxm", "reports/adapt.txt"])


def cmd_finetune(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    run.require("models/adapt.dtxm", "adapt")
    model = load_model(run.path("models/adapt.dtxm"), expect_arch=tcfg.arch())
    if tcfg.finetune:
        samples = finetune_samples(bench, tcfg)
        report = finetune(model, samples, tcfg)
        save_report(report, run.path("reports/finetune.txt"))
        print(f"finetune: loss {report.losses[0]:.5f} -> {report.losses[-1]:.5f}")
    else:
        print("train.finetune = false; decoders left as adapted")
    save_model(model, run.path("models/final.dtxm"))
    run.update_manifest("finetune", ["models/final.dtxm", "reports/finetune.txt"])


def cmd_baseline(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    reports = [
        evaluate_kriging(bench, tcfg.seed),
        evaluate_gp(bench, tcfg.seed),
        evaluate_autoencoder(bench, tcfg),
    ]
    save_route_reports(reports, run.path("reports/baselines.txt"),
                       config_digest(run.cfg), run.cfg["run.seed"])
    run.update_manifest("baseline", ["reports/baselines.txt"])
    for rep in reports:
        b, m, w = aggregate(rep.per_route)
        print(f"{rep.method:12s} best/mean/worst RMSE = {b:.2f}/{m:.2f}/{w:.2f} dB")


def cmd_evaluate(run: RunDir, args) -> None:
    from .evaluate import RouteReport, load_route_reports

    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    run.require("models/final.dtxm", "finetune")
    model = load_model(run.path("models/final.dtxm"), expect_arch=tcfg.arch())
    per_route = []
    for r, route in enumerate(bench.routes):
        cell = bench.route_cells[r]
        pred = predict_route(model, bench.ground[cell], route, cell, bench.grid)
        from .evaluate import route_rmse

        per_route.append(route_rmse(pred, truth_profile(bench, r)))
    proposed = RouteReport("proposed", per_route)
    reports = load_route_reports(run.require("reports/baselines.txt", "baseline")) + [proposed]
    save_route_reports(reports, run.path("reports/comparison.txt"),
                       config_digest(run.cfg), run.cfg["run.seed"])
    run.update_manifest("evaluate", ["reports/comparison.txt"])
    ours = aggregate(proposed.per_route)[1]
    for rep in reports:
        b, m, w = aggregate(rep.per_route)
        extra = "" if rep.method == "proposed" else f"  (improvement {improvement_pct(ours, m):+.1f}%)"
        print(f"{rep.method:12s} best/mean/worst RMSE = {b:.2f}/{m:.2f}/{w:.2f} dB{extra}")


def cmd_ablate(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    rows = ablation_suite(bench, tcfg, ABLATION_ROWS)
    reports = [row.report for row in rows]
    save_route_reports(reports, run.path("reports/ablation.txt"),
                       config_digest(run.cfg), run.cfg["run.seed"])
    run.update_manifest("ablate", ["reports/ablation.txt"])
    for row in rows:
        b, m, w = aggregate(row.report.per_route)
        print(f"{row.report.method}: best/mean/worst = {b:.2f}/{m:.2f}/{w:.2f} dB")


def cmd_predict_route(run: RunDir, args) -> None:
    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    model, stage = _model_for_stage(run, tcfg)
    r = args.route if args.route is not None else run.cfg["eval.profile_route"]
    if not 0 <= r < len(bench.routes):
        raise ConfigError(f"route index {r} outside [0, {len(bench.routes)})")
    cell = bench.route_cells[r]
    pred = predict_route(model, bench.ground[cell], bench.routes[r], cell, bench.grid)
    truth = truth_profile(bench, r)
    rel = f"figures/profile_route{r}.csv"
    emit_profile(bench.routes[r], pred, truth, run.path(rel))
    run.update_manifest("predict-route", [rel])
    from .evaluate import route_rmse

    print(f"route {r} (cell {cell}, model {stage}): RMSE {route_rmse(pred, truth):.2f} dB -> {rel}")


def cmd_emit_figures(run: RunDir, args) -> None:
    from .datasets import rasterize
    from .pipeline import predict_grid
    from .propsim import RadioMap

    tcfg = train_config(run.cfg)
    bench = load_benchmark(run)
    model, stage = _model_for_stage(run, tcfg)
    level = run.cfg["eval.slice_level"]
    wrote = []
    for cell in bench.cells[:2]:
        gs = rasterize(bench.ground[cell], bench.grid, bench.norm)
        pred_map = RadioMap(cell, bench.grid, predict_grid(model, gs, cell))
        for tag, rmap in (("truth", bench.maps_tgt[cell]), ("pred", pred_map)):
            rel = f"figures/slice_{tag}_{cell}_z{level}.csv"
            emit_slice(rmap, level, run.path(rel))
            wrote.append(rel)
    r = run.cfg["eval.profile_route"]
    cell = bench.route_cells[r]
    pred = predict_route(model, bench.ground[cell], bench.routes[r], cell, bench.grid)
    rel = f"figures/profile_route{r}.csv"
    emit_profile(bench.routes[r], pred, truth_profile(bench, r), run.path(rel))
    wrote.append(rel)
    run.update_manifest("emit-figures", wrote)
    print(f"wrote {len(wrote)} figure files (model {stage})")


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "simulate": cmd_simulate,
    "make-dataset": cmd_make_dataset,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "predict-route": cmd_predict_route,
    "emit-figures": cmd_emit_figures,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routecast",
        description="Route-level radio map prediction: simulate, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"routecast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for independent artifacts; never changes results")
        if name == "predict-route":
            p.add_argument("--route", type=int, default=None, help="route index")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        cfg = load_config(args.config, overrides)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = RunDir(Path(args.run_dir), cfg)
        COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return 0


if __name__ == "__main__":
    sys.exit(main())
