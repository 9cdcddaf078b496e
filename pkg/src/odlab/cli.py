"""Command-line pipeline: network, truth, counts, probe dataset, learner, estimation, report.

Exit codes: 0 success, 1 domain error (bad data, missing upstream file,
routing failure, training failure), 2 usage error.  Relative output paths are
placed under ``$ODLAB_OUTPUT_DIR`` when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics, svg
from .core import (
    GlobalDistribution,
    ModelError,
    TimeGrid,
    global_distributions,
    load_counts,
    load_distribution,
    load_network,
    load_od_sequence,
    normalize_counts,
    production_attraction,
    save_counts,
    save_distribution,
    save_network,
    save_od_sequence,
)
from .estimator import MODES, EstimatorConfig, InvariantError, bilevel_estimate, save_trace
from .learner import LearnerConfig, TrainingError, infer, load_checkpoint, save_checkpoint, save_curve, train
from .netgen import BASE_CAPACITY, cluster_to_network, generate_raw
from .sampler import generate_dataset, load_dataset, save_dataset
from .scenario import make_truth
from .simulator import simulate

log = logging.getLogger("odlab")

OUTPUT_ENV = "ODLAB_OUTPUT_DIR"
DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "desk.json"
KINDS = ("production", "attraction")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class NetworkConfig:
    seed: int = 1
    grid: int = 6
    spacing_m: float = 400.0
    od_nodes: int = 5
    cluster_seed: int = 7
    base_capacity: float = BASE_CAPACITY


@dataclass(frozen=True)
class GridConfig:
    I: int = 4
    o: int = 24
    k: int = 6
    delta: int = 4
    interval_seconds: float = 60.0

    def __post_init__(self):
        if self.I * self.k != self.o:
            raise UsageError(f"config grid: k={self.k} disagrees with o/I={self.o}/{self.I}")

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.I, self.o, self.delta, self.interval_seconds)


@dataclass(frozen=True)
class TruthConfig:
    total: int = 8000
    seed: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    m: int = 20
    n_samples: int = 500
    seed: int = 11


@dataclass(frozen=True)
class DeskConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "DeskConfig":
        parts = {}
        for f in fields(cls):
            sub = doc.get(f.name, {})
            typ = f.default_factory().__class__
            known = {g.name for g in fields(typ)}
            unknown = set(sub) - known
            if unknown:
                raise UsageError(f"config section {f.name!r}: unknown keys {sorted(unknown)}")
            try:
                parts[f.name] = typ(**sub)
            except ValueError as exc:
                raise UsageError(f"config section {f.name!r}: {exc}") from exc
        return cls(**parts)

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}


def load_config(path=None) -> DeskConfig:
    path = Path(path) if path else DEFAULT_CONFIG
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    return DeskConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# helpers


def out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUTPUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def in_path(p, what: str) -> Path:
    p = Path(p)
    if not p.exists():
        raise FileNotFoundError(f"{what} file {p} not found")
    return p


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return repr(float(v))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# pipeline steps (shared by the subcommands and by run_pipeline)


def step_network(cfg: NetworkConfig):
    raw = generate_raw(cfg.seed, cfg.grid, cfg.spacing_m)
    return cluster_to_network(raw, cfg.od_nodes, cfg.cluster_seed, cfg.base_capacity)


def step_train(dataset, network, grid, kind, cfg: LearnerConfig):
    seed_everything(cfg.seed)
    return train(dataset, network, grid, kind, cfg)


def step_estimate(network, counts, grid, mode, cfg: EstimatorConfig, truth=None, dstar=None):
    overrides = {k: v for k, v in asdict(cfg).items() if k not in ("alpha", "aggregate")}
    if mode.startswith("guided"):
        overrides["alpha"] = cfg.alpha
    ecfg = EstimatorConfig.for_mode(mode, **overrides)
    if mode == "guided-true":
        if truth is None:
            raise UsageError("guided-true mode needs the true sequence (--truth)")
        dp, da = global_distributions(truth)
        targets = dp.values, da.values
    elif mode == "guided-inferred":
        if dstar is None:
            raise UsageError("guided-inferred mode needs --dstar-p and --dstar-a")
        targets = dstar[0].values, dstar[1].values
    else:
        targets = None, None
    return bilevel_estimate(network, counts, grid, targets[0], targets[1], ecfg, truth=truth)


def write_report(out_dir, truth: np.ndarray, estimates: dict[str, np.ndarray],
                 dstar: tuple[GlobalDistribution, GlobalDistribution] | None = None, plots: bool = True) -> dict:
    """Summary table, inferred-vs-optimized KL table, node time series and scatter data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    I, n, _ = truth.shape
    rows = {mode: metrics.summary(est, truth) for mode, est in estimates.items()}

    header = ["mode"] + [f"rmsn_{t}" for t in range(I)] + ["rmsn_avg"] + [f"rho_{t}" for t in range(I)] + ["rho_avg"]
    _write_csv(out_dir / "summary.csv", header, (
        [mode] + [_fmt(v) for v in r["rmsn"]] + [_fmt(r["rmsn_avg"])] + [_fmt(v) for v in r["rho"]] + [_fmt(r["rho_avg"])]
        for mode, r in rows.items()))
    (out_dir / "summary.txt").write_text(metrics.format_table(rows) + "\n")

    dp, da = global_distributions(truth)
    kl_rows = []
    if dstar is not None:
        kl_rows.append(["inferred", _fmt(metrics.kl(dstar[0].values, dp.values)), _fmt(metrics.kl(dstar[1].values, da.values))])
    for mode, est in estimates.items():
        ep, ea = global_distributions(est, "optimized")
        kl_rows.append([mode, _fmt(metrics.kl(ep.values, dp.values)), _fmt(metrics.kl(ea.values, da.values))])
    _write_csv(out_dir / "kl.csv", ["source", "kl_production", "kl_attraction"], kl_rows)

    flows = {"truth": production_attraction(truth)}
    flows.update({mode: production_attraction(est) for mode, est in estimates.items()})
    names = list(flows)
    ts_rows = []
    for which, label in ((0, "production"), (1, "attraction")):
        for node in range(n):
            for t in range(I):
                ts_rows.append([label, node, t] + [_fmt(flows[k][which][t * n + node]) for k in names])
    _write_csv(out_dir / "timeseries.csv", ["flow", "node", "interval"] + names, ts_rows)

    sc_rows = []
    for t in range(I):
        for i in range(n):
            for j in range(n):
                if i != j:
                    sc_rows.append([t, i, j, _fmt(truth[t, i, j])] + [_fmt(estimates[k][t, i, j]) for k in estimates])
    _write_csv(out_dir / "scatter.csv", ["interval", "origin", "destination", "truth"] + list(estimates), sc_rows)

    if plots:
        x = list(range(I))
        for node in range(n):
            series = {k: [flows[k][0][t * n + node] for t in x] for k in names}
            svg.line_plot(out_dir / f"production_node{node}.svg", f"production, node {node}", x, series)
        for mode, est in estimates.items():
            mask = ~np.eye(n, dtype=bool)
            svg.scatter_plot(out_dir / f"scatter_{mode}.svg", f"{mode}: estimated vs true",
                             [float(v) for v in truth[:, mask].ravel()], [float(v) for v in est[:, mask].ravel()])
    return rows


def run_pipeline(cfg: DeskConfig, out_dir, plots: bool = True, save_samples: bool = True) -> dict:
    """Every step on one config; returns the in-memory artifacts for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clock = {}
    start = time.perf_counter()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    grid = cfg.grid.time_grid()
    net = step_network(cfg.network)
    save_network(net, out / "network.json")
    truth = make_truth(net.n_od, grid.I, cfg.truth.total, cfg.truth.seed)
    save_od_sequence(truth, out / "truth.csv")
    counts, _ = simulate(net, truth, grid)
    save_counts(counts, out / "counts.csv")
    log.info("sampling %d probe sequences", cfg.sampler.n_samples)
    ds = generate_dataset(net, truth, grid, cfg.sampler.m, cfg.sampler.n_samples, cfg.sampler.seed)
    if save_samples:
        save_dataset(ds, out / "dataset")
    clock["sample"] = time.perf_counter() - start

    dstar, curves = [], {}
    for kind in KINDS:
        log.info("training %s learner", kind)
        t0 = time.perf_counter()
        res = step_train(ds, net, grid, kind, cfg.learner)
        clock[f"train_{kind}"] = time.perf_counter() - t0
        curves[kind] = res
        save_curve(res.curve, out / f"curve_{kind}.csv")
        save_checkpoint(res.model, out / f"learner_{kind}.json", {"kind": kind, "best_epoch": res.best_epoch})
        d = infer(res.model, normalize_counts(counts), kind)
        save_distribution(d, out / f"dstar_{kind}.json")
        dstar.append(d)

    estimates, traces = {}, {}
    for mode in MODES:
        log.info("estimating: %s", mode)
        t0 = time.perf_counter()
        r = step_estimate(net, counts, grid, mode, cfg.estimator, truth=truth, dstar=tuple(dstar))
        estimates[mode], traces[mode] = r.estimate, r.trace
        clock[f"estimate_{mode}"] = time.perf_counter() - t0
        save_od_sequence(r.estimate, out / f"estimate_{mode}.csv")
        save_trace(r.trace, out / f"trace_{mode}.csv")
    summary = write_report(out / "report", truth, estimates, tuple(dstar), plots)
    clock["total"] = time.perf_counter() - start
    return {"seconds": clock, "network": net, "truth": truth, "counts": counts, "dataset": ds, "training": curves,
            "dstar": tuple(dstar), "estimates": estimates, "traces": traces, "summary": summary}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_network(a, cfg):
    c = cfg.network
    nc = NetworkConfig(a.seed if a.seed is not None else c.seed, a.grid or c.grid, a.spacing or c.spacing_m,
                       a.od_nodes or c.od_nodes, a.cluster_seed if a.cluster_seed is not None else c.cluster_seed,
                       a.base_capacity or c.base_capacity)
    save_network(step_network(nc), out_path(a.out))


def cmd_make_truth(a, cfg):
    n_od = a.od_nodes or cfg.network.od_nodes
    if a.network:
        n_od = load_network(in_path(a.network, "network")).n_od
    I = a.intervals or cfg.grid.I
    total = a.total if a.total is not None else cfg.truth.total
    seed = a.seed if a.seed is not None else cfg.truth.seed
    save_od_sequence(make_truth(n_od, I, total, seed), out_path(a.out))


def cmd_simulate(a, cfg):
    net = load_network(in_path(a.network, "network"))
    seq = load_od_sequence(in_path(a.od, "OD sequence"))
    counts, trips = simulate(net, seq, cfg.grid.time_grid())
    save_counts(counts, out_path(a.out))
    if a.log:
        trips.save(out_path(a.log))


def cmd_sample(a, cfg):
    net = load_network(in_path(a.network, "network"))
    truth = load_od_sequence(in_path(a.truth, "truth"))
    s = cfg.sampler
    ds = generate_dataset(net, truth, cfg.grid.time_grid(), a.m or s.m, a.n_samples or s.n_samples,
                          a.seed if a.seed is not None else s.seed)
    save_dataset(ds, out_path(Path(a.out) / "manifest.json").parent)


def cmd_train(a, cfg):
    net = load_network(in_path(a.network, "network"))
    ds = load_dataset(in_path(a.dataset, "dataset"))
    lc = cfg.learner
    if a.epochs is not None:
        lc = LearnerConfig(**{**asdict(lc), "max_epochs": a.epochs})
    res = step_train(ds, net, cfg.grid.time_grid(), a.kind, lc)
    save_checkpoint(res.model, out_path(a.out), {"kind": a.kind, "best_epoch": res.best_epoch})
    if a.curve:
        save_curve(res.curve, out_path(a.curve))


def cmd_infer(a, cfg):
    net = load_network(in_path(a.network, "network"))
    model, extra = load_checkpoint(in_path(a.checkpoint, "checkpoint"), net)
    counts = load_counts(in_path(a.counts, "counts"))
    save_distribution(infer(model, normalize_counts(counts), extra.get("kind", "production")), out_path(a.out))


def cmd_estimate(a, cfg):
    if a.mode == "guided-inferred" and not (a.dstar_p and a.dstar_a):
        raise UsageError("guided-inferred mode needs --dstar-p and --dstar-a")
    if a.mode == "guided-true" and not a.truth:
        raise UsageError("guided-true mode needs --truth")
    net = load_network(in_path(a.network, "network"))
    counts = load_counts(in_path(a.counts, "counts"))
    truth = load_od_sequence(in_path(a.truth, "truth")) if a.truth else None
    dstar = None
    if a.dstar_p and a.dstar_a:
        dstar = (load_distribution(in_path(a.dstar_p, "distribution")), load_distribution(in_path(a.dstar_a, "distribution")))
    res = step_estimate(net, counts, cfg.grid.time_grid(), a.mode, cfg.estimator, truth=truth, dstar=dstar)
    save_od_sequence(res.estimate, out_path(a.out))
    if a.trace:
        save_trace(res.trace, out_path(a.trace))


def cmd_report(a, cfg):
    truth = load_od_sequence(in_path(a.truth, "truth"))
    estimates = {}
    for item in a.estimate:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--estimate expects NAME=PATH, got {item!r}")
        estimates[name] = load_od_sequence(in_path(path, "estimate"))
    dstar = None
    if a.dstar_p or a.dstar_a:
        if not (a.dstar_p and a.dstar_a):
            raise UsageError("--dstar-p and --dstar-a go together")
        dstar = (load_distribution(in_path(a.dstar_p, "distribution")), load_distribution(in_path(a.dstar_a, "distribution")))
    rows = write_report(out_path(Path(a.out_dir) / "summary.csv").parent, truth, estimates, dstar, plots=a.svg)
    print(metrics.format_table(rows))


def cmd_run(a, cfg):
    res = run_pipeline(cfg, out_path(Path(a.out_dir) / "config.json").parent, plots=a.svg)
    print(metrics.format_table(res["summary"]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odlab", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"pipeline config JSON (default {DEFAULT_CONFIG})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-network", help="synthetic road network clustered to OD nodes")
    s.add_argument("--seed", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--od-nodes", type=int)
    s.add_argument("--spacing", type=float)
    s.add_argument("--cluster-seed", type=int)
    s.add_argument("--base-capacity", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_network)

    s = sub.add_parser("make-truth", help="two-peak ground-truth OD sequence")
    s.add_argument("--network", help="take n_od from this network")
    s.add_argument("--od-nodes", type=int)
    s.add_argument("--intervals", type=int)
    s.add_argument("--total", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_truth)

    s = sub.add_parser("simulate", help="section counts of an OD sequence")
    s.add_argument("--network", required=True)
    s.add_argument("--od", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="also write the trip log (JSON lines)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sample", help="probe-vehicle training dataset")
    s.add_argument("--network", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--m", type=int)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="dataset directory")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="train a distribution learner")
    s.add_argument("--network", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="training curve CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="infer a global distribution from counts")
    s.add_argument("--network", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--counts", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("estimate", help="bi-level OD sequence estimation")
    s.add_argument("--network", required=True)
    s.add_argument("--counts", required=True)
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--truth", help="ground truth (metrics in the trace; required by guided-true)")
    s.add_argument("--dstar-p")
    s.add_argument("--dstar-a")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("report", help="summary tables and plot data")
    s.add_argument("--truth", required=True)
    s.add_argument("--estimate", action="append", required=True, metavar="NAME=PATH")
    s.add_argument("--dstar-p")
    s.add_argument("--dstar-a")
    s.add_argument("--svg", action="store_true", help="also render SVG plots")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="whole pipeline on the config")
    s.add_argument("--svg", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"odlab: error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, FileNotFoundError, TrainingError, InvariantError) as exc:
        print(f"odlab: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
