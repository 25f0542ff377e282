"""Command-line front end: ``rdoe design | mc | estimate | session``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional, TextIO

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, load_config_file
from .design import (
    ScenarioTree,
    design_minmax,
    design_multi_stage,
    design_nominal,
    design_scenario,
    design_two_stage,
    worst_and_mean,
)
from .errors import (
    AllStartsFailed,
    ConfigError,
    DomainError,
    InconsistentTree,
    RdoeError,
    UnderdeterminedData,
)
from .estimation import Dataset, least_squares_estimate
from .evaluation import (
    monte_carlo_compare,
    round9,
    write_boxplot_csv,
    write_dominance_csv,
    write_stats_json,
    write_trials_csv,
)
from .protocols import SequentialRunner, TwoStageRunner
from .statistics import write_ellipse_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_INPUT_ERRORS = (ConfigError, UnderdeterminedData, DomainError, InconsistentTree)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _threads(args, cfg_threads: Optional[int]) -> int:
    env = os.environ.get("RDOE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"RDOE_THREADS must be an integer, got {env!r}") from None
    elif args.threads is not None:
        n = args.threads
    elif cfg_threads is not None:
        n = cfg_threads
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _load(args) -> RunConfig:
    doc = {}
    if args.config:
        doc = load_config_file(args.config)
        # a meta.json from an earlier run carries its config under "config"
        if "command" in doc and isinstance(doc.get("config"), dict):
            doc = doc["config"]
    if args.out is not None:
        doc["output_dir"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "n_trials", None) is not None:
        doc.setdefault("mc", {})
        doc["mc"] = dict(doc["mc"], n_trials=args.n_trials)
    if doc.get("threads") is None and "threads" in doc:
        doc.pop("threads")
    doc["threads"] = _threads(args, doc.get("threads"))
    cfg = RunConfig.from_dict(doc, args.preset)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _meta(cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
    doc = {"command": command, "version": __version__, "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    _write_json(cfg.output_dir / "meta.json", doc)


# ---------------------------------------------------------------------------
# design


def cmd_design(cfg: RunConfig) -> int:
    m, nz, sc, cc = cfg.model, cfg.noise, cfg.solver, cfg.criterion
    t0 = time.perf_counter()
    report: dict = {"strategy": cfg.strategy}
    if cfg.strategy == "nominal":
        d = design_nominal(m, cfg.p_hat, cfg.N, nz, sc, cc)
    elif cfg.strategy == "minmax":
        d = design_minmax(m, cfg.scenarios, cfg.N, nz, sc, cc)
    elif cfg.strategy == "scenario":
        d = design_scenario(m, cfg.scenarios, cfg.N, nz, sc, cc)
    elif cfg.strategy == "two_stage":
        d = design_two_stage(m, cfg.scenarios, cfg.N, cfg.N_e, nz, sc, cc)
    else:
        allocations = cfg.allocations or (cfg.N_e,)
        tree = ScenarioTree.branching([cfg.scenarios] * len(allocations), allocations, cfg.N)
        d = design_multi_stage(m, tree, nz, sc, cc)
    elapsed = time.perf_counter() - t0
    doc = d.to_dict()
    _write_json(cfg.output_dir / "design.json", doc)
    report["objective"] = d.objective
    if hasattr(d, "report") and d.report is not None:
        report["n_evals"] = d.report.n_evals
        report["starts_converged"] = d.report.starts_converged
        report["local_minima"] = doc.get("local_minima", [])
        worst, mean = worst_and_mean(m, cfg.scenarios, d, nz, cc)
        report["scenario_worst"], report["scenario_mean"] = worst, mean
    report["timings"] = {"design_seconds": round9(elapsed)}
    _write_json(cfg.output_dir / "design_report.json", report)
    _meta(cfg, "design")
    print(f"design written to {cfg.output_dir / 'design.json'} (objective {d.objective:.9g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# mc


def cmd_mc(cfg: RunConfig) -> int:
    mc = cfg.mc
    pair = tuple(mc["dominance_pair"]) if mc["dominance_pair"] is not None else None
    res = monte_carlo_compare(
        cfg.model, cfg.box, mc["strategies"], mc["n_trials"], cfg.seed, mc["mode"],
        noise=cfg.noise, N=cfg.N, N_e=cfg.N_e, scenarios=cfg.scenarios, solver_cfg=cfg.solver,
        criterion_cfg=cfg.criterion, p_hat0=cfg.p_hat, truths=cfg.truths,
        dominance_pair=pair, dominance_sampler=mc["dominance_sampler"],
        dominance_grid=mc["dominance_grid"], threads=cfg.threads,
    )
    out = cfg.output_dir
    write_trials_csv(out / "trials.csv", res.records)
    write_stats_json(out / "stats.json", res)
    write_boxplot_csv(out / "boxplot.csv", res.stats)
    if pair is not None:
        write_dominance_csv(out / "dominance.csv", res.dominance, pair, cfg.model.n_p)
    _meta(cfg, "mc")
    for s, st in res.stats.items():
        rel = f"{st.rel_mean_pct:.1f}%" if np.isfinite(st.rel_mean_pct) else "n/a"
        print(f"{s:<11} mean loss {st.mean:.4g}  relative {rel}  worst {st.worst:.4g}")
    if len(res.excluded_trials) == mc["n_trials"]:
        print("every trial failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(cfg: RunConfig, dataset_path) -> int:
    data = Dataset.from_csv(dataset_path, cfg.model, cfg.noise)
    est = least_squares_estimate(cfg.model, data, cfg.box, cfg.solver, cfg.alpha)
    _write_json(cfg.output_dir / "estimate.json", est.to_dict())
    if cfg.model.n_p == 2 and est.ellipsoid is not None:
        write_ellipse_csv(cfg.output_dir / "ellipse.csv", est.ellipsoid,
                          meta={"alpha": cfg.alpha, "dataset": str(dataset_path)})
    _meta(cfg, "estimate", {"dataset": str(dataset_path)})
    print("p_hat = " + ", ".join(f"{v:.9g}" for v in est.p_hat) + f"  (sse {est.sse:.6g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# session


def _session_runner(cfg: RunConfig):
    ses = cfg.session
    if ses["strategy"] == "sequential":
        step = ses["N_e_step"] or max(cfg.N_e, 1)
        return SequentialRunner(cfg.model, cfg.box, cfg.p_hat, cfg.N, step, cfg.noise, cfg.solver,
                                cfg.criterion, cfg.stop, cfg.alpha)
    N_e = ses["N_e_step"] or cfg.N_e
    return TwoStageRunner(cfg.model, cfg.box, cfg.scenarios, cfg.N, N_e, cfg.noise, ses["loop"],
                          cfg.solver, cfg.criterion, cfg.stop, cfg.alpha,
                          scenario_mode=cfg.raw["scenarios"]["mode"])


def _session_doc(cfg: RunConfig, runner) -> dict:
    return {
        "schema": 1,
        "config": cfg.to_dict(),
        "blocks": [{"controls": r.controls.tolist(), "measurements": r.measurements.tolist()}
                   for r in runner.history],
        "history": [r.to_dict() for r in runner.history],
        "p_hat": runner.p_hat.tolist(),
        "stop_reason": runner.stop_reason,
    }


def _print_step(rec, out: TextIO) -> None:
    print(f"step {rec.step}: p_hat = " + ", ".join(f"{v:.9g}" for v in rec.p_hat_after), file=out)
    est = rec.estimate
    if est is not None and est.ellipsoid is not None:
        hw = est.ellipsoid.half_widths()
        print("  confidence half-widths: " + ", ".join(f"{v:.4g}" for v in hw), file=out)
    elif est is None:
        print("  (too few measurements to re-estimate; estimate unchanged)", file=out)
    print(f"  criterion of design so far: {rec.phi:.9g}", file=out)


def _read_block(block, n_y: int, source: TextIO, out: TextIO, interactive: bool):
    """One measurement line per experiment; malformed lines are re-requested."""
    values = []
    while len(values) < len(block):
        u = block[len(values)]
        if interactive:
            print(f"measurement at u = {', '.join(f'{v:.9g}' for v in u)}: ", end="", file=out, flush=True)
        line = source.readline()
        if not line:
            return None
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            y = [float(v) for v in line.split(",")]
            if len(y) != n_y or not all(np.isfinite(y)):
                raise ValueError(f"expected {n_y} finite value(s)")
        except ValueError as exc:
            print(f"malformed measurement line {line!r}: {exc}; please re-enter", file=sys.stderr)
            continue
        values.append(y)
    return np.array(values)


def cmd_session(cfg: RunConfig, measurements: Optional[str] = None, resume: Optional[str] = None,
                stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    out = stdout or sys.stdout
    runner = _session_runner(cfg)
    session_path = cfg.output_dir / "session.json"
    if resume:
        doc = load_config_file(resume)
        for k, blk in enumerate(doc.get("blocks", [])):
            expect = runner.next_block()
            if not np.allclose(expect, np.asarray(blk["controls"], float), rtol=0, atol=1e-12):
                raise ConfigError(f"{resume}: block {k + 1} does not match the configuration")
            runner.ingest(blk["measurements"])
        print(f"resumed after {len(runner.history)} step(s)", file=out)
    _meta(cfg, "session")
    src_file = open(measurements, encoding="utf-8") if measurements else None
    try:
        source = src_file or stdin or sys.stdin
        interactive = src_file is None and source.isatty()
        while not runner.finished:
            block = runner.next_block()
            print(f"next block: {len(block)} experiment(s)", file=out)
            for row in block:
                print("  u = " + ", ".join(f"{v:.9g}" for v in row), file=out)
            y = _read_block(block, cfg.model.n_y, source, out, interactive)
            if y is None:
                _write_json(session_path, _session_doc(cfg, runner))
                print(f"input ended; session saved to {session_path}", file=out)
                return EXIT_OK
            rec = runner.ingest(y)
            _print_step(rec, out)
            _write_json(session_path, _session_doc(cfg, runner))
    finally:
        if src_file is not None:
            src_file.close()
    if runner.stop_reason == "budget":
        print("experiment budget used; session complete", file=out)
    else:
        print(f"stopping rule {runner.stop_reason!r} triggered; session complete", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdoe", description="Robust A-optimal design of experiments.")
    p.add_argument("--version", action="version", version=f"rdoe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file (or a meta.json from an earlier run)")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="built-in case setup")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="base seed (overrides seed)")
        sp.add_argument("--threads", type=int, help="worker threads (RDOE_THREADS overrides)")

    common(sub.add_parser("design", help="compute a design and write design.json"))
    mc = sub.add_parser("mc", help="Monte-Carlo comparison of strategies")
    common(mc)
    mc.add_argument("--n-trials", type=int, dest="n_trials")
    est = sub.add_parser("estimate", help="least-squares estimate from a dataset CSV")
    common(est)
    est.add_argument("--data", required=True, help="CSV with header u_1..u_nu,y_1..y_ny")
    ses = sub.add_parser("session", help="interactive design / measure / re-estimate loop")
    common(ses)
    ses.add_argument("--measurements", help="read measurement lines from this file instead of stdin")
    ses.add_argument("--resume", help="continue from a saved session.json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "design":
            return cmd_design(cfg)
        if args.command == "mc":
            return cmd_mc(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.data)
        return cmd_session(cfg, args.measurements, args.resume)
    except _INPUT_ERRORS as exc:
        print(f"rdoe: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AllStartsFailed, RdoeError, np.linalg.LinAlgError) as exc:
        print(f"rdoe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
