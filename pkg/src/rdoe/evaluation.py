"""Monte-Carlo comparison of design strategies by optimality loss.

Each trial draws a true parameter vector, runs every strategy against a
simulated plant with that truth, and scores the applied design by
``phi(applied) - phi*`` where ``phi*`` is the criterion of the nominal
design computed at the truth ("crystal ball").

Seeding: trial ``k`` uses ``seed = base_seed + k``.  The truth comes from
the generator stream ``TRUTH_STREAM`` of that seed and the measurement
noise from the plant's noise stream, so every strategy in a trial sees the
same truth and the same noise sequence.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .design import (
    Design,
    ScenarioSet,
    canonical_order,
    design_minmax,
    design_nominal,
    design_scenario,
    design_two_stage,
    sample_scenarios,
)
from .errors import ConfigError, RdoeError
from .models import ModelSpec, NoiseModel, ParameterBox
from .optimizer import SolverConfig
from .protocols import SequentialRunner, SimulatedPlant, TwoStageRunner
from .rng import XorShift64Star
from .statistics import CriterionConfig, a_criterion, assemble_fim

STRATEGIES = ("nominal", "sequential", "minmax", "scenario", "two_stage")
ONE_SHOT = ("nominal", "minmax", "scenario")
MODES = ("revealed_truth", "noisy")
TRUTH_STREAM = 0x7207
FLOAT_FMT = "{:.9g}"


def fmt(x: float) -> str:
    return FLOAT_FMT.format(x)


def round9(x: float) -> float:
    """Round to 9 significant digits for JSON output."""
    return float(fmt(x)) if math.isfinite(x) else x


def evaluate_design(model: ModelSpec, p_true, design, noise: NoiseModel,
                    criterion_cfg: Optional[CriterionConfig] = None) -> float:
    """Criterion of the applied controls at the true parameters."""
    controls = getattr(design, "controls", design)
    return float(a_criterion(assemble_fim(model, p_true, controls, noise), criterion_cfg or CriterionConfig()))


def crystal_ball(model: ModelSpec, p_true, N: int, noise: NoiseModel,
                 solver_cfg: Optional[SolverConfig] = None,
                 criterion_cfg: Optional[CriterionConfig] = None,
                 extra_starts=()) -> tuple[Design, float]:
    """Nominal design at the true parameters and its criterion value.

    ``extra_starts`` (flattened designs) are added to the multi-start
    search; the result is only ever better for it.
    """
    d = design_nominal(model, p_true, N, noise, solver_cfg, criterion_cfg, extra_starts=extra_starts)
    return d, evaluate_design(model, p_true, d, noise, criterion_cfg)


@dataclass
class TrialRecord:
    trial_id: int
    seed: int
    p_true: np.ndarray
    strategy: str
    design: np.ndarray
    phi_applied: float
    phi_star: float
    loss: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class StrategyStats:
    strategy: str
    n: int
    mean: float
    median: float
    minimum: float
    worst: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]
    rel_mean_pct: float = math.nan
    rel_median_pct: float = math.nan
    rel_worst_pct: float = math.nan
    mean_loss_pct_of_optimum: float = math.nan

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, float):
                out[k] = round9(v) if math.isfinite(v) else None
            elif isinstance(v, list):
                out[k] = [round9(x) for x in v]
            else:
                out[k] = v
        return out


def loss_statistics(strategy: str, losses: Sequence[float], phi_star: Sequence[float] = ()) -> StrategyStats:
    """Box-plot summary: linear-interpolation quartiles, whiskers at 1.5 IQR."""
    x = np.asarray(losses, dtype=float)
    if x.size == 0:
        nan = math.nan
        return StrategyStats(strategy, 0, nan, nan, nan, nan, nan, nan, nan, nan, [])
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = sorted(float(v) for v in x[(x < lo_fence) | (x > hi_fence)])
    st = StrategyStats(strategy, int(x.size), float(x.mean()), float(med), float(x.min()),
                       float(x.max()), float(q1), float(q3), float(inside.min()), float(inside.max()),
                       outliers)
    ps = np.asarray(phi_star, dtype=float)
    if ps.size == x.size and np.all(ps > 0):
        st.mean_loss_pct_of_optimum = float(np.mean(x / ps) * 100.0)
    return st


@dataclass
class MCResult:
    records: list[TrialRecord]
    stats: dict[str, StrategyStats]
    one_shot: dict[str, Design]
    first_blocks: dict[str, np.ndarray]
    dominance: list[dict] = field(default_factory=list)
    excluded_trials: list[int] = field(default_factory=list)


def _relative(stats: dict[str, StrategyStats], reference: str = "nominal") -> None:
    ref = stats.get(reference)
    if ref is None or ref.n == 0:
        return
    for st in stats.values():
        if st.n == 0:
            continue
        if ref.mean > 0:
            st.rel_mean_pct = st.mean / ref.mean * 100.0
        if ref.median > 0:
            st.rel_median_pct = st.median / ref.median * 100.0
        if ref.worst > 0:
            st.rel_worst_pct = st.worst / ref.worst * 100.0


def draw_truth(box: ParameterBox, seed: int) -> np.ndarray:
    rng = XorShift64Star(seed, stream=TRUTH_STREAM)
    return box.lower + rng.uniforms(box.n_p) * box.width


class StrategyBench:
    """Designs that do not depend on the truth, computed once per box."""

    def __init__(self, model: ModelSpec, box: ParameterBox, strategies: Sequence[str],
                 noise: NoiseModel, N: int, N_e: int, scenarios: Optional[ScenarioSet] = None,
                 solver_cfg: Optional[SolverConfig] = None,
                 criterion_cfg: Optional[CriterionConfig] = None,
                 p_hat0=None, mode: str = "revealed_truth"):
        unknown = [s for s in strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; choose from {list(STRATEGIES)}")
        if mode not in MODES:
            raise ConfigError(f"unknown evaluation mode {mode!r}")
        self.model, self.box, self.noise = model, box, noise
        self.N, self.N_e = int(N), int(N_e)
        self.strategies = tuple(strategies)
        self.scenarios = scenarios if scenarios is not None else sample_scenarios(box)
        self.solver_cfg = solver_cfg or SolverConfig()
        self.criterion_cfg = criterion_cfg or CriterionConfig()
        self.p_hat0 = box.midpoint if p_hat0 is None else np.asarray(p_hat0, dtype=float)
        self.mode = mode
        self.one_shot: dict[str, Design] = {}
        self.first_blocks: dict[str, np.ndarray] = {}
        self._prepare()

    def _prepare(self) -> None:
        m, nz, sc, cc = self.model, self.noise, self.solver_cfg, self.criterion_cfg
        if "nominal" in self.strategies:
            self.one_shot["nominal"] = design_nominal(m, self.p_hat0, self.N, nz, sc, cc)
        if "minmax" in self.strategies:
            self.one_shot["minmax"] = design_minmax(m, self.scenarios, self.N, nz, sc, cc)
        if "scenario" in self.strategies:
            self.one_shot["scenario"] = design_scenario(m, self.scenarios, self.N, nz, sc, cc)
        if "sequential" in self.strategies:
            self.first_blocks["sequential"] = design_nominal(m, self.p_hat0, self.N_e, nz, sc, cc).controls
        if "two_stage" in self.strategies:
            staged = design_two_stage(m, self.scenarios, self.N, self.N_e, nz, sc, cc,
                                      scenario_design=self.one_shot.get("scenario"))
            self.first_blocks["two_stage"] = staged.first_block()

    def applied_design(self, strategy: str, p_true, seed: int) -> np.ndarray:
        if strategy in ONE_SHOT:
            return self.one_shot[strategy].controls
        plant = SimulatedPlant(self.model, p_true, self.noise, seed,
                               reveal_truth=self.mode == "revealed_truth")
        if strategy == "sequential":
            runner = SequentialRunner(self.model, self.box, self.p_hat0, self.N, self.N_e, self.noise,
                                      self.solver_cfg, self.criterion_cfg,
                                      first_block=self.first_blocks["sequential"])
        else:
            runner = TwoStageRunner(self.model, self.box, self.scenarios, self.N, self.N_e,
                                    self.noise, "open_loop", self.solver_cfg, self.criterion_cfg,
                                    first_block=self.first_blocks["two_stage"])
        runner.run(plant)
        return runner.applied().controls

    def run_trial(self, trial_id: int, seed: int, p_true) -> list[TrialRecord]:
        p_true = np.asarray(p_true, dtype=float)
        applied: dict[str, np.ndarray] = {}
        errors: dict[str, str] = {}
        for s in self.strategies:
            try:
                applied[s] = self.applied_design(s, p_true, seed)
            except RdoeError as exc:
                errors[s] = f"{type(exc).__name__}: {exc}"
        try:
            starts = [canonical_order(u).ravel() for u in applied.values()]
            _, phi_star = crystal_ball(self.model, p_true, self.N, self.noise, self.solver_cfg,
                                       self.criterion_cfg, extra_starts=starts)
        except RdoeError as exc:
            phi_star = math.nan
            for s in self.strategies:
                errors.setdefault(s, f"crystal ball failed: {type(exc).__name__}: {exc}")
        out = []
        for s in self.strategies:
            if s in errors:
                out.append(TrialRecord(trial_id, seed, p_true, s, applied.get(s, np.zeros((0, 1))).ravel(),
                                       math.nan, phi_star, math.nan, errors[s]))
                continue
            phi = evaluate_design(self.model, p_true, applied[s], self.noise, self.criterion_cfg)
            out.append(TrialRecord(trial_id, seed, p_true, s, applied[s].ravel(), phi, phi_star,
                                   phi - phi_star))
        return out


def _dominance_points(box: ParameterBox, sampler: str, grid: int, truths: list[np.ndarray]):
    if sampler == "trials" or box.n_p > 2:
        return truths
    axes = [np.linspace(box.lower[i], box.upper[i], grid) for i in range(box.n_p)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return [np.array(p) for p in zip(*(m.ravel() for m in mesh))]


def monte_carlo_compare(model: ModelSpec, box: ParameterBox, strategies: Sequence[str],
                        n_trials: int, base_seed: int, mode: str = "revealed_truth", *,
                        noise: NoiseModel, N: int, N_e: int,
                        scenarios: Optional[ScenarioSet] = None,
                        solver_cfg: Optional[SolverConfig] = None,
                        criterion_cfg: Optional[CriterionConfig] = None,
                        p_hat0=None, truths: Optional[Sequence] = None,
                        dominance_pair: Optional[tuple[str, str]] = None,
                        dominance_sampler: str = "grid", dominance_grid: int = 21,
                        threads: int = 1) -> MCResult:
    """Run ``n_trials`` paired trials of every strategy and aggregate the losses.

    ``truths`` overrides the sampled true parameters (one per trial).  The
    dominance map evaluates ``phi_a - phi_b`` for ``dominance_pair`` on a
    uniform grid over the box (``n_p <= 2``) or on the trial truths.
    Results do not depend on ``threads``.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    if truths is not None and len(truths) != n_trials:
        raise ConfigError(f"{len(truths)} truths given for {n_trials} trials")
    bench = StrategyBench(model, box, strategies, noise, N, N_e, scenarios, solver_cfg,
                          criterion_cfg, p_hat0, mode)

    def trial(k: int) -> list[TrialRecord]:
        seed = base_seed + k
        p = np.asarray(truths[k], float) if truths is not None else draw_truth(box, seed)
        return bench.run_trial(k, seed, p)

    records = _ordered_map(trial, range(n_trials), threads)
    flat = [r for rs in records for r in rs]
    failed = sorted({r.trial_id for r in flat if not r.ok})
    stats = {}
    for s in bench.strategies:
        good = [r for r in flat if r.strategy == s and r.trial_id not in failed]
        stats[s] = loss_statistics(s, [r.loss for r in good], [r.phi_star for r in good])
    _relative(stats)

    dominance = []
    if dominance_pair is not None:
        a, b = dominance_pair
        if a not in bench.strategies or b not in bench.strategies:
            raise ConfigError(f"dominance pair {dominance_pair} must be among the strategies")
        trial_truths = [rs[0].p_true for rs in records]
        pts = _dominance_points(box, dominance_sampler, dominance_grid, trial_truths)

        def point(k: int) -> dict:
            p = pts[k]
            seed = base_seed + k if dominance_sampler == "trials" or box.n_p > 2 else base_seed + n_trials + k
            row = {"p": p}
            try:
                for key, s in (("phi_a", a), ("phi_b", b)):
                    row[key] = evaluate_design(model, p, bench.applied_design(s, p, seed), noise,
                                               bench.criterion_cfg)
            except RdoeError:
                row["phi_a"] = row["phi_b"] = math.nan
            row["diff"] = row["phi_a"] - row["phi_b"]
            return row

        dominance = _ordered_map(point, range(len(pts)), threads)
    return MCResult(flat, stats, bench.one_shot, bench.first_blocks, dominance, failed)


def _ordered_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Output files


def write_trials_csv(path, records: Sequence[TrialRecord]) -> None:
    n_p = len(records[0].p_true) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "seed", "strategy"] + [f"p_{i + 1}" for i in range(n_p)]
                   + ["phi_applied", "phi_star", "loss", "design", "error"])
        for r in records:
            w.writerow([r.trial_id, r.seed, r.strategy] + [fmt(v) for v in r.p_true]
                       + [fmt(r.phi_applied), fmt(r.phi_star), fmt(r.loss),
                          ";".join(fmt(v) for v in r.design), r.error or ""])


def write_stats_json(path, result: MCResult, meta: Optional[dict] = None) -> None:
    doc = {
        "reference": "nominal",
        "excluded_trials": result.excluded_trials,
        "strategies": {k: v.to_dict() for k, v in result.stats.items()},
        "one_shot_designs": {k: [round9(x) for x in d.controls.ravel()] for k, d in result.one_shot.items()},
        "first_blocks": {k: [round9(x) for x in b.ravel()] for k, b in result.first_blocks.items()},
    }
    if meta:
        doc["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_boxplot_csv(path, stats: dict[str, StrategyStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "n", "whisker_low", "q1", "median", "q3", "whisker_high", "mean",
                    "worst", "n_outliers", "outliers"])
        for s, st in stats.items():
            w.writerow([s, st.n, fmt(st.whisker_low), fmt(st.q1), fmt(st.median), fmt(st.q3),
                        fmt(st.whisker_high), fmt(st.mean), fmt(st.worst), len(st.outliers),
                        ";".join(fmt(v) for v in st.outliers)])


def write_dominance_csv(path, rows: Sequence[dict], pair: tuple[str, str], n_p: int) -> None:
    a, b = pair
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p_{i + 1}" for i in range(n_p)] + [f"phi_{a}", f"phi_{b}", f"diff_{a}_minus_{b}"])
        for r in rows:
            w.writerow([fmt(v) for v in r["p"]] + [fmt(r["phi_a"]), fmt(r["phi_b"]), fmt(r["diff"])])
