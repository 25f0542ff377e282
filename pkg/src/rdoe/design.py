"""A-optimal design procedures: nominal, min-max, scenario, two-stage, multi-stage.

All procedures share one evaluation kernel, ``ScenarioCriteria``, which
returns the A-criterion of every scenario for a candidate block of controls
(plus any experiments that were already carried out).  Non-anticipativity
is structural: scenarios that must agree on some experiments literally share
the decision variables for them.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InconsistentTree, SingularModelPoint
from .models import ModelSpec, NoiseModel, ParameterBox
from .optimizer import BoxProblem, SolveReport, SolverConfig, minimize_boxed, refine, start_points
from .statistics import CriterionConfig, a_criteria, fim_matrices

WEIGHT_TOL = 1e-9

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data types


@dataclass
class Design:
    """Ordered controls, one row per measurement."""

    controls: np.ndarray
    stage_marks: tuple[int, ...] = ()
    objective: float = math.nan
    report: Optional[SolveReport] = field(default=None, repr=False)

    def __post_init__(self):
        c = np.asarray(self.controls, dtype=float)
        self.controls = c[:, None] if c.ndim == 1 else c

    def __len__(self) -> int:
        return len(self.controls)

    def flat(self) -> np.ndarray:
        return self.controls.ravel()

    def to_dict(self) -> dict:
        out = {"kind": "design", "controls": self.controls.tolist(),
               "stage_marks": list(self.stage_marks), "objective": self.objective}
        if self.report is not None:
            out["local_minima"] = [{"x": x.tolist(), "f": f} for x, f in self.report.all_local_minima]
        return out


@dataclass(frozen=True)
class ScenarioSet:
    realizations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.realizations, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(r) == 0 or len(w) != len(r):
            raise ConfigError("scenario set needs one weight per realization")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ConfigError("scenario weights must be positive and sum to 1")
        object.__setattr__(self, "realizations", r)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "ScenarioSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    def __len__(self) -> int:
        return len(self.realizations)

    def unique(self) -> "ScenarioSet":
        """Merge identical realizations, summing their weights (first-seen order)."""
        keys: dict[tuple, int] = {}
        pts, ws = [], []
        for p, w in zip(self.realizations, self.weights):
            k = tuple(p.tolist())
            if k in keys:
                ws[keys[k]] += w
            else:
                keys[k] = len(pts)
                pts.append(p)
                ws.append(w)
        return ScenarioSet(np.array(pts), np.array(ws))

    def to_dict(self) -> dict:
        return {"realizations": self.realizations.tolist(), "weights": self.weights.tolist()}


def sample_scenarios(box: ParameterBox, mode: str = "full_factorial_3",
                     custom_weights: Optional[Sequence[float]] = None) -> ScenarioSet:
    """Discretise the parameter box.

    ``full_factorial_3`` takes every combination of lower, middle and upper
    values (first parameter varying slowest); ``corners_center`` takes the
    ``2**n_p`` corners followed by the midpoint.
    """
    lo, mid, hi = box.lower, box.midpoint, box.upper
    if mode == "full_factorial_3":
        levels = [(lo[i], mid[i], hi[i]) for i in range(box.n_p)]
        pts = np.array(list(itertools.product(*levels)))
    elif mode == "corners_center":
        levels = [(lo[i], hi[i]) for i in range(box.n_p)]
        pts = np.vstack([np.array(list(itertools.product(*levels))), mid[None, :]])
    elif mode == "nominal":
        pts = mid[None, :]
    else:
        raise ConfigError(f"unknown scenario mode {mode!r}")
    if custom_weights is None:
        return ScenarioSet.uniform(pts)
    return ScenarioSet(pts, np.asarray(custom_weights, dtype=float))


@dataclass(frozen=True)
class TreeNode:
    params: np.ndarray
    weight: float
    parent: Optional[int]  # index in the previous stage; None below the root


@dataclass
class ScenarioTree:
    """Robust stages ``1..n_r`` followed by the terminal stage.

    ``allocations[i]`` is the cumulative number of experiments done by the
    end of robust stage ``i + 1``; the terminal stage runs up to ``N``.
    Every robust-stage node must have children, and every stage-``n_r``
    node exactly one terminal child.
    """

    stages: list[list[TreeNode]]
    allocations: tuple[int, ...]
    N: int

    def __post_init__(self):
        self.allocations = tuple(int(a) for a in self.allocations)
        self.validate()

    @property
    def n_robust(self) -> int:
        return len(self.stages) - 1

    def validate(self) -> None:
        if len(self.stages) < 2:
            raise InconsistentTree("tree needs at least one robust stage and the terminal stage")
        if len(self.allocations) != self.n_robust:
            raise InconsistentTree("one allocation per robust stage is required")
        edges = (0,) + self.allocations + (self.N,)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InconsistentTree("allocations must satisfy 1 <= N_e^1 < ... < N_e^n_r < N")
        for i, nodes in enumerate(self.stages):
            if not nodes:
                raise InconsistentTree(f"stage {i + 1} is empty")
            wsum = sum(n.weight for n in nodes)
            if any(n.weight <= 0 for n in nodes) or abs(wsum - 1.0) > WEIGHT_TOL:
                raise InconsistentTree(f"stage {i + 1} weights must be positive and sum to 1")
            for n in nodes:
                if i == 0:
                    if n.parent is not None:
                        raise InconsistentTree("stage-1 nodes hang from the root")
                elif n.parent is None or not 0 <= n.parent < len(self.stages[i - 1]):
                    raise InconsistentTree(f"node in stage {i + 1} has an invalid parent")
        for i in range(self.n_robust):
            children: dict[int, list[TreeNode]] = {}
            for n in self.stages[i + 1]:
                children.setdefault(n.parent, []).append(n)
            for k, node in enumerate(self.stages[i]):
                kids = children.get(k, [])
                if not kids:
                    raise InconsistentTree(f"node {k} of stage {i + 1} has no children")
                if i + 1 == self.n_robust and len(kids) != 1:
                    raise InconsistentTree("each last robust node needs exactly one terminal node")
                if abs(node.weight - sum(c.weight for c in kids)) > WEIGHT_TOL:
                    raise InconsistentTree(
                        f"weight of node {k} in stage {i + 1} differs from the sum of its children"
                    )

    @classmethod
    def branching(cls, stage_sets: Sequence[ScenarioSet], allocations: Sequence[int],
                  N: int) -> "ScenarioTree":
        """Full branching: every node of stage ``i`` branches into ``stage_sets[i]``.

        Child weights are the parent weight times the scenario weight, which
        satisfies the parent-equals-sum-of-children rule by construction.
        Terminal nodes inherit the parameters and weights of their parents.
        """
        stages: list[list[TreeNode]] = []
        parents: list[TreeNode] = []
        for i, sset in enumerate(stage_sets):
            nodes = []
            for k, par in enumerate(parents or [None]):
                for p, w in zip(sset.realizations, sset.weights):
                    nodes.append(TreeNode(p.copy(), (par.weight if par else 1.0) * w,
                                          k if par is not None else None))
            stages.append(nodes)
            parents = nodes
        stages.append([TreeNode(n.params.copy(), n.weight, k) for k, n in enumerate(parents)])
        return cls(stages, tuple(allocations), N)

    def block_sizes(self) -> list[int]:
        edges = (0,) + self.allocations + (self.N,)
        return [edges[i + 1] - edges[i] for i in range(len(edges) - 1)]

    def block_key(self, stage: int, index: int) -> tuple[int, int]:
        """Decision block used by node ``index`` of ``stage`` (0-based stages).

        Robust-stage siblings share their parent's block; terminal nodes own
        theirs.
        """
        if stage == self.n_robust:
            return (stage, index)
        parent = self.stages[stage][index].parent
        return (stage, -1 if parent is None else parent)

    def path(self, terminal_index: int) -> list[int]:
        """Node indices per stage from stage 1 down to the given terminal node."""
        idx = [terminal_index]
        for s in range(self.n_robust, 0, -1):
            idx.append(self.stages[s][idx[-1]].parent)
        return idx[::-1]

    def to_dict(self) -> dict:
        return {
            "allocations": list(self.allocations),
            "N": self.N,
            "stages": [[{"params": n.params.tolist(), "weight": n.weight, "parent": n.parent}
                        for n in nodes] for nodes in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTree":
        stages = [[TreeNode(np.asarray(n["params"], float), float(n["weight"]), n.get("parent"))
                   for n in nodes] for nodes in d["stages"]]
        return cls(stages, tuple(d["allocations"]), int(d["N"]))


@dataclass
class StagedDesign:
    """Control blocks keyed by ``ScenarioTree.block_key``.

    ``accounting`` is ``"path"`` when every scenario's criterion uses the
    FIM of its whole flattened design (two-stage), ``"stage"`` when each
    node is scored on its own stage block (multi-stage).
    """

    tree: ScenarioTree
    blocks: dict[tuple[int, int], np.ndarray]
    objective: float
    accounting: str
    n_u: int = 1

    def node_controls(self, stage: int, index: int) -> np.ndarray:
        return self.blocks[self.tree.block_key(stage, index)]

    def scenario_design(self, terminal_index: int) -> Design:
        path = self.tree.path(terminal_index)
        parts = [self.node_controls(s, k) for s, k in enumerate(path)]
        marks = tuple(int(m) for m in np.cumsum([len(p) for p in parts])[:-1])
        return Design(np.vstack(parts).reshape(-1, self.n_u), stage_marks=marks)

    def flatten(self) -> list[Design]:
        return [self.scenario_design(t) for t in range(len(self.tree.stages[-1]))]

    def first_block(self) -> np.ndarray:
        return self.blocks[(0, -1)]

    def to_dict(self) -> dict:
        stages = []
        for s, nodes in enumerate(self.tree.stages):
            stages.append([
                {"params": n.params.tolist(), "weight": n.weight, "parent": n.parent,
                 "controls": self.node_controls(s, k).tolist()}
                for k, n in enumerate(nodes)
            ])
        return {
            "kind": "staged_design",
            "schema": 1,
            "accounting": self.accounting,
            "allocations": list(self.tree.allocations),
            "N": self.tree.N,
            "stage_marks": list(self.tree.allocations),
            "objective": self.objective,
            "stages": stages,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# Evaluation kernel


class ScenarioCriteria:
    """A-criterion of each scenario for candidate controls.

    ``prior`` holds experiments already performed (or fixed by an earlier
    stage); their information is added to every scenario's FIM.
    """

    def __init__(self, model: ModelSpec, params, noise: NoiseModel,
                 criterion: CriterionConfig, prior=None):
        self.model = model
        self.params = np.atleast_2d(np.asarray(params, dtype=float)).reshape(-1, model.n_p)
        self.sigma = noise.sigma
        self.criterion = criterion
        self.base = np.zeros((len(self.params), model.n_p, model.n_p))
        self.add_prior(prior)

    def add_prior(self, controls) -> None:
        if controls is None:
            return
        u = np.asarray(controls, dtype=float).reshape(-1, self.model.n_u)
        if len(u):
            self.base = self.base + fim_matrices(self.model, self.params, u, self.sigma)

    def fims(self, controls) -> np.ndarray:
        u = np.asarray(controls, dtype=float).reshape(-1, self.model.n_u)
        return self.base + fim_matrices(self.model, self.params, u, self.sigma)

    def __call__(self, controls) -> np.ndarray:
        try:
            mats = self.fims(controls)
        except SingularModelPoint:
            return np.full(len(self.params), self.criterion.penalty_value)
        return a_criteria(mats, self.criterion)


def _control_bounds(model: ModelSpec, n: int):
    return np.tile(model.u_lower, n), np.tile(model.u_upper, n)


def canonical_order(controls: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically (ascending for scalar controls)."""
    c = np.asarray(controls, dtype=float)
    if len(c) == 0:
        return c
    order = np.lexsort(c.T[::-1])
    return c[order]


def replicate_polish(problem: BoxProblem, x, fx: float, n: int, n_u: int,
                     cfg: SolverConfig) -> tuple[np.ndarray, float]:
    """Try copying one support point onto another, then refine locally.

    Optimal designs often repeat support points; a simplex rarely merges
    three coordinates on its own, so the replicated configurations are
    offered explicitly.  Repeats until no move improves ``f``.
    """
    x = np.asarray(x, dtype=float)
    # cheap screening run first; only promising moves get a full refine
    loose = cfg.with_(x_tol=max(cfg.x_tol, 1e-4), f_tol=max(cfg.f_tol, 1e-6), max_restarts=1)
    improved = True
    while improved:
        improved = False
        rows = x.reshape(n, n_u)
        seen = set()
        for i in range(n):
            for j in range(n):
                if i == j or np.array_equal(rows[i], rows[j]):
                    continue
                trial = rows.copy()
                trial[i] = rows[j]
                # the criterion ignores experiment order, so equal multisets are equal moves
                key = canonical_order(trial).tobytes()
                if key in seen:
                    continue
                seen.add(key)
                xt, ft, _ = refine(problem, trial.ravel(), loose)
                if ft < fx - cfg.f_tol * abs(fx):
                    xt, ft, _ = refine(problem, xt, cfg)
                    x, fx, improved = xt, ft, True
                    break
            if improved:
                break
    return x, fx


def _solve_block(model: ModelSpec, n: int, objective, solver_cfg: SolverConfig,
                 extra_starts=(), n_polish: int = 3) -> tuple[np.ndarray, float, SolveReport]:
    lo, hi = _control_bounds(model, n)
    problem = BoxProblem(objective, lo, hi)
    report = minimize_boxed(problem, solver_cfg, extra_starts)
    x_best, f_best = report.x_best, report.f_best
    if n > 1:
        for x0, f0 in report.all_local_minima[:n_polish]:
            x, fx = replicate_polish(problem, x0, f0, n, model.n_u, solver_cfg)
            if (fx, tuple(canonical_order(x.reshape(n, -1)).ravel())) < (
                    f_best, tuple(canonical_order(x_best.reshape(n, -1)).ravel())):
                x_best, f_best = x, fx
    u = canonical_order(x_best.reshape(n, model.n_u))
    report.x_best, report.f_best = u.ravel(), float(objective(u.ravel()))
    return u, report.f_best, report


def _check_n(N: int) -> None:
    if int(N) != N or N < 1:
        raise ConfigError(f"number of experiments must be a positive integer, got {N}")


# ---------------------------------------------------------------------------
# One-shot designs


def design_nominal(model: ModelSpec, p_hat, N: int, noise: NoiseModel,
                   solver_cfg: Optional[SolverConfig] = None,
                   criterion_cfg: Optional[CriterionConfig] = None,
                   prior=None, extra_starts=()) -> Design:
    """A-optimal design of ``N`` experiments at a single parameter guess."""
    _check_n(N)
    crit = ScenarioCriteria(model, p_hat, noise, criterion_cfg or CriterionConfig(), prior)
    u, f, rep = _solve_block(model, N, lambda x: crit(x)[0], solver_cfg or SolverConfig(),
                             extra_starts)
    return Design(u, objective=f, report=rep)


def design_minmax(model: ModelSpec, scenarios: ScenarioSet, N: int, noise: NoiseModel,
                  solver_cfg: Optional[SolverConfig] = None,
                  criterion_cfg: Optional[CriterionConfig] = None, prior=None) -> Design:
    """Minimise the worst scenario criterion over a shared design."""
    _check_n(N)
    crit = ScenarioCriteria(model, scenarios.realizations, noise,
                            criterion_cfg or CriterionConfig(), prior)
    u, f, rep = _solve_block(model, N, lambda x: float(np.max(crit(x))),
                             solver_cfg or SolverConfig())
    return Design(u, objective=f, report=rep)


def design_scenario(model: ModelSpec, scenarios: ScenarioSet, N: int, noise: NoiseModel,
                    solver_cfg: Optional[SolverConfig] = None,
                    criterion_cfg: Optional[CriterionConfig] = None, prior=None,
                    extra_starts=()) -> Design:
    """Minimise the weighted mean scenario criterion over a shared design."""
    _check_n(N)
    crit = ScenarioCriteria(model, scenarios.realizations, noise,
                            criterion_cfg or CriterionConfig(), prior)
    w = scenarios.weights
    u, f, rep = _solve_block(model, N, lambda x: float(w @ crit(x)),
                             solver_cfg or SolverConfig(), extra_starts)
    return Design(u, objective=f, report=rep)


def worst_and_mean(model: ModelSpec, scenarios: ScenarioSet, design, noise: NoiseModel,
                   criterion_cfg: Optional[CriterionConfig] = None) -> tuple[float, float]:
    """Worst-case and weighted-mean criterion of a fixed design over scenarios."""
    vals = ScenarioCriteria(model, scenarios.realizations, noise,
                            criterion_cfg or CriterionConfig())(getattr(design, "controls", design))
    return float(np.max(vals)), float(scenarios.weights @ vals)


# ---------------------------------------------------------------------------
# Two-stage design


def two_stage_tree(scenarios: ScenarioSet, N: int, N_e: int) -> ScenarioTree:
    return ScenarioTree.branching([scenarios], (N_e,), N)


def _two_stage_value(crit: ScenarioCriteria, w, shared, recourse) -> float:
    try:
        mats = crit.fims(shared)
        for s, r in enumerate(recourse):
            mats[s] += fim_matrices(crit.model, crit.params[s:s + 1], r, crit.sigma)[0]
    except SingularModelPoint:
        return crit.criterion.penalty_value
    return float(w @ a_criteria(mats, crit.criterion))


def design_two_stage(model: ModelSpec, scenarios: ScenarioSet, N: int, N_e: int,
                     noise: NoiseModel, solver_cfg: Optional[SolverConfig] = None,
                     criterion_cfg: Optional[CriterionConfig] = None, prior=None,
                     max_sweeps: int = 30, n_descents: int = 4,
                     scenario_design: Optional[Design] = None) -> StagedDesign:
    """Shared first ``N_e`` experiments, per-scenario recourse for the rest.

    The objective is the weighted sum over scenarios of the criterion of the
    scenario's complete design.  For ``0 < N_e < N`` the problem is solved
    by block-coordinate descent from several shared-block starts (one of
    them split from the scenario design, so the result is never worse than
    it), followed by a joint polish when the full dimension is moderate.
    Random shared-block starts are first ranked with a cheap recourse solve
    and only the best ``n_descents`` are descended.  ``scenario_design`` may
    pass in an already computed scenario design for the same inputs.
    """
    _check_n(N)
    if not 0 <= N_e <= N:
        raise ConfigError(f"need 0 <= N_e <= N, got N_e={N_e}, N={N}")
    solver_cfg = solver_cfg or SolverConfig()
    criterion_cfg = criterion_cfg or CriterionConfig()
    S, n_u = len(scenarios), model.n_u
    w = scenarios.weights
    n_rec = N - N_e
    empty = np.zeros((0, n_u))

    if N_e == N:
        d = design_scenario(model, scenarios, N, noise, solver_cfg, criterion_cfg, prior)
        return _two_stage_result(scenarios, N, N_e, d.controls, [empty] * S, d.objective, n_u)
    if N_e == 0:
        rec, total = [], 0.0
        for p, ws in zip(scenarios.realizations, w):
            d = design_nominal(model, p, N, noise, solver_cfg, criterion_cfg, prior)
            rec.append(d.controls)
            total += ws * d.objective
        return _two_stage_result(scenarios, N, N_e, empty, rec, total, n_u)

    crit = ScenarioCriteria(model, scenarios.realizations, noise, criterion_cfg, prior)
    inner_cfg = solver_cfg.with_(n_starts=min(8, solver_cfg.starts_for(n_rec * n_u)))
    lo_r, hi_r = _control_bounds(model, n_rec)
    lo_s, hi_s = _control_bounds(model, N_e)

    def recourse_problem(s, shared):
        sub = ScenarioCriteria(model, crit.params[s], noise, criterion_cfg)
        sub.base = crit.base[s:s + 1].copy()
        sub.add_prior(shared)
        return BoxProblem(lambda x: sub(x)[0], lo_r, hi_r)

    def solve_recourse(shared, warm=None, cfg=inner_cfg):
        out = []
        for s in range(S):
            prob = recourse_problem(s, shared)
            if warm is None:
                out.append(minimize_boxed(prob, cfg).x_best.reshape(n_rec, n_u))
            else:
                x, _, _ = refine(prob, warm[s].ravel(), solver_cfg)
                out.append(x.reshape(n_rec, n_u))
        return out

    def shared_problem(recourse):
        fixed = crit.base.copy()
        try:
            for s, r in enumerate(recourse):
                fixed[s] += fim_matrices(model, crit.params[s:s + 1], r, crit.sigma)[0]
        except SingularModelPoint:
            pass

        def obj(x):
            try:
                mats = fixed + fim_matrices(model, crit.params, x.reshape(-1, n_u), crit.sigma)
            except SingularModelPoint:
                return criterion_cfg.penalty_value
            return float(w @ a_criteria(mats, criterion_cfg))
        return BoxProblem(obj, lo_s, hi_s)

    # sweeps gain ever smaller amounts; stop once the relative gain is negligible
    sweep_tol = max(solver_cfg.f_tol, 1e-8)

    def descend(shared, recourse, value, sweeps):
        t0 = time.perf_counter()
        for sweep in range(sweeps):
            x, _, _ = refine(shared_problem(recourse), shared.ravel(), solver_cfg)
            shared = x.reshape(N_e, n_u)
            recourse = solve_recourse(shared, warm=recourse)
            new = _two_stage_value(crit, w, shared, recourse)
            log.debug("two-stage sweep %d: %.12g (%.1fs)", sweep + 1, new, time.perf_counter() - t0)
            if not new < value - sweep_tol * abs(value):
                return shared, recourse, min(value, new), True
            value = new
        return shared, recourse, value, False

    candidates = []
    scen = scenario_design
    if scen is None:
        scen = design_scenario(model, scenarios, N, noise, solver_cfg, criterion_cfg, prior)
    seen = set()
    for idx in itertools.combinations(range(N), N_e):
        sh = scen.controls[list(idx)]
        key = tuple(np.round(canonical_order(sh).ravel(), 12))
        if key in seen:
            continue
        seen.add(key)
        rest = np.delete(scen.controls, list(idx), axis=0)
        candidates.append((sh, [rest.copy() for _ in range(S)]))
        if len(seen) >= 4:
            break
    screen_cfg = inner_cfg.with_(n_starts=2, x_tol=max(solver_cfg.x_tol, 1e-4),
                                 f_tol=max(solver_cfg.f_tol, 1e-6), max_restarts=1)
    ranked = []
    for z in start_points(N_e * n_u, solver_cfg.starts_for(N_e * n_u), solver_cfg.seed):
        sh = (lo_s + z * (hi_s - lo_s)).reshape(N_e, n_u)
        val = _two_stage_value(crit, w, sh, solve_recourse(sh, cfg=screen_cfg))
        ranked.append((val, len(ranked), sh))
    ranked.sort(key=lambda r: r[:2])
    log.debug("two-stage screening values: %s", [round(r[0], 9) for r in ranked])
    candidates.extend((sh, None) for _, _, sh in ranked[:n_descents])

    # successive halving: a short descent for every candidate, then the
    # most promising ones run to convergence
    pool = []
    for sh, rec in candidates:
        if rec is None:
            rec = solve_recourse(sh)
        log.debug("two-stage candidate %s", np.round(sh.ravel(), 4).tolist())
        val = _two_stage_value(crit, w, sh, rec)
        pool.append(descend(sh, rec, val, min(2, max_sweeps)))

    def key(c):
        return (c[2], tuple(canonical_order(c[0]).ravel().tolist()))

    pool.sort(key=key)
    finished = []
    for sh, rec, val, done in pool[:2]:
        if not done:
            log.debug("two-stage continuing from %.12g", val)
            sh, rec, val, _ = descend(sh, rec, val, max_sweeps - 2)
        finished.append((sh, rec, val, True))
    shared, recourse, _, _ = min(finished + pool[2:], key=key)
    value = _two_stage_value(crit, w, shared, recourse)

    total_dim = (N_e + S * n_rec) * n_u
    if total_dim <= 40:
        def joint(x):
            sh = x[:N_e * n_u].reshape(N_e, n_u)
            rec = x[N_e * n_u:].reshape(S, n_rec, n_u)
            return _two_stage_value(crit, w, sh, rec)
        lo, hi = _control_bounds(model, N_e + S * n_rec)
        x0 = np.concatenate([shared.ravel()] + [r.ravel() for r in recourse])
        x, fx, _ = refine(BoxProblem(joint, lo, hi), x0, solver_cfg)
        if fx < value:
            shared = x[:N_e * n_u].reshape(N_e, n_u)
            recourse = list(x[N_e * n_u:].reshape(S, n_rec, n_u))
    shared = canonical_order(shared)
    recourse = [canonical_order(r) for r in recourse]
    value = _two_stage_value(crit, w, shared, recourse)
    return _two_stage_result(scenarios, N, N_e, shared, recourse, value, n_u)


def _two_stage_result(scenarios, N, N_e, shared, recourse, value, n_u) -> StagedDesign:
    # the tree requires 1 <= N_e < N; degenerate splits keep the same layout
    tree = _LooseTree.make(scenarios, N, N_e)
    blocks = {(0, -1): np.asarray(shared, float).reshape(-1, n_u)}
    for s, r in enumerate(recourse):
        blocks[(1, s)] = np.asarray(r, float).reshape(-1, n_u)
    return StagedDesign(tree, blocks, float(value), "path", n_u)


class _LooseTree(ScenarioTree):
    """Two-stage tree that also admits the degenerate splits N_e = 0 and N_e = N."""

    @classmethod
    def make(cls, scenarios: ScenarioSet, N: int, N_e: int) -> "ScenarioTree":
        stages = [[TreeNode(p.copy(), float(w), None) for p, w in zip(scenarios.realizations, scenarios.weights)]]
        stages.append([TreeNode(p.copy(), float(w), k) for k, (p, w) in
                       enumerate(zip(scenarios.realizations, scenarios.weights))])
        t = cls.__new__(cls)
        t.stages, t.allocations, t.N = stages, (int(N_e),), int(N)
        return t


# ---------------------------------------------------------------------------
# Multi-stage design


def design_multi_stage(model: ModelSpec, tree: ScenarioTree, noise: NoiseModel,
                       solver_cfg: Optional[SolverConfig] = None,
                       criterion_cfg: Optional[CriterionConfig] = None) -> StagedDesign:
    """Stage-wise multi-stage design over a scenario tree.

    Each node is scored on the FIM of its own stage block at its own
    parameter realization, weighted by the node weight.  Because a block
    only enters the terms of the nodes that share it, the problem separates
    into one weighted scenario design per block; solving the blocks one by
    one gives the joint optimum.
    """
    tree.validate()
    solver_cfg = solver_cfg or SolverConfig()
    criterion_cfg = criterion_cfg or CriterionConfig()
    sizes = tree.block_sizes()
    groups: dict[tuple[int, int], list[TreeNode]] = {}
    for s, nodes in enumerate(tree.stages):
        for k, node in enumerate(nodes):
            groups.setdefault(tree.block_key(s, k), []).append(node)
    blocks: dict[tuple[int, int], np.ndarray] = {}
    total = 0.0
    for key in sorted(groups):
        members = groups[key]
        n = sizes[key[0]]
        params = np.array([m.params for m in members])
        w = np.array([m.weight for m in members])
        crit = ScenarioCriteria(model, params, noise, criterion_cfg)
        u, f, _ = _solve_block(model, n, lambda x, c=crit, w=w: float(w @ c(x)), solver_cfg)
        blocks[key] = u
        total += f
    return StagedDesign(tree, blocks, total, "stage", model.n_u)


def multi_stage_objective(model: ModelSpec, staged: StagedDesign, noise: NoiseModel,
                          criterion_cfg: Optional[CriterionConfig] = None) -> float:
    """Stage-wise objective of a given staged design, summed node by node."""
    criterion_cfg = criterion_cfg or CriterionConfig()
    total = 0.0
    for s, nodes in enumerate(staged.tree.stages):
        for k, node in enumerate(nodes):
            crit = ScenarioCriteria(model, node.params, noise, criterion_cfg)
            total += node.weight * float(crit(staged.node_controls(s, k))[0])
    return total


def two_stage_objective(model: ModelSpec, scenarios: ScenarioSet, staged: StagedDesign,
                        noise: NoiseModel, criterion_cfg: Optional[CriterionConfig] = None,
                        prior=None) -> float:
    """Path-wise two-stage objective of a given staged design."""
    crit = ScenarioCriteria(model, scenarios.realizations, noise,
                            criterion_cfg or CriterionConfig(), prior)
    rec = [staged.blocks[(1, s)] for s in range(len(scenarios))]
    return _two_stage_value(crit, scenarios.weights, staged.first_block(), rec)
