"""Deterministic multi-start Nelder-Mead for box-constrained problems.

Every start works in coordinates normalised to the unit box; trial points
are projected (clipped) onto the box before evaluation, so every evaluated
point is feasible.  A start is restarted from its best vertex with a fresh
simplex until a restart no longer improves the objective by more than
``f_tol``, which guards against simplices collapsing on a bound face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AllStartsFailed, DomainError
from .rng import XorShift64Star


@dataclass(frozen=True)
class BoxProblem:
    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise DomainError("bounds must be non-empty vectors of equal length")
        if not np.all(lo < hi):
            raise DomainError("lower bounds must be strictly below upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size


def default_n_starts(dim: int) -> int:
    if dim <= 4:
        return 16
    if dim <= 12:
        return 32
    return 64


@dataclass(frozen=True)
class SolverConfig:
    """Multi-start settings; ``n_starts=None`` picks a count from the dimension."""

    n_starts: Optional[int] = None
    max_iters: int = 2000
    x_tol: float = 1e-7
    f_tol: float = 1e-10
    seed: int = 0
    initial_step: float = 0.1
    max_restarts: int = 4

    def __post_init__(self):
        if self.n_starts is not None and self.n_starts < 1:
            raise DomainError("n_starts must be at least 1")
        if not (self.x_tol > 0 and self.f_tol > 0):
            raise DomainError("tolerances must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be at least 1")

    def starts_for(self, dim: int) -> int:
        return self.n_starts if self.n_starts is not None else default_n_starts(dim)

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "n_starts": self.n_starts,
            "max_iters": self.max_iters,
            "x_tol": self.x_tol,
            "f_tol": self.f_tol,
            "seed": self.seed,
            "initial_step": self.initial_step,
            "max_restarts": self.max_restarts,
        }


@dataclass
class SolveReport:
    x_best: np.ndarray
    f_best: float
    n_evals: int
    starts_converged: int
    all_local_minima: list[tuple[np.ndarray, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "x_best": self.x_best.tolist(),
            "f_best": self.f_best,
            "n_evals": self.n_evals,
            "starts_converged": self.starts_converged,
            "local_minima": [{"x": x.tolist(), "f": f} for x, f in self.all_local_minima],
        }


def _recurrence_alpha(dim: int) -> np.ndarray:
    # generalised golden ratio: unique positive root of x^(d+1) = x + 1
    g = 2.0
    for _ in range(64):
        g = (1.0 + g) ** (1.0 / (dim + 1))
    return np.array([(1.0 / g) ** (j + 1) % 1.0 for j in range(dim)])


def start_points(dim: int, n: int, seed: int) -> np.ndarray:
    """Unit-box start points: the midpoint, then a seeded additive recurrence."""
    pts = [np.full(dim, 0.5)]
    if n > 1:
        rng = XorShift64Star(seed, stream=0x5EED)
        offset = rng.uniforms(dim)
        alpha = _recurrence_alpha(dim)
        for k in range(1, n):
            pts.append((offset + k * alpha) % 1.0)
    return np.array(pts[:n])


def _lex_key(x: np.ndarray, f: float):
    return (f, tuple(x.tolist()))


def _nelder_mead(fun, z0, cfg: SolverConfig, x_tol_unit: float):
    """One projected Nelder-Mead run with restarts in the unit box.

    Returns ``(z_best, f_best, n_evals, converged)``.
    """
    n = z0.size
    # adaptive coefficients (Gao & Han) behave better beyond a few dimensions
    a_refl = 1.0
    a_exp = 1.0 + 2.0 / n if n > 2 else 2.0
    a_con = 0.75 - 0.5 / n if n > 2 else 0.5
    a_shr = 1.0 - 1.0 / n if n > 2 else 0.5

    n_evals = 0

    def f(z):
        nonlocal n_evals
        n_evals += 1
        v = fun(z)
        return v if math.isfinite(v) else math.inf

    z_best = np.clip(z0, 0.0, 1.0)
    f_best = f(z_best)
    step = cfg.initial_step
    iters = 0
    converged = False
    for restart in range(cfg.max_restarts + 1):
        sim = np.empty((n + 1, n))
        sim[0] = z_best
        for i in range(n):
            v = z_best.copy()
            v[i] = v[i] + step if v[i] + step <= 1.0 else v[i] - step
            sim[i + 1] = v
        fs = np.empty(n + 1)
        fs[0] = f_best
        for i in range(1, n + 1):
            fs[i] = f(sim[i])
        run_converged = False
        while iters < cfg.max_iters:
            order = np.argsort(fs, kind="stable")
            sim, fs = sim[order], fs[order]
            diam = np.max(np.abs(sim[1:] - sim[0]))
            spread = fs[-1] - fs[0] if math.isfinite(fs[-1]) else math.inf
            # f_tol is relative: criterion values span many orders of magnitude
            if diam < x_tol_unit or (math.isfinite(spread) and spread <= cfg.f_tol * abs(fs[0])):
                run_converged = True
                break
            iters += 1
            centroid = sim[:-1].mean(axis=0)
            xr = np.clip(centroid + a_refl * (centroid - sim[-1]), 0.0, 1.0)
            fr = f(xr)
            if fr < fs[0]:
                xe = np.clip(centroid + a_exp * (xr - centroid), 0.0, 1.0)
                fe = f(xe)
                if fe < fr:
                    sim[-1], fs[-1] = xe, fe
                else:
                    sim[-1], fs[-1] = xr, fr
                continue
            if fr < fs[-2]:
                sim[-1], fs[-1] = xr, fr
                continue
            if fr < fs[-1]:
                xc = np.clip(centroid + a_con * (xr - centroid), 0.0, 1.0)
                fc = f(xc)
                if fc <= fr:
                    sim[-1], fs[-1] = xc, fc
                    continue
            else:
                xc = np.clip(centroid + a_con * (sim[-1] - centroid), 0.0, 1.0)
                fc = f(xc)
                if fc < fs[-1]:
                    sim[-1], fs[-1] = xc, fc
                    continue
            for i in range(1, n + 1):
                sim[i] = sim[0] + a_shr * (sim[i] - sim[0])
                fs[i] = f(sim[i])
        k = int(np.argmin(fs))
        improved = fs[k] < f_best - cfg.f_tol * abs(f_best)
        if fs[k] < f_best:
            z_best, f_best = sim[k].copy(), fs[k]
        converged = run_converged
        if not improved and restart > 0 or iters >= cfg.max_iters:
            break
        step = max(10.0 * x_tol_unit, 0.5 * step)
    return z_best, f_best, n_evals, converged


def minimize_boxed(problem: BoxProblem, cfg: Optional[SolverConfig] = None,
                   extra_starts: Sequence[np.ndarray] = ()) -> SolveReport:
    """Multi-start projected Nelder-Mead; deterministic for a fixed ``cfg.seed``.

    ``extra_starts`` (points in problem coordinates) are run before the
    midpoint and the recurrence starts.
    """
    cfg = cfg or SolverConfig()
    lo, hi = problem.lower, problem.upper
    width = hi - lo

    def to_x(z):
        return lo + z * width

    def fun(z):
        return float(problem.objective(to_x(z)))

    starts = [np.clip((np.asarray(s, float) - lo) / width, 0.0, 1.0) for s in extra_starts]
    starts += list(start_points(problem.dim, cfg.starts_for(problem.dim), cfg.seed))

    results = []
    total_evals = 0
    n_conv = 0
    for z0 in starts:
        z, fz, ne, conv = _nelder_mead(fun, z0, cfg, cfg.x_tol)
        total_evals += ne
        n_conv += int(conv)
        if math.isfinite(fz):
            # snapping every start keeps f_best monotone in the number of starts
            x, fz, ns = snap_to_bounds(problem, to_x(z), fz)
            total_evals += ns
            results.append((x, fz))
    if not results:
        raise AllStartsFailed(f"all {len(starts)} starts returned non-finite objectives")
    # order-independent merge: lowest f, ties by lexicographically smallest x
    x_best, f_best = min(results, key=lambda r: _lex_key(r[0], r[1]))
    report = SolveReport(np.array(x_best), float(f_best), total_evals, n_conv, results)
    return dedupe_minima(report, 1e-4 * float(np.max(width)))


def snap_to_bounds(problem: BoxProblem, x, fx: float) -> tuple[np.ndarray, float, int]:
    """Move coordinates onto a bound whenever that does not increase ``f``.

    Resolves plateaus below the simplex's resolution, e.g. controls in a
    saturated region where the objective still decreases toward the bound
    by less than one ulp per simplex step.
    """
    x = np.array(x, dtype=float)
    n = 0
    for i in range(x.size):
        for b in (problem.lower[i], problem.upper[i]):
            if x[i] == b:
                continue
            trial = x.copy()
            trial[i] = b
            ft = float(problem.objective(trial))
            n += 1
            if math.isfinite(ft) and ft <= fx:
                x, fx = trial, ft
    return x, fx, n


def dedupe_minima(report: SolveReport, radius: float) -> SolveReport:
    """Merge local minima closer than ``radius`` (infinity norm), keeping the lowest."""
    kept: list[tuple[np.ndarray, float]] = []
    for x, fx in sorted(report.all_local_minima, key=lambda r: _lex_key(np.asarray(r[0]), r[1])):
        x = np.asarray(x, dtype=float)
        if any(np.max(np.abs(x - y)) <= radius for y, _ in kept):
            continue
        kept.append((x, fx))
    return replace(report, all_local_minima=kept)


def refine(problem: BoxProblem, x0, cfg: Optional[SolverConfig] = None) -> tuple[np.ndarray, float, int]:
    """Single local Nelder-Mead run (with restarts) from ``x0``.

    Returns ``(x, f, n_evals)``; ``f`` never exceeds the objective at the
    projected ``x0``.
    """
    cfg = cfg or SolverConfig()
    lo, hi = problem.lower, problem.upper
    width = hi - lo
    z0 = np.clip((np.asarray(x0, dtype=float) - lo) / width, 0.0, 1.0)
    z, fz, ne, _ = _nelder_mead(lambda z: float(problem.objective(lo + z * width)), z0, cfg, cfg.x_tol)
    x, fz, ns = snap_to_bounds(problem, lo + z * width, fz)
    return x, fz, ne + ns
