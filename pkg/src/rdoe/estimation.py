"""Weighted nonlinear least squares over the parameter box.

The search is a multi-start Nelder-Mead run on the weighted sum of squared
residuals, followed by a projected Levenberg-Marquardt polish that uses the
model's analytic sensitivities.  The polish only accepts steps that lower
the objective, so it can never undo the global search.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, SingularFim, SingularModelPoint, UnderdeterminedData
from .models import ModelSpec, NoiseModel, ParameterBox, model_sensitivities, model_values
from .optimizer import BoxProblem, SolveReport, SolverConfig, minimize_boxed
from .rng import XorShift64Star
from .statistics import DEFAULT_ALPHA, ConfidenceEllipsoid, Fim, assemble_fim, confidence_ellipsoid

NOISE_STREAM = 0x4E015E


@dataclass
class Dataset:
    """Measured outputs ``y`` (``N x n_y``) at controls ``u`` (``N x n_u``)."""

    controls: np.ndarray
    outputs: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        u = np.asarray(self.controls, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        y = y.reshape(-1, len(self.noise.sigma))
        if len(u) != len(y):
            raise ConfigError(f"{len(u)} control rows but {len(y)} measurement rows")
        if y.shape[1] != len(self.noise.sigma):
            raise ConfigError(f"measurements have {y.shape[1]} outputs, noise model has {len(self.noise.sigma)}")
        if not np.all(np.isfinite(y)):
            raise ConfigError("measured outputs must be finite")
        self.controls, self.outputs = u, y

    def __len__(self) -> int:
        return len(self.controls)

    def extend(self, controls, outputs) -> "Dataset":
        u = np.asarray(controls, dtype=float).reshape(-1, self.controls.shape[1])
        y = np.asarray(outputs, dtype=float).reshape(-1, self.outputs.shape[1])
        return Dataset(np.vstack([self.controls, u]), np.vstack([self.outputs, y]), self.noise)

    @classmethod
    def empty(cls, model: ModelSpec, noise: NoiseModel) -> "Dataset":
        return cls(np.zeros((0, model.n_u)), np.zeros((0, model.n_y)), noise)

    @classmethod
    def from_csv(cls, path: Union[str, Path], model: ModelSpec, noise: NoiseModel) -> "Dataset":
        """Read ``u_1..u_nu,y_1..y_ny`` rows (header required)."""
        expected = [f"u_{i + 1}" for i in range(model.n_u)] + [f"y_{i + 1}" for i in range(model.n_y)]
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        if not rows:
            raise ConfigError(f"{path}: empty dataset file")
        header = [h.strip() for h in rows[0]]
        if header != expected:
            raise ConfigError(f"{path}: header must be {','.join(expected)}, got {','.join(header)}")
        values = []
        for lineno, r in enumerate(rows[1:], start=2):
            if len(r) != len(expected):
                raise ConfigError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(r)}")
            try:
                values.append([float(v) for v in r])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        arr = np.array(values, dtype=float).reshape(-1, len(expected))
        return cls(arr[:, :model.n_u], arr[:, model.n_u:], noise)

    def to_csv(self, path: Union[str, Path]) -> None:
        n_u, n_y = self.controls.shape[1], self.outputs.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"u_{i + 1}" for i in range(n_u)] + [f"y_{i + 1}" for i in range(n_y)])
            for u, y in zip(self.controls, self.outputs):
                w.writerow([f"{v:.17g}" for v in (*u, *y)])


@dataclass
class Estimate:
    p_hat: np.ndarray
    sse: float
    fim_at_estimate: Fim
    ellipsoid: Optional[ConfidenceEllipsoid]
    report: Optional[SolveReport] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "p_hat": self.p_hat.tolist(),
            "sse": self.sse,
            "fim": self.fim_at_estimate.matrix.tolist(),
            "n_obs": self.fim_at_estimate.n_obs,
            "ellipsoid": None if self.ellipsoid is None else self.ellipsoid.to_dict(),
        }


def weighted_sse(model: ModelSpec, data: Dataset, p) -> float:
    """``sum_i sum_tau sigma_i^-2 (y_m - y_hat(p))^2``; ``inf`` at singular points."""
    try:
        pred = model_values(model, np.asarray(p, dtype=float), data.controls)
    except SingularModelPoint:
        return math.inf
    r = (data.outputs - pred.reshape(data.outputs.shape)) / data.noise.sigma
    v = float(np.sum(r * r))
    return v if math.isfinite(v) else math.inf


def _lm_polish(model: ModelSpec, data: Dataset, box: ParameterBox, p0: np.ndarray,
               f0: float, max_iter: int = 100) -> tuple[np.ndarray, float]:
    # projected Levenberg-Marquardt on the free coordinates of the box
    free = box.upper > box.lower
    if not np.any(free) or f0 == 0.0:
        return p0, f0
    sig = data.noise.sigma
    p, f = p0.copy(), f0
    lam = 1e-3
    for _ in range(max_iter):
        try:
            pred = model_values(model, p, data.controls).reshape(data.outputs.shape)
            q = model_sensitivities(model, p, data.controls).reshape(len(data), -1, model.n_p)
        except SingularModelPoint:
            break
        r = ((data.outputs - pred) / sig).ravel()
        J = (q / sig[:, None]).reshape(-1, model.n_p)[:, free]
        g = J.T @ r
        H = J.T @ J
        improved = done = False
        for _ in range(12):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-300))
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p.copy()
            trial[free] = np.clip(p[free] + step, box.lower[free], box.upper[free])
            ft = weighted_sse(model, data, trial)
            if ft < f:
                done = f - ft <= 1e-15 * f or np.max(np.abs(trial - p)) <= 1e-15 * (1.0 + np.max(np.abs(p)))
                p, f = trial, ft
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or done or f == 0.0:
            break
    return p, f


def least_squares_estimate(model: ModelSpec, data: Dataset, box: ParameterBox,
                           cfg: Optional[SolverConfig] = None,
                           alpha: float = DEFAULT_ALPHA) -> Estimate:
    """Maximum-likelihood estimate under known Gaussian noise, confined to ``box``.

    Raises ``UnderdeterminedData`` when the dataset has fewer scalar
    measurements than parameters.  The ellipsoid is ``None`` when the FIM
    at the estimate is singular.
    """
    if len(data) * model.n_y < model.n_p:
        raise UnderdeterminedData(
            f"{len(data)} measurements x {model.n_y} outputs < {model.n_p} parameters"
        )
    if box.n_p != model.n_p:
        raise ConfigError(f"box has {box.n_p} parameters, model {model.id!r} has {model.n_p}")
    cfg = cfg or SolverConfig()
    free = box.upper > box.lower
    report = None
    if np.any(free):
        base = box.lower.copy()

        def obj(x):
            p = base.copy()
            p[free] = x
            return weighted_sse(model, data, p)

        report = minimize_boxed(BoxProblem(obj, box.lower[free], box.upper[free]), cfg)
        p = base.copy()
        p[free] = report.x_best
        f = report.f_best
    else:
        p = box.lower.copy()
        f = weighted_sse(model, data, p)
    p, f = _lm_polish(model, data, box, p, f)
    fim = assemble_fim(model, p, data.controls, data.noise)
    try:
        ell = confidence_ellipsoid(fim, p, alpha)
    except SingularFim:
        ell = None
    return Estimate(p, float(f), fim, ell, report)


def _as_rng(rng_seed) -> XorShift64Star:
    if isinstance(rng_seed, XorShift64Star):
        return rng_seed
    return XorShift64Star(int(rng_seed), stream=NOISE_STREAM)


def simulate_measurement(model: ModelSpec, p_true, u, noise: NoiseModel,
                         rng_seed: Union[int, XorShift64Star]) -> np.ndarray:
    """``y_hat(p_true, u)`` plus Gaussian noise with standard deviations ``noise.sigma``.

    ``rng_seed`` is an integer seed or a generator to draw from (so that a
    stream of measurements can share one generator).
    """
    rng = _as_rng(rng_seed)
    p = np.asarray(p_true, dtype=float)
    y = model_values(model, p, np.atleast_1d(np.asarray(u, dtype=float))).reshape(model.n_y)
    return y + noise.sigma * rng.normals(model.n_y)


def simulate_dataset(model: ModelSpec, p_true, controls, noise: NoiseModel,
                     rng_seed: Union[int, XorShift64Star], noiseless: bool = False) -> Dataset:
    rng = _as_rng(rng_seed)
    u = np.asarray(controls, dtype=float).reshape(-1, model.n_u)
    if noiseless:
        y = model_values(model, np.asarray(p_true, float), u).reshape(len(u), model.n_y)
    else:
        y = np.array([simulate_measurement(model, p_true, row, noise, rng) for row in u])
    return Dataset(u, y.reshape(len(u), model.n_y), noise)
