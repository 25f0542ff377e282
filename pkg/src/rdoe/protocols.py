"""Re-estimation loops: sequential design and the two-stage application protocol.

Both loops are written as step-wise runners (``next_block`` returns the
controls to apply, ``ingest`` takes the measurements back) so that the same
code drives programmatic runs, Monte-Carlo trials and the interactive
session.  A measurement source supplies outputs for a block of controls and
may, in revealed-truth mode, hand back the true parameters in place of an
estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .design import (
    Design,
    ScenarioSet,
    ScenarioCriteria,
    design_nominal,
    design_two_stage,
    sample_scenarios,
)
from .errors import ConfigError, UnderdeterminedData
from .estimation import Dataset, Estimate, least_squares_estimate, simulate_measurement, NOISE_STREAM
from .models import ModelSpec, NoiseModel, ParameterBox, model_values
from .optimizer import SolverConfig
from .rng import XorShift64Star
from .statistics import DEFAULT_ALPHA, CriterionConfig


class MeasurementSource(Protocol):
    def measure(self, controls: np.ndarray) -> np.ndarray:
        """Outputs (``len(controls) x n_y``) for a block of controls."""

    def revealed_parameters(self) -> Optional[np.ndarray]:
        """True parameters in revealed-truth mode, ``None`` otherwise."""


class SimulatedPlant:
    """Model-based plant with seeded Gaussian noise.

    ``reveal_truth=True`` reproduces the evaluation idealization where
    re-estimation returns the true parameters.  ``noiseless=True`` returns
    exact model outputs.
    """

    def __init__(self, model: ModelSpec, p_true, noise: NoiseModel, seed: int = 0,
                 reveal_truth: bool = False, noiseless: bool = False):
        self.model = model
        self.p_true = np.asarray(p_true, dtype=float)
        self.noise = noise
        self.reveal_truth = reveal_truth
        self.noiseless = noiseless
        self._rng = XorShift64Star(int(seed), stream=NOISE_STREAM)

    def measure(self, controls) -> np.ndarray:
        u = np.asarray(controls, dtype=float).reshape(-1, self.model.n_u)
        if self.noiseless:
            return model_values(self.model, self.p_true, u).reshape(len(u), self.model.n_y)
        return np.array([simulate_measurement(self.model, self.p_true, row, self.noise, self._rng)
                         for row in u]).reshape(len(u), self.model.n_y)

    def revealed_parameters(self) -> Optional[np.ndarray]:
        return self.p_true.copy() if self.reveal_truth else None


@dataclass(frozen=True)
class StopConfig:
    """Early-stopping rules; zero disables a rule.

    ``rel_tol``: stop when a block improves the criterion of the cumulative
    design (at the current estimate) by less than this fraction.
    ``step_tol``: stop when the estimate moves by less than this fraction of
    the box width in every coordinate.
    """

    rel_tol: float = 0.0
    step_tol: float = 0.0

    def to_dict(self) -> dict:
        return {"rel_tol": self.rel_tol, "step_tol": self.step_tol}


@dataclass
class StepRecord:
    step: int
    controls: np.ndarray
    measurements: np.ndarray
    p_hat_before: np.ndarray
    p_hat_after: np.ndarray
    estimate: Optional[Estimate]
    revealed: bool
    phi: float
    improvement: float
    stop_reason: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "controls": self.controls.tolist(),
            "measurements": self.measurements.tolist(),
            "p_hat_before": self.p_hat_before.tolist(),
            "p_hat_after": self.p_hat_after.tolist(),
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
            "revealed": self.revealed,
            "phi": self.phi,
            "improvement": self.improvement,
            "stop_reason": self.stop_reason,
        }


@dataclass
class _Settings:
    model: ModelSpec
    box: ParameterBox
    noise: NoiseModel
    N: int
    solver_cfg: SolverConfig
    criterion_cfg: CriterionConfig
    stop: StopConfig
    alpha: float


class _Runner:
    """State shared by the re-estimation loops."""

    def __init__(self, settings: _Settings, p_hat0):
        self.s = settings
        self.p_hat = np.asarray(p_hat0, dtype=float).copy()
        if self.p_hat.shape != (settings.model.n_p,):
            raise ConfigError(f"initial estimate must have {settings.model.n_p} entries")
        self.data = Dataset.empty(settings.model, settings.noise)
        self.history: list[StepRecord] = []
        self.stop_reason: Optional[str] = None
        self._pending: Optional[np.ndarray] = None

    @property
    def used(self) -> int:
        return len(self.data)

    @property
    def remaining(self) -> int:
        return self.s.N - self.used

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    def applied(self) -> Design:
        return Design(self.data.controls.copy())

    def _phi(self, p, controls) -> float:
        if len(controls) == 0:
            return math.inf
        crit = ScenarioCriteria(self.s.model, p, self.s.noise, self.s.criterion_cfg)
        return float(crit(controls)[0])

    def next_block(self) -> np.ndarray:
        if self.finished:
            raise RuntimeError("the protocol has already stopped")
        if self._pending is None:
            self._pending = np.asarray(self._design_block(), dtype=float).reshape(-1, self.s.model.n_u)
        return self._pending.copy()

    def _design_block(self) -> np.ndarray:
        raise NotImplementedError

    def _update_estimate(self, revealed) -> tuple[np.ndarray, Optional[Estimate]]:
        if revealed is not None:
            return np.asarray(revealed, dtype=float).copy(), None
        try:
            est = least_squares_estimate(self.s.model, self.data, self.s.box, self.s.solver_cfg, self.s.alpha)
        except UnderdeterminedData:
            return self.p_hat.copy(), None
        return est.p_hat.copy(), est

    def ingest(self, measurements, revealed=None) -> StepRecord:
        """Record the outputs for the pending block and re-estimate."""
        block = self.next_block()
        y = np.asarray(measurements, dtype=float).reshape(len(block), self.s.model.n_y)
        prior_controls = self.data.controls.copy()
        self.data = self.data.extend(block, y)
        before = self.p_hat
        after, est = self._update_estimate(revealed)
        phi_prev = self._phi(after, prior_controls)
        phi = self._phi(after, self.data.controls)
        improvement = (phi_prev - phi) / abs(phi_prev) if math.isfinite(phi_prev) and phi_prev else math.inf
        self.p_hat = after
        self._pending = None
        rec = StepRecord(len(self.history) + 1, block, y, before, after, est,
                         revealed is not None, phi, improvement)
        rec.stop_reason = self._check_stop(before, after, improvement)
        self.stop_reason = rec.stop_reason
        self.history.append(rec)
        return rec

    def _check_stop(self, before, after, improvement) -> Optional[str]:
        if self.remaining <= 0:
            return "budget"
        st = self.s.stop
        if st.rel_tol > 0 and improvement < st.rel_tol:
            return "rel_tol"
        if st.step_tol > 0:
            width = self.s.box.width
            moved = np.abs(after - before)
            scaled = np.where(width > 0, moved / np.where(width > 0, width, 1.0), 0.0)
            if np.all(scaled < st.step_tol):
                return "step_tol"
        return None

    def run(self, source: MeasurementSource) -> list[StepRecord]:
        while not self.finished:
            block = self.next_block()
            self.ingest(source.measure(block), source.revealed_parameters())
        return self.history


class SequentialRunner(_Runner):
    """Nominal design of ``N_e_step`` experiments at the current estimate, repeated.

    Every block is designed with the experiments already performed counted
    as prior information, so the block maximises the information of the
    cumulative design.  ``first_block`` supplies a precomputed first block
    (it depends only on the initial estimate).
    """

    def __init__(self, model: ModelSpec, box: ParameterBox, p_hat0, N: int, N_e_step: int,
                 noise: NoiseModel, solver_cfg: Optional[SolverConfig] = None,
                 criterion_cfg: Optional[CriterionConfig] = None,
                 stop: Optional[StopConfig] = None, alpha: float = DEFAULT_ALPHA,
                 first_block=None):
        if N_e_step < 1:
            raise ConfigError("N_e_step must be at least 1")
        if N < 1:
            raise ConfigError("N must be at least 1")
        super().__init__(_Settings(model, box, noise, int(N), solver_cfg or SolverConfig(),
                                   criterion_cfg or CriterionConfig(), stop or StopConfig(), alpha),
                         p_hat0)
        self.N_e_step = int(N_e_step)
        self._first = None if first_block is None else np.asarray(first_block, float)

    def _design_block(self) -> np.ndarray:
        n = min(self.N_e_step, self.remaining)
        if self.used == 0 and self._first is not None:
            return self._first
        d = design_nominal(self.s.model, self.p_hat, n, self.s.noise, self.s.solver_cfg,
                           self.s.criterion_cfg, prior=self.data.controls if self.used else None)
        return d.controls


class TwoStageRunner(_Runner):
    """Two-stage application protocol.

    The first ``N_e`` experiments are the shared block of the two-stage
    design over ``scenarios``.  In ``open_loop`` mode the remaining
    experiments are a single nominal design at the re-estimated parameters.
    In ``closed_loop`` mode the two-stage design is repeated on the box
    shrunk to the confidence ellipsoid's bounding box (intersected with the
    current box) while more than ``N_e`` experiments remain, then finished
    nominally.
    """

    def __init__(self, model: ModelSpec, box: ParameterBox, scenarios: ScenarioSet, N: int,
                 N_e: int, noise: NoiseModel, mode: str = "open_loop",
                 solver_cfg: Optional[SolverConfig] = None,
                 criterion_cfg: Optional[CriterionConfig] = None,
                 stop: Optional[StopConfig] = None, alpha: float = DEFAULT_ALPHA,
                 scenario_mode: str = "full_factorial_3", first_block=None):
        if mode not in ("open_loop", "closed_loop"):
            raise ConfigError(f"unknown two-stage mode {mode!r}")
        if not 1 <= N_e <= N:
            raise ConfigError(f"need 1 <= N_e <= N, got N_e={N_e}, N={N}")
        # the midpoint of the box is the natural first estimate
        p0 = scenarios.realizations[int(np.argmax(scenarios.weights))] if len(scenarios) == 1 else box.midpoint
        super().__init__(_Settings(model, box, noise, int(N), solver_cfg or SolverConfig(),
                                   criterion_cfg or CriterionConfig(), stop or StopConfig(), alpha),
                         p0)
        self.scenarios = scenarios
        self.N_e = int(N_e)
        self.mode = mode
        self.scenario_mode = scenario_mode
        self.current_box = box
        self._first = None if first_block is None else np.asarray(first_block, float)
        self.staged_designs = []

    def _design_block(self) -> np.ndarray:
        s = self.s
        if self.used == 0:
            if self._first is not None:
                return self._first
            staged = design_two_stage(s.model, self.scenarios, s.N, self.N_e, s.noise,
                                      s.solver_cfg, s.criterion_cfg)
            self.staged_designs.append(staged)
            return staged.first_block()
        if self.mode == "closed_loop" and self.remaining > self.N_e and not self._revealed_last():
            box = self._shrunk_box()
            self.current_box = box
            scen = sample_scenarios(box, self.scenario_mode)
            staged = design_two_stage(s.model, scen, self.remaining, self.N_e, s.noise,
                                      s.solver_cfg, s.criterion_cfg, prior=self.data.controls)
            self.staged_designs.append(staged)
            return staged.first_block()
        d = design_nominal(s.model, self.p_hat, self.remaining, s.noise, s.solver_cfg,
                           s.criterion_cfg, prior=self.data.controls)
        return d.controls

    def _revealed_last(self) -> bool:
        return bool(self.history) and self.history[-1].revealed

    def _shrunk_box(self) -> ParameterBox:
        est = self.history[-1].estimate if self.history else None
        box = self.current_box
        if est is None or est.ellipsoid is None:
            return box
        hw = est.ellipsoid.half_widths()
        lo = np.clip(est.p_hat - hw, box.lower, box.upper)
        hi = np.clip(est.p_hat + hw, box.lower, box.upper)
        return ParameterBox(lo, hi)


def run_sequential(model: ModelSpec, box: ParameterBox, p_hat0, N: int, N_e_step: int,
                   measurement_source: MeasurementSource, noise: NoiseModel,
                   solver_cfg: Optional[SolverConfig] = None,
                   criterion_cfg: Optional[CriterionConfig] = None,
                   stop_cfg: Optional[StopConfig] = None,
                   alpha: float = DEFAULT_ALPHA) -> list[StepRecord]:
    """Design, apply, re-estimate over all data, repeat until a stop rule fires."""
    runner = SequentialRunner(model, box, p_hat0, N, N_e_step, noise, solver_cfg,
                              criterion_cfg, stop_cfg, alpha)
    return runner.run(measurement_source)


def run_two_stage_protocol(model: ModelSpec, box: ParameterBox, scenarios: ScenarioSet,
                           N: int, N_e: int, measurement_source: MeasurementSource,
                           noise: NoiseModel, mode: str = "open_loop",
                           solver_cfg: Optional[SolverConfig] = None,
                           criterion_cfg: Optional[CriterionConfig] = None,
                           stop_cfg: Optional[StopConfig] = None,
                           alpha: float = DEFAULT_ALPHA) -> list[StepRecord]:
    runner = TwoStageRunner(model, box, scenarios, N, N_e, noise, mode, solver_cfg,
                            criterion_cfg, stop_cfg, alpha)
    return runner.run(measurement_source)
