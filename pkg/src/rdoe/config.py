"""Run configuration: JSON loading, case presets and validation.

A configuration is a JSON object with ``"schema": 1``.  It may name a
``"preset"``; the preset supplies every field and the file's own keys
override it (nested objects are merged key by key).  ``RunConfig.to_dict``
returns the fully resolved configuration, which reproduces the run when
fed back in.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .design import ScenarioSet, sample_scenarios
from .errors import ConfigError
from .evaluation import MODES, STRATEGIES
from .models import ModelSpec, NoiseModel, ParameterBox, get_model
from .optimizer import SolverConfig
from .protocols import StopConfig
from .statistics import DEFAULT_ALPHA, CriterionConfig

SCHEMA_VERSION = 1
DESIGN_STRATEGIES = ("nominal", "minmax", "scenario", "two_stage", "multi_stage")
SESSION_STRATEGIES = ("sequential", "two_stage")

_DEFAULTS: dict[str, Any] = {
    "schema": SCHEMA_VERSION,
    "model": "case1",
    "box": {"lower": [0.5], "upper": [1.5]},
    "sigma": [0.1 / 3],
    "N": 2,
    "N_e": 1,
    "allocations": None,
    "strategy": "nominal",
    "p_hat": None,
    "scenarios": {"mode": "full_factorial_3", "weights": None},
    "solver": SolverConfig().to_dict(),
    "criterion": CriterionConfig().to_dict(),
    "alpha": DEFAULT_ALPHA,
    "seed": 0,
    "mc": {
        "n_trials": 100,
        "mode": "revealed_truth",
        "strategies": list(STRATEGIES),
        "truths": None,
        "dominance_pair": ["sequential", "two_stage"],
        "dominance_sampler": "grid",
        "dominance_grid": 21,
    },
    "session": {"strategy": "sequential", "N_e_step": None, "loop": "open_loop",
                "rel_tol": 0.0, "step_tol": 0.0},
    "output_dir": "out",
    "threads": None,
}

PRESETS: dict[str, dict[str, Any]] = {
    "case1": {"model": "case1", "box": {"lower": [0.5], "upper": [1.5]}, "sigma": [0.1 / 3],
              "N": 2, "N_e": 1},
    "case2": {"model": "case2", "box": {"lower": [0.5, 0.5], "upper": [1.5, 1.5]},
              "sigma": [0.1 / 3], "N": 4, "N_e": 2},
    "case3": {"model": "case3", "box": {"lower": [0.55, 0.1], "upper": [0.9, 0.45]},
              "sigma": [0.1 / 3], "N": 4, "N_e": 2},
    "case4": {"model": "case4", "box": {"lower": [1.0, 300.0, 283.0, 318.0],
                                        "upper": [2.0, 320.0, 293.0, 328.0]},
              "sigma": [0.1], "N": 6, "N_e": 4,
              "criterion": {"scaling": [100.0, 1.0, 1.0, 1.0]},
              "mc": {"n_trials": 1, "truths": [[1.396, 313.25, 289.40, 320.23]],
                     "dominance_pair": None}},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_json_text(text: str, source: str = "<config>") -> dict:
    """Parse JSON, turning syntax errors into ``ConfigError`` with line and column."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_json_text(text, str(path))


def resolve(doc: Optional[dict] = None, preset: Optional[str] = None) -> dict:
    """Defaults, then the preset (argument or ``doc["preset"]``), then ``doc``."""
    doc = dict(doc or {})
    name = preset or doc.pop("preset", None)
    doc.pop("preset", None)
    if "schema" in doc and doc["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {doc['schema']!r}; expected {SCHEMA_VERSION}")
    cfg = copy.deepcopy(_DEFAULTS)
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[name])
    return _merge(cfg, doc)


def _vec(x, name: str, n: Optional[int] = None) -> np.ndarray:
    try:
        a = np.asarray(x, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of numbers") from None
    if n is not None and a.size != n:
        raise ConfigError(f"{name} must have {n} entries, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be finite")
    return a


def _int(x, name: str, lo: Optional[int] = None) -> int:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or int(x) != x:
        raise ConfigError(f"{name} must be an integer")
    if lo is not None and x < lo:
        raise ConfigError(f"{name} must be at least {lo}")
    return int(x)


@dataclass
class RunConfig:
    """Validated run settings plus the resolved dictionary they came from."""

    raw: dict
    model: ModelSpec
    box: ParameterBox
    noise: NoiseModel
    N: int
    N_e: int
    allocations: Optional[tuple[int, ...]]
    strategy: str
    p_hat: np.ndarray
    scenarios: ScenarioSet
    solver: SolverConfig
    criterion: CriterionConfig
    alpha: float
    seed: int
    mc: dict
    session: dict
    stop: StopConfig
    output_dir: Path
    threads: int = 1
    truths: Optional[list[np.ndarray]] = field(default=None)

    @classmethod
    def from_dict(cls, doc: Optional[dict] = None, preset: Optional[str] = None) -> "RunConfig":
        raw = resolve(doc, preset)
        try:
            model = get_model(str(raw["model"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        n_p = model.n_p
        box_d = raw["box"]
        if not isinstance(box_d, dict) or set(box_d) != {"lower", "upper"}:
            raise ConfigError("box must be an object with 'lower' and 'upper'")
        try:
            box = ParameterBox(_vec(box_d["lower"], "box.lower", n_p), _vec(box_d["upper"], "box.upper", n_p))
            noise = NoiseModel(_vec(raw["sigma"], "sigma", model.n_y))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        N = _int(raw["N"], "N", 1)
        N_e = _int(raw["N_e"], "N_e", 0)
        if N_e > N:
            raise ConfigError(f"N_e={N_e} exceeds N={N}")
        allocations = None
        if raw["allocations"] is not None:
            allocations = tuple(_int(a, "allocations[]", 1) for a in raw["allocations"])
        strategy = raw["strategy"]
        if strategy not in DESIGN_STRATEGIES:
            raise ConfigError(f"strategy must be one of {list(DESIGN_STRATEGIES)}, got {strategy!r}")
        p_hat = box.midpoint if raw["p_hat"] is None else _vec(raw["p_hat"], "p_hat", n_p)
        sc = raw["scenarios"]
        try:
            scenarios = sample_scenarios(box, sc["mode"], sc["weights"])
        except ValueError as exc:
            raise ConfigError(f"scenarios: {exc}") from None
        try:
            solver = SolverConfig(**raw["solver"])
            crit_d = dict(raw["criterion"])
            crit_d["scaling"] = tuple(float(v) for v in crit_d.get("scaling") or ())
            criterion = CriterionConfig(**crit_d)
            criterion.weights(n_p)
        except TypeError as exc:
            raise ConfigError(f"solver/criterion: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        alpha = float(raw["alpha"])
        if not 0.0 < alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        seed = _int(raw["seed"], "seed", 0)
        mc = raw["mc"]
        _int(mc["n_trials"], "mc.n_trials", 1)
        if mc["mode"] not in MODES:
            raise ConfigError(f"mc.mode must be one of {list(MODES)}")
        bad = [s for s in mc["strategies"] if s not in STRATEGIES]
        if bad or not mc["strategies"]:
            raise ConfigError(f"mc.strategies must be a non-empty subset of {list(STRATEGIES)}")
        truths = None
        if mc["truths"] is not None:
            truths = [_vec(t, "mc.truths[]", n_p) for t in mc["truths"]]
            if len(truths) != mc["n_trials"]:
                raise ConfigError("mc.truths needs exactly one entry per trial")
        if mc["dominance_pair"] is not None:
            pair = list(mc["dominance_pair"])
            if len(pair) != 2 or any(s not in mc["strategies"] for s in pair):
                raise ConfigError("mc.dominance_pair must name two of mc.strategies")
        if mc["dominance_sampler"] not in ("grid", "trials"):
            raise ConfigError("mc.dominance_sampler must be 'grid' or 'trials'")
        _int(mc["dominance_grid"], "mc.dominance_grid", 2)
        ses = raw["session"]
        if ses["strategy"] not in SESSION_STRATEGIES:
            raise ConfigError(f"session.strategy must be one of {list(SESSION_STRATEGIES)}")
        if ses["loop"] not in ("open_loop", "closed_loop"):
            raise ConfigError("session.loop must be 'open_loop' or 'closed_loop'")
        if ses["N_e_step"] is not None:
            _int(ses["N_e_step"], "session.N_e_step", 1)
        stop = StopConfig(float(ses["rel_tol"]), float(ses["step_tol"]))
        threads = raw["threads"]
        threads = 1 if threads is None else _int(threads, "threads", 1)
        raw["threads"] = threads
        return cls(raw, model, box, noise, N, N_e, allocations, strategy, p_hat, scenarios,
                   solver, criterion, alpha, seed, mc, ses, stop, Path(raw["output_dir"]),
                   threads, truths)

    def to_dict(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["p_hat"] = self.p_hat.tolist()
        return out
