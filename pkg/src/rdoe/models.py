"""Static output models ``y = F(p, u)`` and their parameter sensitivities.

Every model works on broadcastable arrays: ``p`` has shape ``(..., n_p)``,
``u`` has shape ``(..., n_u)`` and the outputs have shape ``(..., n_y)``
(values) or ``(..., n_y, n_p)`` (sensitivities).  Built-in models are fully
vectorised so a whole design, or a whole scenario set, is evaluated in one
call.  User models may be written for single points only and registered with
``vectorized=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, SingularModelPoint

Array = np.ndarray

# guard thresholds
CASE3_MIN_GAP = 1e-6
CASE4_MIN_DENOMINATOR = 1e-9
FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """A registered output map together with its sensitivity evaluation.

    ``sens`` may be ``None``, in which case central finite differences of
    ``eval`` are used.  ``singular_guard`` returns a boolean array that is
    ``True`` wherever ``(p, u)`` is a valid evaluation point.
    """

    id: str
    n_p: int
    n_u: int
    n_y: int
    control_bounds: tuple[tuple[float, float], ...]
    eval: Callable[[Array, Array], Array]
    sens: Optional[Callable[[Array, Array], Array]] = None
    singular_guard: Optional[Callable[[Array, Array], Array]] = None
    vectorized: bool = True
    description: str = ""

    @property
    def u_lower(self) -> Array:
        return np.array([b[0] for b in self.control_bounds], dtype=float)

    @property
    def u_upper(self) -> Array:
        return np.array([b[1] for b in self.control_bounds], dtype=float)


@dataclass(frozen=True)
class ParameterBox:
    """Axis-aligned uncertainty set for the parameters."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("box bounds must be vectors of equal length")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError(f"invalid parameter box {lo} .. {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, center, delta) -> "ParameterBox":
        """``center + [-delta, delta]`` componentwise."""
        c = np.atleast_1d(np.asarray(center, dtype=float))
        d = np.broadcast_to(np.asarray(delta, dtype=float), c.shape)
        return cls(c - d, c + d)

    @property
    def n_p(self) -> int:
        return self.lower.size

    @property
    def midpoint(self) -> Array:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> Array:
        return self.upper - self.lower

    def contains(self, p, atol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower - atol) and np.all(p <= self.upper + atol))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class NoiseModel:
    """Known standard deviations of the measured outputs."""

    sigma: Array = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if s.ndim != 1 or np.any(~(s > 0)) or not np.all(np.isfinite(s)):
            raise ConfigError(f"noise sigma must be strictly positive, got {s}")
        object.__setattr__(self, "sigma", s)


# ---------------------------------------------------------------------------
# Built-in case-study models (n_u = n_y = 1)


def _case1_eval(p, u):
    return 1.0 - np.exp(-p[..., 0:1] * u[..., 0:1])


def _case1_sens(p, u):
    uu = u[..., 0:1]
    return (uu * np.exp(-p[..., 0:1] * uu))[..., None]


def _case2_eval(p, u):
    return p[..., 0:1] * (1.0 - np.exp(-p[..., 1:2] * u[..., 0:1]))


def _case2_sens(p, u):
    p1, p2, uu = p[..., 0], p[..., 1], u[..., 0]
    e = np.exp(-p2 * uu)
    return np.stack([1.0 - e, p1 * uu * e], axis=-1)[..., None, :]


def _case3_guard(p, u):
    return np.abs(p[..., 0] - p[..., 1]) >= CASE3_MIN_GAP


def _case3_eval(p, u):
    p1, p2, uu = p[..., 0:1], p[..., 1:2], u[..., 0:1]
    return p1 / (p1 - p2) * (np.exp(-p2 * uu) - np.exp(-p1 * uu))


def _case3_sens(p, u):
    p1, p2, uu = p[..., 0], p[..., 1], u[..., 0]
    d = p1 - p2
    e1, e2 = np.exp(-p1 * uu), np.exp(-p2 * uu)
    diff = e2 - e1
    dp1 = -p2 / d**2 * diff + p1 * uu / d * e1
    dp2 = p1 / d**2 * diff - p1 * uu / d * e2
    return np.stack([dp1, dp2], axis=-1)[..., None, :]


def _case4_parts(p, u):
    # the denominator is affine in u: (p3 + p4 - 2 p2) u + p2^2 - p3 p4
    uu = u[..., 0]
    p2, p3, p4 = p[..., 1], p[..., 2], p[..., 3]
    a = uu - p2
    num = a * a
    den = (p3 + p4 - 2.0 * p2) * uu + p2 * p2 - p3 * p4
    return uu, a, num, den


def _case4_guard(p, u):
    uu, _, _, den = _case4_parts(p, u)
    inside = (uu > p[..., 2]) & (uu < p[..., 3])
    return ~inside | (np.abs(den) >= CASE4_MIN_DENOMINATOR)


def _case4_raw_guard(p, u):
    den = _case4_parts(p, u)[3]
    return np.abs(den) >= CASE4_MIN_DENOMINATOR


def _case4_raw_eval(p, u):
    _, _, num, den = _case4_parts(p, u)
    return (p[..., 0] * (1.0 - num / den))[..., None]


def _case4_sens_from(p, uu, a, num, den):
    p1, p3, p4 = p[..., 0], p[..., 2], p[..., 3]
    b, c = uu - p3, uu - p4
    inv = 1.0 / den
    r = num * inv
    k = p1 * r * inv  # p1 (u - p2)^2 / den^2
    out = np.empty(np.broadcast(uu, p1).shape + (1, 4))
    out[..., 0, 0] = 1.0 - r
    out[..., 0, 1] = -2.0 * p1 * a * b * c * inv * inv
    out[..., 0, 2] = k * c
    out[..., 0, 3] = k * b
    return out


def _case4_raw_sens(p, u):
    uu, a, num, den = _case4_parts(p, u)
    return _case4_sens_from(p, uu, a, num, den)


def _case4_eval(p, u):
    # zero growth outside the cardinal range (p3, p4)
    uu, _, num, den = _case4_parts(p, u)
    inside = (uu > p[..., 2]) & (uu < p[..., 3])
    den = np.where(inside, den, 1.0)
    return (np.where(inside, p[..., 0] * (1.0 - num / den), 0.0))[..., None]


def _case4_sens(p, u):
    uu, a, num, den = _case4_parts(p, u)
    inside = (uu > p[..., 2]) & (uu < p[..., 3])
    out = _case4_sens_from(p, uu, a, num, np.where(inside, den, 1.0))
    out *= inside[..., None, None]
    return out


CASE1 = ModelSpec(
    id="case1", n_p=1, n_u=1, n_y=1, control_bounds=((0.0, 20.0),),
    eval=_case1_eval, sens=_case1_sens,
    description="1 - exp(-p u)",
)
CASE2 = ModelSpec(
    id="case2", n_p=2, n_u=1, n_y=1, control_bounds=((0.0, 20.0),),
    eval=_case2_eval, sens=_case2_sens,
    description="p1 (1 - exp(-p2 u))",
)
CASE3 = ModelSpec(
    id="case3", n_p=2, n_u=1, n_y=1, control_bounds=((0.0, 20.0),),
    eval=_case3_eval, sens=_case3_sens, singular_guard=_case3_guard,
    description="p1/(p1-p2) (exp(-p2 u) - exp(-p1 u)), intermediate of A->B->C",
)
CASE4 = ModelSpec(
    id="case4", n_p=4, n_u=1, n_y=1, control_bounds=((288.0, 333.0),),
    eval=_case4_eval, sens=_case4_sens, singular_guard=_case4_guard,
    description="cardinal temperature model, zero growth outside (p3, p4)",
)
CASE4_RAW = ModelSpec(
    id="case4_raw", n_p=4, n_u=1, n_y=1, control_bounds=((288.0, 333.0),),
    eval=_case4_raw_eval, sens=_case4_raw_sens, singular_guard=_case4_raw_guard,
    description="cardinal temperature closed form applied on the whole control range",
)

_REGISTRY: dict[str, ModelSpec] = {}


def register_model(model: ModelSpec, *, replace: bool = False) -> ModelSpec:
    """Add a model to the registry used by configuration files and the CLI."""
    if model.id in _REGISTRY and not replace:
        raise ConfigError(f"model id {model.id!r} already registered")
    if len(model.control_bounds) != model.n_u:
        raise ConfigError("control_bounds must have one (lower, upper) pair per control")
    for lo, hi in model.control_bounds:
        if not lo < hi:
            raise ConfigError(f"empty control range [{lo}, {hi}]")
    _REGISTRY[model.id] = model
    return model


def get_model(model_id: str) -> ModelSpec:
    try:
        return _REGISTRY[model_id]
    except KeyError:
        raise ConfigError(
            f"unknown model {model_id!r}; known: {sorted(_REGISTRY)}"
        ) from None


def registered_models() -> list[str]:
    return sorted(_REGISTRY)


for _m in (CASE1, CASE2, CASE3, CASE4, CASE4_RAW):
    register_model(_m)


# ---------------------------------------------------------------------------
# Evaluation


def _check_guard(model: ModelSpec, p: Array, u: Array) -> None:
    if model.singular_guard is None:
        return
    if model.vectorized:
        ok = np.asarray(model.singular_guard(p, u))
    else:
        ok = np.asarray(_loop(model.singular_guard, p, u, ()), dtype=bool)
    if not np.all(ok):
        raise SingularModelPoint(f"model {model.id!r} is singular at p={p.tolist()}")


def _loop(fn, p, u, tail_shape):
    shape = np.broadcast_shapes(p.shape[:-1], u.shape[:-1])
    pb = np.broadcast_to(p, shape + p.shape[-1:])
    ub = np.broadcast_to(u, shape + u.shape[-1:])
    out = np.empty(shape + tail_shape, dtype=object if not tail_shape else float)
    for idx in np.ndindex(*shape):
        out[idx] = fn(pb[idx], ub[idx])
    return out


def model_values(model: ModelSpec, p, u) -> Array:
    """Broadcast evaluation of ``F(p, u)``; shape ``(..., n_y)``."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_guard(model, p, u)
    if model.vectorized:
        return np.asarray(model.eval(p, u), dtype=float)
    return _loop(lambda a, b: np.asarray(model.eval(a, b), float).reshape(model.n_y),
                 p, u, (model.n_y,))


def finite_difference_sensitivity(model: ModelSpec, p, u) -> Array:
    """Central differences with step ``1e-6 * max(1, |p_i|)``."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    cols = []
    for i in range(model.n_p):
        h = FD_REL_STEP * np.maximum(1.0, np.abs(p[..., i]))
        step = np.zeros(p.shape)
        step[..., i] = h
        yp = _raw_values(model, p + step, u)
        ym = _raw_values(model, p - step, u)
        cols.append((yp - ym) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


def _raw_values(model, p, u):
    if model.vectorized:
        return np.asarray(model.eval(p, u), dtype=float)
    return _loop(lambda a, b: np.asarray(model.eval(a, b), float).reshape(model.n_y),
                 p, u, (model.n_y,))


def model_sensitivities(model: ModelSpec, p, u) -> Array:
    """Broadcast evaluation of ``dF/dp``; shape ``(..., n_y, n_p)``."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_guard(model, p, u)
    if model.sens is None:
        return finite_difference_sensitivity(model, p, u)
    if model.vectorized:
        return np.asarray(model.sens(p, u), dtype=float)
    return _loop(
        lambda a, b: np.asarray(model.sens(a, b), float).reshape(model.n_y, model.n_p),
        p, u, (model.n_y, model.n_p),
    )


def eval_model(model: ModelSpec, p, u) -> Array:
    """Output vector ``F(p, u)`` at a single point."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    _check_point(model, p, u)
    return model_values(model, p, u).reshape(model.n_y)


def eval_sensitivity(model: ModelSpec, p, u) -> Array:
    """Sensitivity matrix ``Q`` (``n_y x n_p``) at a single point."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    _check_point(model, p, u)
    return model_sensitivities(model, p, u).reshape(model.n_y, model.n_p)


def _check_point(model, p, u):
    if p.shape != (model.n_p,) or u.shape != (model.n_u,):
        raise ValueError(
            f"{model.id}: expected p of length {model.n_p} and u of length {model.n_u}"
        )
    if not np.all(np.isfinite(p)):
        raise ValueError("parameter vector must be finite")
