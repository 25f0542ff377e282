"""Fisher information, the A-criterion, chi-squared quantiles and ellipsoids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .errors import DomainError, SingularFim
from .models import ModelSpec, NoiseModel, model_sensitivities

RCOND_MIN = 1e-12
DEFAULT_PENALTY = 1e18
DEFAULT_ALPHA = 0.0455  # two-sided two-sigma tail for one degree of freedom


@dataclass(frozen=True)
class Fim:
    matrix: np.ndarray
    n_obs: int

    @property
    def n_p(self) -> int:
        return self.matrix.shape[0]

    def __add__(self, other: "Fim") -> "Fim":
        return Fim(self.matrix + other.matrix, self.n_obs + other.n_obs)


@dataclass(frozen=True)
class CriterionConfig:
    """Weights and singularity handling for the (scaled) A-criterion.

    ``scaling`` multiplies the diagonal of the inverse FIM before summing; an
    empty tuple means unit weights.  ``ridge_epsilon`` is relative to the
    trace of the matrix.
    """

    scaling: tuple[float, ...] = ()
    singular_policy: Literal["penalty", "ridge"] = "penalty"
    penalty_value: float = DEFAULT_PENALTY
    ridge_epsilon: float = 1e-12

    def __post_init__(self):
        if any(not (s > 0) for s in self.scaling):
            raise DomainError("criterion scaling must be strictly positive")
        if self.singular_policy not in ("penalty", "ridge"):
            raise DomainError(f"unknown singular policy {self.singular_policy!r}")

    def weights(self, n_p: int) -> np.ndarray:
        if not self.scaling:
            return np.ones(n_p)
        if len(self.scaling) != n_p:
            raise DomainError(f"scaling has {len(self.scaling)} entries, FIM is {n_p}x{n_p}")
        return np.asarray(self.scaling, dtype=float)

    def to_dict(self) -> dict:
        return {
            "scaling": list(self.scaling),
            "singular_policy": self.singular_policy,
            "penalty_value": self.penalty_value,
            "ridge_epsilon": self.ridge_epsilon,
        }


def _controls_array(model: ModelSpec, design) -> np.ndarray:
    controls = getattr(design, "controls", design)
    u = np.asarray(controls, dtype=float)
    if u.size == 0:
        return np.zeros((0, model.n_u))
    return u.reshape(-1, model.n_u)


def fim_matrices(model: ModelSpec, params, controls, sigma) -> np.ndarray:
    """FIMs for a stack of parameter vectors over one set of controls.

    ``params`` has shape ``(S, n_p)`` and ``controls`` ``(N, n_u)``; the
    result has shape ``(S, n_p, n_p)``.  Raises ``SingularModelPoint`` from
    the model.
    """
    params = np.asarray(params, dtype=float).reshape(-1, model.n_p)
    controls = np.asarray(controls, dtype=float).reshape(-1, model.n_u)
    if controls.shape[0] == 0:
        return np.zeros((params.shape[0], model.n_p, model.n_p))
    q = model_sensitivities(model, params[:, None, :], controls[None, :, :])
    w = (q / np.asarray(sigma, dtype=float)[:, None]).reshape(len(params), -1, model.n_p)
    return w.transpose(0, 2, 1) @ w


def assemble_fim(model: ModelSpec, p_hat, design, noise: NoiseModel) -> Fim:
    """Sum of ``Q^T diag(sigma)^-2 Q`` over the experiments of ``design``."""
    u = _controls_array(model, design)
    m = fim_matrices(model, np.asarray(p_hat, float)[None, :], u, noise.sigma)[0]
    return Fim(0.5 * (m + m.T), int(u.shape[0]))


# Unrolled Cholesky inverses for n = 3 and 4.  Cofactor expansion would be
# shorter but is not backward stable; these return the inverse diagonal and
# the product of the 1-norms of the matrix and its inverse.
def _cholesky_inverse_3(m: list):
    (a00, a01, a02), (a10, a11, a12), (a20, a21, a22) = m
    d = a00
    if not d > 0.0:
        return None
    l00 = math.sqrt(d)
    l10 = a10 / l00
    l20 = a20 / l00
    d = a11 - l10 * l10
    if not d > 0.0:
        return None
    l11 = math.sqrt(d)
    l21 = (a21 - l20 * l10) / l11
    d = a22 - l20 * l20 - l21 * l21
    if not d > 0.0:
        return None
    l22 = math.sqrt(d)
    w00 = 1.0 / l00
    w11 = 1.0 / l11
    w10 = -(l10 * w00) * w11
    w22 = 1.0 / l22
    w20 = -(l20 * w00 + l21 * w10) * w22
    w21 = -(l21 * w11) * w22
    v00 = w00 * w00 + w10 * w10 + w20 * w20
    v01 = w10 * w11 + w20 * w21
    v02 = w20 * w22
    v11 = w11 * w11 + w21 * w21
    v12 = w21 * w22
    v22 = w22 * w22
    inv_norm = max(
        abs(v00) + abs(v01) + abs(v02),
        abs(v01) + abs(v11) + abs(v12),
        abs(v02) + abs(v12) + abs(v22),
    )
    norm = max(
        abs(a00) + abs(a10) + abs(a20),
        abs(a01) + abs(a11) + abs(a21),
        abs(a02) + abs(a12) + abs(a22),
    )
    return [v00, v11, v22], norm * inv_norm


def _cholesky_inverse_4(m: list):
    (a00, a01, a02, a03), (a10, a11, a12, a13), (a20, a21, a22, a23), (a30, a31, a32, a33) = m
    d = a00
    if not d > 0.0:
        return None
    l00 = math.sqrt(d)
    l10 = a10 / l00
    l20 = a20 / l00
    l30 = a30 / l00
    d = a11 - l10 * l10
    if not d > 0.0:
        return None
    l11 = math.sqrt(d)
    l21 = (a21 - l20 * l10) / l11
    l31 = (a31 - l30 * l10) / l11
    d = a22 - l20 * l20 - l21 * l21
    if not d > 0.0:
        return None
    l22 = math.sqrt(d)
    l32 = (a32 - l30 * l20 - l31 * l21) / l22
    d = a33 - l30 * l30 - l31 * l31 - l32 * l32
    if not d > 0.0:
        return None
    l33 = math.sqrt(d)
    w00 = 1.0 / l00
    w11 = 1.0 / l11
    w10 = -(l10 * w00) * w11
    w22 = 1.0 / l22
    w20 = -(l20 * w00 + l21 * w10) * w22
    w21 = -(l21 * w11) * w22
    w33 = 1.0 / l33
    w30 = -(l30 * w00 + l31 * w10 + l32 * w20) * w33
    w31 = -(l31 * w11 + l32 * w21) * w33
    w32 = -(l32 * w22) * w33
    v00 = w00 * w00 + w10 * w10 + w20 * w20 + w30 * w30
    v01 = w10 * w11 + w20 * w21 + w30 * w31
    v02 = w20 * w22 + w30 * w32
    v03 = w30 * w33
    v11 = w11 * w11 + w21 * w21 + w31 * w31
    v12 = w21 * w22 + w31 * w32
    v13 = w31 * w33
    v22 = w22 * w22 + w32 * w32
    v23 = w32 * w33
    v33 = w33 * w33
    inv_norm = max(
        abs(v00) + abs(v01) + abs(v02) + abs(v03),
        abs(v01) + abs(v11) + abs(v12) + abs(v13),
        abs(v02) + abs(v12) + abs(v22) + abs(v23),
        abs(v03) + abs(v13) + abs(v23) + abs(v33),
    )
    norm = max(
        abs(a00) + abs(a10) + abs(a20) + abs(a30),
        abs(a01) + abs(a11) + abs(a21) + abs(a31),
        abs(a02) + abs(a12) + abs(a22) + abs(a32),
        abs(a03) + abs(a13) + abs(a23) + abs(a33),
    )
    return [v00, v11, v22, v33], norm * inv_norm


def _scalar_inverse_diagonal(m: list):
    """Inverse diagonal of one n <= 4 matrix given as nested lists, or None if singular.

    Plain float arithmetic: for a single tiny matrix this is an order of
    magnitude cheaper than any numpy call sequence.
    """
    n = len(m)
    if n == 1:
        a = m[0][0]
        return [1.0 / a] if a != 0 and math.isfinite(a) else None
    if n == 2:
        (a, b), (c, d) = m
        det = a * d - b * c
        diag = [d, a]
        adj_norm = max(abs(d) + abs(c), abs(b) + abs(a))
        norm = max(abs(a) + abs(c), abs(b) + abs(d))
    else:
        if not all(math.isfinite(x) for row in m for x in row):
            return None
        out = (_cholesky_inverse_3 if n == 3 else _cholesky_inverse_4)(m)
        if out is None:
            return None
        diag, prod = out
        if not (math.isfinite(prod) and prod * RCOND_MIN <= 1.0):
            return None
        return diag
    if det == 0 or not math.isfinite(det):
        return None
    prod = norm * adj_norm / abs(det)
    if not (math.isfinite(prod) and prod * RCOND_MIN <= 1.0):
        return None
    return [x / det for x in diag]


def _inverse_diagonals(mats: np.ndarray):
    """Diagonals of the inverses plus a per-matrix non-singularity mask.

    A matrix counts as singular when its reciprocal 1-norm condition number
    is below ``RCOND_MIN``.
    """
    n = mats.shape[-1]
    finite = np.isfinite(mats).all(axis=(-2, -1))
    safe = mats if finite.all() else np.where(finite[:, None, None], mats, np.eye(n))
    ok = finite.copy()
    try:
        inv = np.linalg.inv(safe)
    except np.linalg.LinAlgError:
        # det runs the same LU factorisation; an exact zero pivot gives det == 0
        exact = np.linalg.det(safe) == 0.0
        ok &= ~exact
        safe = np.where(exact[:, None, None], np.eye(n), safe)
        inv = np.linalg.inv(safe)
    norm_a = np.abs(safe).sum(axis=-2).max(axis=-1)
    norm_inv = np.abs(inv).sum(axis=-2).max(axis=-1)
    prod = norm_a * norm_inv
    ok &= np.isfinite(prod) & (prod > 0) & (prod * RCOND_MIN <= 1.0)
    return np.diagonal(inv, axis1=-2, axis2=-1), ok


def a_criteria(mats: np.ndarray, cfg: CriterionConfig) -> np.ndarray:
    """Vectorised ``a_criterion`` for a stack of FIM matrices."""
    mats = np.asarray(mats, dtype=float)
    single = mats.ndim == 2
    mats = mats.reshape(-1, mats.shape[-1], mats.shape[-1])
    w = cfg.weights(mats.shape[-1])
    if mats.shape[0] == 1 and mats.shape[-1] <= 4:
        d = _scalar_inverse_diagonal(mats[0].tolist())
        if d is not None:
            v = sum(wi * di for wi, di in zip(w.tolist(), d))
            if math.isfinite(v):
                return v if single else np.array([v])
    diag, ok = _inverse_diagonals(mats)
    vals = diag @ w
    ok &= np.isfinite(vals)
    if not np.all(ok):
        if cfg.singular_policy == "penalty":
            vals = np.where(ok, vals, cfg.penalty_value)
        else:
            bad = np.flatnonzero(~ok)
            for k in bad:
                vals[k] = _ridge_value(mats[k], w, cfg)
    return vals[0] if single else vals


def _ridge_value(m: np.ndarray, w: np.ndarray, cfg: CriterionConfig) -> float:
    if not np.all(np.isfinite(m)):
        return cfg.penalty_value
    eps = cfg.ridge_epsilon * max(float(np.trace(m)), 1.0)
    reg = m + eps * np.eye(m.shape[0])
    diag, ok = _inverse_diagonals(reg[None])
    return float(diag[0] @ w) if ok[0] else cfg.penalty_value


def a_criterion(fim, cfg: Optional[CriterionConfig] = None, *, return_flag: bool = False):
    """Scaled trace of the inverse FIM.

    When the FIM is numerically singular (reciprocal condition number below
    ``1e-12``) the ``penalty`` policy returns ``cfg.penalty_value`` and the
    ``ridge`` policy evaluates ``FIM + eps*trace*I``.  With
    ``return_flag=True`` a ``(value, singular)`` pair is returned.
    """
    cfg = cfg or CriterionConfig()
    m = np.asarray(getattr(fim, "matrix", fim), dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError("FIM must be a square matrix")
    diag, ok = _inverse_diagonals(m[None])
    w = cfg.weights(m.shape[0])
    if ok[0]:
        value = float(diag[0] @ w)
        singular = not math.isfinite(value)
    else:
        singular = True
    if singular:
        value = cfg.penalty_value if cfg.singular_policy == "penalty" else _ridge_value(m, w, cfg)
    return (value, singular) if return_flag else value


# ---------------------------------------------------------------------------
# Regularized incomplete gamma and chi-squared quantiles

_GAMMA_EPS = 1e-16
_GAMMA_MAXIT = 10_000
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Lower regularized P(a, x) by its power series (x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAXIT):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    """Upper regularized Q(a, x) by modified Lentz (x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXIT):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma function P(a, x)."""
    if a <= 0 or x < 0:
        raise DomainError(f"P(a, x) needs a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_continued_fraction(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma function Q(a, x) = 1 - P(a, x)."""
    if a <= 0 or x < 0:
        raise DomainError(f"Q(a, x) needs a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail probability of the chi-squared distribution."""
    return regularized_gamma_q(0.5 * dof, 0.5 * x) if x > 0 else 1.0


def chi2_quantile(alpha: float, dof: int) -> float:
    """Upper ``alpha`` quantile of chi-squared with ``dof`` degrees of freedom.

    Bisection on the upper regularized incomplete gamma function until the
    bracket is narrower than ``1e-12 * max(1, x)``.
    """
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if int(dof) != dof or dof < 1:
        raise DomainError(f"dof must be a positive integer, got {dof}")
    dof = int(dof)
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_sf(hi, dof) > alpha:
        lo, hi = hi, 2.0 * hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if chi2_sf(mid, dof) > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Confidence ellipsoids


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    """The set ``{p : (p - center)^T shape (p - center) <= level}``."""

    center: np.ndarray
    shape: np.ndarray
    level: float
    alpha: float
    covariance: np.ndarray = field(repr=False, default=None)

    def contains(self, p) -> bool:
        d = np.asarray(p, dtype=float) - self.center
        return bool(d @ self.shape @ d <= self.level * (1 + 1e-12))

    def half_widths(self) -> np.ndarray:
        """Half-widths of the axis-aligned bounding box."""
        return np.sqrt(self.level * np.diag(self.covariance))

    def semi_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Semi-axis lengths (ascending eigenvalue order) and directions."""
        vals, vecs = np.linalg.eigh(self.shape)
        return np.sqrt(self.level / vals), vecs

    def boundary(self, m: int = 200) -> np.ndarray:
        """``m`` points on the boundary of a two-parameter ellipse."""
        if self.center.size != 2:
            raise DomainError("boundary polylines are only defined for two parameters")
        lengths, vecs = self.semi_axes()
        theta = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
        circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return self.center + (circle * lengths) @ vecs.T

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "shape": self.shape.tolist(),
            "level": self.level,
            "alpha": self.alpha,
            "half_widths": self.half_widths().tolist(),
        }


def confidence_ellipsoid(fim, p_hat, alpha: float = DEFAULT_ALPHA) -> ConfidenceEllipsoid:
    """Linearized joint confidence region at ``p_hat``.

    Raises ``SingularFim`` when the FIM cannot be inverted.
    """
    m = np.asarray(getattr(fim, "matrix", fim), dtype=float)
    m = 0.5 * (m + m.T)
    center = np.atleast_1d(np.asarray(p_hat, dtype=float))
    if m.shape != (center.size, center.size):
        raise DomainError("FIM and estimate dimensions differ")
    _, ok = _inverse_diagonals(m[None])
    if not ok[0] or np.min(np.linalg.eigvalsh(m)) <= 0:
        raise SingularFim("FIM is singular; no confidence ellipsoid")
    level = chi2_quantile(alpha, center.size)
    return ConfidenceEllipsoid(center, m, level, alpha, covariance=np.linalg.inv(m))


def write_ellipse_csv(path, ellipsoid: ConfidenceEllipsoid, m: int = 200,
                      meta: Optional[dict] = None) -> Path:
    """Boundary polyline as CSV columns ``p1,p2`` with ``#`` metadata lines."""
    path = Path(path)
    pts = ellipsoid.boundary(m)
    lines = [f"# alpha={ellipsoid.alpha:.9g}", f"# level={ellipsoid.level:.9g}",
             "# center=" + ";".join(f"{c:.9g}" for c in ellipsoid.center)]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={v}")
    lines.append("p1,p2")
    lines += [f"{a:.9g},{b:.9g}" for a, b in pts]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
