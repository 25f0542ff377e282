import math

import mpmath
import numpy as np
import pytest

from rdoe.errors import ConfigError, SingularModelPoint
from rdoe.models import (
    CASE1,
    CASE2,
    CASE3,
    CASE4,
    CASE4_RAW,
    ModelSpec,
    NoiseModel,
    ParameterBox,
    eval_model,
    eval_sensitivity,
    finite_difference_sensitivity,
    get_model,
    model_sensitivities,
    register_model,
    registered_models,
)

from conftest import BOXES, MODELS


def test_case1_values():
    assert eval_model(CASE1, [1.0], [0.0])[0] == 0.0
    assert eval_model(CASE1, [1.0], [1.0])[0] == pytest.approx(0.632121, abs=1e-6)


def test_case1_sensitivities():
    assert eval_sensitivity(CASE1, [1.0], [0.0])[0, 0] == 0.0
    assert eval_sensitivity(CASE1, [1.0], [1.0])[0, 0] == pytest.approx(0.367879, abs=1e-6)


def test_case2_sensitivity():
    q = eval_sensitivity(CASE2, [1.0, 1.0], [2.0])
    assert q.shape == (1, 2)
    assert q[0] == pytest.approx([1 - math.exp(-2), 2 * math.exp(-2)], abs=1e-12)


def test_case3_against_high_precision():
    mpmath.mp.dps = 50
    p1, p2, u = mpmath.mpf("0.55"), mpmath.mpf("0.275"), mpmath.mpf("1.22")
    ref = p1 / (p1 - p2) * (mpmath.exp(-p2 * u) - mpmath.exp(-p1 * u))
    assert eval_model(CASE3, [0.55, 0.275], [1.22])[0] == pytest.approx(float(ref), rel=1e-14)


def test_case3_singular_guard():
    with pytest.raises(SingularModelPoint):
        eval_model(CASE3, [0.5, 0.5], [1.0])
    with pytest.raises(SingularModelPoint):
        eval_sensitivity(CASE3, [0.5, 0.5 + 1e-8], [1.0])


def test_case4_verbatim_formula_inside_range():
    p = np.array([1.396, 313.25, 289.40, 320.23])
    for u in (295.0, 310.0, 318.0):
        a = (u - p[1]) ** 2
        ref = p[0] * (1 - a / (a + u * (p[2] + p[3] - u) - p[2] * p[3]))
        assert eval_model(CASE4, p, [u])[0] == pytest.approx(ref, rel=1e-12)
        assert eval_model(CASE4_RAW, p, [u])[0] == pytest.approx(ref, rel=1e-12)


def test_case4_zero_outside_cardinal_range():
    p = [1.396, 313.25, 289.40, 320.23]
    assert eval_model(CASE4, p, [288.0])[0] == 0.0
    assert eval_model(CASE4, p, [325.0])[0] == 0.0
    assert np.all(eval_sensitivity(CASE4, p, [325.0]) == 0.0)
    assert eval_model(CASE4_RAW, p, [288.0])[0] != 0.0


def test_case4_growth_peaks_at_optimum_temperature():
    p = [1.396, 313.25, 289.40, 320.23]
    assert eval_model(CASE4, p, [313.25])[0] == pytest.approx(1.396, rel=1e-14)


def test_case4_raw_pole_guard():
    # denominator (p3 + p4 - 2 p2) u + p2^2 - p3 p4 vanishes at u = 323.117...
    p = np.array([1.396, 313.25, 289.40, 320.23])
    pole = (p[2] * p[3] - p[1] ** 2) / (p[2] + p[3] - 2 * p[1])
    with pytest.raises(SingularModelPoint):
        eval_model(CASE4_RAW, p, [pole])


@pytest.mark.parametrize("name", ["case1", "case2", "case3", "case4"])
def test_sensitivity_matches_finite_differences(name):
    # 100 random interior points per model, 400 in total
    model, box = MODELS[name], BOXES[name]
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 100:
        p = rng.uniform(box.lower, box.upper)
        if name == "case4":
            # stay away from the kinks at u = p3 and u = p4
            u = rng.uniform(p[2] + 0.5, p[3] - 0.5, size=1)
        else:
            u = rng.uniform(model.u_lower, model.u_upper)
        q = eval_sensitivity(model, p, u)
        fd = finite_difference_sensitivity(model, p, u)
        err = np.abs(q - fd) / np.maximum(1.0, np.abs(q))
        assert err.max() <= 1e-5, (p, u, q, fd)
        checked += 1


def test_case1_unimodal_information_peak():
    u = np.linspace(0.0, 20.0, 200001)
    for p in (0.5, 1.0, 1.5):
        f = (u * np.exp(-p * u)) ** 2
        k = int(np.argmax(f))
        assert u[k] == pytest.approx(1 / p, abs=2e-4)
        assert np.all(np.diff(f[: k + 1]) >= 0) and np.all(np.diff(f[k:]) <= 0)


def test_case3_output_under_parameter_swap():
    # y(p2, p1) = (p2 / p1) y(p1, p2): the closed form is not symmetric, only
    # the bracketed difference of exponentials is (up to sign)
    rng = np.random.default_rng(5)
    for _ in range(20):
        p1, p2 = rng.uniform(0.55, 0.9), rng.uniform(0.1, 0.45)
        u = rng.uniform(0.0, 20.0, size=1)
        y = eval_model(CASE3, [p1, p2], u)[0]
        y_swap = eval_model(CASE3, [p2, p1], u)[0]
        assert y_swap == pytest.approx(p2 / p1 * y, rel=1e-10, abs=1e-300)


def test_builtins_are_scalar_io():
    for m in (CASE1, CASE2, CASE3, CASE4):
        assert m.n_u == 1 and m.n_y == 1


def test_vectorised_broadcast_matches_pointwise():
    p = np.array([[0.6, 0.2], [0.8, 0.4]])
    u = np.array([[1.0], [3.0], [7.0]])
    batch = model_sensitivities(CASE3, p[:, None, :], u[None, :, :])
    for i in range(2):
        for j in range(3):
            assert np.array_equal(batch[i, j], eval_sensitivity(CASE3, p[i], u[j]))


def test_user_model_without_sensitivities_uses_central_differences():
    spec = ModelSpec("test_quad", n_p=2, n_u=1, n_y=1, control_bounds=((0.0, 1.0),),
                     eval=lambda p, u: np.array([p[0] * u[0] ** 2 + p[1] ** 3]),
                     vectorized=False)
    register_model(spec, replace=True)
    assert "test_quad" in registered_models()
    q = eval_sensitivity(get_model("test_quad"), [2.0, 3.0], [0.5])
    assert q[0] == pytest.approx([0.25, 27.0], rel=1e-8)


def test_duplicate_registration_rejected():
    with pytest.raises((ValueError, ConfigError)):
        register_model(CASE1)


def test_box_and_noise_validation():
    with pytest.raises(ConfigError):
        ParameterBox([1.0], [0.5])
    with pytest.raises(ConfigError):
        NoiseModel([0.0])
    box = ParameterBox.around([1.0, 2.0], 0.5)
    assert np.array_equal(box.midpoint, [1.0, 2.0])
    assert box.contains([1.5, 1.5]) and not box.contains([1.6, 2.0])
