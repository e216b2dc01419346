import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mglc.dynamics import (
    BENCHMARKS,
    REPORTED_CONTROLLERS,
    ControllerParams,
    controller_eval,
    controller_param_grad,
    duffing,
    eval_field_on_grid,
    field_param_jacobian,
    get_system,
    noisy_pendulum,
    pendulum,
    vanderpol,
)
from mglc.errors import ConfigError, EvaluationError
from mglc.grid import GridSpec, make_grid

# 20 * tanh(-0.416928), mpmath at 30 digits
TANH_EXAMPLE = -7.88678571528437114412766339114


def test_controller_examples():
    p = REPORTED_CONTROLLERS["pendulum"]
    assert controller_eval(p, [0.0, 0.0]) == 0.0
    assert controller_eval(p, [0.1, 0.0]) == pytest.approx(TANH_EXAMPLE, rel=1e-14)
    assert controller_eval(ControllerParams((1, 1), 20), [1e3, 1e3]) == pytest.approx(40.0)


def test_controller_params_validation():
    with pytest.raises(ConfigError):
        ControllerParams((1.0, 2.0, 3.0))
    with pytest.raises(ConfigError):
        ControllerParams((1.0, 2.0), gain=0.0)


def test_param_grad_examples():
    assert np.array_equal(controller_param_grad(ControllerParams((0, 0), 20), [1.0, 1.0]), [20.0, 20.0])
    assert np.array_equal(controller_param_grad(ControllerParams((3, -2), 20), [0.0, 0.0]), [0.0, 0.0])


def _fd_param_grad(psi, x, gain, h=1e-6):
    out = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        up = controller_eval(ControllerParams(tuple(psi + e), gain), x)
        dn = controller_eval(ControllerParams(tuple(psi - e), gain), x)
        out[i] = (up - dn) / (2 * h)
    return out


def test_param_grad_matches_fd():
    rng = np.random.default_rng(0)
    cases = [(np.array([2.0, -1.0]), np.array([0.5, 0.3]))]
    cases += [(rng.uniform(-3, 3, 2), rng.uniform(-2, 2, 2)) for _ in range(100)]
    for psi, x in cases:
        an = controller_param_grad(ControllerParams(tuple(psi), 20), x)
        fd = _fd_param_grad(psi, x, 20)
        assert np.allclose(an, fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(an)) + 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 100), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_controller_bounded_and_zero_at_origin(p1, p2, gain, x1, x2):
    p = ControllerParams((p1, p2), gain)
    assert controller_eval(p, [0.0, 0.0]) == 0.0
    assert abs(controller_eval(p, [x1, x2])) <= 2 * gain


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_equilibrium_at_origin(name):
    sys = get_system(name)
    assert np.all(sys(np.zeros(2), 0.0) == 0)
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = ControllerParams(tuple(rng.normal(size=2) * 5), 20)
        assert np.all(sys.closed_loop(p, np.zeros(2)) == 0)


def test_benchmark_values():
    assert pendulum()(np.array([np.pi / 2, 0.0]), 0.0) == pytest.approx([0.0, 19.62], rel=1e-14)
    assert vanderpol()(np.array([1.0, 1.0]), 0.0) == pytest.approx([2.0, -8.8], rel=1e-14)
    assert duffing()(np.array([1.0, 0.0]), 0.0) == pytest.approx([0.0, -3.0], rel=1e-14)
    assert np.all(duffing()(np.array([0.5, 0.0]), 0.0) == 0)
    assert np.all(duffing()(np.array([-0.5, 0.0]), 0.0) == 0)


def test_unknown_system():
    with pytest.raises(ConfigError):
        get_system("cartpole")


def test_noisy_pendulum_zero_noise_is_pendulum():
    rng = np.random.default_rng(2)
    x = rng.uniform(-3, 3, (50, 2))
    u = rng.uniform(-40, 40, 50)
    nom, noisy = pendulum(), noisy_pendulum()
    assert np.array_equal(nom(x, u), noisy(x, u, np.zeros((50, 3))))
    assert np.array_equal(nom.input_jacobian(x, u), noisy.input_jacobian(x, u, np.zeros((50, 3))))
    assert np.array_equal(nom(x, u), noisy(x, u))


def test_noisy_pendulum_uses_noise():
    sys = noisy_pendulum()
    x = np.array([[0.3, -0.2]])
    z = np.array([[0.01, -0.02, 0.05]])
    m, l = 0.15 + 0.01, 0.5 - 0.02
    u = 3.0
    want = (m * 9.81 * l * np.sin(0.3) + 1.05 * u + 0.1 * 0.2) / (m * l * l)
    assert sys(x, np.array([u]), z)[0, 1] == pytest.approx(want, rel=1e-13)
    draws = sys.sampler(np.random.default_rng(0), (1000,))
    assert draws.shape == (1000, 3) and np.all(np.abs(draws) <= 0.05)


def test_field_on_grid_and_errors():
    spec = GridSpec(-2, 2, -2, 2, 9)
    p = ControllerParams((-1.0, -2.0), 20)
    f = eval_field_on_grid(pendulum(), p, spec)
    assert f.f1[4, 4] == 0 and f.f2[4, 4] == 0  # origin cell
    assert np.all(f.V == 0)
    assert np.array_equal(f.f1.ravel(), make_grid(spec)[:, 1])
    from mglc.dynamics import linear_system

    blow = linear_system([[1e308, 0], [0, 1e308]])
    with np.errstate(over="ignore"), pytest.raises(EvaluationError, match="grid point"):
        eval_field_on_grid(blow, p, spec)


def _fd_field_jac(sys, p, spec, h=1e-6):
    cols = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        up = eval_field_on_grid(sys, ControllerParams(tuple(p.psi_array + e), p.gain), spec).data[:2]
        dn = eval_field_on_grid(sys, ControllerParams(tuple(p.psi_array - e), p.gain), spec).data[:2]
        cols.append(((up - dn) / (2 * h)).reshape(2, -1).T)
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("name", ["pendulum", "duffing", "vanderpol"])
def test_field_jacobian_matches_fd(name):
    sys = get_system(name)
    spec = GridSpec(-2, 2, -2, 2, 7)
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = ControllerParams(tuple(rng.uniform(-2, 2, 2)), 20)
        an = field_param_jacobian(sys, p, spec)
        fd = _fd_field_jac(sys, p, spec)
        assert np.allclose(an, fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(an)))


def test_field_jacobian_examples():
    spec = GridSpec(-2, 2, -2, 2, 5)
    p = ControllerParams((0.7, -1.3), 20)
    pts = make_grid(spec)
    du = controller_param_grad(p, pts)
    jp = field_param_jacobian(pendulum(), p, spec)
    assert np.all(jp[:, 0, :] == 0)
    assert np.allclose(jp[:, 1, :], du * 26.666666666666666666667, rtol=1e-14)
    jv = field_param_jacobian(vanderpol(), p, spec)
    assert np.array_equal(jv[:, 1, :], du)
    origin = 12
    assert np.all(jp[origin] == 0)
