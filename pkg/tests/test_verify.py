import json

import numpy as np
import pytest

from mglc.dynamics import REPORTED_CONTROLLERS, ControllerParams, ControlSystem, get_system, linear_system, noisy_pendulum, pendulum
from mglc.dynamics import zero_sampler
from mglc.errors import ConfigError, IntegrationError
from mglc.grid import GridSpec, make_grid
from mglc.lyapunov_data import build_dataset
from mglc.verify import (
    RolloutConfig,
    dopri45,
    em_integrate,
    lyapunov_grid_check,
    rk45_integrate,
    rollout_batch,
    write_report_json,
    write_trajectories_csv,
)


def test_decay_matches_closed_form():
    tr = dopri45(lambda y: -y, [1.0], 1.0, rtol=1e-6, atol=1e-8)
    assert abs(tr.x[0, -1, 0] - np.exp(-1.0)) <= 1e-6
    assert np.allclose(tr.x[0, :, 0], np.exp(-tr.t), atol=1e-6)  # dense output too


def test_constant_trajectory():
    tr = dopri45(lambda y: np.zeros_like(y), [[0.3, -2.0]], 5.0)
    assert np.all(tr.x[0] == [0.3, -2.0])


def test_harmonic_energy_drift():
    osc = lambda y: np.stack([y[:, 1], -y[:, 0]], axis=1)
    tr = dopri45(osc, [[1.0, 0.0]], 20 * np.pi, rtol=1e-8, atol=1e-10)
    energy = 0.5 * np.sum(tr.x[0] ** 2, axis=-1)
    assert np.max(np.abs(energy - 0.5)) < 1e-5


def test_batched_equals_single():
    sys = get_system("duffing")
    p = REPORTED_CONTROLLERS["duffing"]
    ics = np.random.default_rng(0).uniform(-2, 2, (6, 2))
    f = lambda x: sys.closed_loop(p, x)
    both = dopri45(f, ics, 3.0)
    for i in range(6):
        one = dopri45(f, ics[i], 3.0)
        assert np.array_equal(both.x[i], one.x[0])


def test_blowup_is_reported():
    tr = dopri45(lambda y: y * y, [[1.0]], 2.0)
    assert tr.failed[0] and "t=" in tr.messages[0]
    cfg = RolloutConfig(t_end=2.0, n=1)
    blow = ControlSystem("blow", lambda x, u, z=None: x * x, lambda x, u, z=None: np.zeros_like(x))
    with pytest.raises(IntegrationError):
        rk45_integrate(blow, ControllerParams((0, 0)), [[1.0, 1.0]], cfg)


def _euler(sys, p, x, dt, n):
    for _ in range(n):
        x = x + dt * sys(x, p.gain * np.sum(np.tanh(p.psi_array * x), axis=-1))
    return x


def test_em_without_noise_is_euler():
    p = ControllerParams((-2.0, -1.0), 5.0)
    cfg = RolloutConfig(t_end=1.0, dt=1e-3, n_report=11)
    x0 = np.array([[0.5, -0.3], [1.0, 1.0]])
    tr = em_integrate(noisy_pendulum(zero_sampler), p, x0, cfg)
    assert np.array_equal(tr.x[:, -1], _euler(pendulum(), p, x0, 1e-3, 1000))
    assert np.array_equal(tr.x[:, 4], _euler(pendulum(), p, x0, 1e-3, 400))


def test_em_is_seeded():
    p = REPORTED_CONTROLLERS["noisy-pendulum"]
    cfg = RolloutConfig(t_end=0.5, n_report=11, seed=4)
    a = em_integrate(noisy_pendulum(), p, [[0.5, 0.5]], cfg)
    b = em_integrate(noisy_pendulum(), p, [[0.5, 0.5]], cfg)
    c = em_integrate(noisy_pendulum(), p, [[0.5, 0.5]], RolloutConfig(t_end=0.5, n_report=11, seed=5))
    assert np.array_equal(a.x, b.x) and not np.array_equal(a.x, c.x)


def test_em_first_order():
    sys = pendulum()
    p = ControllerParams((-1.0, -1.0), 2.0)
    x0 = [[1.0, 0.5]]
    ref = dopri45(lambda x: sys.closed_loop(p, x), x0, 1.0, rtol=1e-12, atol=1e-14).x[0, -1]
    errs = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        tr = em_integrate(sys, p, x0, RolloutConfig(t_end=1.0, dt=dt, n_report=11))
        errs.append(np.linalg.norm(tr.x[0, -1] - ref))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.8) & (ratios < 2.2))


def test_em_step_must_divide_report_grid():
    with pytest.raises(ConfigError):
        em_integrate(pendulum(), ControllerParams((0, 0)), [[0, 0]], RolloutConfig(t_end=1.0, dt=0.3, n_report=11))


def test_rollout_config_validation():
    for bad in ({"t_end": 0}, {"n": 0}, {"r_conv": -1}, {"method": "leapfrog"}):
        with pytest.raises(ConfigError):
            RolloutConfig(**bad)


def test_vanderpol_without_control_does_not_converge():
    # the tiny gain makes u numerically zero
    rep = rollout_batch(get_system("vanderpol"), ControllerParams((0.0, 0.0), 1e-300), RolloutConfig(n=20))
    assert rep.fraction <= 0.05


def test_fraction_definition_and_exports(tmp_path):
    rep = rollout_batch(get_system("duffing"), REPORTED_CONTROLLERS["duffing"], RolloutConfig(n=10, t_end=5.0))
    assert rep.fraction == rep.converged.sum() / 10
    write_report_json(rep, tmp_path / "r.json")
    s = json.loads((tmp_path / "r.json").read_text())
    assert s["n"] == 10 and s["fraction"] == rep.fraction
    (path,) = write_trajectories_csv(rep, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "traj,t,x1,x2,u" and len(lines) == 1 + 10 * 1001
    files = write_trajectories_csv(rep, tmp_path / "per", combined=False)
    assert len(files) == 10 and files[0].read_text().startswith("t,x1,x2,u\n")


@pytest.mark.parametrize("name", ["pendulum", "noisy-pendulum", "duffing"])
def test_workers_bit_identical(name):
    sys = get_system(name)
    cfg = RolloutConfig(n=7, t_end=2.0, method="em" if sys.stochastic else "rk45")
    p = REPORTED_CONTROLLERS[name]
    one = rollout_batch(sys, p, cfg, workers=1)
    three = rollout_batch(sys, p, cfg, workers=3)
    assert np.array_equal(one.trajectories.x, three.trajectories.x, equal_nan=True)
    assert np.array_equal(one.converged, three.converged)


SPEC = GridSpec(-2, 2, -2, 2, 11)


def test_grid_check_canonical_pair():
    pts = make_grid(SPEC)
    v = 0.5 * np.sum(pts ** 2, axis=-1)
    p = ControllerParams((0.0, 0.0), 1.0)
    stable = linear_system(-np.eye(2), b=(0.0, 0.0))
    rep = lyapunov_grid_check(v, stable, p, SPEC)
    assert rep.positive_fraction == 1.0 and rep.decrease_fraction == 1.0 and rep.passed()
    rep = lyapunov_grid_check(v, linear_system(np.eye(2), b=(0.0, 0.0)), p, SPEC)
    assert rep.decrease_fraction == 0.0 and len(rep.worst_decrease) == 5


def test_grid_check_family2_records():
    ds = build_dataset(0, 5, SPEC, seed=1)
    pts = make_grid(SPEC)
    p = ControllerParams((0.0, 0.0), 1.0)
    for rec in ds.records:
        sys = ControlSystem("f2", lambda x, u, z=None, s=rec.spec: s.field(x), lambda x, u, z=None: np.zeros_like(x))
        rep = lyapunov_grid_check(rec.spec.lyapunov(pts), sys, p, SPEC, tol=1e-9, grad_v=rec.spec.lyapunov_grad)
        assert rep.positive_fraction == 1.0 and rep.decrease_fraction == 1.0
