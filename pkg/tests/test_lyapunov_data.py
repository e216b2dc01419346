import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mglc.errors import ConfigError, RejectedError
from mglc.grid import GridSpec, make_grid
from mglc.lyapunov_data import (
    Family1Spec,
    Family2Spec,
    LyapunovNet,
    build_dataset,
    certificate,
    gen_family1,
    is_hurwitz,
    record_certificate,
    sample_hurwitz,
    train_neural_lyapunov,
)

GRID = GridSpec(resolution=12)


def test_hurwitz_examples():
    assert is_hurwitz([[-1, 0], [0, -2]])
    assert not is_hurwitz([[1, 0], [0, -2]])


def test_sampled_matrices_have_stable_eigenvalues():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = sample_hurwitz(rng)
        tr, det = np.trace(a), np.linalg.det(a)
        disc = complex(tr * tr - 4 * det) ** 0.5  # quadratic-formula roots
        roots = ((tr + disc) / 2, (tr - disc) / 2)
        assert all(r.real < 0 for r in roots)


def test_family1_field():
    rng = np.random.default_rng(1)
    spec = gen_family1(rng)
    assert spec.A.shape == (2, 2) and spec.W_f.shape == (20, 2) and spec.beta_f.shape == (2, 20)
    assert np.all(spec.field(np.zeros(2)) == 0)
    x = rng.normal(size=(40, 2))
    oracle = np.array([spec.A @ xi + sum(spec.beta_f[:, k] * np.tanh(spec.W_f[k] @ xi) for k in range(20)) for xi in x])
    assert np.allclose(spec.field(x), oracle, rtol=1e-12, atol=1e-12)
    lin = Family1Spec(spec.A, spec.W_f, np.zeros((2, 20)))
    assert np.array_equal(lin.field(x), x @ spec.A.T)


def test_lyapunov_net_zero_at_origin():
    rng = np.random.default_rng(2)
    net = LyapunovNet(rng.normal(size=(20, 2)), rng.normal(size=20), rng.normal(size=20))
    assert net.value(np.zeros(2)) == 0.0
    x = rng.normal(size=(10, 2))
    h = 1e-6
    fd = np.stack([(net.value(x + h * e) - net.value(x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
    assert np.allclose(net.grad(x), fd, rtol=1e-6, atol=1e-8)


def test_trainer_certifies_contraction():
    pts = make_grid(GRID)
    net = train_neural_lyapunov(lambda x: -x, GRID, np.random.default_rng(0))
    cert = certificate(net.value(pts), net.lie_derivative(pts, -pts), pts, 0.2)
    assert cert.passed(0.99)
    assert net.value(np.zeros(2)) == 0.0


def test_trainer_rejects_unstable_field():
    with pytest.raises(RejectedError):
        train_neural_lyapunov(lambda x: x, GRID, np.random.default_rng(0))


def test_family2_example():
    spec = Family2Spec((2, 0, 1, 0))
    x = np.array([1.0, 1.0])
    assert spec.lyapunov(x) == pytest.approx(1.5, rel=1e-15)
    assert spec.lie_derivative(x) == pytest.approx(-1.0, rel=1e-15)
    assert spec.lie_derivative_closed_form(x) == pytest.approx(-1.0, rel=1e-15)


def test_family2_coefficient_range():
    with pytest.raises(ConfigError):
        Family2Spec((1, 2, 3, 6))


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(0, 5)] * 4), st.integers(0, 2**32 - 1))
def test_family2_identity(c, seed):
    spec = Family2Spec(c)
    x = np.random.default_rng(seed).uniform(-4, 4, (10_000, 2))
    vdot = spec.lie_derivative(x)
    assert np.max(np.abs(vdot - spec.lie_derivative_closed_form(x))) <= 1e-9
    assert np.all(vdot <= -c[2] * x[:, 1] ** 2 + 1e-9)
    x[:, 1] = 0.0
    assert np.all(spec.lie_derivative(x) == 0)
    assert np.all(spec.lyapunov(x) >= 0) and spec.lyapunov(np.zeros(2)) == 0


def test_build_family2_only():
    ds = build_dataset(0, 10, GRID, seed=3)
    pts = make_grid(GRID)
    assert ds.counts == {"family1": 0, "family2": 10}
    for rec in ds.records:
        assert np.max(np.abs(rec.spec.lie_derivative(pts) - rec.spec.lie_derivative_closed_form(pts))) <= 1e-9
        assert rec.field.V.min() >= 0 and rec.field.V[GRID.resolution // 2, GRID.resolution // 2] >= 0
    assert np.all(np.abs(ds.encoded()) <= 1)


def test_build_family1_certified():
    ds = build_dataset(4, 0, GRID, seed=5)
    assert len(ds.records) == 4
    for rec in ds.records:
        assert record_certificate(rec).passed(0.99)
        assert rec.field.V.min() >= 0


def test_dataset_determinism_and_workers():
    a = build_dataset(2, 3, GRID, seed=9)
    b = build_dataset(2, 3, GRID, seed=9)
    c = build_dataset(2, 3, GRID, seed=9, workers=2)
    assert a == b == c
    assert not a == build_dataset(2, 3, GRID, seed=10)


def test_dataset_rejects_bad_counts():
    with pytest.raises(ConfigError):
        build_dataset(-1, 2, GRID, 0)
    with pytest.raises(ConfigError):
        build_dataset(0, 0, GRID, 0)
