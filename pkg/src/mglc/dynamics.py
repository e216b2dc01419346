"""Control-affine benchmark systems and the saturated tanh feedback law.

All evaluators are vectorised over leading axes: states have shape ``(..., 2)``
and scalar controls have shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, EvaluationError
from .grid import GridField, GridSpec, make_grid

DEFAULT_GAIN = 20.0
NOISE_HALF_WIDTH = 0.05

# pendulum constants
G_ACC = 9.81
P_MASS = 0.15
P_LEN = 0.5
P_FRICTION = 0.1


@dataclass(frozen=True)
class ControllerParams:
    psi: tuple[float, ...]
    gain: float = DEFAULT_GAIN

    def __post_init__(self):
        psi = tuple(float(v) for v in np.ravel(self.psi))
        object.__setattr__(self, "psi", psi)
        if len(psi) != 2:
            raise ConfigError(f"psi must have 2 entries, got {len(psi)}")
        if not (np.isfinite(self.gain) and self.gain > 0):
            raise ConfigError(f"gain must be positive, got {self.gain}")

    @property
    def psi_array(self) -> np.ndarray:
        return np.asarray(self.psi, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"psi": list(self.psi), "gain": self.gain}

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerParams":
        return cls(tuple(d["psi"]), float(d.get("gain", DEFAULT_GAIN)))


def controller_eval(p: ControllerParams, x) -> np.ndarray:
    """u(x) = C * sum_i tanh(psi_i x_i)."""
    x = np.asarray(x, dtype=np.float64)
    return p.gain * np.sum(np.tanh(p.psi_array * x), axis=-1)


def controller_param_grad(p: ControllerParams, x) -> np.ndarray:
    """du/dpsi_i = C x_i sech^2(psi_i x_i), shape ``(..., 2)``."""
    x = np.asarray(x, dtype=np.float64)
    th = np.tanh(p.psi_array * x)
    return p.gain * x * (1.0 - th * th)


NoiseSampler = Callable[[np.random.Generator, tuple], np.ndarray]


def uniform_sampler(half_width: float = NOISE_HALF_WIDTH) -> NoiseSampler:
    def sample(rng: np.random.Generator, size: tuple) -> np.ndarray:
        return rng.uniform(-half_width, half_width, size=tuple(size) + (3,))

    return sample


def zero_sampler(rng: np.random.Generator, size: tuple) -> np.ndarray:
    return np.zeros(tuple(size) + (3,))


@dataclass(frozen=True)
class ControlSystem:
    """x' = f(x, u) with an analytic input Jacobian df/du.

    ``f`` and ``dfdu`` take an optional parameter-noise array ``z`` of shape
    ``(..., noise_dim)``; deterministic systems have ``noise_dim == 0`` and
    ignore it.
    """

    name: str
    f: Callable[..., np.ndarray]
    dfdu: Callable[..., np.ndarray]
    noise_dim: int = 0
    sampler: Optional[NoiseSampler] = field(default=None, compare=False)

    def __call__(self, x, u, z=None) -> np.ndarray:
        return self.f(np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64), z)

    def input_jacobian(self, x, u, z=None) -> np.ndarray:
        return self.dfdu(np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64), z)

    def closed_loop(self, p: ControllerParams, x, z=None) -> np.ndarray:
        return self(x, controller_eval(p, x), z)

    @property
    def stochastic(self) -> bool:
        return self.noise_dim > 0


def _stack(a, b):
    a, b = np.broadcast_arrays(a, b)
    return np.stack([a, b], axis=-1)


def _pendulum_rhs(x, u, m, l):
    th, om = x[..., 0], x[..., 1]
    return _stack(om, (m * G_ACC * l * np.sin(th) + u - P_FRICTION * om) / (m * l * l))


def _pendulum_dfdu(x, m, l):
    zero = np.zeros(x.shape[:-1])
    return _stack(zero, 1.0 / (m * l * l) + zero)


def pendulum() -> ControlSystem:
    return ControlSystem(
        "pendulum",
        lambda x, u, z=None: _pendulum_rhs(x, u, P_MASS, P_LEN),
        lambda x, u, z=None: _pendulum_dfdu(x, P_MASS, P_LEN),
    )


def noisy_pendulum(z_sampler: Optional[NoiseSampler] = None) -> ControlSystem:
    """Pendulum with m, l and the actuator gain perturbed by z = (z1, z2, z3).

    With ``z`` omitted the nominal pendulum is returned bit for bit.
    """

    def f(x, u, z=None):
        if z is None:
            return _pendulum_rhs(x, u, P_MASS, P_LEN)
        z = np.asarray(z, dtype=np.float64)
        return _pendulum_rhs(x, (1.0 + z[..., 2]) * u, P_MASS + z[..., 0], P_LEN + z[..., 1])

    def dfdu(x, u, z=None):
        if z is None:
            return _pendulum_dfdu(x, P_MASS, P_LEN)
        z = np.asarray(z, dtype=np.float64)
        jac = _pendulum_dfdu(x, P_MASS + z[..., 0], P_LEN + z[..., 1])
        return jac * (1.0 + z[..., 2])[..., None]

    return ControlSystem("noisy-pendulum", f, dfdu, noise_dim=3, sampler=z_sampler or uniform_sampler())


def duffing() -> ControlSystem:
    def f(x, u, z=None):
        x1, x2 = x[..., 0], x[..., 1]
        return _stack(x2, -0.5 * x2 - x1 * (4.0 * x1 * x1 - 1.0) + 0.5 * u)

    def dfdu(x, u, z=None):
        zero = np.zeros(x.shape[:-1])
        return _stack(zero, 0.5 + zero)

    return ControlSystem("duffing", f, dfdu)


def vanderpol() -> ControlSystem:
    def f(x, u, z=None):
        x1, x2 = x[..., 0], x[..., 1]
        return _stack(2.0 * x2, -0.8 * x1 + 2.0 * x2 - 10.0 * x1 * x1 * x2 + u)

    def dfdu(x, u, z=None):
        zero = np.zeros(x.shape[:-1])
        return _stack(zero, 1.0 + zero)

    return ControlSystem("vanderpol", f, dfdu)


def linear_system(a, b=(0.0, 1.0), name: str = "linear") -> ControlSystem:
    """x' = A x + b u; handy for tests and toy synthesis runs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def f(x, u, z=None):
        return x @ a.T + np.asarray(u)[..., None] * b

    def dfdu(x, u, z=None):
        return np.broadcast_to(b, x.shape).copy()

    return ControlSystem(name, f, dfdu)


BENCHMARKS: dict[str, Callable[[], ControlSystem]] = {
    "pendulum": pendulum,
    "duffing": duffing,
    "vanderpol": vanderpol,
    "noisy-pendulum": noisy_pendulum,
}

# controllers reported for the four benchmarks (gain 20)
REPORTED_CONTROLLERS: dict[str, ControllerParams] = {
    "pendulum": ControllerParams((-4.16928, -3.14848), 20.0),
    "duffing": ControllerParams((-3.89859, -4.46941), 20.0),
    "vanderpol": ControllerParams((-5.05384, -3.25052), 20.0),
    "noisy-pendulum": ControllerParams((-4.01703, -3.63485), 20.0),
}


def get_system(name: str) -> ControlSystem:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(BENCHMARKS)}") from None


def _check_finite(values: np.ndarray, pts: np.ndarray, what: str):
    bad = ~np.all(np.isfinite(values.reshape(len(pts), -1)), axis=-1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EvaluationError(f"non-finite {what} at grid point {tuple(pts[i])}")


def eval_field_on_grid(sys: ControlSystem, p: ControllerParams, spec: GridSpec, v_channel=None) -> GridField:
    """Closed-loop field on the grid; channel 2 is ``v_channel`` (zeros if omitted)."""
    pts = make_grid(spec)
    vals = sys.closed_loop(p, pts)
    _check_finite(vals, pts, "dynamics value")
    g = spec.resolution
    v = np.zeros((g, g)) if v_channel is None else np.asarray(v_channel, dtype=np.float64).reshape(g, g)
    return GridField(spec, np.stack([vals[:, 0].reshape(g, g), vals[:, 1].reshape(g, g), v]))


def field_param_jacobian(sys: ControlSystem, p: ControllerParams, spec: GridSpec) -> np.ndarray:
    """d f_c(x_g, u(x_g)) / d psi_i as an array of shape ``(G*G, 2, 2)``."""
    pts = make_grid(spec)
    u = controller_eval(p, pts)
    dfdu = sys.input_jacobian(pts, u)
    dudpsi = controller_param_grad(p, pts)
    jac = dfdu[:, :, None] * dudpsi[:, None, :]
    _check_finite(jac, pts, "parameter Jacobian")
    return jac
