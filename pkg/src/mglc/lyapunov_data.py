"""Training pairs (f, V) of stable vector fields and Lyapunov functions.

Family 1: ``f(x) = A x + beta_f tanh(W_f x)`` with a Hurwitz ``A`` and a
tanh-network Lyapunov function fitted per field (candidates that fail the
grid certificate are resampled).

Family 2: ``x1' = x2, x2' = -c1 x1 - c2 tanh x1 - c3 x2 - c4 tanh x2`` with
``V = c1/2 x1^2 + c2 log cosh x1 + x2^2/2`` and
``V' = -x2 (c3 x2 + c4 tanh x2)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, RejectedError, TrainingError
from .grid import GridField, GridSpec, NormCodec, fit_codec, make_grid
from .tinynet import OptimizerState, adam_step

log = logging.getLogger(__name__)

HIDDEN_F = 20
BETA_F_STD = 0.2
C_MAX = 5.0
MAX_HURWITZ_DRAWS = 10_000
MAX_FAMILY1_ATTEMPTS = 100


@dataclass(frozen=True)
class LyapunovTrainConfig:
    hidden: int = 20
    lr: float = 0.02
    iterations: int = 2000
    check_every: int = 50
    min_iterations: int = 200
    r0: float = 0.2
    threshold: float = 0.99
    init_scale: float = 1.0


@dataclass(frozen=True, eq=False)
class LyapunovNet:
    """V(x) = beta . tanh(W x + b) - beta . tanh(b), so V(0) = 0 exactly."""

    W: np.ndarray
    b: np.ndarray
    beta: np.ndarray

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.tanh(x @ self.W.T + self.b) @ self.beta - self.beta @ np.tanh(self.b)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        th = np.tanh(x @ self.W.T + self.b)
        return ((1.0 - th * th) * self.beta) @ self.W

    def lie_derivative(self, x, fx) -> np.ndarray:
        return np.sum(self.grad(x) * fx, axis=-1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b, self.beta])

    @classmethod
    def from_flat(cls, v, hidden: int) -> "LyapunovNet":
        v = np.asarray(v, dtype=np.float64)
        h = hidden
        return cls(v[:2 * h].reshape(h, 2).copy(), v[2 * h:3 * h].copy(), v[3 * h:4 * h].copy())


@dataclass(frozen=True, eq=False)
class Family1Spec:
    A: np.ndarray
    W_f: np.ndarray
    beta_f: np.ndarray
    lyap: Optional[LyapunovNet] = None

    def __post_init__(self):
        if self.A.shape != (2, 2) or self.W_f.shape != (HIDDEN_F, 2) or self.beta_f.shape != (2, HIDDEN_F):
            raise ConfigError("family-1 spec has wrong matrix shapes")

    def field(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.A.T + np.tanh(x @ self.W_f.T) @ self.beta_f.T

    def values(self) -> np.ndarray:
        parts = [self.A.ravel(), self.W_f.ravel(), self.beta_f.ravel()]
        if self.lyap is not None:
            parts.append(self.lyap.flat())
        return np.concatenate(parts)

    @classmethod
    def from_values(cls, v, hidden: int) -> "Family1Spec":
        v = np.asarray(v, dtype=np.float64)
        a = v[:4].reshape(2, 2)
        w = v[4:4 + 2 * HIDDEN_F].reshape(HIDDEN_F, 2)
        beta = v[4 + 2 * HIDDEN_F:4 + 4 * HIDDEN_F].reshape(2, HIDDEN_F)
        rest = v[4 + 4 * HIDDEN_F:]
        lyap = LyapunovNet.from_flat(rest, hidden) if rest.size else None
        return cls(a.copy(), w.copy(), beta.copy(), lyap)


@dataclass(frozen=True)
class Family2Spec:
    c: tuple[float, float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.c)
        object.__setattr__(self, "c", c)
        if len(c) != 4 or not all(0.0 <= v <= C_MAX for v in c):
            raise ConfigError(f"family-2 coefficients must be 4 values in [0, {C_MAX}], got {c}")

    def field(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c1, c2, c3, c4 = self.c
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -c1 * x1 - c2 * np.tanh(x1) - c3 * x2 - c4 * np.tanh(x2)], axis=-1)

    def lyapunov(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c1, c2 = self.c[0], self.c[1]
        x1, x2 = x[..., 0], x[..., 1]
        return 0.5 * c1 * x1 * x1 + c2 * _logcosh(x1) + 0.5 * x2 * x2

    def lyapunov_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c1, c2 = self.c[0], self.c[1]
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([c1 * x1 + c2 * np.tanh(x1), x2], axis=-1)

    def lie_derivative(self, x) -> np.ndarray:
        return np.sum(self.lyapunov_grad(x) * self.field(x), axis=-1)

    def lie_derivative_closed_form(self, x) -> np.ndarray:
        x2 = np.asarray(x, dtype=np.float64)[..., 1]
        c3, c4 = self.c[2], self.c[3]
        return -x2 * (c3 * x2 + c4 * np.tanh(x2))

    def values(self) -> np.ndarray:
        return np.asarray(self.c, dtype=np.float64)


def _logcosh(x):
    # overflow-free log(cosh x)
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def is_hurwitz(A) -> bool:
    A = np.asarray(A, dtype=np.float64)
    return bool(np.trace(A) < 0 and np.linalg.det(A) > 0)


def sample_hurwitz(rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample a 2x2 matrix with N(0, 1) entries until Hurwitz."""
    for _ in range(MAX_HURWITZ_DRAWS):
        A = rng.standard_normal((2, 2))
        if is_hurwitz(A):
            return A
    raise RejectedError(f"no Hurwitz matrix in {MAX_HURWITZ_DRAWS} draws")


def gen_family1(rng: np.random.Generator) -> Family1Spec:
    A = sample_hurwitz(rng)
    W_f = rng.standard_normal((HIDDEN_F, 2))
    beta_f = rng.normal(0.0, BETA_F_STD, size=(2, HIDDEN_F))
    return Family1Spec(A, W_f, beta_f)


def gen_family2(rng: np.random.Generator) -> Family2Spec:
    return Family2Spec(tuple(rng.uniform(0.0, C_MAX, size=4)))


@dataclass
class Certificate:
    positive_fraction: float
    decrease_fraction: float
    n_points: int

    def passed(self, threshold: float) -> bool:
        return self.positive_fraction >= threshold and self.decrease_fraction >= threshold


def certificate(v: np.ndarray, vdot: np.ndarray, pts: np.ndarray, r0: float) -> Certificate:
    off = np.linalg.norm(pts, axis=-1) > r0
    n = int(off.sum())
    return Certificate(float(np.mean(v[off] > 0)), float(np.mean(vdot[off] < 0)), n)


def _lyap_loss_grad(params, pts, fx, sq, h):
    W = params[:2 * h].reshape(h, 2)
    b = params[2 * h:3 * h]
    beta = params[3 * h:]
    th = np.tanh(pts @ W.T + b)
    s = 1.0 - th * th
    gf = fx @ W.T
    tb = np.tanh(b)
    v = th @ beta - beta @ tb
    vdot = (s * gf) @ beta
    n = len(pts)
    e1 = np.maximum(0.0, vdot + sq)
    e2 = np.maximum(0.0, -v)
    loss = float(np.mean(e1 * e1) + np.mean(e2 * e2))
    dvdot = 2.0 * e1 / n
    dv = -2.0 * e2 / n
    # d vdot: beta_k s_k gf_k ; d v: beta_k (th_k - tanh b_k)
    a = dvdot[:, None] * s
    ds_dz = -2.0 * th * s
    cz = dvdot[:, None] * gf * ds_dz * beta + dv[:, None] * s * beta
    g_beta = (a * gf).sum(axis=0) + dv @ th - dv.sum() * tb
    g_b = cz.sum(axis=0) - dv.sum() * beta * (1.0 - tb * tb)
    g_W = cz.T @ pts + (a * beta).T @ fx
    return loss, np.concatenate([g_W.ravel(), g_b, g_beta]), v, vdot


def train_neural_lyapunov(
    f: Callable[[np.ndarray], np.ndarray],
    spec: GridSpec,
    rng: np.random.Generator,
    config: LyapunovTrainConfig = LyapunovTrainConfig(),
) -> LyapunovNet:
    """Fit V on the grid against ``mean relu(V' + |x|^2)^2 + relu(-V)^2``.

    Raises :class:`RejectedError` if the grid certificate fails after the
    iteration budget.
    """
    h = config.hidden
    pts = make_grid(spec)
    fx = f(pts)
    if not np.all(np.isfinite(fx)):
        raise TrainingError("vector field is non-finite on the grid")
    sq = np.sum(pts * pts, axis=-1)
    span = max(spec.x_max - spec.x_min, spec.y_max - spec.y_min) / 2
    W = rng.normal(0.0, config.init_scale / span, size=(h, 2))
    b = rng.normal(0.0, 1.0, size=h)
    beta = rng.normal(0.0, 1.0, size=h)
    params = np.concatenate([W.ravel(), b, beta])
    opt = OptimizerState.for_params(params, lr=config.lr)
    cert = None
    for it in range(1, config.iterations + 1):
        loss, grad, v, vdot = _lyap_loss_grad(params, pts, fx, sq, h)
        if not np.isfinite(loss):
            raise TrainingError(f"Lyapunov loss became non-finite at iteration {it}")
        params = adam_step(opt, params, grad)
        if it >= config.min_iterations and it % config.check_every == 0:
            net = LyapunovNet.from_flat(params, h)
            cert = certificate(net.value(pts), net.lie_derivative(pts, fx), pts, config.r0)
            if cert.passed(config.threshold):
                return net
    raise RejectedError(f"Lyapunov certificate failed: {cert}")


@dataclass(eq=False)
class DatasetRecord:
    family: int
    spec: Union[Family1Spec, Family2Spec]
    field: GridField
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, DatasetRecord)
            and self.family == other.family
            and np.array_equal(self.spec.values(), other.spec.values())
            and self.field == other.field
            and self.seed == other.seed
        )


@dataclass(eq=False)
class Dataset:
    records: list[DatasetRecord]
    codec: NormCodec
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    def encoded(self) -> np.ndarray:
        return np.stack([self.codec.encode_array(r.field.data) for r in self.records])

    @property
    def counts(self) -> dict:
        n1 = sum(r.family == 1 for r in self.records)
        return {"family1": n1, "family2": len(self.records) - n1}

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.grid == other.grid
            and self.codec == other.codec
            and self.records == other.records
        )


def _as_f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _shift_nonnegative(v):
    return v - min(0.0, float(v.min()))


def _field_record(spec_grid: GridSpec, fx: np.ndarray, v: np.ndarray) -> GridField:
    g = spec_grid.resolution
    data = np.stack([fx[:, 0].reshape(g, g), fx[:, 1].reshape(g, g), _shift_nonnegative(v).reshape(g, g)])
    return GridField(spec_grid, _as_f32(data))


def make_family1_record(grid: GridSpec, seed: int, config: LyapunovTrainConfig = LyapunovTrainConfig()) -> tuple[DatasetRecord, int]:
    """Draw family-1 candidates from ``seed`` until one is certified.

    Returns the record and the number of rejected candidates.
    """
    rng = np.random.default_rng(seed)
    pts = make_grid(grid)
    for attempt in range(MAX_FAMILY1_ATTEMPTS):
        cand = gen_family1(rng)
        try:
            net = train_neural_lyapunov(cand.field, grid, rng, config)
        except RejectedError:
            continue
        spec = Family1Spec(cand.A, cand.W_f, cand.beta_f, net)
        return DatasetRecord(1, spec, _field_record(grid, spec.field(pts), net.value(pts)), seed), attempt
    raise RejectedError(
        f"family-1 acceptance below {100 / MAX_FAMILY1_ATTEMPTS:.0f}% for seed {seed}: "
        f"{MAX_FAMILY1_ATTEMPTS} consecutive candidates failed the certificate"
    )


def make_family2_record(grid: GridSpec, seed: int) -> DatasetRecord:
    rng = np.random.default_rng(seed)
    spec = gen_family2(rng)
    pts = make_grid(grid)
    return DatasetRecord(2, spec, _field_record(grid, spec.field(pts), spec.lyapunov(pts)), seed)


def _make_record(args):
    kind, grid, seed, config = args
    if kind == 1:
        return make_family1_record(grid, seed, config)
    return make_family2_record(grid, seed), 0


def build_dataset(
    n1: int,
    n2: int,
    grid: GridSpec,
    seed: int,
    config: LyapunovTrainConfig = LyapunovTrainConfig(),
    workers: int = 1,
) -> Dataset:
    """``n1`` certified family-1 records followed by ``n2`` family-2 records.

    Record ``i`` draws from its own stream seeded with ``seed + i``, so the
    result does not depend on ``workers``.
    """
    if n1 < 0 or n2 < 0:
        raise ConfigError("record counts must be non-negative")
    if n1 + n2 == 0:
        raise ConfigError("dataset must contain at least one record")
    jobs = [(1, grid, seed + i, config) for i in range(n1)]
    jobs += [(2, grid, seed + n1 + i, config) for i in range(n2)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_make_record, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_make_record(j) for j in jobs]
    records = [r for r, _ in results]
    rejected = sum(k for _, k in results)
    codec = fit_codec([r.field for r in records])
    meta = {
        "seed": seed,
        "n1": n1,
        "n2": n2,
        "family1_rejected": rejected,
        "family1_acceptance": (n1 / (n1 + rejected)) if n1 else None,
        "lyapunov_hidden": config.hidden,
        "r0": config.r0,
    }
    log.info("built dataset: %d family-1 (%d rejected), %d family-2", n1, rejected, n2)
    return Dataset(records, codec, grid, meta)


def record_certificate(rec: DatasetRecord, r0: float = 0.2) -> Certificate:
    """Re-check a record's Lyapunov conditions from its stored spec."""
    pts = make_grid(rec.field.spec)
    if rec.family == 1:
        net = rec.spec.lyap
        if net is None:
            raise ConfigError("family-1 record carries no Lyapunov net")
        return certificate(net.value(pts), net.lie_derivative(pts, rec.spec.field(pts)), pts, r0)
    return certificate(rec.spec.lyapunov(pts), rec.spec.lie_derivative(pts), pts, r0)
