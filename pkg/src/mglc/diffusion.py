"""Cosine noise schedule, forward corruption, Tweedie estimate, DDIM steps and
the epsilon-prediction denoiser with its training loop."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .grid import GridSpec, NormCodec
from .tinynet import Network, OptimizerState, adam_step, time_embed

ALPHA_MIN = 1e-8
ALPHA_MAX = 1.0 - 1e-8
COSINE_OFFSET = 0.008


class AlphaClampWarning(RuntimeWarning):
    pass


def _cosine_raw(T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * (math.pi / 2)) ** 2
    ab = f / f[0]
    ab[0] = 1.0
    ab[-1] = 0.0
    return ab


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..T] and the DDIM sampling stride."""

    alpha_bar: tuple[float, ...]
    sampling_steps: int = 50
    kind: str = "cosine"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", tuple(float(v) for v in ab))
        if ab.ndim != 1 or ab.size < 3:
            raise ConfigError("schedule needs T >= 2")
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if ab[0] > 1.0 or ab[-1] < 0.0:
            raise ConfigError("alpha_bar must lie in [0, 1]")
        if not 1 <= self.sampling_steps <= ab.size - 1:
            raise ConfigError(f"sampling_steps must be in [1, {ab.size - 1}]")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.alpha_bar)

    def __getitem__(self, t: int) -> float:
        return self.alpha_bar[t]

    def timesteps(self, steps: Optional[int] = None) -> list[int]:
        """Descending DDIM timesteps ``[T, ..., 0]`` with ``steps`` intervals."""
        steps = self.sampling_steps if steps is None else steps
        if steps <= 0:
            return [self.T]
        ts = np.round(np.linspace(self.T, 0, steps + 1)).astype(int)
        out = [int(ts[0])]
        for t in ts[1:]:
            if t < out[-1]:
                out.append(int(t))
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "T": self.T, "sampling_steps": self.sampling_steps}
        if self.kind != "cosine":
            d["alpha_bar"] = list(self.alpha_bar)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "cosine") == "cosine":
            return cosine_alphabar(int(d["T"]), int(d["sampling_steps"]))
        return cls(tuple(d["alpha_bar"]), int(d["sampling_steps"]), d["kind"])


def cosine_alphabar(T: int, sampling_steps: int = 50) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("cosine schedule needs T >= 2")
    return NoiseSchedule(tuple(_cosine_raw(T)), min(sampling_steps, T), "cosine")


def clamp_alpha(ab: float) -> float:
    return min(max(ab, ALPHA_MIN), ALPHA_MAX)


def forward_noise(x, t: int, schedule: NoiseSchedule, eps) -> np.ndarray:
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match data shape {x.shape}")
    return forward_noise_ab(x, schedule[t], eps)


def forward_noise_ab(x, ab: float, eps) -> np.ndarray:
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


def tweedie_ab(x_t, eps_pred, ab: float) -> np.ndarray:
    if ab < ALPHA_MIN:
        warnings.warn(f"alpha_bar={ab:.3g} clamped to {ALPHA_MIN} in Tweedie estimate", AlphaClampWarning, stacklevel=3)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(max(ab, ALPHA_MIN))


def ddim_ab(x0, eps_pred, ab_prev: float) -> np.ndarray:
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_pred


def tweedie(x_t, t: int, schedule: NoiseSchedule, denoiser: Callable) -> np.ndarray:
    """Posterior-mean estimate of the clean sample from ``x_t``."""
    eps = denoiser(x_t, t)
    return tweedie_ab(x_t, eps, schedule[t])


def ddim_step(x_t, t: int, t_prev: int, schedule: NoiseSchedule, denoiser: Callable) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from ``t`` to ``t_prev``."""
    if not t_prev < t:
        raise ValueError("ddim_step needs t_prev < t")
    eps = denoiser(x_t, t)
    x0 = tweedie_ab(x_t, eps, schedule[t])
    return ddim_ab(x0, eps, schedule[t_prev])


@dataclass
class DenoiserConfig:
    """``rank`` > 0 selects the subspace denoiser: the MLP sees and predicts
    coordinates in a fixed ``rank``-dimensional basis of the training data,
    and noise outside that span is predicted in closed form. ``rank`` = 0 is
    a plain MLP over all pixels. ``field_norm`` means the model was trained
    on fields whose f channels are rescaled to unit max-abs per record (see
    :func:`field_normalize`), so queries must be rescaled the same way."""

    hidden: int = 256
    depth: int = 3
    embed_dim: int = 32
    activation: str = "silu"
    seed: int = 0
    rank: int = 32
    field_norm: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def field_normalize(data: np.ndarray) -> np.ndarray:
    """Divide each record's two f channels by their own max-abs.

    Asymptotic stability of a field is unchanged by positive rescaling, so
    the model only has to learn shapes. The V channel is left as encoded.
    """
    out = np.array(data, dtype=np.float64, copy=True)
    single = out.ndim == 3
    if single:
        out = out[None]
    m = np.abs(out[:, :2]).max(axis=(2, 3), keepdims=True)
    out[:, :2] /= np.maximum(m, 1e-12)
    return out[0] if single else out


def fit_basis(data: np.ndarray, rank: int) -> np.ndarray:
    """Orthonormal (d, rank) basis spanning the data mean and leading
    principal directions, rounded to float32 so it serializes exactly."""
    flat = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    d = flat.shape[1]
    if not 1 <= rank <= d:
        raise ConfigError(f"basis rank must be in [1, {d}], got {rank}")
    mean = flat.mean(axis=0)
    _, _, vt = np.linalg.svd(flat - mean, full_matrices=False)
    cols = [mean] + list(vt[: rank - 1])
    while len(cols) < rank:  # fewer records than rank: pad with coordinate axes
        cols.append(np.eye(d)[len(cols) % d])
    q, r = np.linalg.qr(np.stack(cols, axis=1))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.astype(np.float32).astype(np.float64)


def training_view(encoded: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """The arrays the denoiser is actually fit to."""
    return field_normalize(encoded) if config.field_norm else np.asarray(encoded, dtype=np.float64)


def new_denoiser(encoded: np.ndarray, schedule: "NoiseSchedule", config: Optional[DenoiserConfig] = None) -> "Denoiser":
    """Fresh denoiser for ``encoded`` records; fits the basis when rank > 0."""
    config = config or DenoiserConfig()
    g = int(np.asarray(encoded).shape[-1])
    basis = fit_basis(training_view(encoded, config), config.rank) if config.rank > 0 else None
    return Denoiser(g, schedule, config, basis=basis)


class Denoiser:
    """epsilon_theta(x_t, t) for (3, G, G) fields.

    Without a basis: flatten, append a time embedding, run an MLP, reshape.
    With a basis U: project onto U, run the MLP on the coordinates, and add
    the off-span part of x_t scaled by 1 / sqrt(1 - alpha_bar_t), which is the
    exact noise there when the clean data lies in span(U).
    """

    def __init__(
        self,
        resolution: int,
        schedule: NoiseSchedule,
        config: Optional[DenoiserConfig] = None,
        net: Optional[Network] = None,
        basis: Optional[np.ndarray] = None,
    ):
        self.config = config or DenoiserConfig()
        self.resolution = resolution
        self.schedule = schedule
        d = self.data_dim
        k = self.config.rank
        if k > 0:
            if basis is None:
                raise ConfigError("subspace denoiser needs a basis (see fit_basis)")
            basis = np.asarray(basis, dtype=np.float64)
            if basis.shape != (d, k):
                raise ShapeError(f"basis shape {basis.shape} != {(d, k)}")
        elif basis is not None:
            raise ConfigError("rank 0 denoiser takes no basis")
        self.basis = basis
        width = k if k > 0 else d
        sizes = [width + self.config.embed_dim] + [self.config.hidden] * self.config.depth + [width]
        if net is None:
            net = Network(sizes, self.config.activation, dtype=np.float32, seed=self.config.seed)
        elif net.sizes != tuple(sizes):
            raise ShapeError(f"network sizes {net.sizes} do not match denoiser layout {tuple(sizes)}")
        self.net = net

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def data_dim(self) -> int:
        return 3 * self.resolution * self.resolution

    def _prepare(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 3
        xb = x_t.reshape(-1, self.data_dim)
        tb = np.broadcast_to(np.asarray(t), (xb.shape[0],))
        emb = time_embed(tb.astype(np.float64), self.T, self.config.embed_dim)
        if self.basis is None:
            feats, off = xb, None
        else:
            feats = xb @ self.basis
            ab = np.minimum(self.schedule.array[tb.astype(int)], ALPHA_MAX)
            off = (xb - feats @ self.basis.T) / np.sqrt(1.0 - ab)[:, None]
        inp = np.concatenate([feats, emb], axis=1).astype(self.net.dtype)
        return inp, off, single

    def __call__(self, x_t, t) -> np.ndarray:
        inp, off, single = self._prepare(x_t, t)
        out = self.net.forward(inp).astype(np.float64)
        if off is not None:
            out = out @ self.basis.T + off
        g = self.resolution
        return out.reshape(3, g, g) if single else out.reshape(-1, 3, g, g)

    def loss_and_grad(self, x_t, t, eps) -> tuple[float, np.ndarray]:
        """Mean squared epsilon error over all pixels and its parameter gradient."""
        inp, off, _ = self._prepare(x_t, t)
        pred = self.net.forward(inp)
        eps = np.asarray(eps, dtype=np.float64).reshape(len(inp), self.data_dim)
        n = eps.size
        if off is None:
            diff = pred - eps.astype(self.net.dtype)
            loss = float(np.mean(diff.astype(np.float64) ** 2))
        else:
            coef = eps @ self.basis
            diff = pred - coef.astype(self.net.dtype)
            rest = off - (eps - coef @ self.basis.T)
            loss = float((np.sum(diff.astype(np.float64) ** 2) + np.sum(rest * rest)) / n)
        grad, _ = self.net.backward((2.0 / n) * diff)
        return loss, grad


@dataclass
class Checkpoint:
    denoiser: Denoiser
    schedule: NoiseSchedule
    codec: NormCodec
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    @property
    def loss_history(self) -> list:
        return self.meta.get("loss_history", [])


def denoising_loss(denoiser: Denoiser, data: np.ndarray, schedule: NoiseSchedule, seed: int = 0, draws: int = 4) -> float:
    """Mean epsilon-prediction error over ``draws`` noisings of each record."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        t = rng.integers(1, schedule.T + 1, size=len(data))
        eps = rng.standard_normal(data.shape)
        ab = schedule.array[t][:, None, None, None]
        x_t = np.sqrt(ab) * data + np.sqrt(1.0 - ab) * eps
        total += float(np.mean((denoiser(x_t, t) - eps) ** 2))
    return total / draws


def train_denoiser(
    data: np.ndarray,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    lr: float = 1e-3,
    start_step: int = 0,
    callback: Optional[Callable[[int, float], None]] = None,
) -> list[tuple[int, float]]:
    """Epsilon-prediction training on encoded records of shape (N, 3, G, G).

    Each epoch is one shuffled pass in minibatches. Returns ``(step, loss)``
    pairs numbered from ``start_step + 1``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4 or data.shape[1:] != (3, denoiser.resolution, denoiser.resolution):
        raise ShapeError(f"training data must be (N, 3, {denoiser.resolution}, {denoiser.resolution}), got {data.shape}")
    n = len(data)
    if n == 0:
        raise ConfigError("empty training set")
    net = denoiser.net
    opt = OptimizerState.for_params(net.params, lr=lr)
    history = []
    step = start_step
    ab_all = schedule.array
    for _ in range(epochs):
        order = rng.permutation(n)
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            x0 = data[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            ab = ab_all[t][:, None, None, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            loss, grad = denoiser.loss_and_grad(x_t, t, eps)
            if not np.isfinite(loss):
                raise TrainingError(f"denoiser loss diverged at step {step + 1} (last finite: {history[-1] if history else None})")
            net.set_params(adam_step(opt, net.params, grad))
            step += 1
            history.append((step, loss))
            if callback is not None:
                callback(step, loss)
    return history
