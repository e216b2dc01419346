"""Controller synthesis by guided reverse diffusion.

Reverse diffusion where the f-channels of the sample are always the
closed-loop field of the current controller: at each DDIM step the
denoiser's clean estimate pulls the controller parameters toward the
stable-field manifold, and the Lyapunov channel is denoised alongside.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffusion import ALPHA_MAX, AlphaClampWarning, Checkpoint, clamp_alpha, ddim_ab, field_normalize, tweedie_ab
from .dynamics import ControllerParams, ControlSystem, DEFAULT_GAIN, eval_field_on_grid, field_param_jacobian
from .errors import ConfigError, EvaluationError, MGLCError
from .grid import GridField, GridSpec
from .verify import ConvergenceReport, RolloutConfig, rollout_batch

DEGENERATE_EPS = 1e-8


class DegenerateStep(MGLCError):
    """Adjacent noise levels coincide; the parameter update is skipped."""


@dataclass(frozen=True)
class GuidanceCoeffs:
    c: float  # step size
    a: float  # weight on the clean estimate inside the loss


def coeffs_from_alpha(ab_t: float, ab_prev: float) -> GuidanceCoeffs:
    ab_t = min(ab_t, ALPHA_MAX)
    ratio = math.sqrt(1.0 - ab_prev) / math.sqrt(1.0 - ab_t)
    c = 1.0 - ratio
    if abs(c) < DEGENERATE_EPS:
        raise DegenerateStep(f"step-size denominator {c:.3g} below {DEGENERATE_EPS}")
    a = (math.sqrt(ab_prev) - ratio * math.sqrt(ab_t)) / c
    return GuidanceCoeffs(c, a)


def guidance_coeffs(t: int, t_prev: int, schedule) -> GuidanceCoeffs:
    return coeffs_from_alpha(schedule[t], schedule[t_prev])


def _raw(x0) -> np.ndarray:
    return np.asarray(x0.data if isinstance(x0, GridField) else x0, dtype=np.float64)


def residual(sys: ControlSystem, p: ControllerParams, spec: GridSpec, x0_raw, coeffs: GuidanceCoeffs) -> np.ndarray:
    """r = f(X, u(X)) - a * x0 on the two f channels, shape (2, G, G)."""
    f = eval_field_on_grid(sys, p, spec).data[:2]
    r = f - coeffs.a * _raw(x0_raw)[:2]
    if not np.all(np.isfinite(r)):
        raise EvaluationError("non-finite guidance residual")
    return r


def loss_Lt(sys: ControlSystem, p: ControllerParams, spec: GridSpec, x0_raw, coeffs: GuidanceCoeffs) -> float:
    """Squared distance between the closed-loop field and the scaled clean estimate."""
    r = residual(sys, p, spec, x0_raw, coeffs)
    return float(np.sum(r * r))


def grad_psi_Lt(sys: ControlSystem, p: ControllerParams, spec: GridSpec, x0_raw, coeffs: GuidanceCoeffs) -> np.ndarray:
    """Gradient of :func:`loss_Lt` in psi with the clean estimate held fixed."""
    r = residual(sys, p, spec, x0_raw, coeffs)
    jac = field_param_jacobian(sys, p, spec)  # (G*G, 2, n)
    rg = r.reshape(2, -1).T  # (G*G, 2)
    return 2.0 * np.einsum("gc,gci->i", rg, jac)


@dataclass
class SynthesisStep:
    t: int
    t_prev: int
    psi: np.ndarray  # parameters that produced x_t
    loss: float  # NaN when skipped
    c: float
    a: float
    x_t: np.ndarray  # encoded (3, G, G)
    x0: np.ndarray  # encoded Tweedie estimate (3, G, G)
    skipped: bool = False


@dataclass
class SynthesisTrace:
    system: str
    gain: float
    psi_init: np.ndarray
    steps: list
    psi: np.ndarray
    x0: GridField  # raw units; V channel decoded from the denoised channel
    seed: Optional[int] = None
    wall_clock: float = 0.0

    @property
    def controller(self) -> ControllerParams:
        return ControllerParams(tuple(self.psi), self.gain)


STEP_RULES = ("gauss-newton", "gradient")


def psi_update(sys, p, spec, x0_raw, co: GuidanceCoeffs, rule: str = "gauss-newton", damping: float = 1e-6) -> np.ndarray:
    """Parameter increment for one guided step.

    ``gradient`` is ``-c * grad L``. ``gauss-newton`` is
    ``-c * (J^T J + lam I)^-1 J^T r``, the least-squares parameter move whose
    first-order field change is the projected step ``-c * P r``.
    """
    grad = grad_psi_Lt(sys, p, spec, x0_raw, co)
    if rule == "gradient":
        return -co.c * grad
    if rule != "gauss-newton":
        raise ConfigError(f"unknown step rule {rule!r}; choose from {STEP_RULES}")
    jac = field_param_jacobian(sys, p, spec).reshape(-1, 2)
    jtj = jac.T @ jac
    lam = damping * max(np.trace(jtj), 1e-12)
    return -co.c * np.linalg.solve(jtj + lam * np.eye(2), 0.5 * grad)


def _norm_match(f: np.ndarray, target: np.ndarray) -> float:
    """Positive factor giving ``target`` the same Frobenius norm as ``f``."""
    den = float(np.sqrt(np.sum(target * target)))
    return float(np.sqrt(np.sum(f * f))) / den if den > 0 else 0.0


def synthesize(
    sys: ControlSystem,
    ckpt: Checkpoint,
    steps: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    gain: float = DEFAULT_GAIN,
    psi_init=None,
    denoiser: Optional[Callable] = None,
    seed: Optional[int] = None,
    step_rule: str = "gauss-newton",
    clip_x0: bool = True,
    shape_only: Optional[bool] = None,
    query_noise: bool = False,
) -> SynthesisTrace:
    """Run guided reverse diffusion from psi_T ~ N(0, I).

    ``steps`` is the number of DDIM intervals (checkpoint default if None).
    ``denoiser`` overrides the checkpoint network, e.g. with an oracle.

    With ``shape_only`` (default: whatever the checkpoint was trained with)
    each f channel of the query is scaled to unit max-abs before denoising,
    and each channel of the clean estimate is scaled to the norm of the
    current field before it enters the loss. The loss then compares shapes,
    which is all that stability depends on. ``query_noise`` feeds the
    denoiser sqrt(ab) x_t + sqrt(1 - ab) z instead of the bare field.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if shape_only is None:
        shape_only = bool(getattr(ckpt.denoiser.config, "field_norm", False))
    spec, codec, sched = ckpt.grid, ckpt.codec, ckpt.schedule
    eps_model = denoiser if denoiser is not None else ckpt.denoiser
    g = spec.resolution
    t0 = time.perf_counter()
    psi = rng.standard_normal(2) if psi_init is None else np.asarray(psi_init, dtype=np.float64).copy()
    psi_T = psi.copy()
    v_enc = rng.standard_normal((g, g))
    ts = sched.timesteps(steps)
    record = []
    for t, tp in zip(ts[:-1], ts[1:]):
        p = ControllerParams(tuple(psi), gain)
        f = eval_field_on_grid(sys, p, spec).data
        x_t = codec.encode_array(f)
        if shape_only:
            x_t = field_normalize(x_t)
        x_t[2] = v_enc
        ab = clamp_alpha(sched[t])
        x_in = x_t
        if query_noise:
            x_in = x_t.copy()
            x_in[:2] = math.sqrt(ab) * x_t[:2] + math.sqrt(1.0 - ab) * rng.standard_normal((2, g, g))
        eps = np.asarray(eps_model(x_in, t), dtype=np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AlphaClampWarning)
            x0_enc = tweedie_ab(x_in, eps, sched[t])
        if clip_x0:
            x0_enc = np.clip(x0_enc, -1.0, 1.0)
            eps = (x_in - math.sqrt(ab) * x0_enc) / math.sqrt(1.0 - ab)  # noise consistent with the clipped estimate
        x0_raw = codec.decode_array(x0_enc)
        try:
            co = guidance_coeffs(t, tp, sched)
        except DegenerateStep:
            record.append(SynthesisStep(t, tp, psi.copy(), float("nan"), 0.0, float("nan"), x_t, x0_enc, True))
        else:
            if shape_only:
                for ch in range(2):
                    x0_raw[ch] *= _norm_match(f[ch], co.a * x0_raw[ch])
            loss = loss_Lt(sys, p, spec, x0_raw, co)
            record.append(SynthesisStep(t, tp, psi.copy(), loss, co.c, co.a, x_t, x0_enc, False))
            psi = psi + psi_update(sys, p, spec, x0_raw, co, step_rule)
            if not np.all(np.isfinite(psi)):
                raise EvaluationError(f"controller parameters became non-finite at t={t}")
        v_enc = ddim_ab(x0_enc[2], eps[2], sched[tp])
    p = ControllerParams(tuple(psi), gain)
    v_raw = codec.decode_array(np.stack([np.zeros((g, g)), np.zeros((g, g)), v_enc]))[2]
    x0 = eval_field_on_grid(sys, p, spec, v_raw)
    return SynthesisTrace(sys.name, gain, psi_T, record, psi, x0, seed, time.perf_counter() - t0)


@dataclass
class RestartResult:
    best: SynthesisTrace
    best_report: ConvergenceReport
    traces: list
    reports: list
    best_index: int = 0


def synthesize_best(
    sys: ControlSystem,
    ckpt: Checkpoint,
    seed: int,
    restarts: int = 4,
    steps: Optional[int] = None,
    gain: float = DEFAULT_GAIN,
    rollout: Optional[RolloutConfig] = None,
    workers: int = 1,
    **synth_kw,
) -> RestartResult:
    """Independent restarts (stream ``(seed, k)``); keep the best verified one.

    Candidates are ranked by :attr:`ConvergenceReport.margin`; ties go to
    the earliest restart. Extra keyword arguments reach :func:`synthesize`.
    """
    if restarts < 1:
        raise ConfigError("need at least one restart")
    rollout = rollout or RolloutConfig(method="em" if sys.stochastic else "rk45")
    traces, reports = [], []
    for k in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        tr = synthesize(sys, ckpt, steps, rng, gain, seed=seed, **synth_kw)
        traces.append(tr)
        reports.append(rollout_batch(sys, tr.controller, rollout, workers))
    best = max(range(restarts), key=lambda k: reports[k].margin)
    return RestartResult(traces[best], reports[best], traces, reports, best)
