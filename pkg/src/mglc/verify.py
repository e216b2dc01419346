"""Closed-loop rollouts and grid-level Lyapunov checks.

The Dormand-Prince integrator advances a whole batch of initial conditions
at once, but every trajectory keeps its own time, step size and error
control, so results do not depend on how trajectories are batched.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ControllerParams, ControlSystem, controller_eval
from .errors import ConfigError, IntegrationError
from .grid import GridSpec, make_grid

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension: y(t + th h) = y + h * K^T P [th, th^2, th^3, th^4]
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


@dataclass
class RolloutConfig:
    t_end: float = 10.0
    ic_low: tuple[float, float] = (-2.0, -2.0)
    ic_high: tuple[float, float] = (2.0, 2.0)
    n: int = 100
    r_conv: float = 0.1
    rtol: float = 1e-6
    atol: float = 1e-8
    dt: float = 2e-4
    n_report: int = 1001
    seed: int = 0
    method: str = "rk45"

    def __post_init__(self):
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")
        if self.n < 1:
            raise ConfigError("need at least one rollout")
        if not self.r_conv > 0:
            raise ConfigError("r_conv must be positive")
        if not (self.dt > 0 and self.rtol > 0 and self.atol > 0):
            raise ConfigError("integrator tolerances and dt must be positive")
        if self.n_report < 2:
            raise ConfigError("n_report must be at least 2")
        if self.method not in ("rk45", "em"):
            raise ConfigError(f"unknown integration method {self.method!r}")
        self.ic_low = tuple(float(v) for v in self.ic_low)
        self.ic_high = tuple(float(v) for v in self.ic_high)

    def report_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_report)

    def initial_conditions(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.uniform(self.ic_low, self.ic_high, size=(self.n, 2))


@dataclass
class Trajectories:
    t: np.ndarray  # (n_report,)
    x: np.ndarray  # (N, n_report, d); NaN after a failure
    failed: np.ndarray  # (N,) bool
    messages: list
    n_steps: np.ndarray


def _rms(x):
    return np.sqrt(np.mean(x * x, axis=-1))


def _combine(coef, K) -> np.ndarray:
    # elementwise weighted sum over stages; BLAS contractions can round
    # differently depending on batch size, which would couple trajectories
    acc = np.zeros(K.shape[1:])
    for c, k in zip(coef, K):
        if c != 0.0:
            acc = acc + c * k
    return acc


def _initial_step(fun, y0, f0, rtol, atol, t_end):
    # Hairer, Norsett & Wanner II.4 starting-step heuristic, per row
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, t_end)
    f1 = fun(y0 + h0[:, None] * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    big = np.maximum(d1, d2)
    h1 = np.where(big <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(big, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), t_end)


def dopri45(
    fun: Callable[[np.ndarray], np.ndarray],
    y0,
    t_end: float,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    report_times: Optional[np.ndarray] = None,
    max_steps: int = 1_000_000,
) -> Trajectories:
    """Adaptive Dormand-Prince 4(5) for autonomous ``y' = fun(y)``.

    ``fun`` maps an ``(M, d)`` array to ``(M, d)``. ``y0`` is ``(d,)`` or
    ``(N, d)``. The max-norm error per step is held below
    ``atol + rtol * |y|`` componentwise; states at ``report_times`` come from
    the method's quartic dense output. Failures (step underflow, non-finite
    state, step budget) are recorded per trajectory, not raised.
    """
    y = np.array(y0, dtype=np.float64, ndmin=2)
    n, d = y.shape
    rt = np.linspace(0.0, t_end, 1001) if report_times is None else np.asarray(report_times, dtype=np.float64)
    out = np.full((n, rt.size, d), np.nan)
    out[:, 0] = y
    nxt = np.ones(n, dtype=int)
    t = np.zeros(n)
    failed = np.zeros(n, dtype=bool)
    msgs = [None] * n
    steps = np.zeros(n, dtype=int)
    k1 = fun(y)
    h = _initial_step(fun, y, k1, rtol, atol, t_end)
    rejected_last = np.zeros(n, dtype=bool)
    active = np.flatnonzero(~failed & (t < t_end))
    while active.size:
        ya, ta, ka = y[active], t[active], k1[active]
        ha = np.minimum(h[active], t_end - ta)
        K = np.empty((7,) + ya.shape)
        K[0] = ka
        for s in range(1, 6):
            dy = sum(_A[s][j] * K[j] for j in range(s))
            K[s] = fun(ya + ha[:, None] * dy)
        y_new = ya + ha[:, None] * _combine(_B, K)
        K[6] = fun(y_new)
        err_vec = ha[:, None] * _combine(_E, K)
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
        with np.errstate(invalid="ignore"):
            err = np.max(np.abs(err_vec) / scale, axis=-1)
        finite = np.all(np.isfinite(y_new), axis=-1) & np.isfinite(err)
        accept = finite & (err <= 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(err == 0, MAX_FACTOR, SAFETY * err ** -0.2)
        fac = np.clip(np.nan_to_num(fac, nan=MIN_FACTOR), MIN_FACTOR, MAX_FACTOR)
        fac = np.where(accept & rejected_last[active], np.minimum(fac, 1.0), fac)
        fac = np.where(~finite, MIN_FACTOR, fac)

        acc = active[accept]
        if acc.size:
            ia = np.flatnonzero(accept)
            t0, h0, y0a = ta[ia], ha[ia], ya[ia]
            t1 = np.where(h0 >= t_end - t0, t_end, t0 + h0)
            Q = np.stack([_combine(_P[:, j], K[:, ia]) for j in range(_P.shape[1])], axis=-1)
            pend = (nxt[acc] < rt.size) & (rt[np.minimum(nxt[acc], rt.size - 1)] <= t1)
            while np.any(pend):
                sel = np.flatnonzero(pend)
                gi = acc[sel]
                th = (rt[nxt[gi]] - t0[sel]) / h0[sel]
                powers = np.stack([th, th ** 2, th ** 3, th ** 4], axis=-1)
                poly = sum(Q[sel][..., j] * powers[:, None, j] for j in range(4))
                out[gi, nxt[gi]] = y0a[sel] + h0[sel, None] * poly
                nxt[gi] += 1
                pend = (nxt[acc] < rt.size) & (rt[np.minimum(nxt[acc], rt.size - 1)] <= t1)
            y[acc] = y_new[ia]
            k1[acc] = K[6, ia]
            t[acc] = t1
            steps[acc] += 1

        h[active] = ha * fac
        rejected_last[active] = ~accept
        tiny = h[active] < 1e-14 * np.maximum(1.0, np.abs(t[active]))
        over = steps[active] >= max_steps
        for i, why in ((tiny, "step size underflow"), (over, "step budget exhausted")):
            for g in active[i]:
                if not failed[g]:
                    failed[g] = True
                    msgs[g] = f"{why} at t={t[g]:.6g}"
        active = np.flatnonzero(~failed & (t < t_end))
    # the last report time coincides with t_end
    done = ~failed
    out[done, -1] = y[done]
    return Trajectories(rt, out, failed, msgs, steps)


def rk45_integrate(sys: ControlSystem, p: ControllerParams, x0, cfg: RolloutConfig) -> Trajectories:
    """Closed-loop RK45 rollout(s); raises if any trajectory fails."""
    tr = dopri45(lambda x: sys.closed_loop(p, x), x0, cfg.t_end, cfg.rtol, cfg.atol, cfg.report_times())
    if np.any(tr.failed):
        i = int(np.flatnonzero(tr.failed)[0])
        raise IntegrationError(f"trajectory {i}: {tr.messages[i]}")
    return tr


def _noise_chunks(sys, seeds, n_steps, chunk):
    rngs = [np.random.default_rng(s) for s in seeds]
    for k in range(0, n_steps, chunk):
        m = min(chunk, n_steps - k)
        yield np.stack([sys.sampler(r, (m,)) for r in rngs], axis=1)


def em_integrate(
    sys: ControlSystem,
    p: ControllerParams,
    x0,
    cfg: RolloutConfig,
    seeds: Optional[Sequence[int]] = None,
) -> Trajectories:
    """Fixed-step Euler(-Maruyama) rollouts with per-step parameter noise.

    For stochastic systems each trajectory draws its noise from its own
    generator (``seeds[i]``, default ``(cfg.seed, i)``).
    """
    x = np.array(x0, dtype=np.float64, ndmin=2)
    n = len(x)
    rt = cfg.report_times()
    n_steps = int(round(cfg.t_end / cfg.dt))
    every = n_steps / (rt.size - 1)
    if abs(every - round(every)) > 1e-9 or n_steps < 1:
        raise ConfigError("t_end / dt must be a positive multiple of the report interval count")
    every = int(round(every))
    dt = cfg.t_end / n_steps
    out = np.full((n, rt.size, 2), np.nan)
    out[:, 0] = x
    failed = np.zeros(n, dtype=bool)
    msgs = [None] * n
    if sys.stochastic:
        seeds = [np.random.SeedSequence([cfg.seed, i]) for i in range(n)] if seeds is None else list(seeds)
        noise = _noise_chunks(sys, seeds, n_steps, 1000)
    chunk = None
    k_in_chunk = 0
    for k in range(n_steps):
        z = None
        if sys.stochastic:
            if chunk is None or k_in_chunk == len(chunk):
                chunk = next(noise)
                k_in_chunk = 0
            z = chunk[k_in_chunk]
            k_in_chunk += 1
        x = x + dt * sys(x, controller_eval(p, x), z)
        if (k + 1) % every == 0:
            out[:, (k + 1) // every] = x
    bad = ~np.all(np.isfinite(out), axis=(1, 2))
    for i in np.flatnonzero(bad):
        failed[i] = True
        j = int(np.argmax(~np.all(np.isfinite(out[i]), axis=-1)))
        msgs[i] = f"state diverged near t={rt[j]:.6g}"
    return Trajectories(rt, out, failed, msgs, np.full(n, n_steps))


@dataclass
class ConvergenceReport:
    system: str
    controller: ControllerParams
    final_norms: np.ndarray
    time_to_converge: np.ndarray  # NaN where not converged
    converged: np.ndarray
    failures: list
    initial_conditions: np.ndarray
    trajectories: Trajectories
    config: RolloutConfig

    @property
    def fraction(self) -> float:
        return float(np.mean(self.converged))

    @property
    def margin(self) -> tuple:
        """Sort key: more converged first, then smaller worst final norm."""
        fn = np.where(np.isfinite(self.final_norms), self.final_norms, np.inf)
        return (self.fraction, -float(np.max(fn)))

    def summary(self) -> dict:
        ttc = self.time_to_converge[np.isfinite(self.time_to_converge)]
        fn = self.final_norms[np.isfinite(self.final_norms)]
        return {
            "system": self.system,
            "controller": self.controller.to_dict(),
            "n": int(self.converged.size),
            "converged": int(self.converged.sum()),
            "fraction": self.fraction,
            "r_conv": self.config.r_conv,
            "t_end": self.config.t_end,
            "method": self.config.method,
            "max_final_norm": float(fn.max()) if fn.size else None,
            "mean_time_to_converge": float(ttc.mean()) if ttc.size else None,
            "failures": [m for m in self.failures if m],
        }


def _integrate(sys, p, ics, cfg, idx) -> Trajectories:
    if cfg.method == "em":
        return em_integrate(sys, p, ics, cfg, [np.random.SeedSequence([cfg.seed, int(i)]) for i in idx])
    return dopri45(lambda x: sys.closed_loop(p, x), ics, cfg.t_end, cfg.rtol, cfg.atol, cfg.report_times())


def rollout_batch(sys: ControlSystem, p: ControllerParams, cfg: RolloutConfig, workers: int = 1) -> ConvergenceReport:
    """Roll out ``cfg.n`` seeded initial conditions and score convergence.

    A trajectory converges iff ``|x(t)| < r_conv`` at every report time in
    the final 10% of the horizon. ``workers`` > 1 splits the batch across
    threads; every trajectory is integrated independently, so the result is
    the same for any worker count.
    """
    ics = cfg.initial_conditions()
    idx = np.arange(len(ics))
    if workers > 1 and len(ics) > 1:
        parts = np.array_split(idx, min(workers, len(ics)))
        with ThreadPoolExecutor(max_workers=len(parts)) as ex:
            subs = list(ex.map(lambda k: _integrate(sys, p, ics[k], cfg, k), parts))
        tr = Trajectories(
            subs[0].t,
            np.concatenate([s.x for s in subs]),
            np.concatenate([s.failed for s in subs]),
            [m for s in subs for m in s.messages],
            np.concatenate([s.n_steps for s in subs]),
        )
    else:
        tr = _integrate(sys, p, ics, cfg, idx)
    norms = np.linalg.norm(tr.x, axis=-1)
    tail = tr.t >= 0.9 * cfg.t_end
    with np.errstate(invalid="ignore"):
        inside = norms < cfg.r_conv
    converged = ~tr.failed & np.all(inside[:, tail], axis=1)
    ttc = np.full(len(ics), np.nan)
    for i in np.flatnonzero(converged):
        outside = np.flatnonzero(~inside[i])
        ttc[i] = tr.t[outside[-1] + 1] if outside.size else 0.0
    failures = [f"trajectory {i}: {m}" if m else None for i, m in enumerate(tr.messages)]
    return ConvergenceReport(sys.name, p, norms[:, -1], ttc, converged, failures, ics, tr, cfg)


def write_trajectories_csv(report: ConvergenceReport, path, combined: bool = True) -> list[Path]:
    """Long-format CSV ``traj,t,x1,x2,u`` or one ``t,x1,x2,u`` file per trajectory."""
    path = Path(path)
    tr = report.trajectories
    u = controller_eval(report.controller, tr.x)
    written = []
    if combined:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj", "t", "x1", "x2", "u"])
            for i in range(tr.x.shape[0]):
                for k, t in enumerate(tr.t):
                    w.writerow([i, repr(float(t)), repr(float(tr.x[i, k, 0])), repr(float(tr.x[i, k, 1])), repr(float(u[i, k]))])
        return [path]
    path.mkdir(parents=True, exist_ok=True)
    for i in range(tr.x.shape[0]):
        fp = path / f"traj_{i:04d}.csv"
        with open(fp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x1", "x2", "u"])
            for k, t in enumerate(tr.t):
                w.writerow([repr(float(t)), repr(float(tr.x[i, k, 0])), repr(float(tr.x[i, k, 1])), repr(float(u[i, k]))])
        written.append(fp)
    return written


def write_report_json(report: ConvergenceReport, path):
    Path(path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


@dataclass
class GridCheckReport:
    positive_fraction: float
    decrease_fraction: float
    n_points: int
    worst_positive: list  # [(x1, x2, V), ...] most negative V first
    worst_decrease: list  # [(x1, x2, Vdot), ...] largest Vdot first

    def passed(self, threshold: float = 1.0) -> bool:
        return self.positive_fraction >= threshold and self.decrease_fraction >= threshold


def lyapunov_grid_check(
    v_field,
    sys: ControlSystem,
    p: ControllerParams,
    spec: GridSpec,
    r0: float = 0.2,
    tol: float = 0.0,
    grad_v: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    k_worst: int = 5,
) -> GridCheckReport:
    """Check V > 0 and grad V . f(x, u(x)) < tol on grid points with |x| > r0.

    ``grad V`` comes from second-order central differences of the sampled
    channel unless an analytic ``grad_v`` is supplied.
    """
    g = spec.resolution
    v = np.asarray(v_field, dtype=np.float64).reshape(g, g)
    pts = make_grid(spec)
    if grad_v is None:
        dv_dy, dv_dx = np.gradient(v, spec.dy, spec.dx, edge_order=2)
        grad = np.stack([dv_dx.ravel(), dv_dy.ravel()], axis=-1)
    else:
        grad = np.asarray(grad_v(pts), dtype=np.float64)
    fx = sys.closed_loop(p, pts)
    vdot = np.sum(grad * fx, axis=-1)
    vv = v.ravel()
    off = np.linalg.norm(pts, axis=-1) > r0
    pos = vv[off] > 0
    dec = vdot[off] < tol
    po, vo, do = pts[off], vv[off], vdot[off]
    worst_p = [(float(po[i, 0]), float(po[i, 1]), float(vo[i])) for i in np.argsort(vo)[:k_worst] if not pos[i]]
    worst_d = [(float(po[i, 0]), float(po[i, 1]), float(do[i])) for i in np.argsort(-do)[:k_worst] if not dec[i]]
    return GridCheckReport(float(pos.mean()), float(dec.mean()), int(off.sum()), worst_p, worst_d)
