"""Command-line front end: ``mglc gen-dataset | train | synthesize | verify | export-trace``.

Settings come from built-in defaults, then an optional YAML file
(``--config``), then command-line flags. Exit codes: 0 success, 2 bad
configuration, 3 numerical failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import copy
import csv
import functools
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np
import yaml

from .diffusion import (
    Checkpoint,
    DenoiserConfig,
    cosine_alphabar,
    denoising_loss,
    new_denoiser,
    train_denoiser,
    training_view,
)
from .dynamics import BENCHMARKS, REPORTED_CONTROLLERS, ControllerParams, get_system
from .errors import ConfigError, FormatError, MGLCError
from .formats import load_checkpoint, load_dataset, load_trace, save_checkpoint, save_dataset, save_trace
from .grid import GridSpec, make_grid
from .guidance import STEP_RULES, synthesize, synthesize_best
from .lyapunov_data import LyapunovTrainConfig, build_dataset, record_certificate
from .verify import RolloutConfig, rollout_batch, write_report_json, write_trajectories_csv

log = logging.getLogger("mglc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _dc_defaults(cls, drop=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in drop}


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "grid": {"x_min": -4.0, "x_max": 4.0, "y_min": -4.0, "y_max": 4.0, "resolution": 32},
    "dataset": {"n1": 1000, "n2": 1000, "lyapunov": _dc_defaults(LyapunovTrainConfig)},
    "schedule": {"T": 200, "sampling_steps": 50},
    "denoiser": _dc_defaults(DenoiserConfig, drop=("seed",)),
    "train": {"epochs": 100, "batch_size": 32, "lr": 1e-3},
    "synthesis": {"system": "pendulum", "gain": 20.0, "restarts": 4, "steps": None, "step_rule": "gauss-newton"},
    "rollout": {
        "t_end": 10.0,
        "ic_low": [-2.0, -2.0],
        "ic_high": [2.0, 2.0],
        "n": 100,
        "r_conv": 0.1,
        "rtol": 1e-6,
        "atol": 1e-8,
        "dt": 2e-4,
        "n_report": 1001,
        "method": None,  # None: Euler-Maruyama for stochastic systems, RK45 otherwise
    },
}


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"config section {where or '<root>'} must be a mapping")
    for k, v in override.items():
        key = f"{where}.{k}" if where else str(k)
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            out[k] = merge_config(base[k], v, key)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return merge_config(DEFAULTS, data)


def _set(cfg: dict, dotted: str, value):
    if value is None:
        return
    *head, last = dotted.split(".")
    node = cfg
    for k in head:
        node = node[k]
    node[last] = value


def _grid(cfg: dict) -> GridSpec:
    try:
        return GridSpec(**cfg["grid"])
    except TypeError as e:
        raise ConfigError(f"bad grid settings: {e}") from None


def _rollout(cfg: dict, stochastic: bool) -> RolloutConfig:
    r = dict(cfg["rollout"])
    r["method"] = r["method"] or ("em" if stochastic else "rk45")
    r["ic_low"], r["ic_high"] = tuple(r["ic_low"]), tuple(r["ic_high"])
    try:
        return RolloutConfig(seed=int(cfg["seed"]), **r)
    except TypeError as e:
        raise ConfigError(f"bad rollout settings: {e}") from None


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def guarded(fn):
    """Map package errors onto exit codes with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FormatError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_IO)
        except MGLCError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(getattr(e, "exit_code", EXIT_NUMERIC))
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML settings file.")
seed_option = click.option("--seed", type=int, help="Master seed.")
threads_option = click.option("--threads", type=click.IntRange(min=1), help="Worker cap.")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int):
    """Diffusion-guided synthesis of stabilizing feedback controllers."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- gen-dataset -------------------------------------------------------------

def dataset_summary(ds) -> dict:
    pts = None
    cert_ok = {1: 0, 2: 0}
    ident_ok = 0
    r0 = float(ds.meta.get("r0", 0.2))
    for rec in ds.records:
        if rec.family == 1:
            cert_ok[1] += record_certificate(rec, r0).passed(0.99)
        else:
            pts = make_grid(rec.field.spec) if pts is None else pts
            diff = np.abs(rec.spec.lie_derivative(pts) - rec.spec.lie_derivative_closed_form(pts))
            ident_ok += bool(np.all(diff <= 1e-9))
            cert_ok[2] += record_certificate(rec, r0).passed(0.99)
    counts = ds.counts
    rate = lambda k, n: (k / n) if n else None  # noqa: E731
    return {
        "records": len(ds.records),
        "family1": counts["family1"],
        "family2": counts["family2"],
        "family1_rejected": ds.meta.get("family1_rejected"),
        "family1_certificate_pass_rate": rate(cert_ok[1], counts["family1"]),
        "family2_certificate_pass_rate": rate(cert_ok[2], counts["family2"]),
        "family2_identity_pass_rate": rate(ident_ok, counts["family2"]),
        "grid": ds.grid.to_dict(),
        "codec_scale": list(ds.codec.scale),
        "seed": ds.meta.get("seed"),
    }


def _summary_text(s: dict) -> str:
    lines = [f"{k}: {s[k]}" for k in sorted(s)]
    return "\n".join(lines) + "\n"


@main.command("gen-dataset")
@config_option
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output MGLCDS1 file.")
@click.option("--n1", type=click.IntRange(min=0), help="Family-1 records (perturbed linear, trained V).")
@click.option("--n2", type=click.IntRange(min=0), help="Family-2 records (second-order, analytic V).")
@click.option("--resolution", type=int, help="Grid points per axis.")
@seed_option
@threads_option
@guarded
def gen_dataset_cmd(config_path, out, n1, n2, resolution, seed, threads):
    """Generate stable field / Lyapunov pairs."""
    cfg = load_config(config_path)
    for key, val in (("dataset.n1", n1), ("dataset.n2", n2), ("grid.resolution", resolution), ("seed", seed), ("threads", threads)):
        _set(cfg, key, val)
    lyap = LyapunovTrainConfig(**cfg["dataset"]["lyapunov"])
    ds = build_dataset(int(cfg["dataset"]["n1"]), int(cfg["dataset"]["n2"]), _grid(cfg), int(cfg["seed"]), lyap, int(cfg["threads"]))
    out = Path(out)
    save_dataset(ds, out)
    summary = dataset_summary(ds)
    text = _summary_text(summary)
    out.with_name(out.name + ".summary.txt").write_text(text)
    click.echo(text, nl=False)


# -- train -------------------------------------------------------------------

def _write_loss_csv(path: Path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([int(step), repr(float(loss))])


@main.command("train")
@config_option
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output MGLCCP1 file.")
@click.option("--epochs", type=click.IntRange(min=0))
@click.option("--lr", type=float)
@click.option("--batch-size", type=click.IntRange(min=1))
@click.option("--T", "T", type=click.IntRange(min=2), help="Diffusion steps.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Continue from this checkpoint.")
@seed_option
@guarded
def train_cmd(config_path, dataset_path, out, epochs, lr, batch_size, T, resume, seed):
    """Train the noise-prediction network on a dataset."""
    cfg = load_config(config_path)
    for key, val in (("train.epochs", epochs), ("train.lr", lr), ("train.batch_size", batch_size), ("schedule.T", T), ("seed", seed)):
        _set(cfg, key, val)
    seed = int(cfg["seed"])
    ds = load_dataset(dataset_path)
    if resume:
        ck = load_checkpoint(resume)
        if ck.grid != ds.grid or ck.codec != ds.codec:
            raise ConfigError("checkpoint grid/codec do not match the dataset")
        den, sched = ck.denoiser, ck.schedule
        history = [tuple(h) for h in ck.meta.get("loss_history", [])]
        meta = dict(ck.meta)
    else:
        sched = cosine_alphabar(int(cfg["schedule"]["T"]), int(cfg["schedule"]["sampling_steps"]))
        dcfg = DenoiserConfig(seed=seed, **cfg["denoiser"])
        den = new_denoiser(ds.encoded(), sched, dcfg)
        history = []
        meta = {"seed": seed, "epochs": 0, "dataset_seed": ds.meta.get("seed")}
    data = training_view(ds.encoded(), den.config)
    start = int(history[-1][0]) if history else 0
    if not history:
        meta["initial_loss"] = denoising_loss(den, data, sched, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, start]))
    tc = cfg["train"]
    hist = train_denoiser(data, sched, den, int(tc["epochs"]), rng, int(tc["batch_size"]), float(tc["lr"]), start_step=start)
    history += hist
    meta["epochs"] = int(meta.get("epochs", 0)) + int(tc["epochs"])
    meta["final_loss"] = denoising_loss(den, data, sched, seed=seed)
    meta["loss_history"] = [[int(s), float(l)] for s, l in history]
    out = Path(out)
    save_checkpoint(Checkpoint(den, sched, ds.codec, ds.grid, meta), out)
    _write_loss_csv(out.with_name(out.name + ".loss.csv"), history)
    click.echo(f"steps: {len(history)}  loss: {meta['initial_loss']:.6g} -> {meta['final_loss']:.6g}")


# -- synthesize --------------------------------------------------------------

def _system_choice():
    return click.Choice(sorted(BENCHMARKS))


@main.command("synthesize")
@config_option
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--system", type=_system_choice())
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Controller JSON.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="MGLCTR1 trace (default: <out>.trace).")
@click.option("--steps", type=click.IntRange(min=0), help="Reverse steps (default: checkpoint stride).")
@click.option("--restarts", type=click.IntRange(min=1))
@click.option("--gain", type=float)
@click.option("--step-rule", type=click.Choice(STEP_RULES))
@seed_option
@threads_option
@guarded
def synthesize_cmd(config_path, ckpt_path, system, out, trace_path, steps, restarts, gain, step_rule, seed, threads):
    """Derive controller parameters by guided reverse diffusion."""
    cfg = load_config(config_path)
    for key, val in (
        ("synthesis.system", system), ("synthesis.steps", steps), ("synthesis.restarts", restarts),
        ("synthesis.gain", gain), ("synthesis.step_rule", step_rule), ("seed", seed), ("threads", threads),
    ):
        _set(cfg, key, val)
    sc = cfg["synthesis"]
    sysm = get_system(sc["system"])
    ck = load_checkpoint(ckpt_path)
    if config_path and _grid(cfg) != ck.grid:
        raise ConfigError(f"checkpoint grid {ck.grid} does not match configured grid {_grid(cfg)}")
    seed = int(cfg["seed"])
    t0 = time.perf_counter()
    if int(sc["restarts"]) > 1:
        res = synthesize_best(
            sysm, ck, seed, int(sc["restarts"]), sc["steps"], float(sc["gain"]),
            _rollout(cfg, sysm.stochastic), int(cfg["threads"]), step_rule=sc["step_rule"],
        )
        tr, fraction = res.best, res.best_report.fraction
        chosen = res.best_index
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        tr = synthesize(sysm, ck, sc["steps"], rng, float(sc["gain"]), seed=seed, step_rule=sc["step_rule"])
        fraction, chosen = None, 0
    wall = time.perf_counter() - t0
    out = Path(out)
    trace_path = Path(trace_path) if trace_path else out.with_name(out.name + ".trace")
    _write_json(out, {
        "system": sysm.name,
        "psi": [float(v) for v in tr.psi],
        "gain": float(tr.gain),
        "psi_init": [float(v) for v in tr.psi_init],
        "seed": seed,
        "restart": chosen,
        "restarts": int(sc["restarts"]),
        "rollout_fraction": fraction,
    })
    save_trace(tr, ck.codec, trace_path)
    _write_json(out.with_name(out.name + ".timing.json"), {"wall_clock_s": wall, "last_run_wall_clock_s": tr.wall_clock})
    click.echo(f"psi0 = [{tr.psi[0]:.6g}, {tr.psi[1]:.6g}]  gain = {tr.gain:g}  wall clock = {wall:.2f} s")


# -- verify ------------------------------------------------------------------

def read_controller(path) -> tuple[ControllerParams, Optional[str]]:
    try:
        d = json.loads(Path(path).read_text())
        return ControllerParams(tuple(float(v) for v in d["psi"]), float(d.get("gain", 20.0))), d.get("system")
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"cannot read controller file {path}: {e}") from None


@main.command("verify")
@config_option
@click.option("--controller", "ctrl_path", type=click.Path(exists=True, dir_okay=False), help="Controller JSON from synthesize.")
@click.option("--reported", is_flag=True, help="Use the published controller for the system instead of a file.")
@click.option("--system", type=_system_choice(), help="Defaults to the system named in the controller file.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--n", type=click.IntRange(min=1), help="Number of initial conditions.")
@click.option("--t-end", type=float)
@click.option("--method", type=click.Choice(["rk45", "em"]))
@click.option("--per-trajectory", is_flag=True, help="One CSV per trajectory instead of one long file.")
@click.option("--require", type=click.FloatRange(0, 1), help="Exit 3 if the converged fraction is below this.")
@seed_option
@threads_option
@guarded
def verify_cmd(config_path, ctrl_path, reported, system, out_dir, n, t_end, method, per_trajectory, require, seed, threads):
    """Roll out a controller from random initial conditions and report convergence."""
    cfg = load_config(config_path)
    for key, val in (("rollout.n", n), ("rollout.t_end", t_end), ("rollout.method", method), ("seed", seed), ("threads", threads)):
        _set(cfg, key, val)
    if reported == bool(ctrl_path):
        raise ConfigError("give exactly one of --controller or --reported")
    if reported:
        system = system or cfg["synthesis"]["system"]
        p = REPORTED_CONTROLLERS[system]
    else:
        p, named = read_controller(ctrl_path)
        system = system or named or cfg["synthesis"]["system"]
    sysm = get_system(system)
    report = rollout_batch(sysm, p, _rollout(cfg, sysm.stochastic), int(cfg["threads"]))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_dir / "report.json")
    write_trajectories_csv(report, out_dir / ("trajectories" if per_trajectory else "trajectories.csv"), not per_trajectory)
    s = report.summary()
    click.echo(f"{s['system']}: {s['converged']}/{s['n']} converged (fraction {s['fraction']:.4f}, {s['method']})")
    if require is not None and report.fraction < require:
        click.echo(f"error: fraction {report.fraction:.4f} below required {require}", err=True)
        sys.exit(EXIT_NUMERIC)


# -- export-trace ------------------------------------------------------------

def _long_csv(path: Path, frames, steps, pts, g):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "row", "col", "x1", "x2", "value"])
        for k, (st, fr) in enumerate(zip(steps, frames)):
            for i in range(g):
                for j in range(g):
                    x1, x2 = pts[i * g + j]
                    w.writerow([k, st.t, i, j, repr(float(x1)), repr(float(x2)), repr(float(np.float32(fr[i, j])))])


def _write_pgm(path: Path, frame: np.ndarray, lo: float, hi: float):
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.round((frame - lo) / span * 255.0), 0, 255).astype(np.uint8)
    g = frame.shape[0]
    path.write_bytes(f"P5\n{g} {g}\n255\n".encode("ascii") + img[::-1].tobytes())  # top row = largest x2


def read_frames_csv(path) -> np.ndarray:
    """Inverse of the long CSV export: (steps, G, G) float32 frames."""
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        return np.zeros((0, 0, 0), dtype=np.float32)
    n = max(int(r["step"]) for r in rows) + 1
    g = max(int(r["row"]) for r in rows) + 1
    out = np.zeros((n, g, g), dtype=np.float32)
    for r in rows:
        out[int(r["step"]), int(r["row"]), int(r["col"])] = np.float32(float(r["value"]))
    return out


@main.command("export-trace")
@click.option("--trace", "trace_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "pgm", "both"]), default="csv", show_default=True)
@click.option("--estimate", is_flag=True, help="Also export f2 of the clean estimate per step.")
@guarded
def export_trace_cmd(trace_path, out_dir, fmt, estimate):
    """Dump per-step f2 and V grids (encoded units, as stored) for plotting."""
    tr, _ = load_trace(trace_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not tr.steps:
        click.echo("warning: trace has no steps; nothing exported", err=True)
        return
    spec = tr.x0.spec
    pts = make_grid(spec)
    g = spec.resolution
    channels = {"f2": [s.x_t[1] for s in tr.steps], "V": [s.x_t[2] for s in tr.steps]}
    if estimate:
        channels["x0_f2"] = [s.x0[1] for s in tr.steps]
    for name, frames in channels.items():
        if fmt in ("csv", "both"):
            _long_csv(out_dir / f"{name}.csv", frames, tr.steps, pts, g)
        if fmt in ("pgm", "both"):
            stack = np.asarray(frames, dtype=np.float32)
            lo, hi = float(stack.min()), float(stack.max())
            for k, fr in enumerate(stack):
                _write_pgm(out_dir / f"{name}_{k:03d}.pgm", fr, lo, hi)
    click.echo(f"exported {len(tr.steps)} frames per channel ({', '.join(channels)}) to {out_dir}")


if __name__ == "__main__":  # pragma: no cover
    main()
