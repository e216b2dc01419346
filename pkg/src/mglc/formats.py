"""Binary containers for datasets (MGLCDS1), checkpoints (MGLCCP1) and
synthesis traces (MGLCTR1). All integers and floats are little-endian.

Dataset::

    b"MGLCDS1" | u32 count | u64 len | JSON metadata
    per record: u8 family | f64 spec values | f32 channels (3, G, G) row-major

Checkpoint::

    b"MGLCCP1" | u32 version | u64 len | JSON metadata | u32 n_layers
    per layer: u32 rows | u32 cols | f32 W | u32 n | f32 b
    if the denoiser rank is > 0: u32 rows | u32 cols | f32 basis

Trace::

    b"MGLCTR1" | u32 version | u64 len | JSON metadata
    per step: f32 x_t (3, G, G) | f32 x0 (3, G, G)
    then: f32 final field (3, G, G)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .diffusion import Checkpoint, Denoiser, DenoiserConfig, NoiseSchedule
from .errors import FormatError, MGLCError
from .grid import GridField, GridSpec, NormCodec
from .guidance import SynthesisStep, SynthesisTrace
from .lyapunov_data import Dataset, DatasetRecord, Family1Spec, Family2Spec
from .tinynet import Network

DATASET_MAGIC = b"MGLCDS1"
CHECKPOINT_MAGIC = b"MGLCCP1"
TRACE_MAGIC = b"MGLCTR1"
CHECKPOINT_VERSION = 1
TRACE_VERSION = 1


def _dumps(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} file (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def json(self) -> dict:
        (n,) = self.unpack("<Q")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt {self.what} metadata: {e}") from None

    def magic(self, expected: bytes):
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"not a {self.what} file: magic {got!r}, expected {expected!r}")

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what} file")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# -- dataset ---------------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    meta = dict(ds.meta)
    meta.update({
        "grid": ds.grid.to_dict(),
        "codec": ds.codec.to_dict(),
        "seeds": [r.seed for r in ds.records],
        "counts": ds.counts,
        "spec_lengths": {str(r.family): int(r.spec.values().size) for r in ds.records},
    })
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<I", len(ds.records)))
    blob = _dumps(meta)
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    for r in ds.records:
        out.write(struct.pack("<B", r.family))
        out.write(np.ascontiguousarray(r.spec.values(), dtype="<f8").tobytes())
        out.write(_f32(r.field.data))
    return out.getvalue()


def save_dataset(ds: Dataset, path):
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    rd = _Reader(_read_bytes(path), "dataset")
    rd.magic(DATASET_MAGIC)
    (count,) = rd.unpack("<I")
    meta = rd.json()
    try:
        grid = GridSpec.from_dict(meta.pop("grid"))
        codec = NormCodec.from_dict(meta.pop("codec"))
        seeds = meta.pop("seeds")
        lengths = {int(k): int(v) for k, v in meta.pop("spec_lengths").items()}
        meta.pop("counts", None)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"dataset metadata incomplete: {e}") from None
    hidden = int(meta.get("lyapunov_hidden", 20))
    g = grid.resolution
    records = []
    for i in range(count):
        (fam,) = rd.unpack("<B")
        if fam not in lengths:
            raise FormatError(f"record {i} has unknown family tag {fam}")
        vals = rd.array("<f8", lengths[fam]).astype(np.float64)
        data = rd.array("<f4", 3 * g * g).astype(np.float64).reshape(3, g, g)
        spec = Family1Spec.from_values(vals, hidden) if fam == 1 else Family2Spec(tuple(vals))
        records.append(DatasetRecord(fam, spec, GridField(grid, data), int(seeds[i])))
    rd.done()
    return Dataset(records, codec, grid, meta)


# -- checkpoint ------------------------------------------------------------

def checkpoint_bytes(ck: Checkpoint) -> bytes:
    den = ck.denoiser
    meta = dict(ck.meta)
    meta.update({
        "schedule": ck.schedule.to_dict(),
        "grid": ck.grid.to_dict(),
        "codec": ck.codec.to_dict(),
        "denoiser": den.config.to_dict(),
        "layer_sizes": list(den.net.sizes),
    })
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = _dumps(meta)
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(den.net.layers)))
    for w, b in den.net.layers:
        out.write(struct.pack("<II", *w.shape))
        out.write(_f32(w))
        out.write(struct.pack("<I", b.size))
        out.write(_f32(b))
    if den.basis is not None:
        out.write(struct.pack("<II", *den.basis.shape))
        out.write(_f32(den.basis))
    return out.getvalue()


def save_checkpoint(ck: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    rd = _Reader(_read_bytes(path), "checkpoint")
    rd.magic(CHECKPOINT_MAGIC)
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = rd.json()
    try:
        schedule = NoiseSchedule.from_dict(meta.pop("schedule"))
        grid = GridSpec.from_dict(meta.pop("grid"))
        codec = NormCodec.from_dict(meta.pop("codec"))
        cfg = DenoiserConfig(**meta.pop("denoiser"))
        sizes = meta.pop("layer_sizes")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint metadata incomplete: {e}") from None
    (n_layers,) = rd.unpack("<I")
    if n_layers != len(sizes) - 1:
        raise FormatError("layer count disagrees with metadata")
    net = Network(sizes, cfg.activation, dtype=np.float32, seed=cfg.seed)
    for k in range(n_layers):
        rows, cols = rd.unpack("<II")
        w, b = net.layers[k]
        if (rows, cols) != w.shape:
            raise FormatError(f"layer {k} shape {(rows, cols)} != {w.shape}")
        w[...] = rd.array("<f4", rows * cols).reshape(rows, cols)
        (nb,) = rd.unpack("<I")
        if nb != b.size:
            raise FormatError(f"layer {k} bias length {nb} != {b.size}")
        b[...] = rd.array("<f4", nb)
    basis = None
    if cfg.rank > 0:
        rows, cols = rd.unpack("<II")
        d = 3 * grid.resolution ** 2
        if (rows, cols) != (d, cfg.rank):
            raise FormatError(f"basis shape {(rows, cols)} != {(d, cfg.rank)}")
        basis = rd.array("<f4", rows * cols).astype(np.float64).reshape(rows, cols)
    rd.done()
    net.set_params(net.params)
    try:
        den = Denoiser(grid.resolution, schedule, cfg, net, basis)
    except (ValueError, MGLCError) as e:
        raise FormatError(f"inconsistent checkpoint: {e}") from None
    return Checkpoint(den, schedule, codec, grid, meta)


# -- trace -----------------------------------------------------------------

def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)


def trace_bytes(tr: SynthesisTrace, codec: NormCodec) -> bytes:
    meta = {
        "system": tr.system,
        "gain": tr.gain,
        "psi_init": [float(v) for v in tr.psi_init],
        "psi": [float(v) for v in tr.psi],
        "seed": tr.seed,
        "grid": tr.x0.spec.to_dict(),
        "codec": codec.to_dict(),
        "steps": [
            {
                "t": s.t,
                "t_prev": s.t_prev,
                "psi": [float(v) for v in s.psi],
                "loss": _num(s.loss),
                "c": _num(s.c),
                "a": _num(s.a),
                "skipped": s.skipped,
            }
            for s in tr.steps
        ],
    }
    out = io.BytesIO()
    out.write(TRACE_MAGIC)
    out.write(struct.pack("<I", TRACE_VERSION))
    blob = _dumps(meta)
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    for s in tr.steps:
        out.write(_f32(s.x_t))
        out.write(_f32(s.x0))
    out.write(_f32(tr.x0.data))
    return out.getvalue()


def save_trace(tr: SynthesisTrace, codec: NormCodec, path):
    Path(path).write_bytes(trace_bytes(tr, codec))


def load_trace(path) -> tuple[SynthesisTrace, NormCodec]:
    rd = _Reader(_read_bytes(path), "trace")
    rd.magic(TRACE_MAGIC)
    (version,) = rd.unpack("<I")
    if version != TRACE_VERSION:
        raise FormatError(f"unsupported trace version {version}")
    meta = rd.json()
    try:
        grid = GridSpec.from_dict(meta["grid"])
        codec = NormCodec.from_dict(meta["codec"])
        step_meta = meta["steps"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"trace metadata incomplete: {e}") from None
    g = grid.resolution
    n = 3 * g * g
    nan = float("nan")
    steps = []
    for s in step_meta:
        x_t = rd.array("<f4", n).astype(np.float64).reshape(3, g, g)
        x0 = rd.array("<f4", n).astype(np.float64).reshape(3, g, g)
        steps.append(SynthesisStep(
            int(s["t"]), int(s["t_prev"]), np.asarray(s["psi"], dtype=np.float64),
            nan if s["loss"] is None else s["loss"], 0.0 if s["c"] is None else s["c"],
            nan if s["a"] is None else s["a"], x_t, x0, bool(s["skipped"]),
        ))
    final = GridField(grid, rd.array("<f4", n).astype(np.float64).reshape(3, g, g))
    rd.done()
    tr = SynthesisTrace(
        meta["system"], float(meta["gain"]), np.asarray(meta["psi_init"]), steps,
        np.asarray(meta["psi"]), final, meta.get("seed"),
    )
    return tr, codec
