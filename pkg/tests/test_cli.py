import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from mglc.cli import main, read_frames_csv
from mglc.diffusion import DenoiserConfig, new_denoiser
from mglc.formats import load_checkpoint, load_dataset, load_trace

SMALL = {
    "grid": {"resolution": 8},
    "schedule": {"T": 40, "sampling_steps": 10},
    "denoiser": {"hidden": 32, "depth": 2, "embed_dim": 8, "rank": 6},
    "train": {"epochs": 3, "batch_size": 4},
    "synthesis": {"restarts": 1},
    "rollout": {"n": 5, "t_end": 2.0},
}


def run(*args, code=0):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == code, (res.output, res.exception)
    return res


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    run("gen-dataset", "--config", cfg, "--out", d / "ds.bin", "--n1", 2, "--n2", 3, "--seed", 7)
    run("train", "--config", cfg, "--dataset", d / "ds.bin", "--out", d / "ck.bin", "--seed", 1)
    return d, cfg


def test_gen_dataset_deterministic_across_runs_and_threads(work):
    d, cfg = work
    run("gen-dataset", "--config", cfg, "--out", d / "a.bin", "--n1", 2, "--n2", 3, "--seed", 7)
    run("gen-dataset", "--config", cfg, "--out", d / "b.bin", "--n1", 2, "--n2", 3, "--seed", 7, "--threads", 2)
    ref = (d / "ds.bin").read_bytes()
    assert (d / "a.bin").read_bytes() == ref == (d / "b.bin").read_bytes()
    assert "family2_identity_pass_rate: 1.0" in (d / "ds.bin.summary.txt").read_text()


def test_gen_dataset_family2_only(work):
    d, cfg = work
    res = run("gen-dataset", "--config", cfg, "--out", d / "f2.bin", "--n1", 0, "--n2", 5)
    assert "family1: 0" in res.output and "family2: 5" in res.output
    assert "family1_certificate_pass_rate: None" in res.output
    assert len(load_dataset(d / "f2.bin").records) == 5


def test_train_deterministic_and_logs_loss(work):
    d, cfg = work
    run("train", "--config", cfg, "--dataset", d / "ds.bin", "--out", d / "ck2.bin", "--seed", 1)
    assert (d / "ck2.bin").read_bytes() == (d / "ck.bin").read_bytes()
    rows = (d / "ck.bin.loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 1 + 3 * 2  # 5 records, batch 4


def test_train_zero_epochs_is_init(work):
    d, cfg = work
    run("train", "--config", cfg, "--dataset", d / "ds.bin", "--out", d / "ck0.bin", "--epochs", 0, "--seed", 4)
    ck = load_checkpoint(d / "ck0.bin")
    ds = load_dataset(d / "ds.bin")
    fresh = new_denoiser(ds.encoded(), ck.schedule, DenoiserConfig(seed=4, **SMALL["denoiser"]))
    assert np.array_equal(ck.denoiser.net.params, fresh.net.params)
    assert ck.loss_history == []


def test_train_toy_run_lowers_loss(work):
    d, cfg = work
    run("gen-dataset", "--config", cfg, "--out", d / "toy.bin", "--n1", 0, "--n2", 10, "--seed", 3)
    res = run("train", "--config", cfg, "--dataset", d / "toy.bin", "--out", d / "toy.ck", "--epochs", 20, "--batch-size", 1)
    meta = load_checkpoint(d / "toy.ck").meta
    assert len(meta["loss_history"]) == 200
    assert meta["final_loss"] < meta["initial_loss"]
    assert "->" in res.output


def test_resume_continues_history(work):
    d, cfg = work
    run("train", "--config", cfg, "--dataset", d / "ds.bin", "--out", d / "ck3.bin", "--resume", d / "ck.bin", "--epochs", 2)
    hist = load_checkpoint(d / "ck3.bin").loss_history
    steps = [s for s, _ in hist]
    assert steps == list(range(1, len(steps) + 1)) and len(steps) == 6 + 4
    assert load_checkpoint(d / "ck3.bin").meta["epochs"] == 5


def test_synthesize_deterministic(work):
    d, cfg = work
    outs = []
    for k in range(2):
        res = run("synthesize", "--config", cfg, "--checkpoint", d / "ck.bin", "--system", "pendulum", "--seed", 3, "--out", d / f"c{k}.json")
        assert "psi0 = [" in res.output
        outs.append(d / f"c{k}.json")
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (d / "c0.json.trace").read_bytes() == (d / "c1.json.trace").read_bytes()
    assert json.loads((d / "c0.json.timing.json").read_text())["wall_clock_s"] < 60


def test_synthesize_restarts_deterministic(work):
    d, cfg = work
    args = ["synthesize", "--config", cfg, "--checkpoint", d / "ck.bin", "--system", "duffing", "--restarts", 2, "--steps", 3]
    run(*args, "--out", d / "r0.json")
    run(*args, "--out", d / "r1.json", "--threads", 2)
    assert (d / "r0.json").read_bytes() == (d / "r1.json").read_bytes()
    assert json.loads((d / "r0.json").read_text())["rollout_fraction"] is not None


def test_synthesize_zero_steps_is_prior(work):
    d, cfg = work
    run("synthesize", "--config", cfg, "--checkpoint", d / "ck.bin", "--steps", 0, "--out", d / "z.json")
    c = json.loads((d / "z.json").read_text())
    assert c["psi"] == c["psi_init"]


def test_verify_deterministic_across_threads(work):
    d, cfg = work
    run("verify", "--config", cfg, "--reported", "--system", "noisy-pendulum", "--out-dir", d / "v1", "--t-end", 1.0)
    run("verify", "--config", cfg, "--reported", "--system", "noisy-pendulum", "--out-dir", d / "v2", "--t-end", 1.0, "--threads", 3)
    for name in ("report.json", "trajectories.csv"):
        assert (d / "v1" / name).read_bytes() == (d / "v2" / name).read_bytes()


def test_verify_reported_pendulum(work):
    d, _ = work
    res = run("verify", "--reported", "--system", "pendulum", "--out-dir", d / "vp", "--n", 20, "--require", 1.0)
    assert json.loads((d / "vp" / "report.json").read_text())["fraction"] == 1.0
    assert "20/20" in res.output


def test_verify_zero_controller_on_vanderpol(work):
    d, _ = work
    (d / "zero.json").write_text(json.dumps({"psi": [0.0, 0.0], "gain": 20.0, "system": "vanderpol"}))
    run("verify", "--controller", d / "zero.json", "--out-dir", d / "vz", "--n", 20)
    assert json.loads((d / "vz" / "report.json").read_text())["fraction"] <= 0.05
    run("verify", "--controller", d / "zero.json", "--out-dir", d / "vz", "--n", 5, "--require", 0.5, code=3)


def test_export_trace_frames_roundtrip(work):
    d, cfg = work
    run("synthesize", "--config", cfg, "--checkpoint", d / "ck.bin", "--steps", 5, "--out", d / "e.json", "--trace", d / "e.trace")
    res = run("export-trace", "--trace", d / "e.trace", "--out-dir", d / "ex", "--format", "both", "--estimate")
    assert "5 frames" in res.output
    tr, _ = load_trace(d / "e.trace")
    f2 = read_frames_csv(d / "ex" / "f2.csv")
    v = read_frames_csv(d / "ex" / "V.csv")
    assert f2.shape == v.shape == (5, 8, 8)
    assert np.array_equal(f2, np.array([s.x_t[1] for s in tr.steps], dtype=np.float32))
    assert np.array_equal(v, np.array([s.x_t[2] for s in tr.steps], dtype=np.float32))
    assert len(list((d / "ex").glob("f2_*.pgm"))) == 5 and len(list((d / "ex").glob("V_*.pgm"))) == 5
    assert (d / "ex" / "f2_000.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_export_empty_trace(work):
    d, cfg = work
    run("synthesize", "--config", cfg, "--checkpoint", d / "ck.bin", "--steps", 0, "--out", d / "n.json", "--trace", d / "n.trace")
    res = run("export-trace", "--trace", d / "n.trace", "--out-dir", d / "nx")
    assert "warning" in res.output
    assert list((d / "nx").iterdir()) == []


def test_config_errors(work, tmp_path):
    d, _ = work
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid:\n  resolutoin: 8\n")
    run("gen-dataset", "--config", bad, "--out", tmp_path / "x.bin", code=2)
    bad.write_text("grid: [1, 2\n")
    run("gen-dataset", "--config", bad, "--out", tmp_path / "x.bin", code=2)
    run("gen-dataset", "--out", tmp_path / "x.bin", "--n1", 0, "--n2", 0, code=2)
    run("verify", "--out-dir", tmp_path, code=2)
    run("gen-dataset", "--out", tmp_path / "x.bin", "--resolution", 3, "--n1", 0, "--n2", 1, code=2)


def test_format_errors_exit_4(work, tmp_path):
    d, _ = work
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"MGLCXX1" + b"\0" * 40)
    run("train", "--dataset", junk, "--out", tmp_path / "o.bin", code=4)
    run("synthesize", "--checkpoint", junk, "--out", tmp_path / "o.json", code=4)
    run("export-trace", "--trace", junk, "--out-dir", tmp_path / "o", code=4)
    (tmp_path / "c.json").write_text("{}")
    run("verify", "--controller", tmp_path / "c.json", "--out-dir", tmp_path / "o", code=4)
