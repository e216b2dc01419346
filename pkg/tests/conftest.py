import numpy as np
import pytest

from mglc.diffusion import Checkpoint, DenoiserConfig, cosine_alphabar, new_denoiser, train_denoiser, training_view
from mglc.grid import GridSpec
from mglc.lyapunov_data import build_dataset


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(resolution=8)


@pytest.fixture(scope="session")
def small_dataset(small_grid):
    return build_dataset(3, 5, small_grid, seed=11)


@pytest.fixture(scope="session")
def small_ckpt(small_dataset):
    """Briefly trained low-rank checkpoint on the 8x8 dataset."""
    ds = small_dataset
    sched = cosine_alphabar(40, 10)
    den = new_denoiser(ds.encoded(), sched, DenoiserConfig(hidden=32, depth=2, embed_dim=8, rank=6, seed=0))
    data = training_view(ds.encoded(), den.config)
    hist = train_denoiser(data, sched, den, 20, np.random.default_rng(0), batch_size=4)
    return Checkpoint(den, sched, ds.codec, ds.grid, {"loss_history": [list(h) for h in hist]})


# one summary line per acceptance criterion, printed after the run
_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" and rep.passed:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _criteria.setdefault(mark.args[0], []).append((item.name, rep.passed and rep.when == "call", detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        runs = _criteria[n]
        ok = all(p for _, p, _ in runs)
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  [{details}]")
