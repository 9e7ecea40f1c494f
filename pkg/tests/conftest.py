import numpy as np
import pytest

from advbn.tensor import default_dtype


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A run config small enough for end-to-end CLI runs in a few seconds.
TINY = {
    "data": {"n_classes": 4, "n_train": 32, "n_test": 16, "size": 16},
    "model": {"width": 4},
    "pretrain": {"epochs": 1, "batch_size": 16},
    "finetune": {"epochs": 2, "decay_epoch": 1, "batch_size": 16},
    "eval": {"families": ["noise", "style_affine"], "severities": [1, 3], "bench_iters": 2, "bench_batch": 8},
    "viz": {"decoder_epochs": 1, "decoder_batch": 16, "n_images": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); printed at the end of the run."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
