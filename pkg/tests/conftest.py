import numpy as np
import pytest
import torch

from bevdecomp.config import ExperimentConfig
from bevdecomp.dataset import build_dataset, generate_split


def tiny_config(epochs=1, **over):
    cfg = ExperimentConfig()
    stage = {f"train__{s}__epochs": epochs for s in ("ae", "align", "finetune", "joint")}
    return cfg.replace(**stage, **over)


@pytest.fixture(scope="session")
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def split12():
    cfg = ExperimentConfig()
    return generate_split(cfg.recipe, cfg.camera_model, cfg.gspec, 12, seed=3)


@pytest.fixture(scope="session")
def dataset10(tmp_path_factory):
    cfg = ExperimentConfig()
    root = tmp_path_factory.mktemp("ds10")
    build_dataset(cfg.recipe, cfg.camera_model, cfg.gspec, 10, 7, root, cfg.pspec)
    return root


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    """1000-scene default-recipe dataset (900 train / 100 val).

    Set ``BEVDECOMP_TEST_CACHE`` to keep it between sessions.
    """
    import os
    from pathlib import Path
    cache = os.environ.get("BEVDECOMP_TEST_CACHE")
    root = Path(cache) / "bench1000" if cache else tmp_path_factory.mktemp("bench1000")
    cfg = ExperimentConfig()
    build_dataset(cfg.recipe, cfg.camera_model, cfg.gspec, 1000, 2024, root, cfg.pspec)
    return root


# -- acceptance report ---------------------------------------------------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, [title, True, []])
    entry[1] = entry[1] and rep.passed
    entry[2] += [f"{k}={v}" for k, v in item.user_properties]
    if not rep.passed:
        entry[2].append(f"{item.name} {rep.when} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}"
        terminalreporter.write_line(line + (f" [{'; '.join(detail)}]" if detail else ""))
