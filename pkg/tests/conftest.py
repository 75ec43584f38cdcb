import os
import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)
_titles: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if len(mark.args) > 1:
        _titles[n] = mark.args[1]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes[n].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {_titles.get(n, '')}")


def mnist_dir() -> Path:
    return Path(os.environ.get("BADFU_MNIST_DIR", ROOT / "data" / "mnist"))


def mnist_paths() -> dict[str, str] | None:
    """IDX paths (plain or .gz) under the MNIST directory, or None if any is missing."""
    base = mnist_dir()
    found = {}
    for key, name in MNIST_FILES.items():
        for cand in (base / name, base / f"{name}.gz"):
            if cand.exists():
                found[key] = str(cand)
                break
        else:
            return None
    return found


@pytest.fixture(scope="session")
def mnist():
    paths = mnist_paths()
    if paths is None:
        pytest.fail(f"MNIST IDX files not found in {mnist_dir()} (set BADFU_MNIST_DIR)", pytrace=False)
    return paths


@pytest.fixture(scope="session")
def proxy():
    """Trained BadFU run on the synthetic 28x28 stand-in for MNIST."""
    from badfu.config import load_config
    from badfu.experiment import build_experiment, train

    exp = build_experiment(load_config(ROOT / "configs" / "synthetic_proxy.yaml"))
    train(exp, threads=min(5, os.cpu_count() or 1))
    return exp
