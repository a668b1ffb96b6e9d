"""Shared fixtures and the acceptance summary.

Tests marked ``@pytest.mark.criterion(n)`` are collected into one PASS/FAIL
line per criterion at the end of the run.  Details a test attaches with
``record_property("detail", ...)`` are printed alongside.

The two trained denoisers used by the acceptance tests are built once per
session.  ``N2B_FULL_SCALE=1`` trains them on the full default dataset
instead of the reduced one.
"""

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from noise2boost.network import NetworkConfig  # noqa: E402
from noise2boost.sampling import BoostConfig  # noqa: E402
from noise2boost.training import ExperimentConfig, load_splits, train  # noqa: E402

FULL = os.environ.get("N2B_FULL_SCALE") == "1"
_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = _OUTCOMES.setdefault(marker.args[0], {"passed": True, "details": []})
    entry["passed"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["details"]]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        e = _OUTCOMES[n]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['passed'] else 'FAIL'}"
                                    + (f"  ({detail})" if detail else ""))


def _train(**kw):
    dataset = {"kind": "mixed", "count": 2000 if FULL else kw.pop("count"), "holdout": 50}
    kw.pop("count", None)
    cfg = ExperimentConfig(mode="n2b-joint", sigma=25.0, dataset=dataset, eval_every=0, **kw)
    splits = load_splits(cfg)
    return train(cfg, splits), splits


@pytest.fixture(scope="session")
def n2b_trained():
    """n2b-joint denoiser with K=8 random-weight masks and noise augmentation."""
    return _train(count=800, epochs=8, boost=BoostConfig(K=8, kind="weights"))


@pytest.fixture(scope="session")
def bn_trained():
    """The same regime with batch normalisation on batch statistics."""
    return _train(count=400, epochs=10, boost=BoostConfig(K=8, kind="weights"),
                  network=NetworkConfig(bn_mode="train"))
