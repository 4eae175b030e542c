import numpy as np
import pytest

from mmfa_aae.cli import fit_model_to_data
from mmfa_aae.config import RunConfig, parse_config
from mmfa_aae.data import generate_synthetic

TINY = """
data.identities = 6
data.samples_per_identity = 4
data.dim = 10
model.widths = 16, 16, 16
model.hidden = 8
train.epochs = 2
train.batch_size = 8
train.p_identities = 4
train.k_per_identity = 2
train.warmup_epochs = 1
train.disc_steps = 5
eval.trials = 2
eval.probe_steps = 50
"""


def tiny_config(**overrides) -> RunConfig:
    text = TINY + "".join(f"{k} = {v}\n" for k, v in overrides.items())
    return parse_config(text)


@pytest.fixture
def tiny():
    """(config fitted to data, dataset) for a three-source-domain toy corpus."""
    cfg = tiny_config()
    ds = generate_synthetic(cfg.data)
    return fit_model_to_data(cfg, ds), ds


@pytest.fixture
def tiny_text():
    return TINY


# --- acceptance reporting ---------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` roll up into one PASS/FAIL
# line per criterion, printed in the terminal summary.  Tests may attach
# measured values with ``record_property("detail", "...")``.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"[{status}] {number}. {entry['title']}" + (f" ({detail})" if detail else ""))
