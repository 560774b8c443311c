import numpy as np
import pytest

from clusterprune.graph import Builder, desk_cnn, residual_cnn
from clusterprune.rng import Rng

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        notes = [v for k, v in report.user_properties if k == "note"]
        _acceptance[name] = ("PASS" if report.outcome == "passed" else "FAIL", "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, note) in sorted(_acceptance.items(), key=lambda kv: _order(kv[0])):
        terminalreporter.write_line(f"{outcome} {name}" + (f" ({note})" if note else ""))


def _order(name):
    digits = "".join(ch for ch in name.split("_")[2] if ch.isdigit()) if name.count("_") >= 2 else ""
    return (int(digits) if digits else 99, name)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line."""
    return lambda text: request.node.user_properties.append(("note", text))


@pytest.fixture
def toy_cnn():
    return desk_cnn((8, 8, 1), (4, 6), num_classes=3, seed=0)


@pytest.fixture
def toy_residual():
    return residual_cnn((8, 8, 2), (4, 4), num_classes=3, seed=0)


def linear_branches(seed=0):
    """input -> two 1x1 convs joined by an add -> flatten -> dense."""
    b = Builder((3, 3, 2))
    a = b.conv("a", 2, kernel=1, padding=0)
    c = b.conv("b", 2, kernel=1, padding=0, src="input")
    b.add("join", a, c)
    b.flatten("flatten")
    b.dense("fc", 3)
    return b.build(Rng(seed))


def force_pairs_equal(model, spec):
    """Copy the lower member of every size-2 cluster onto its partner."""
    out = model.copy()
    for name, lc in spec.layers.items():
        w, b = out.params[name]
        for ka, kb in lc.pairs():
            w[..., kb] = w[..., ka]
            b[kb] = b[ka]
    return out


def inputs(model, n, seed=0):
    return Rng(seed).normal((n,) + model.input_shape)


def max_logit_gap(m1, m2, x):
    from clusterprune.graph import forward
    return float(np.max(np.abs(forward(m1, x)[0] - forward(m2, x)[0])))
