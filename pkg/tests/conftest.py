import numpy as np
import pytest

from tcfnet import autodiff as ad


def check_gradients(loss_fn, arrays, eps=1e-5):
    """Compare reverse-mode gradients with central differences for every input.

    ``loss_fn`` maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error over all inputs.
    """
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = loss_fn(leaves)
    ad.backward(loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(t, i=i):
            args = [ad.Tensor(b) for b in arrays]
            args[i] = t
            return loss_fn(args)

        numeric = ad.finite_diff_gradient(f, a, eps)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        worst = max(worst, ad.rel_error(analytic, numeric))
    return worst


def project(out, seed=0):
    """Random linear functional of a tensor: a generic scalar loss."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.reduce_sum(out * r)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary
#
# Tests marked ``@pytest.mark.criterion(n, title)`` are collected into one
# PASS/FAIL line per criterion, printed at the end of the run. A test may
# attach a one-line detail with ``record_property("detail", text)``.

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ok"] = False
        if report.when != "call":
            entry["ran"] = True
    if report.when == "call" or (report.failed and report.when == "setup"):
        entry["detail"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        detail = "; ".join(dict.fromkeys(e["detail"]))
        terminalreporter.write_line(f"{status} criterion {n}: {e['title']}" + (f" -- {detail}" if detail else ""))
