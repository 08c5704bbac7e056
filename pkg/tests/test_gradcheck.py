import numpy as np

from supattn import diffcore as dc
from supattn import gradcheck


def test_all_checks_pass():
    results = gradcheck.run_all(seed=0)
    assert {r.name for r in results} >= {"matmul", "softmax_rows", "lstm_sequence", "ctc_loss", "model_step"}
    failed = [(r.name, r.worst) for r in results if not r.ok]
    assert not failed
    assert max(r.worst for r in results) < gradcheck.TOLERANCE


def test_corrupted_rule_is_reported_by_name(monkeypatch):
    good = dc.BACKWARD["tanh"]
    monkeypatch.setitem(dc.BACKWARD, "tanh", lambda node, g: tuple(1.5 * x for x in good(node, g)))
    results = {r.name: r for r in gradcheck.run_all(seed=0, include_model=False)}
    assert not results["tanh"].ok
    assert results["matmul"].ok
    report = gradcheck.format_report(results.values())
    assert any(line.startswith("tanh") and line.endswith("FAIL") for line in report.splitlines())


def test_crashing_rule_is_a_failure_not_an_abort(monkeypatch):
    def boom(node, g):
        raise RuntimeError("broken")

    monkeypatch.setitem(dc.BACKWARD, "sigmoid", boom)
    results = {r.name: r for r in gradcheck.run_all(seed=0, include_model=False)}
    assert not results["sigmoid"].ok and "broken" in results["sigmoid"].error


def test_report_lists_worst_error_per_op():
    results = gradcheck.run_all(seed=1, include_model=False)
    lines = gradcheck.format_report(results).splitlines()
    assert lines[0].split()[:2] == ["op", "worst_rel_err"]
    assert len(lines) == len(results) + 2
    assert lines[-1] == f"{len(results)}/{len(results)} checks passed"


def test_relative_error_floor():
    assert gradcheck.relative_error(np.array([1e-9]), np.array([2e-9])) < 1e-3
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.1])) > 0.05
