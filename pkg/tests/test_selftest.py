"""Self-test harness tests, including the injected-failure negative control."""

import numpy as np
import pytest

from omnirestore import selftest
from omnirestore.engine import Tensor
from omnirestore.engine.gradcheck import check_gradients
from omnirestore.errors import ConfigError


class TestSuites:
    def test_all_suites_pass_on_fresh_build(self):
        results = selftest.run_selftest()
        assert [r.name for r in results] == list(selftest.SUITES)
        for res in results:
            assert res.passed, res.failures
            assert res.seconds >= 0.0

    def test_subset_selection(self):
        results = selftest.run_selftest(["fft", "oracles"])
        assert [r.name for r in results] == ["fft", "oracles"]

    def test_unknown_suite_rejected(self):
        with pytest.raises(ConfigError, match="unknown suites"):
            selftest.run_selftest(["fft", "nonsense"])

    def test_results_deterministic(self):
        first = selftest.run_selftest(["routing", "schedule"], seed=3)
        second = selftest.run_selftest(["routing", "schedule"], seed=3)
        assert [r.failures for r in first] == [r.failures for r in second]


class TestNegativeControl:
    def test_injected_gradient_bug_is_reported_by_name(self, monkeypatch):
        def broken(rng):
            a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
            # The constant wrapper drops the tape, so the analytic gradient
            # is zero while the numeric one is 3: a genuine mismatch.
            check_gradients(lambda v: Tensor(v.data * 3.0), [a], rng=rng)

        monkeypatch.setattr(
            selftest, "GRADIENT_CHECKS",
            list(selftest.GRADIENT_CHECKS) + [("op.injected_bug", broken)])
        results = selftest.run_selftest(["gradients"])
        assert not results[0].passed
        assert any("op.injected_bug" in msg for msg in results[0].failures)
        healthy = [n for n, _ in selftest.GRADIENT_CHECKS if n != "op.injected_bug"]
        for name in healthy:
            assert not any(name + ":" in msg for msg in results[0].failures)


class TestRendering:
    def test_render_marks_status_and_totals(self):
        results = selftest.run_selftest(["fft", "oracles"])
        text = selftest.render_results(results)
        assert "suite=fft status=ok" in text
        assert "suites_passed=2/2" in text
        assert text.endswith("\n")

    def test_render_lists_failures(self):
        failing = [selftest.SuiteResult("gradients", 0.5,
                                        ["op.mul: gradient mismatch"])]
        text = selftest.render_results(failing)
        assert "suite=gradients status=fail" in text
        assert "  fail: op.mul: gradient mismatch" in text
        assert not selftest.all_passed(failing)

    def test_gradient_registry_covers_ops_blocks_and_model(self):
        names = [n for n, _ in selftest.GRADIENT_CHECKS]
        assert len(names) == len(set(names))
        assert any(n.startswith("op.conv2d") for n in names)
        for block in ("prompter", "task_embedding", "dual_stream_encoder",
                      "fusion", "router"):
            assert f"block.{block}" in names
        assert "model.denoiser_16x16" in names
