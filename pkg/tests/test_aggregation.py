import math

import numpy as np
import pytest

from mtre.aggregation import (DetectionResult, aggregate_evidence, classify_sentence, decide, read_results,
                              sentence_llrs, token_llr, write_results)
from mtre.classifier import PCLAMP, LinearProbe
from mtre.dataset import append_padding
from mtre.errors import ConfigError

from conftest import make_record


class TestTokenLlr:
    def test_half(self):
        assert token_llr(0.5) == 0.0

    def test_inverts_sigmoid(self):
        assert token_llr(1 / (1 + math.exp(-2))) == pytest.approx(2.0, abs=1e-12)

    def test_point_nine(self):
        assert token_llr(0.9) == pytest.approx(2.197225, abs=1e-6)

    def test_clamp_limits(self):
        assert token_llr(PCLAMP) == pytest.approx(-token_llr(1 - PCLAMP), rel=1e-9)

    @pytest.mark.parametrize("p", [0.0, 1.0, 1e-9, float("nan")])
    def test_outside_clamp(self, p):
        with pytest.raises(ConfigError):
            token_llr(p)


class TestAggregate:
    def test_zero(self):
        assert aggregate_evidence([0, 0, 0], [1, 1, 1], 3) == 0

    def test_masked(self):
        assert aggregate_evidence([1.0, -0.5, 2.0], [1, 1, 0], 3) == 0.5

    def test_all_masked(self):
        assert aggregate_evidence([3.0, -7.0], [0, 0], 2) == 0

    def test_prefix_consistency(self):
        rng = np.random.default_rng(0)
        z, m = rng.normal(size=12), rng.integers(0, 2, 12)
        for t in range(2, 13):
            diff = aggregate_evidence(z, m, t) - aggregate_evidence(z, m, t - 1)
            assert diff == pytest.approx(m[t - 1] * z[t - 1], abs=1e-12)

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            aggregate_evidence([1.0], [1], 2)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            aggregate_evidence([1.0, 2.0], [1], 1)


class TestDecide:
    def test_tie_is_truthful(self):
        assert decide(0.0, 0.0) == 1

    def test_shortfall(self):
        assert decide(-0.0001, 0.0) == 0

    def test_delta(self):
        assert decide(5, 10) == 0

    @pytest.mark.parametrize("c", [1e-3, 0.5, 7.0])
    def test_scale_invariant(self, c):
        for ev in (-2.0, -1e-9, 0.0, 3.0):
            assert decide(c * ev) == decide(ev)


class TestClassify:
    def test_half_head(self):
        res = classify_sentence(LinearProbe.zeros(3), make_record("a", 0, np.ones((4, 3))))
        assert res.score == 0.0 and res.decision == 1 and res.tau == 4

    def test_temperature_halves(self):
        rng = np.random.default_rng(1)
        head = LinearProbe(rng.normal(size=3), 0.2)
        rec = make_record("a", 1, rng.normal(size=(6, 3)))
        r1, r2 = classify_sentence(head, rec), classify_sentence(head, rec, temperature=2.0)
        np.testing.assert_allclose(r2.trace.llrs, r1.trace.llrs / 2, rtol=0, atol=1e-15)
        assert r2.score == pytest.approx(r1.score / 2, abs=1e-14)
        assert r2.decision == r1.decision

    def test_cap(self):
        rec = make_record("a", 1, np.random.default_rng(0).normal(size=(12, 3)))
        res = classify_sentence(LinearProbe(np.ones(3), 0.0), rec, t_cap=10)
        assert len(res.trace.llrs) == 10 and res.tau == 10

    def test_trace_consistent(self):
        rng = np.random.default_rng(3)
        rec = make_record("a", 1, rng.normal(size=(5, 4)))
        res = classify_sentence(LinearProbe(rng.normal(size=4), 0.0), rec, delta=0.3)
        np.testing.assert_allclose(res.trace.cumulative, np.cumsum(res.trace.llrs * res.trace.mask))
        assert res.score == res.trace.cumulative[-1]
        assert res.decision == int(res.score >= 0.3) == res.trace.decision

    def test_odd_symmetry(self):
        rng = np.random.default_rng(4)
        w, b = rng.normal(size=4), 0.3
        rec = make_record("a", 1, rng.normal(size=(7, 4)))
        pos, neg = classify_sentence(LinearProbe(w, b), rec), classify_sentence(LinearProbe(-w, -b), rec)
        assert neg.score == pytest.approx(-pos.score, abs=1e-12)

    def test_zero_rows_inside_are_masked(self):
        logits = np.ones((4, 3))
        logits[1] = 0.0
        z, mask = sentence_llrs(LinearProbe(np.ones(3), 0.0), make_record("a", 1, logits), 10)
        np.testing.assert_array_equal(mask, [1, 0, 1, 1])
        assert classify_sentence(LinearProbe(np.ones(3), 0.0), make_record("a", 1, logits)).score == pytest.approx(3 * z[0])

    @pytest.mark.parametrize("pad", [1, 3, 20])
    def test_padding_neutral(self, pad):
        rng = np.random.default_rng(5)
        head = LinearProbe(rng.normal(size=4), -0.1)
        rec = make_record("a", 0, rng.normal(size=(6, 4)))
        base, padded = classify_sentence(head, rec), classify_sentence(head, append_padding(rec, pad))
        assert (padded.score, padded.decision, padded.tau) == (base.score, base.decision, base.tau)


def test_results_jsonl_round_trip(tmp_path):
    rs = [DetectionResult("a", 1.5, "mtre", 1, 3), DetectionResult("b", -0.25, "seq_logprob", 0)]
    write_results(rs, tmp_path / "r.jsonl")
    back = read_results(tmp_path / "r.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in rs]
