import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgm.data import QuestionInput
from vpgm.errors import AllSamplesUnparseable, EmptySamples, ProviderError
from vpgm.gateway import MockProvider
from vpgm.graph import PgmStructure
from vpgm.inference import (
    QuestionRecord,
    SampleRecord,
    aggregate_samples,
    consistency_baseline,
    load_records,
    run_dataset,
    run_question,
    vpgm_expectation,
)
from vpgm.prompts import ParsedReply, render_reply

TWO = PgmStructure.from_edges(["X->Z1", "X->Z2", "Z1->Z2", "Z2->Y"])
Q = QuestionInput("q1", "Which?", ("a", "b", "c"), gold_label="A")


def reply(label, p, z=(0.5, 0.5), conf=None):
    return render_reply(ParsedReply(label, {"Z1": z[0], "Z2": z[1]}, p, conf))


class TestExpectation:
    def test_mean_of_agreeing(self):
        assert vpgm_expectation([("A", 0.9), ("A", 0.8), ("A", 0.7)], 2) == pytest.approx([0.8, 0.2], abs=1e-15)

    def test_symmetry(self):
        assert vpgm_expectation([("A", 1.0), ("B", 1.0)], 2) == [0.5, 0.5]

    def test_residual_split(self):
        assert vpgm_expectation([("C", 0.7)], 4) == pytest.approx([0.1, 0.1, 0.7, 0.1], abs=1e-15)

    def test_empty(self):
        with pytest.raises(EmptySamples):
            vpgm_expectation([], 3)
        with pytest.raises(EmptySamples):
            vpgm_expectation([("A", None)], 3)

    def test_accepts_records(self):
        s = [SampleRecord(0, ParsedReply("B", {}, 0.6))]
        assert vpgm_expectation(s, ["A", "B"]) == pytest.approx([0.4, 0.6])


class TestBaseline:
    def test_majority_times_confidence(self):
        label, conf = consistency_baseline([("A", 0.9), ("A", 0.8), ("B", 0.6)])
        assert label == "A" and conf == pytest.approx(2 / 3 * 0.85, abs=1e-15)

    def test_unanimous(self):
        assert consistency_baseline([("A", 1.0)] * 3) == ("A", 1.0)

    def test_single(self):
        assert consistency_baseline([("B", 0.4)]) == ("B", 0.4)

    def test_tie_breaks(self):
        assert consistency_baseline([("A", 0.5), ("B", 0.7)])[0] == "B"
        assert consistency_baseline([("B", 0.5), ("A", 0.5)])[0] == "A"

    def test_verbalized_confidence_preferred(self):
        assert consistency_baseline([("A", 0.9, 0.3)]) == ("A", 0.3)

    def test_empty(self):
        with pytest.raises(EmptySamples):
            consistency_baseline([])


class TestRunQuestion:
    def test_three_samples_kept(self):
        mock = MockProvider({"q1/0": reply("A", 0.9), "q1/1": reply("A", 0.8), "q1/2": reply("B", 0.6)})
        rec = run_question(TWO, Q, 3, mock)
        assert len(rec.samples) == 3 and rec.dropped == 0
        assert rec.counts == [2, 1, 0]
        assert rec.chosen_label == "A" and rec.baseline_label == "A"
        assert math.fsum(rec.vpgm_dist) == pytest.approx(1.0, abs=1e-9)
        assert len(mock.calls) == 3

    def test_one_unparseable_dropped(self):
        mock = MockProvider({"q1/0": reply("A", 0.9), "q1/1": "no idea", "q1/2": reply("B", 0.6)})
        rec = run_question(TWO, Q, 3, mock)
        assert len(rec.samples) == 2 and rec.dropped == 1
        assert [s.sample_index for s in rec.samples] == [0, 2]

    def test_all_unparseable(self):
        mock = MockProvider({"default": "no idea"})
        with pytest.raises(AllSamplesUnparseable) as info:
            run_question(TWO, Q, 3, mock)
        assert info.value.dropped == 3

    def test_all_provider_failures_surface(self):
        with pytest.raises(ProviderError):
            run_question(TWO, Q, 2, MockProvider({}))

    def test_label_outside_options_dropped(self):
        mock = MockProvider({"q1/0": reply("D", 0.9), "q1/1": reply("A", 0.7)})
        rec = run_question(TWO, Q, 2, mock)
        assert rec.dropped == 1 and rec.counts == [1, 0, 0]

    def test_open_ended(self):
        q = QuestionInput("o1", "Describe it.")
        mock = MockProvider({"o1/0": reply("a cat", 0.7), "o1/1": reply("a cat", 0.9)})
        rec = run_question(TWO, q, 2, mock)
        assert rec.vpgm_dist is None and rec.chosen_label == "a cat"

    def test_seeds_per_sample(self):
        mock = MockProvider({"default": reply("A", 0.5)})
        run_question(TWO, Q, 3, mock, seed=10)
        assert sorted(c.seed for c in mock.calls) == [10, 11, 12]


class TestDataset:
    def test_resume_skips_done(self, tmp_path):
        qs = [QuestionInput(f"q{i}", "?", ("x", "y"), gold_label="A") for i in range(3)]
        mock = MockProvider({"default": reply("A", 0.8)})
        out = tmp_path / "rec.jsonl"
        assert run_dataset(TWO, qs[:2], 2, mock, out)["written"] == 2
        stats = run_dataset(TWO, qs, 2, mock, out, parallel=3)
        assert stats == {"skipped": 2, "written": 1, "failed": []}
        assert [r.question_id for r in load_records(out)] == ["q0", "q1", "q2"]

    def test_failed_question_retried_later(self, tmp_path):
        qs = [QuestionInput("q0", "?", ("x", "y"))]
        out = tmp_path / "rec.jsonl"
        assert run_dataset(TWO, qs, 1, MockProvider({"default": "??"}), out)["failed"] == ["q0"]
        assert run_dataset(TWO, qs, 1, MockProvider({"default": reply("B", 0.9)}), out)["written"] == 1

    def test_record_round_trip(self):
        mock = MockProvider({"q1/0": reply("A", 0.9, conf=0.8), "q1/1": reply("C", 0.6)})
        rec = run_question(TWO, Q, 2, mock)
        assert QuestionRecord.from_dict(rec.to_dict()).to_dict() == rec.to_dict()


samples_st = st.lists(
    st.tuples(st.sampled_from("ABCD"), st.floats(0.0, 1.0, allow_nan=False)), min_size=1, max_size=8
)


@settings(max_examples=200, deadline=None)
@given(samples_st, st.randoms(use_true_random=False))
def test_expectation_is_distribution_and_order_free(samples, rnd):
    dist = vpgm_expectation(samples, 4)
    assert all(0.0 <= v <= 1.0 for v in dist)
    assert math.fsum(dist) == pytest.approx(1.0, abs=1e-9)
    shuffled = list(samples)
    rnd.shuffle(shuffled)
    assert vpgm_expectation(shuffled, 4) == dist
    assert vpgm_expectation(samples * 2, 4) == pytest.approx(dist, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(samples_st, st.permutations("ABCD"))
def test_expectation_label_equivariance(samples, perm):
    base = dict(zip("ABCD", vpgm_expectation(samples, list("ABCD"))))
    permuted = vpgm_expectation(samples, list(perm))
    assert permuted == [base[lab] for lab in perm]


@settings(max_examples=100, deadline=None)
@given(st.sampled_from("ABC"), st.floats(0.0, 1.0, allow_nan=False), st.integers(1, 6))
def test_unanimous_mass_is_exact(label, p, m):
    dist = vpgm_expectation([(label, p)] * m, 3)
    assert dist["ABC".index(label)] == p


@settings(max_examples=100, deadline=None)
@given(samples_st)
def test_chosen_label_is_argmax(samples):
    recs = [SampleRecord(i, ParsedReply(a, {}, p)) for i, (a, p) in enumerate(samples)]
    rec = aggregate_samples(QuestionRecord("q", recs, labels=list("ABCD")))
    best = max(rec.vpgm_dist)
    assert rec.vpgm_dist[rec.labels.index(rec.chosen_label)] == best
    assert rec.chosen_label == rec.labels[rec.vpgm_dist.index(best)]
