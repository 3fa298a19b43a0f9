"""Per-question vPGM inference: render the prompt, draw M samples, parse
them, and aggregate.

Two aggregates are computed for closed-ended questions. The vPGM
expectation averages every sample's stated P(Y|Z) for its chosen label,
spreading the remainder evenly over the other labels. The
self-consistency baseline multiplies the majority agreement rate by the
mean verbalized confidence of the agreeing samples.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .data import QuestionInput, append_jsonl, option_labels, read_jsonl
from .errors import AllSamplesUnparseable, EmptySamples, ProviderError, UnparseableReply
from .gateway import CompletionRequest, CompletionResponse, Provider
from .graph import PgmStructure
from .prompts import ParsedReply, build_inference_prompt, parse_reply

log = logging.getLogger(__name__)

DEFAULT_M = 3


@dataclass(frozen=True)
class SampleRecord:
    sample_index: int
    reply: ParsedReply
    model: str = ""
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def answer_label(self) -> str:
        return self.reply.answer_label

    @property
    def final_prob(self) -> float | None:
        return self.reply.final_prob

    @property
    def verbalized_confidence(self) -> float | None:
        return self.reply.verbalized_confidence

    @property
    def latent_probs(self) -> dict:
        return self.reply.latent_probs

    @property
    def partial(self) -> bool:
        return self.reply.partial

    def to_dict(self) -> dict:
        d = self.reply.to_dict()
        d.update(sample_index=self.sample_index, model=self.model,
                 prompt_tokens=self.prompt_tokens, completion_tokens=self.completion_tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(int(d["sample_index"]), ParsedReply.from_dict(d), d.get("model", ""),
                   int(d.get("prompt_tokens", 0)), int(d.get("completion_tokens", 0)))


@dataclass
class QuestionRecord:
    question_id: str
    samples: list[SampleRecord]
    labels: list[str] | None = None
    gold_label: str | None = None
    dropped: int = 0
    errors: list[str] = field(default_factory=list)
    counts: list[int] | None = None
    vpgm_dist: list[float] | None = None
    chosen_label: str | None = None
    baseline_label: str | None = None
    baseline_conf: float | None = None
    structure_id: str = ""

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "structure_id": self.structure_id,
            "labels": self.labels,
            "gold_label": self.gold_label,
            "samples": [s.to_dict() for s in sorted(self.samples, key=lambda s: s.sample_index)],
            "dropped": self.dropped,
            "errors": list(self.errors),
            "counts": self.counts,
            "vpgm_dist": self.vpgm_dist,
            "chosen_label": self.chosen_label,
            "baseline_label": self.baseline_label,
            "baseline_conf": self.baseline_conf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionRecord":
        return cls(
            question_id=d["question_id"],
            samples=[SampleRecord.from_dict(s) for s in d.get("samples", [])],
            labels=d.get("labels"),
            gold_label=d.get("gold_label"),
            dropped=int(d.get("dropped", 0)),
            errors=list(d.get("errors", [])),
            counts=d.get("counts"),
            vpgm_dist=d.get("vpgm_dist"),
            chosen_label=d.get("chosen_label"),
            baseline_label=d.get("baseline_label"),
            baseline_conf=d.get("baseline_conf"),
            structure_id=d.get("structure_id", ""),
        )


def _label_prob(sample) -> tuple[str, float | None]:
    if isinstance(sample, tuple):
        return sample[0], sample[1]
    return sample.answer_label, sample.final_prob


def _confidence(sample) -> float | None:
    if isinstance(sample, tuple):
        return sample[2] if len(sample) > 2 and sample[2] is not None else sample[1]
    vc = getattr(sample, "verbalized_confidence", None)
    return vc if vc is not None else sample.final_prob


def _resolve_labels(labels) -> list[str]:
    if isinstance(labels, int):
        return option_labels(labels)
    return list(labels)


def vpgm_expectation(samples: Sequence, labels) -> list[float]:
    """Average per-sample distributions over ``labels`` (a K or a label list).

    A sample answering ``a`` with probability ``p`` puts ``p`` on ``a`` and
    ``(1 - p) / (K - 1)`` on each other label. Samples without a stated
    probability, or whose label is unknown, are skipped. Each mean is
    computed exactly and rounded once, so the result does not depend on
    sample order and unanimous samples reproduce ``p`` bit for bit.
    """
    labels = _resolve_labels(labels)
    k = len(labels)
    if k < 2:
        raise ValueError("need at least two labels")
    usable = [(a, p) for a, p in map(_label_prob, samples) if p is not None and a in labels]
    if not usable:
        raise EmptySamples("no sample with an answer label and a final probability")
    m = len(usable)
    out = []
    for lab in labels:
        mass = sum(Fraction(p) if a == lab else (1 - Fraction(p)) / (k - 1) for a, p in usable)
        out.append(float(mass / m))
    return out


def consistency_baseline(samples: Sequence) -> tuple[str, float]:
    """Majority answer and agreement-rate x mean verbalized confidence.

    Ties go to the label whose samples are more confident on average, then
    to the alphabetically first label. ``final_prob`` stands in when a
    sample has no separate verbalized confidence.
    """
    if not samples:
        raise EmptySamples("consistency baseline needs at least one sample")
    by_label: dict[str, list] = {}
    for s in samples:
        by_label.setdefault(_label_prob(s)[0], []).append(_confidence(s))

    def mean_conf(label):
        vals = [c for c in by_label[label] if c is not None]
        return math.fsum(vals) / len(vals) if vals else None

    def rank(label):
        mc = mean_conf(label)
        return (-len(by_label[label]), -(mc if mc is not None else -1.0), label)

    chosen = min(by_label, key=rank)
    agreement = len(by_label[chosen]) / len(samples)
    mc = mean_conf(chosen)
    return chosen, agreement * (mc if mc is not None else 1.0)


def _argmax(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def aggregate_samples(record: QuestionRecord) -> QuestionRecord:
    """Fill counts, vpgm_dist, chosen label and baseline from the samples."""
    samples = sorted(record.samples, key=lambda s: s.sample_index)
    if not samples:
        raise EmptySamples(f"question {record.question_id!r} has no samples")
    record.baseline_label, record.baseline_conf = consistency_baseline(samples)
    if record.labels:
        tally = Counter(s.answer_label for s in samples)
        record.counts = [tally.get(lab, 0) for lab in record.labels]
        try:
            record.vpgm_dist = vpgm_expectation(samples, record.labels)
        except EmptySamples:
            total = sum(record.counts)
            log.warning("%s: no sample stated P(Y|Z); using answer frequencies", record.question_id)
            record.vpgm_dist = [c / total for c in record.counts]
        record.chosen_label = record.labels[_argmax(record.vpgm_dist)]
    else:
        record.chosen_label = record.baseline_label
    return record


def run_question(structure: PgmStructure, question: QuestionInput, m: int, provider: Provider, *,
                 template_dir=None, seed: int | None = None,
                 temperature: float | None = None) -> QuestionRecord:
    """Issue exactly ``m`` completions for one question and aggregate the
    parseable ones. Raises ``AllSamplesUnparseable`` if none survive."""
    if m < 1:
        raise ValueError("m must be at least 1")
    prompt = build_inference_prompt(structure, question, template_dir)
    requests = [
        CompletionRequest(prompt.text, seed=None if seed is None else seed + i,
                          question_id=question.question_id, sample_index=i, temperature=temperature)
        for i in range(m)
    ]
    results = provider.complete_batch(requests)

    labels = question.labels or None
    kept, errors, dropped = [], [], 0
    provider_failures = []
    for i, res in enumerate(results):
        if isinstance(res, ProviderError):
            dropped += 1
            provider_failures.append(res)
            errors.append(f"sample {i}: provider error: {res}")
            continue
        assert isinstance(res, CompletionResponse)
        try:
            reply = parse_reply(res.text, structure)
        except UnparseableReply as exc:
            dropped += 1
            errors.append(f"sample {i}: {exc}")
            continue
        if labels is not None and reply.answer_label not in labels:
            dropped += 1
            errors.append(f"sample {i}: answer {reply.answer_label!r} is not one of {labels}")
            continue
        kept.append(SampleRecord(i, reply, res.model, res.prompt_tokens, res.completion_tokens))

    if not kept:
        if provider_failures and len(provider_failures) == m:
            raise provider_failures[0]
        raise AllSamplesUnparseable(question.question_id, dropped, errors)
    if dropped:
        log.info("%s: kept %d of %d samples", question.question_id, len(kept), m)
    record = QuestionRecord(
        question_id=question.question_id, samples=kept, labels=labels,
        gold_label=question.gold_label, dropped=dropped, errors=errors,
        structure_id=prompt.structure_id,
    )
    return aggregate_samples(record)


def completed_ids(path) -> set[str]:
    if not Path(path).exists():
        return set()
    return {row["question_id"] for row in read_jsonl(path)}


def run_dataset(structure: PgmStructure, questions: Sequence[QuestionInput], m: int, provider: Provider,
                out_path, *, parallel: int = 1, template_dir=None, seed: int | None = None,
                temperature: float | None = None) -> dict:
    """Run every question not already present in ``out_path`` and append
    the records in input order. Questions whose samples are all dropped
    are reported and left out, so a later resume retries them."""
    done = completed_ids(out_path)
    todo = [q for q in questions if q.question_id not in done]
    stats = {"skipped": len(questions) - len(todo), "written": 0, "failed": []}

    def one(q):
        try:
            return run_question(structure, q, m, provider, template_dir=template_dir,
                                seed=seed, temperature=temperature)
        except AllSamplesUnparseable as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        for q, res in zip(todo, pool.map(one, todo)):
            if isinstance(res, AllSamplesUnparseable):
                log.warning("%s", res)
                stats["failed"].append(q.question_id)
                continue
            append_jsonl(out_path, res.to_dict())
            stats["written"] += 1
    return stats


def load_records(path) -> list[QuestionRecord]:
    return [QuestionRecord.from_dict(d) for d in read_jsonl(path)]
