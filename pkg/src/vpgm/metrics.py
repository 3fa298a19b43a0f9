"""Accuracy, expected calibration error, reliability tables, Pearson
correlation, and the rationale-shuffling negative control."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calibration import class_alignment
from .data import QuestionInput
from .errors import DegenerateInput, EmptyInput, LengthMismatch, MissingLatent, TooFewRecords

DEFAULT_BINS = 10


@dataclass(frozen=True)
class ScoredPrediction:
    question_id: str
    confidence: float
    correct: bool
    chosen_label: str | None = None
    gold_label: str | None = None
    probs: tuple[float, ...] | None = None
    gold_index: int | None = None

    @classmethod
    def from_distribution(cls, question_id, probs: Sequence[float], labels: Sequence[str],
                          gold_label: str) -> "ScoredPrediction":
        probs = tuple(float(p) for p in probs)
        best = max(range(len(probs)), key=lambda i: (probs[i], -i))
        return cls(question_id, probs[best], labels[best] == gold_label, labels[best], gold_label,
                   probs, list(labels).index(gold_label))

    @classmethod
    def from_scalar(cls, question_id, label: str, confidence: float, gold_label: str) -> "ScoredPrediction":
        return cls(question_id, float(confidence), label == gold_label, label, gold_label)


@dataclass(frozen=True)
class ReliabilityRow:
    bin: int
    lo: float
    hi: float
    count: int
    mean_confidence: float | None
    accuracy: float | None

    @property
    def gap(self) -> float:
        if self.count == 0:
            return 0.0
        return abs(self.accuracy - self.mean_confidence)


def bin_index(confidence: float, bins: int = DEFAULT_BINS) -> int:
    """Equal-width bins, left-closed; 1.0 goes to the last bin."""
    return min(int(math.floor(confidence * bins)), bins - 1) if confidence > 0 else 0


def _require(preds):
    if not preds:
        raise EmptyInput("no predictions")


def accuracy(preds: Sequence[ScoredPrediction]) -> float:
    _require(preds)
    return sum(p.correct for p in preds) / len(preds)


def reliability_table(preds: Sequence[ScoredPrediction], bins: int = DEFAULT_BINS) -> list[ReliabilityRow]:
    _require(preds)
    conf: list[list[float]] = [[] for _ in range(bins)]
    hits: list[int] = [0] * bins
    for p in preds:
        b = bin_index(p.confidence, bins)
        conf[b].append(p.confidence)
        hits[b] += bool(p.correct)
    rows = []
    for b in range(bins):
        n = len(conf[b])
        rows.append(ReliabilityRow(
            b, b / bins, (b + 1) / bins, n,
            math.fsum(conf[b]) / n if n else None,
            hits[b] / n if n else None,
        ))
    return rows


def ece(preds: Sequence[ScoredPrediction], bins: int = DEFAULT_BINS) -> float:
    """sum_m |B_m|/n * |acc(B_m) - conf(B_m)| over equal-width confidence bins."""
    rows = reliability_table(preds, bins)
    n = len(preds)
    return math.fsum(r.count / n * r.gap for r in rows)


@dataclass(frozen=True)
class ClasswiseEce:
    bin_free: float
    binned: float


def classwise_ece(preds: Sequence[ScoredPrediction], bins: int = DEFAULT_BINS) -> ClasswiseEce:
    """Bin-free form: (1/K) sum_k |mean predicted p_k - frequency of k|.
    Binned form: per-class ECE of p_k against the indicator of k, averaged."""
    _require(preds)
    if any(p.probs is None for p in preds):
        raise ValueError("class-wise ECE needs full predicted distributions")
    probs = np.array([p.probs for p in preds], dtype=float)
    k = probs.shape[1]
    onehot = np.eye(k)[[p.gold_index for p in preds]]
    bin_free = class_alignment(probs, onehot)

    n = len(preds)
    per_class = []
    for j in range(k):
        idx = np.minimum(np.floor(probs[:, j] * bins).astype(int), bins - 1)
        total = 0.0
        for b in range(bins):
            mask = idx == b
            cnt = int(mask.sum())
            if cnt:
                total += cnt / n * abs(onehot[mask, j].mean() - probs[mask, j].mean())
        per_class.append(total)
    return ClasswiseEce(bin_free, float(np.mean(per_class)))


# -- reliability output ----------------------------------------------------

def write_reliability_csv(rows: Sequence[ReliabilityRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lo", "hi", "count", "mean_confidence", "accuracy", "gap"])
        for r in rows:
            w.writerow([
                r.bin, f"{r.lo:.1f}", f"{r.hi:.1f}", r.count,
                "" if r.mean_confidence is None else f"{r.mean_confidence:.10f}",
                "" if r.accuracy is None else f"{r.accuracy:.10f}",
                f"{r.gap:.10f}",
            ])


def reliability_svg(rows: Sequence[ReliabilityRow], title: str = "Reliability diagram") -> str:
    """Bar chart of per-bin accuracy with the ideal diagonal, as SVG text."""
    size, pad = 320, 40
    plot = size - 2 * pad
    bins = len(rows)
    width = plot / bins

    def x(v):
        return pad + v * plot

    def y(v):
        return size - pad - v * plot

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<text x="{size / 2:.1f}" y="{pad / 2:.1f}" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="#444"/>',
    ]
    for r in rows:
        acc = r.accuracy or 0.0
        parts.append(
            f'<rect x="{x(r.lo):.2f}" y="{y(acc):.2f}" width="{width:.2f}" height="{acc * plot:.2f}" '
            f'fill="#3b6ea5" stroke="#fff"><title>bin {r.bin}: n={r.count}</title></rect>'
        )
    parts.append(
        f'<line x1="{x(0):.2f}" y1="{y(0):.2f}" x2="{x(1):.2f}" y2="{y(1):.2f}" '
        'stroke="#c33" stroke-dasharray="4 3"/>'
    )
    for t in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{x(t):.1f}" y="{size - pad + 14}" text-anchor="middle" font-size="10">{t:.1f}</text>')
        parts.append(f'<text x="{pad - 6}" y="{y(t) + 3:.1f}" text-anchor="end" font-size="10">{t:.1f}</text>')
    parts.append(f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="11">confidence</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- correlation -----------------------------------------------------------

def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateInput("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.dot(dx, dx)), math.sqrt(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInput("correlation is undefined for a constant input")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def pearson_or_none(x, y) -> float | None:
    try:
        return pearson(x, y)
    except DegenerateInput:
        return None


# -- negative control ------------------------------------------------------

def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points, by rejection."""
    if n < 2:
        raise TooFewRecords("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_noisy_control(questions: Sequence[QuestionInput | dict], seed: int) -> list:
    """Shuffle rationales across records so none keeps its own.

    Only records carrying a rationale take part; all other fields are left
    as they were.
    """
    def rationale(q):
        return q.get("rationale") if isinstance(q, dict) else q.rationale

    idx = [i for i, q in enumerate(questions) if rationale(q) is not None]
    if len(idx) < 2:
        raise TooFewRecords("need at least two records with a rationale")
    perm = derangement(len(idx), np.random.default_rng(seed))
    out = list(questions)
    for dst, src in zip(idx, perm):
        q, r = questions[dst], rationale(questions[idx[src]])
        out[dst] = {**q, "rationale": r} if isinstance(q, dict) else replace(q, rationale=r)
    return out


# -- latent-variable analysis ----------------------------------------------

@dataclass
class LatentAnalysis:
    variables: list[str]
    mean_prob: dict            # subset -> var -> mean over questions
    identification: dict       # subset -> accuracy of the mismatch flag
    pcc: dict                  # subset -> var -> correlation or None
    n_questions: dict
    mismatch_var: str
    threshold: float
    target: str = "correct"

    def to_dict(self) -> dict:
        return {
            "variables": self.variables,
            "mismatch_var": self.mismatch_var,
            "threshold": self.threshold,
            "target": self.target,
            "n_questions": self.n_questions,
            "mean_prob": self.mean_prob,
            "identification": self.identification,
            "pcc": self.pcc,
        }


def _per_question(records, target: str):
    rows = []
    for r in records:
        full = [s for s in r.samples if not s.partial]
        if not full:
            continue
        latent: dict[str, list[float]] = {}
        for s in full:
            for v, p in s.latent_probs.items():
                latent.setdefault(v, []).append(p)
        means = {v: math.fsum(ps) / len(ps) for v, ps in latent.items()}
        if target == "correct":
            y = float(r.chosen_label is not None and r.chosen_label == r.gold_label)
        elif target == "final_prob":
            fp = [s.final_prob for s in full if s.final_prob is not None]
            y = math.fsum(fp) / len(fp) if fp else float("nan")
        else:
            raise ValueError(f"unknown correlation target {target!r}")
        rows.append((means, y))
    return rows


def latent_analysis(clean, noisy, mismatch_var: str = "Z2", threshold: float = 0.5,
                    target: str = "correct") -> LatentAnalysis:
    """Compare latent probabilities between clean and rationale-shuffled runs.

    Per-sample probabilities are averaged within each question, then across
    questions. A noisy question counts as identified when its mean
    ``mismatch_var`` probability is below ``threshold``; a clean one when it
    is at or above. Correlations are between per-question latent means and
    answer correctness (or mean final probability).
    """
    if not clean or not noisy:
        raise EmptyInput("both record sets must be non-empty")
    subsets = {"clean": _per_question(clean, target), "noisy": _per_question(noisy, target)}
    for name, rows in subsets.items():
        if not rows or not any(mismatch_var in m for m, _ in rows):
            raise MissingLatent(f"{mismatch_var} absent from complete samples of the {name} set")
    variables = sorted({v for rows in subsets.values() for m, _ in rows for v in m},
                       key=lambda v: (len(v), v))

    mean_prob, ident, pcc, counts = {}, {}, {}, {}
    subsets["pooled"] = subsets["clean"] + subsets["noisy"]
    for name, rows in subsets.items():
        counts[name] = len(rows)
        mean_prob[name], pcc[name] = {}, {}
        for v in variables:
            pairs = [(m[v], y) for m, y in rows if v in m]
            mean_prob[name][v] = math.fsum(x for x, _ in pairs) / len(pairs) if pairs else None
            pcc[name][v] = pearson_or_none([x for x, _ in pairs], [y for _, y in pairs]) if len(pairs) >= 2 else None
    flagged = {name: [m[mismatch_var] for m, _ in subsets[name] if mismatch_var in m] for name in ("clean", "noisy")}
    ident["clean"] = sum(v >= threshold for v in flagged["clean"]) / len(flagged["clean"])
    ident["noisy"] = sum(v < threshold for v in flagged["noisy"]) / len(flagged["noisy"])
    return LatentAnalysis(variables, mean_prob, ident, pcc, counts, mismatch_var, threshold, target)


# -- method-level evaluation -----------------------------------------------

METHODS = ("vpgm", "bayes_vpgm", "consistency")


def predictions_for(rows: Sequence[dict], method: str) -> list[ScoredPrediction]:
    """Scored predictions for one method from record or posterior rows.
    Rows without a gold label or the method's output are skipped."""
    out = []
    for r in rows:
        gold, labels = r.get("gold_label"), r.get("labels")
        if gold is None or not labels:
            continue
        if method == "vpgm" and r.get("vpgm_dist") is not None:
            out.append(ScoredPrediction.from_distribution(r["question_id"], r["vpgm_dist"], labels, gold))
        elif method == "bayes_vpgm" and r.get("bayes_dist") is not None:
            out.append(ScoredPrediction.from_distribution(r["question_id"], r["bayes_dist"], labels, gold))
        elif method == "consistency" and r.get("baseline_label") is not None:
            out.append(ScoredPrediction.from_scalar(r["question_id"], r["baseline_label"], r["baseline_conf"], gold))
    return out


def evaluate_method(preds: Sequence[ScoredPrediction], bins: int = DEFAULT_BINS) -> dict:
    rows = reliability_table(preds, bins)
    out = {
        "n": len(preds),
        "accuracy": accuracy(preds),
        "ece": ece(preds, bins),
        "reliability": [
            {"bin": r.bin, "lo": r.lo, "hi": r.hi, "count": r.count,
             "mean_confidence": r.mean_confidence, "accuracy": r.accuracy, "gap": r.gap}
            for r in rows
        ],
    }
    if all(p.probs is not None for p in preds):
        cw = classwise_ece(preds, bins)
        out["classwise_ece"] = cw.bin_free
        out["classwise_ece_binned"] = cw.binned
    return out
