"""Record-level glue between inference output, the calibrator and the
evaluator. Each function maps files' contents to the next stage's input."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .calibration import (
    DEFAULT_BETA,
    DEFAULT_EPS,
    DEFAULT_LAMBDA,
    CalibrationBatch,
    calibration_loss,
    fit_lambda,
    posterior_mean,
)
from .inference import QuestionRecord
from .metrics import DEFAULT_BINS, METHODS, evaluate_method, predictions_for

REPORT_DIGITS = 10


def usable_for_calibration(r: QuestionRecord) -> bool:
    return bool(r.labels) and r.gold_label is not None and r.vpgm_dist is not None and r.counts is not None \
        and sum(r.counts) >= 1


def batch_from_records(records: Sequence[QuestionRecord], beta: float = DEFAULT_BETA,
                       eps: float = DEFAULT_EPS) -> CalibrationBatch:
    rows = [r for r in records if usable_for_calibration(r)]
    if not rows:
        raise ValueError("no closed-ended records with gold labels to calibrate on")
    ks = {len(r.labels) for r in rows}
    if len(ks) != 1:
        raise ValueError(f"records mix different option counts {sorted(ks)}; calibrate them separately")
    counts = np.array([r.counts for r in rows], dtype=float)
    priors = np.array([r.vpgm_dist for r in rows], dtype=float)
    gold = np.array([r.labels.index(r.gold_label) for r in rows])
    return CalibrationBatch(counts, priors, gold, beta=beta, eps=eps)


def fit_records(records: Sequence[QuestionRecord], beta: float = DEFAULT_BETA,
                lam_init: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPS) -> dict:
    """Fit the concentration on dev records; returns the fit artifact."""
    batch = batch_from_records(records, beta, eps)
    fit = fit_lambda(batch, lam_init)
    exact = calibration_loss(batch, fit.lam)
    return {
        "lambda": fit.lam,
        "beta": beta,
        "epsilon_smooth": eps,
        "lambda_init": lam_init,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "final_loss": exact.total,
        "final_ece_class": exact.align,
        "n_rows": len(batch),
    }


def aggregate_records(records: Sequence[QuestionRecord], lam: float) -> list[dict]:
    """Posterior rows: the vPGM prior, the Dirichlet posterior mean and the
    baseline, one row per record."""
    out = []
    for r in records:
        row = {
            "question_id": r.question_id,
            "labels": r.labels,
            "gold_label": r.gold_label,
            "counts": r.counts,
            "vpgm_dist": r.vpgm_dist,
            "bayes_dist": None,
            "lambda": lam,
            "baseline_label": r.baseline_label,
            "baseline_conf": r.baseline_conf,
            "chosen_label": r.chosen_label,
        }
        if r.labels and r.vpgm_dist is not None and r.counts and sum(r.counts) >= 1:
            pi = posterior_mean(r.counts, r.vpgm_dist, lam)
            row["bayes_dist"] = [float(v) for v in pi]
            row["chosen_label"] = r.labels[int(np.argmax(pi))]
        out.append(row)
    return out


def _round(obj, digits=REPORT_DIGITS):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v, digits) for v in obj]
    return obj


def evaluate_rows(rows: Sequence[dict], bins: int = DEFAULT_BINS) -> dict:
    """Metrics for every method present in the rows. Floats are rounded to
    10 decimals so reports compare byte-for-byte across platforms."""
    methods = {}
    for m in METHODS:
        preds = predictions_for(rows, m)
        if preds:
            methods[m] = evaluate_method(preds, bins)
    lams = {r.get("lambda") for r in rows if r.get("lambda") is not None}
    report = {
        "bins": bins,
        "n_rows": len(rows),
        "n_with_gold": sum(1 for r in rows if r.get("gold_label") is not None),
        "methods": methods,
    }
    if len(lams) == 1:
        report["lambda"] = lams.pop()
    return _round(report)


def format_report(report: dict) -> str:
    lines = [f"{'method':<12} {'n':>5} {'acc':>8} {'ECE':>8} {'cw-ECE':>8}"]
    for name, m in report.get("methods", {}).items():
        cw = m.get("classwise_ece")
        lines.append(
            f"{name:<12} {m['n']:>5} {100 * m['accuracy']:>7.2f}% {100 * m['ece']:>8.3f} "
            f"{'' if cw is None else f'{100 * cw:8.3f}'}"
        )
    if "lambda" in report:
        lines.append(f"lambda = {report['lambda']:.6g}")
    lines.append("(ECE columns are x100)")
    return "\n".join(lines)
