"""Seeded synthetic calibration data for tests and demos."""

from __future__ import annotations

import numpy as np

from .calibration import DEFAULT_BETA, DEFAULT_EPS, CalibrationBatch


def overconfident_batch(rng: np.random.Generator, n: int = 200, k: int = 4, m: int = 3,
                        sharpness: float = 4.0, herd: float = 0.3,
                        beta: float = DEFAULT_BETA, eps: float = DEFAULT_EPS) -> CalibrationBatch:
    """Rows whose sampled answers are overconfident relative to the gold labels.

    Each row draws a true class distribution ``q`` from a flat Dirichlet and
    its gold label from ``q``. The prior is ``q`` itself (a calibrated
    belief). Each of the ``m`` sampled answers lands on class 0 with
    probability ``herd`` and otherwise comes from ``q`` raised to
    ``sharpness``, so the samples agree more often, and favour class 0
    more often, than the gold labels justify.
    """
    q = rng.dirichlet(np.ones(k), size=n)
    gold = np.array([rng.choice(k, p=row) for row in q])
    sharp = q ** sharpness
    sharp /= sharp.sum(axis=1, keepdims=True)
    answer_dist = (1.0 - herd) * sharp
    answer_dist[:, 0] += herd
    counts = np.stack([rng.multinomial(m, row) for row in answer_dist]).astype(float)
    return CalibrationBatch(counts, q, gold, beta=beta, eps=eps)


def random_batch(rng: np.random.Generator, n: int, k: int, m: int | None = None,
                 beta: float | None = None, eps: float = DEFAULT_EPS) -> CalibrationBatch:
    """Unstructured random rows: Dirichlet priors, multinomial counts, uniform gold."""
    priors = rng.dirichlet(np.ones(k), size=n)
    sizes = rng.integers(1, 8, size=n) if m is None else np.full(n, m)
    counts = np.stack([rng.multinomial(s, rng.dirichlet(np.ones(k))) for s in sizes]).astype(float)
    gold = rng.integers(0, k, size=n)
    if beta is None:
        beta = float(rng.uniform(0.0, 3.0))
    return CalibrationBatch(counts, priors, gold, beta=beta, eps=eps)
