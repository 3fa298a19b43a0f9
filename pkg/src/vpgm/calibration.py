"""Dirichlet-posterior aggregation of sampled answers with a learned
concentration ``lam``.

Each question contributes label counts ``n`` (how many kept samples chose
each label) and a prior belief ``p`` (the averaged verbalized probability
vector). With a Dirichlet(lam * p) prior the posterior mean is::

    pi_k = (n_k + lam * p_k) / (sum(n) + lam)

``lam`` is chosen on a dev split by minimising cross-entropy plus ``beta``
times a bin-free class-wise calibration gap, optimising ``log(lam)`` with
L-BFGS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import EmptyBatch, InvalidPrior, NonFiniteLoss, NonPositiveLambda

log = logging.getLogger(__name__)

PRIOR_TOL = 1e-9
LOG_FLOOR = 1e-12
DEFAULT_EPS = 1e-8
DEFAULT_BETA = 1.0
DEFAULT_LAMBDA = 1.0


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0:
        raise NonPositiveLambda(f"lambda must be a positive finite number, got {lam!r}")
    return lam


def _check_inputs(counts, prior):
    counts = np.asarray(counts, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if counts.shape != prior.shape:
        raise ValueError(f"counts {counts.shape} and prior {prior.shape} differ in shape")
    if counts.shape[-1] < 2:
        raise ValueError("need at least two categories")
    if np.any(prior < 0) or np.any(~np.isfinite(prior)):
        raise InvalidPrior("prior entries must be finite and non-negative")
    if np.any(np.abs(prior.sum(axis=-1) - 1.0) > PRIOR_TOL):
        raise InvalidPrior("prior must sum to 1 within 1e-9")
    if np.any(counts < 0) or np.any(~np.isfinite(counts)):
        raise ValueError("counts must be finite and non-negative")
    if np.any(counts.sum(axis=-1) < 1):
        raise ValueError("every row needs at least one counted sample")
    return counts, prior


def posterior_mean(counts, prior, lam) -> np.ndarray:
    """Posterior mean of the categorical parameter. Works on a single row
    ``(K,)`` or a batch ``(B, K)``."""
    lam = _check_lambda(lam)
    counts, prior = _check_inputs(counts, prior)
    total = counts.sum(axis=-1, keepdims=True)
    return (counts + lam * prior) / (total + lam)


def posterior_mean_grad(counts, prior, lam) -> np.ndarray:
    """d pi_k / d lam = (p_k * sum(n) - n_k) / (sum(n) + lam)^2."""
    lam = _check_lambda(lam)
    counts, prior = _check_inputs(counts, prior)
    total = counts.sum(axis=-1, keepdims=True)
    return (prior * total - counts) / (total + lam) ** 2


def class_alignment(probs, onehot, eps: float | None = None) -> float:
    """(1/K) * sum_j |mean_i probs_ij - mean_i onehot_ij|.

    With ``eps`` the absolute value is replaced by sqrt(x^2 + eps).
    """
    probs = np.asarray(probs, dtype=float)
    onehot = np.asarray(onehot, dtype=float)
    gap = probs.mean(axis=0) - onehot.mean(axis=0)
    if eps is None:
        return float(np.mean(np.abs(gap)))
    return float(np.mean(np.sqrt(gap * gap + eps)))


@dataclass
class CalibrationBatch:
    """Rows of (counts, prior, gold index) sharing K categories."""

    counts: np.ndarray
    priors: np.ndarray
    gold: np.ndarray
    beta: float = DEFAULT_BETA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.counts, self.priors = _check_inputs(np.atleast_2d(self.counts), np.atleast_2d(self.priors))
        self.gold = np.asarray(self.gold, dtype=int).reshape(-1)
        if self.counts.shape[0] == 0:
            raise EmptyBatch("calibration batch has no rows")
        if self.gold.shape[0] != self.counts.shape[0]:
            raise ValueError("one gold label per row is required")
        if np.any(self.gold < 0) or np.any(self.gold >= self.k):
            raise ValueError("gold labels must index a category")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def k(self) -> int:
        return self.counts.shape[1]

    def __len__(self):
        return self.counts.shape[0]

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(self.k)[self.gold]

    def predict(self, lam) -> np.ndarray:
        return posterior_mean(self.counts, self.priors, lam)


@dataclass(frozen=True)
class LossTerms:
    total: float
    ce: float
    align: float

    def __iter__(self):
        return iter((self.total, self.ce, self.align))


def _ce(pi_gold: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(pi_gold, LOG_FLOOR))))


def calibration_loss(batch: CalibrationBatch, lam, smoothed: bool = False) -> LossTerms:
    """Cross-entropy plus beta times the class-wise alignment gap.

    The exact absolute value is used unless ``smoothed`` is set, which
    switches to the differentiable surrogate the optimiser sees.
    """
    if len(batch) == 0:
        raise EmptyBatch("calibration batch has no rows")
    pi = batch.predict(lam)
    ce = _ce(pi[np.arange(len(batch)), batch.gold])
    align = class_alignment(pi, batch.onehot, batch.eps if smoothed else None)
    return LossTerms(ce + batch.beta * align, ce, align)


def loss_gradient(batch: CalibrationBatch, lam) -> float:
    """dL/dlam of the smoothed loss, by the chain rule through pi(lam)."""
    lam = _check_lambda(lam)
    rows = np.arange(len(batch))
    pi = batch.predict(lam)
    dpi = posterior_mean_grad(batch.counts, batch.priors, lam)

    pg, dpg = pi[rows, batch.gold], dpi[rows, batch.gold]
    live = pg > LOG_FLOOR
    d_ce = -np.mean(np.where(live, dpg / np.where(live, pg, 1.0), 0.0))

    gap = pi.mean(axis=0) - batch.onehot.mean(axis=0)
    d_align = np.mean(gap / np.sqrt(gap * gap + batch.eps) * dpi.mean(axis=0))
    return float(d_ce + batch.beta * d_align)


@dataclass
class FitResult:
    lam: float
    losses: list[float]
    lambdas: list[float]
    converged: bool
    iterations: int
    message: str = ""

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def fit_lambda(batch: CalibrationBatch, lam_init: float = DEFAULT_LAMBDA, *,
               max_iter: int = 200, gtol: float = 1e-8, memory: int = 10) -> FitResult:
    """Minimise the smoothed loss over eta = log(lam) with L-BFGS.

    ``losses`` holds the loss at the start point and after every accepted
    step; the line search keeps it non-increasing.
    """
    lam_init = _check_lambda(lam_init)

    def objective(x):
        eta = float(np.clip(x[0], -700.0, 700.0))
        lam = float(np.exp(eta))
        if lam <= 0:
            raise NonFiniteLoss(f"lambda underflowed at eta={eta}", lam=lam)
        loss = calibration_loss(batch, lam, smoothed=True).total
        grad = loss_gradient(batch, lam) * lam
        if not (np.isfinite(loss) and np.isfinite(grad)):
            raise NonFiniteLoss(f"non-finite loss {loss!r} / gradient {grad!r} at lambda={lam!r}",
                                lam=lam, loss=loss, grad=grad)
        return loss, np.array([grad])

    x0 = np.array([np.log(lam_init)])
    losses = [objective(x0)[0]]
    lambdas = [lam_init]

    def record(xk):
        losses.append(objective(xk)[0])
        lambdas.append(float(np.exp(xk[0])))

    res = minimize(
        objective, x0, jac=True, method="L-BFGS-B", callback=record,
        options={"maxcor": memory, "maxiter": max_iter, "gtol": gtol, "ftol": 1e-15},
    )
    lam_star = float(np.exp(res.x[0]))
    if not np.isfinite(lam_star) or lam_star <= 0:
        raise NonFiniteLoss(f"optimiser returned lambda={lam_star!r}", lam=lam_star)
    if lambdas[-1] != lam_star:
        # scipy may report a point other than the last callback iterate
        lambdas.append(lam_star)
        losses.append(float(res.fun))
    grad_norm = abs(float(np.atleast_1d(res.jac)[0]))
    converged = bool(res.success) or grad_norm < gtol
    log.info("fit_lambda: lambda*=%.6g after %d iterations (%s)", lam_star, res.nit, res.message)
    return FitResult(lam_star, [float(v) for v in losses], lambdas, converged, int(res.nit), str(res.message))


# -- theorem check ----------------------------------------------------------

@dataclass
class Theorem1Report:
    keys: list
    table: np.ndarray         # fitted probabilities, one row per key
    frequencies: np.ndarray   # within-key empirical label frequencies
    max_deviation: float
    ece_class: float
    loss: float
    converged: bool
    tol: float = 1e-3
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.max_deviation < self.tol and self.ece_class < self.tol

    def fitted(self, key) -> np.ndarray:
        return self.table[self.keys.index(key)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def theorem1_check(keys: Sequence[Hashable], labels: Sequence[int], k: int | None = None, *,
                   beta: float = DEFAULT_BETA, eps: float = DEFAULT_EPS, tol: float = 1e-3,
                   max_iter: int = 5000) -> Theorem1Report:
    """Fit a free probability vector per distinct feature key by minimising
    cross-entropy + beta * class-wise gap, then compare the fit with the
    within-key label frequencies and report the class-wise ECE."""
    labels = np.asarray(labels, dtype=int)
    if len(keys) != len(labels) or len(labels) == 0:
        raise ValueError("keys and labels must be non-empty and of equal length")
    k = int(k if k is not None else labels.max() + 1)
    uniq = list(dict.fromkeys(keys))
    pos = {key: i for i, key in enumerate(uniq)}
    group = np.array([pos[key] for key in keys])
    n, g = len(labels), len(uniq)

    counts = np.zeros((g, k))
    np.add.at(counts, (group, labels), 1.0)
    sizes = counts.sum(axis=1)
    freq = counts / sizes[:, None]
    ybar = counts.sum(axis=0) / n
    w = sizes / n

    def objective(flat):
        z = flat.reshape(g, k)
        p = _softmax(z)
        ce = -np.sum(counts * np.log(np.maximum(p, 1e-300))) / n
        gap = w @ p - ybar
        root = np.sqrt(gap * gap + eps)
        loss = ce + beta * np.mean(root)
        dz_ce = (sizes[:, None] * p - counts) / n
        da = beta / k * (gap / root)[None, :] * w[:, None]
        dz_align = p * (da - np.sum(p * da, axis=1, keepdims=True))
        return loss, (dz_ce + dz_align).ravel()

    res = minimize(objective, np.zeros(g * k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "maxcor": 20, "gtol": 1e-12, "ftol": 1e-15})
    table = _softmax(res.x.reshape(g, k))
    dev = float(np.max(np.abs(table - freq)))
    ece = class_alignment(table[group], np.eye(k)[labels])
    return Theorem1Report(uniq, table, freq, dev, ece, float(res.fun), bool(res.success), tol, int(res.nit))
