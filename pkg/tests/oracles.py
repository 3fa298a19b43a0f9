"""Independent reference computations used by the tests.

None of these import the code under test; each one computes the same
quantity by a different route (quadrature, sampling, brute force, exact
rationals).
"""

from fractions import Fraction

import numpy as np
from scipy import integrate


def beta_posterior_mean(n1, n2, a1, a2):
    """E[x] for x ~ density proportional to x^(n1+a1-1) (1-x)^(n2+a2-1), by quadrature."""
    wvar = (n1 + a1 - 1.0, n2 + a2 - 1.0)
    opts = dict(weight="alg", wvar=wvar, epsabs=1e-14, epsrel=1e-12, limit=200)
    num, _ = integrate.quad(lambda x: x, 0.0, 1.0, **opts)
    den, _ = integrate.quad(lambda x: 1.0, 0.0, 1.0, **opts)
    return num / den


def dirichlet_posterior_mean_mc(counts, alpha, draws, rng):
    """Posterior mean by importance sampling: prior draws weighted by the
    multinomial likelihood of ``counts``. Returns (estimate, std error)."""
    counts = np.asarray(counts, dtype=float)
    pis = rng.dirichlet(alpha, size=draws)
    logw = (np.log(np.maximum(pis, 1e-300)) * counts).sum(axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ pis
    # delta-method standard error of a self-normalised estimator
    se = np.sqrt(np.sum(w[:, None] ** 2 * (pis - est) ** 2, axis=0))
    return est, se


def smoothed_loss(counts, priors, gold, lam, beta, eps):
    """Cross-entropy + beta * mean_j sqrt(gap_j^2 + eps), written with loops."""
    n, k = len(counts), len(counts[0])
    pis = []
    for c, p in zip(counts, priors):
        tot = sum(c)
        pis.append([(c[j] + lam * p[j]) / (tot + lam) for j in range(k)])
    ce = -sum(np.log(max(pis[i][gold[i]], 1e-12)) for i in range(n)) / n
    align = 0.0
    for j in range(k):
        gap = sum(pis[i][j] for i in range(n)) / n - sum(1.0 for i in range(n) if gold[i] == j) / n
        align += np.sqrt(gap * gap + eps)
    return ce + beta * align / k


def exact_loss(counts, priors, gold, lam, beta):
    n, k = len(counts), len(counts[0])
    pis = [[(c[j] + lam * p[j]) / (sum(c) + lam) for j in range(k)] for c, p in zip(counts, priors)]
    ce = -sum(np.log(max(pis[i][gold[i]], 1e-12)) for i in range(n)) / n
    align = sum(abs(sum(pis[i][j] for i in range(n)) / n - sum(gold[i] == j for i in range(n)) / n)
                for j in range(k)) / k
    return ce + beta * align, align


def brute_ece(confidences, correct, bins=10):
    """Per-item form: sum over items of |acc(bin) - conf(bin)| / n. Bins
    are decided on the decimal value of each confidence."""
    n = len(confidences)
    members = {}
    for c, ok in zip(confidences, correct):
        b = bins - 1 if c >= 1.0 else int(Fraction(str(c)) * bins)
        members.setdefault(b, []).append((c, ok))
    total = 0.0
    for c, _ in zip(confidences, correct):
        b = bins - 1 if c >= 1.0 else int(Fraction(str(c)) * bins)
        grp = members[b]
        acc = sum(ok for _, ok in grp) / len(grp)
        conf = sum(x for x, _ in grp) / len(grp)
        total += abs(acc - conf) / n
    return total


def expectation_exact(samples, labels):
    """Eq.-style mean over samples with residual split, in exact rationals."""
    k = len(labels)
    out = []
    for lab in labels:
        acc = Fraction(0)
        for a, p in samples:
            p = Fraction(p)
            acc += p if a == lab else (1 - p) / (k - 1)
        out.append(acc / len(samples))
    return out
