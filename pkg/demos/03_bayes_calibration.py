# Fit the Dirichlet concentration on an overconfident synthetic batch and
# compare calibration before and after.
import numpy as np

from vpgm.calibration import calibration_loss, fit_lambda, posterior_mean, theorem1_check
from vpgm.metrics import ScoredPrediction, ece
from vpgm.synthetic import overconfident_batch

print(posterior_mean([3, 1], [0.5, 0.5], 4.0))   # (5/8, 3/8)
print(posterior_mean([3, 1], [0.5, 0.5], 1e-9))  # counts dominate

rng = np.random.default_rng(0)
batch = overconfident_batch(rng, n=400)
fit = fit_lambda(batch, 1.0)
print("lambda*", fit.lam, "iterations", fit.iterations, "converged", fit.converged)
print("loss trajectory", np.round(fit.losses, 5))

for lam in (1.0, fit.lam):
    terms = calibration_loss(batch, lam)
    pi = batch.predict(lam)
    preds = [ScoredPrediction(i, float(row.max()), int(row.argmax()) == g) for i, (row, g) in enumerate(zip(pi, batch.gold))]
    print(f"lambda={lam:8.4f}  CE={terms.ce:.4f}  L_v={terms.align:.4f}  ECE={ece(preds):.4f}")

# counts-only posterior (lambda -> 0) for contrast
freq = batch.counts / batch.counts.sum(axis=1, keepdims=True)
preds = [ScoredPrediction(i, float(r.max()), int(r.argmax()) == g) for i, (r, g) in enumerate(zip(freq, batch.gold))]
print("vote frequencies ECE", round(ece(preds), 4))

# the flexible per-key model recovers within-key frequencies
rep = theorem1_check(["A"] * 4 + ["B"] * 2, [1, 1, 1, 0, 0, 1], k=2)
print(rep.table.round(4), "class ECE", rep.ece_class)
