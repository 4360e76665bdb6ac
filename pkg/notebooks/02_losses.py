"""
The three pretraining losses on toy tensors
===========================================

Contrastive alignment with study-level positives, class-balanced focal
classification and the gaze divergence, plus a gradient check of each.
"""
import numpy as np

from gazevlp import numerics as nx
from gazevlp.supervision import (GazeBatch, build_positive_structure, class_balanced_focal,
                                 contrastive_loss, contrastive_loss_single_positive, gaze_loss_jsd,
                                 js_divergence)

rng = np.random.default_rng(0)
log_tau = nx.Parameter("tau", np.array(np.log(1 / 0.07)))

# two images of study A, one of B, one of C
ids = ["A", "A", "B", "C"]
pos = build_positive_structure(ids)
print("positive targets:\n", pos.p_matrix)

x = nx.Parameter("x", rng.normal(size=(4, 8)))
r = nx.Parameter("r", rng.normal(size=(4, 8)))
print("hybrid contrastive :", contrastive_loss(x, r, pos, log_tau).item())
print("single positive    :", contrastive_loss_single_positive(x, r, None, log_tau).item())

# rare classes get larger weights through (1 - beta) / (1 - beta^count)
logits = nx.Parameter("logits", rng.normal(size=(4, 14)))
labels = rng.integers(0, 2, size=(4, 14))
counts = np.array([200, 3, 40, 1, 0, 12, 7, 90, 5, 2, 60, 1, 4, 30])
print("focal:", class_balanced_focal(logits, labels, counts).item())

# gaze: 2 transcript rows against 16 patches
prior = np.zeros((2, 16))
prior[0, [0, 1, 4]] = [0.5, 0.3, 0.2]
prior[1, [15]] = 1.0
tg = nx.Parameter("tg", rng.normal(size=(2, 8)))
pf = nx.Parameter("pf", rng.normal(size=(16, 8)))
print("gaze JSD loss:", gaze_loss_jsd(GazeBatch(prior, tg, pf), log_tau, lam=0.8).item())
print("JS([1,0],[0,1]) =", js_divergence([1, 0], [0, 1]), "= ln 2")

# analytic gradients agree with central differences
checks = {
    "contrastive": (lambda: contrastive_loss(x, r, pos, log_tau), [x, r, log_tau]),
    "focal": (lambda: class_balanced_focal(logits, labels, counts), [logits]),
    "gaze": (lambda: gaze_loss_jsd(GazeBatch(prior, tg, pf), log_tau), [tg, pf, log_tau]),
}
for name, (fn, leaves) in checks.items():
    print(f"{name:12s} gradient rel. error {nx.gradient_check(fn, leaves):.1e}")
