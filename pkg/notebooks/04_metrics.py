"""
Retrieval and classification metrics
====================================
"""
import numpy as np

from gazevlp.evaluation import (RetrievalIndex, auroc, build_prototype, f1_scores,
                                precision_recall_at_k, zero_shot_classify)

rng = np.random.default_rng(1)

# five classes, embeddings = class direction + noise
labels = np.repeat(np.arange(5), 20)
centres = rng.normal(size=(5, 16))
images = centres[labels] + 0.8 * rng.normal(size=(100, 16))
reports = centres[labels] + 0.8 * rng.normal(size=(100, 16))
index = RetrievalIndex(images, reports, labels)

for k in (1, 5, 10):
    p, hit = precision_recall_at_k(index, k)
    _, frac = precision_recall_at_k(index, k, recall="fraction")
    print(f"K={k:2d}  P@K {p:.3f}  R@K hit {hit:.3f}  R@K fraction {frac:.3f}")

# zero-shot: prototypes from noisy "prompt" embeddings
protos = [build_prototype(c, centres[c] + 0.3 * rng.normal(size=(3, 16))) for c in range(5)]
scores, pred = zero_shot_classify(images, protos)
print("accuracy", np.mean(pred == labels))
print("AUROC per class", [round(auroc(scores[:, c], labels == c), 3) for c in range(5)])
onehot = np.eye(5, dtype=bool)
print("F1 micro/macro", f1_scores(onehot[pred], onehot[labels]))
