"""Training-free evaluation: label-relevance retrieval, prompt-ensemble zero-shot
classification and supervised metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def _l2_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return x / norms


@dataclass
class RetrievalIndex:
    image_embeddings: np.ndarray
    report_embeddings: np.ndarray
    disease_label: np.ndarray

    def __post_init__(self):
        self.image_embeddings = _l2_rows(self.image_embeddings)
        self.report_embeddings = _l2_rows(self.report_embeddings)
        self.disease_label = np.asarray(self.disease_label)
        n = len(self.disease_label)
        if self.image_embeddings.shape[0] != n or self.report_embeddings.shape[0] != n:
            raise ValueError("retrieval index rows are not aligned")

    def __len__(self):
        return len(self.disease_label)


def rank_reports(index: RetrievalIndex) -> np.ndarray:
    """For every image query, report indices by decreasing cosine similarity.

    Equal similarities keep the lower report index first.
    """
    sim = index.image_embeddings @ index.report_embeddings.T
    return np.argsort(-sim, axis=1, kind="stable")


def precision_recall_at_k(index: RetrievalIndex, k: int, recall: str = "hit",
                          clamp: bool = False):
    """(P@K, R@K) where a report is relevant if it shares the query's label.

    ``recall="hit"`` counts queries with at least one relevant report in the
    top K; ``recall="fraction"`` averages the share of all relevant reports
    retrieved in the top K.
    """
    n = len(index)
    if n == 0:
        raise ValueError("empty retrieval index")
    if k > n:
        if not clamp:
            raise ValueError(f"K={k} exceeds index size {n}")
        k = n
    if k < 1:
        raise ValueError("K must be positive")
    top = rank_reports(index)[:, :k]
    labels = index.disease_label
    relevant = labels[top] == labels[:, None]
    precision = relevant.mean(axis=1).mean()
    if recall == "hit":
        rec = relevant.any(axis=1).mean()
    elif recall == "fraction":
        totals = (labels[:, None] == labels[None, :]).sum(axis=1)
        rec = (relevant.sum(axis=1) / totals).mean()
    else:
        raise ValueError(f"unknown recall convention {recall!r}")
    return float(precision), float(rec)


@dataclass
class ClassPrototype:
    class_id: int
    embedding: np.ndarray
    prompt_count: int


def build_prototype(class_id: int, prompt_embeddings) -> ClassPrototype:
    """Average the prompt embeddings of one class and renormalize."""
    prompts = np.atleast_2d(np.asarray(prompt_embeddings, dtype=np.float64))
    if prompts.shape[0] == 0:
        raise ValueError(f"class {class_id} has no prompts")
    return ClassPrototype(class_id, _l2_rows(prompts.mean(axis=0)), prompts.shape[0])


def zero_shot_classify(images, prototypes):
    """Cosine scores (M x C) and argmax class ids."""
    if len(prototypes) < 2:
        raise ValueError("zero-shot classification needs at least two classes")
    imgs = _l2_rows(np.atleast_2d(images))
    protos = np.stack([p.embedding for p in prototypes])
    scores = imgs @ protos.T
    ids = np.array([p.class_id for p in prototypes])
    return scores, ids[scores.argmax(axis=1)]


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_scores(pred, gold):
    """(micro F1, macro F1) for binary N x C indicator matrices.

    Classes with neither gold positives nor predictions are skipped in the
    macro mean; if every class is empty the prediction is perfect and both are 1.
    """
    pred = np.atleast_2d(np.asarray(pred).astype(bool))
    gold = np.atleast_2d(np.asarray(gold).astype(bool))
    if pred.shape != gold.shape:
        raise ValueError("prediction and gold shapes differ")
    tp = (pred & gold).sum(axis=0)
    fp = (pred & ~gold).sum(axis=0)
    fn = (~pred & gold).sum(axis=0)
    denom = 2 * tp + fp + fn
    active = denom > 0
    if not active.any():
        return 1.0, 1.0
    micro = 2 * tp.sum() / denom.sum()
    macro = np.mean(2 * tp[active] / denom[active])
    return float(micro), float(macro)


def threshold_predictions(logits, thresholds=0.5) -> np.ndarray:
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return probs >= thresholds


@dataclass
class MetricReport:
    p_at_k: dict = field(default_factory=dict)
    r_at_k: dict = field(default_factory=dict)
    auroc: dict = field(default_factory=dict)
    f1_micro: dict = field(default_factory=dict)
    f1_macro: dict = field(default_factory=dict)
    seed: int | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("p_at_k", "r_at_k", "auroc", "f1_micro", "f1_macro"):
            for key, value in getattr(self, name).items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{name}[{key}] = {value} outside [0, 1]")

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): float(v) for k, v in d.items()}
        return {
            "auroc": keyed(self.auroc),
            "config_hash": self.config_hash,
            "extra": self.extra,
            "f1_macro": keyed(self.f1_macro),
            "f1_micro": keyed(self.f1_micro),
            "p_at_k": keyed(self.p_at_k),
            "r_at_k": keyed(self.r_at_k),
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def plot_retrieval_svg(report: MetricReport, path) -> None:
    """Bar chart of P@K and R@K written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [f"P@{k}" for k in report.p_at_k] + [f"R@{k}" for k in report.r_at_k]
    values = list(report.p_at_k.values()) + list(report.r_at_k.values())
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, values, color=["#4c72b0"] * len(report.p_at_k) + ["#dd8452"] * len(report.r_at_k))
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def build_balanced_split(corpus, n_classes: int = 5, per_class: int = 200, seed: int = 0):
    """Sample ``per_class`` single-label studies for each class.

    Studies positive for more than one class are excluded. Returns a list of
    ``(study, class_id)`` ordered by class, deterministic for a given seed.
    """
    from .synthcorpus import primary_classes

    pools = {c: [] for c in range(n_classes)}
    for study in corpus:
        classes = primary_classes(study, n_classes)
        if len(classes) == 1:
            pools[classes[0]].append(study)
    rng = np.random.default_rng(seed)
    split = []
    for c in range(n_classes):
        pool = pools[c]
        if len(pool) < per_class:
            raise ValueError(f"class {c} has {len(pool)} single-label studies, need {per_class}")
        chosen = np.sort(rng.choice(len(pool), size=per_class, replace=False))
        split.extend((pool[i], c) for i in chosen)
    return split
