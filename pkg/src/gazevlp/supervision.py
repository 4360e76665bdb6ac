"""Multi-level pretraining objective: hybrid-positive contrastive alignment,
class-balanced disease classification and soft gaze guidance."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from . import numerics as nx
from .numerics import Tensor

OBSERVATIONS = (
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity",
    "Lung Lesion", "Edema", "Consolidation", "Pneumonia", "Atelectasis",
    "Pneumothorax", "Pleural Effusion", "Pleural Other", "Fracture", "Support Devices",
)
NO_FINDING = 0


class LabelState(str, Enum):
    BLANK = "BLANK"
    NEGATIVE = "NEGATIVE"
    UNCERTAIN = "UNCERTAIN"
    POSITIVE = "POSITIVE"


# blank counts as negative, uncertain as positive
BINARIZATION = {
    LabelState.BLANK: 0,
    LabelState.NEGATIVE: 0,
    LabelState.UNCERTAIN: 1,
    LabelState.POSITIVE: 1,
}


def binarize_state(state) -> int:
    return BINARIZATION[LabelState(state)]


def binarize_labels(states, no_finding) -> np.ndarray:
    """14 observation states -> 14 binary targets; slot 0 is the No Finding flag."""
    if len(states) != len(OBSERVATIONS):
        raise ValueError(f"expected {len(OBSERVATIONS)} states, got {len(states)}")
    out = np.array([binarize_state(s) for s in states], dtype=np.float64)
    out[NO_FINDING] = float(bool(no_finding))
    return out


@dataclass
class DiseaseLabels:
    states: list
    no_finding: bool

    @property
    def binarized(self) -> np.ndarray:
        return binarize_labels(self.states, self.no_finding)

    def to_dict(self) -> dict:
        return {"states": [LabelState(s).value for s in self.states],
                "no_finding": int(bool(self.no_finding))}

    @classmethod
    def from_dict(cls, d) -> "DiseaseLabels":
        return cls(states=[LabelState(s) for s in d["states"]], no_finding=bool(d["no_finding"]))


def class_counts(binarized: np.ndarray) -> np.ndarray:
    """Positives per class over a corpus (the w_l of the class-balanced weight)."""
    return np.asarray(binarized).sum(axis=0)


# ---------------------------------------------------------------------------
# temperatures
# ---------------------------------------------------------------------------

def logit_scale(log_tau, literal: bool = False) -> Tensor:
    """Multiplier applied to cosine similarities.

    By default the stored scalar is log(1/tau) and the multiplier is its
    exponential clamped to [1, 100]. With ``literal`` the stored value is
    used directly as the temperature and similarities are divided by it.
    """
    log_tau = nx.as_tensor(log_tau)
    if literal:
        return 1.0 / nx.clip(log_tau, 1e-2, 100.0)
    return nx.clip(nx.exp(log_tau), 1.0, 100.0)


# ---------------------------------------------------------------------------
# hybrid-positive contrastive
# ---------------------------------------------------------------------------

@dataclass
class PositiveStructure:
    p_matrix: np.ndarray
    study_of_image: list
    study_of_report: list


def build_positive_structure(study_ids, report_study_ids=None) -> PositiveStructure:
    images = list(study_ids)
    reports = images if report_study_ids is None else list(report_study_ids)
    ids_i, ids_r = np.array(images, dtype=object), np.array(reports, dtype=object)
    indicator = (ids_i[:, None] == ids_r[None, :]).astype(np.float64)
    counts = indicator.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("an image has no positive report in the batch")
    return PositiveStructure(indicator / counts, images, reports)


def contrastive_loss(x_global, r_global, pos: PositiveStructure, log_tau,
                     literal: bool = False) -> Tensor:
    """Symmetric cross-entropy between study targets and both softmax directions."""
    sim = nx.cosine_sim(x_global, r_global)
    if not np.all(np.isfinite(sim.data)):
        raise FloatingPointError("non-finite similarity in contrastive loss")
    logits = sim * logit_scale(log_tau, literal)
    log_i2r = nx.log_softmax(logits, axis=1)
    log_r2i = nx.log_softmax(nx.transpose(logits), axis=1)
    p = pos.p_matrix
    b = p.shape[0]
    return nx.tsum(p * log_i2r + p * log_r2i) * (-1.0 / (2 * b))


def contrastive_loss_single_positive(x_global, r_global, pos=None, log_tau=np.log(1 / 0.07),
                                     literal: bool = False) -> Tensor:
    """Same objective with the target forced to the identity (one positive per row)."""
    b = x_global.shape[0]
    ids = list(range(b))
    return contrastive_loss(x_global, r_global, PositiveStructure(np.eye(b), ids, ids),
                            log_tau, literal)


# ---------------------------------------------------------------------------
# class-balanced focal
# ---------------------------------------------------------------------------

def class_balanced_weights(counts, beta: float) -> np.ndarray:
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be nonnegative")
    weights = np.ones_like(counts)
    seen = counts > 0
    weights[seen] = (1.0 - beta) / (1.0 - beta ** counts[seen])
    return weights


def class_balanced_focal(logits, labels, counts, beta: float = 0.99, gamma: float = 2.0,
                         alpha: float = 0.25) -> Tensor:
    """Mean over batch and classes of w_l * -alpha_t (1 - p_t)^gamma log p_t."""
    labels = np.asarray(labels, dtype=np.float64)
    weights = class_balanced_weights(counts, beta)
    signed = nx.as_tensor(logits) * (2.0 * labels - 1.0)
    log_pt = nx.log_sigmoid(signed)
    modulator = nx.exp(nx.log_sigmoid(-1.0 * signed) * gamma)
    alpha_t = alpha * labels + (1.0 - alpha) * (1.0 - labels)
    per_element = modulator * log_pt * (-(alpha_t * weights))
    return nx.mean(per_element)


def cross_modal_cls_loss(logits_v, logits_t, labels, counts, beta=0.99, gamma=2.0,
                         alpha=0.25) -> Tensor:
    return 0.5 * (class_balanced_focal(logits_v, labels, counts, beta, gamma, alpha)
                  + class_balanced_focal(logits_t, labels, counts, beta, gamma, alpha))


# ---------------------------------------------------------------------------
# soft gaze guidance
# ---------------------------------------------------------------------------

def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence (natural log) of two distributions."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be nonnegative")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * (np.log(a[nz]) - np.log(m[nz]))))

    # addition commutes exactly, so the result is symmetric bit for bit;
    # clamp round-off below zero for nearly equal inputs
    return max(0.0, 0.5 * (kl(p) + kl(q)))


def js_rows(target: np.ndarray, log_q: Tensor) -> Tensor:
    """Per-row JS(target_i || q_i) for a fixed target and softmax rows ``exp(log_q)``."""
    target = np.asarray(target, dtype=np.float64)
    q = nx.exp(log_q)
    log_m = nx.log((q + target) * 0.5)
    safe_log_t = np.log(np.where(target > 0, target, 1.0))
    kl_t = nx.tsum((safe_log_t - log_m) * target, axis=-1)
    kl_q = nx.tsum(q * (log_q - log_m), axis=-1)
    return (kl_t + kl_q) * 0.5


@dataclass
class GazeBatch:
    prior: np.ndarray              # n x p
    transcript_global: Tensor      # n x d
    patch_features: Tensor         # p x d

    def __post_init__(self):
        n, p = self.prior.shape
        if self.transcript_global.shape[0] != n or self.patch_features.shape[0] != p:
            raise ValueError("gaze batch shapes are inconsistent")


def t2p_similarity(transcript_global, patch_features, log_tau, literal: bool = False) -> Tensor:
    return nx.cosine_sim(transcript_global, patch_features) * logit_scale(log_tau, literal)


def patch_to_transcript_target(prior: np.ndarray):
    """Columns of the prior renormalized per patch; patches without mass dropped."""
    mass = prior.sum(axis=0)
    keep = mass > 0
    return (prior[:, keep] / mass[keep]).T, keep


def _gaze_jsd(prior, batch, log_tau, lam, literal):
    s = t2p_similarity(batch.transcript_global, batch.patch_features, log_tau, literal)
    t2p = nx.mean(js_rows(prior, nx.log_softmax(s, axis=1)))
    if lam >= 1.0:
        return t2p * lam
    target, keep = patch_to_transcript_target(prior)
    log_p2t = nx.take(nx.log_softmax(nx.transpose(s), axis=1), np.flatnonzero(keep))
    p2t = nx.mean(js_rows(target, log_p2t))
    return t2p * lam + p2t * (1.0 - lam)


def gaze_loss_jsd(batch: GazeBatch, log_tau, lam: float = 0.8, literal: bool = False) -> Tensor:
    return _gaze_jsd(batch.prior, batch, log_tau, lam, literal)


def gaze_loss_mse(batch: GazeBatch, log_tau, literal: bool = False) -> Tensor:
    s = t2p_similarity(batch.transcript_global, batch.patch_features, log_tau, literal)
    diff = nx.softmax(s, axis=1) - batch.prior
    return nx.mean(diff * diff)


def soft_iou_loss(prior: np.ndarray, q) -> Tensor:
    """Mean over rows of 1 - sum(min) / sum(max)."""
    inter = nx.tsum(nx.minimum(q, prior), axis=-1)
    union = nx.tsum(nx.maximum(q, prior), axis=-1)
    return nx.mean(1.0 - inter / union)


def gaze_loss_iou(batch: GazeBatch, log_tau, literal: bool = False) -> Tensor:
    s = t2p_similarity(batch.transcript_global, batch.patch_features, log_tau, literal)
    return soft_iou_loss(batch.prior, nx.softmax(s, axis=1))


def uniform_support(prior: np.ndarray) -> np.ndarray:
    support = (prior > 0).astype(np.float64)
    return support / support.sum(axis=1, keepdims=True)


def gaze_loss_binary_mask(batch: GazeBatch, log_tau, lam: float = 0.8,
                          literal: bool = False) -> Tensor:
    return _gaze_jsd(uniform_support(batch.prior), batch, log_tau, lam, literal)


GAZE_LOSSES = ("jsd", "mse", "iou", "mask")


def gaze_loss(batches, log_tau, kind: str = "jsd", lam: float = 0.8,
              literal: bool = False) -> Tensor:
    """Average of the per-study gaze loss; an empty list contributes 0."""
    if not batches:
        return Tensor(0.0)
    terms = []
    for b in batches:
        if kind == "jsd":
            terms.append(gaze_loss_jsd(b, log_tau, lam, literal))
        elif kind == "mse":
            terms.append(gaze_loss_mse(b, log_tau, literal))
        elif kind == "iou":
            terms.append(gaze_loss_iou(b, log_tau, literal))
        elif kind == "mask":
            terms.append(gaze_loss_binary_mask(b, log_tau, lam, literal))
        else:
            raise ValueError(f"unknown gaze loss {kind!r}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# composed objective
# ---------------------------------------------------------------------------

@dataclass
class SupervisionConfig:
    lam: float = 0.8
    rho: float = 0.25
    beta: float = 0.99
    gamma: float = 2.0
    alpha: float = 0.25
    gaze_loss: str = "jsd"
    contrastive: str = "hybrid"
    temperature_literal: bool = False
    use_context: bool = True
    use_cls: bool = True
    use_gaze: bool = True
    weight_con: float = 1.0
    weight_cls: float = 1.0
    weight_gaze: float = 1.0
    sigma: float = 0.05
    radius: float = 1.5
    min_duration: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


def pretrain_loss(encoded, labels, counts, gaze_batches, log_tau_con, log_tau_gaze,
                  cfg: SupervisionConfig = SupervisionConfig()):
    """Return the summed objective and a float breakdown of its terms."""
    if cfg.contrastive == "hybrid":
        pos = build_positive_structure(encoded.study_ids)
        con = contrastive_loss(encoded.vision_global, encoded.report_global, pos,
                               log_tau_con, cfg.temperature_literal)
    elif cfg.contrastive == "single":
        con = contrastive_loss_single_positive(encoded.vision_global, encoded.report_global,
                                               None, log_tau_con, cfg.temperature_literal)
    else:
        raise ValueError(f"unknown contrastive mode {cfg.contrastive!r}")
    terms = {"con": con}
    if cfg.use_cls:
        terms["cls"] = cross_modal_cls_loss(encoded.vision_logits, encoded.text_logits, labels,
                                            counts, cfg.beta, cfg.gamma, cfg.alpha)
    if cfg.use_gaze and gaze_batches:
        terms["gaze"] = gaze_loss(gaze_batches, log_tau_gaze, cfg.gaze_loss, cfg.lam,
                                  cfg.temperature_literal)
    weights = {"con": cfg.weight_con, "cls": cfg.weight_cls, "gaze": cfg.weight_gaze}
    breakdown = {}
    total = None
    for name, term in terms.items():
        value = term.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(name, value)
        breakdown[name] = value
        weighted = term if weights[name] == 1.0 else term * weights[name]
        total = weighted if total is None else total + weighted
    breakdown.setdefault("cls", 0.0)
    breakdown.setdefault("gaze", 0.0)
    breakdown["total"] = total.item()
    return total, breakdown
