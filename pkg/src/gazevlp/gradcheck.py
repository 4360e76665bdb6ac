"""Finite-difference gradient suite at toy dimensions.

Every loss is checked on all coordinates of its inputs; the full model is
checked end to end through the pretraining objective on a random subset of
coordinates of every parameter.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoders import ModelConfig, ViewPosition, VisionLanguageModel
from .supervision import (GazeBatch, PositiveStructure, SupervisionConfig, build_positive_structure,
                          class_balanced_focal, contrastive_loss, contrastive_loss_single_positive,
                          cross_modal_cls_loss, gaze_loss_binary_mask, gaze_loss_iou,
                          gaze_loss_jsd, gaze_loss_mse, pretrain_loss)

TOY = ModelConfig(d=8, m=4, patch_size=4, image_size=16, layers=1, heads=2,
                  vocab_size=32, max_len=16, ff_mult=2)
TOLERANCE = 1e-4


@dataclass
class GradientReport:
    worst: dict = field(default_factory=dict)   # check name -> worst relative error
    seeds: int = 0
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.worst.values(), default=0.0)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error <= tol

    def record(self, name: str, err: float):
        self.worst[name] = max(self.worst.get(name, 0.0), err)


def _random_prior(rng, n, p):
    prior = np.zeros((n, p))
    for i in range(n):
        support = rng.choice(p, size=rng.integers(1, p // 2 + 1), replace=False)
        prior[i, support] = rng.random(support.size) + 0.1
    return prior / prior.sum(axis=1, keepdims=True)


def _study_ids(rng, b):
    # at least one repeated study so the hybrid target is not the identity
    ids = [f"s{int(k)}" for k in rng.integers(0, b - 1, size=b)]
    return ids


def check_losses(seed: int, report: GradientReport, h: float = 1e-5):
    rng = np.random.default_rng(seed)
    d, b, p, n = TOY.d, 4, TOY.n_patches, 3
    x = nx.Parameter("x", rng.normal(size=(b, d)))
    r = nx.Parameter("r", rng.normal(size=(b, d)))
    tau = nx.Parameter("tau", np.array(np.log(1 / 0.07) + rng.normal(scale=0.3)))
    pos = build_positive_structure(_study_ids(rng, b))
    report.record("contrastive", nx.gradient_check(
        lambda: contrastive_loss(x, r, pos, tau), [x, r, tau], h))
    report.record("contrastive_single", nx.gradient_check(
        lambda: contrastive_loss_single_positive(x, r, None, tau), [x, r, tau], h))
    lit = nx.Parameter("lit", np.array(2.0 + rng.random()))
    report.record("contrastive_literal", nx.gradient_check(
        lambda: contrastive_loss(x, r, pos, lit, literal=True), [x, r, lit], h))

    logits = nx.Parameter("logits", rng.normal(scale=2.0, size=(b, 14)))
    logits_t = nx.Parameter("logits_t", rng.normal(scale=2.0, size=(b, 14)))
    labels = rng.integers(0, 2, size=(b, 14))
    counts = rng.integers(0, 50, size=14)
    report.record("focal", nx.gradient_check(
        lambda: class_balanced_focal(logits, labels, counts), [logits], h))
    report.record("cls", nx.gradient_check(
        lambda: cross_modal_cls_loss(logits, logits_t, labels, counts), [logits, logits_t], h))

    tg = nx.Parameter("tg", rng.normal(size=(n, d)))
    pf = nx.Parameter("pf", rng.normal(size=(p, d)))
    gtau = nx.Parameter("gtau", np.array(np.log(1 / 0.07) + rng.normal(scale=0.3)))
    prior = _random_prior(rng, n, p)

    def batch():
        return GazeBatch(prior, tg, pf)

    leaves = [tg, pf, gtau]
    report.record("gaze_jsd", nx.gradient_check(lambda: gaze_loss_jsd(batch(), gtau, 0.8), leaves, h))
    report.record("gaze_mse", nx.gradient_check(lambda: gaze_loss_mse(batch(), gtau), leaves, h))
    report.record("gaze_iou", nx.gradient_check(lambda: gaze_loss_iou(batch(), gtau), leaves, h))
    report.record("gaze_mask", nx.gradient_check(
        lambda: gaze_loss_binary_mask(batch(), gtau, 0.8), leaves, h))


def toy_batch(rng, b: int = 4, cfg: ModelConfig = TOY):
    """Random images, views, contexts (one missing), reports, study ids and transcripts."""
    images = rng.random((b, cfg.image_size, cfg.image_size))
    views = [ViewPosition(int(v)) for v in rng.integers(0, 4, size=b)]

    def toks(lo, hi):
        return [int(t) for t in rng.integers(0, cfg.vocab_size, size=rng.integers(lo, hi))]

    contexts = [(toks(1, 4), toks(1, 4)) for _ in range(b)]
    contexts[int(rng.integers(0, b))] = None
    reports = [toks(2, 6) for _ in range(b)]
    transcripts = {0: [toks(1, 4), toks(1, 4), toks(2, 6)]}
    return images, views, contexts, reports, _study_ids(rng, b), transcripts


def check_model(seed: int, report: GradientReport, coords: int = 2, h: float = 1e-5,
                cfg: ModelConfig = TOY):
    rng = np.random.default_rng(seed)
    model = VisionLanguageModel(cfg, seed=seed)
    images, views, contexts, reports, ids, transcripts = toy_batch(rng, cfg=cfg)
    prior = _random_prior(rng, len(transcripts[0]), cfg.n_patches)
    labels = rng.integers(0, 2, size=(len(ids), 14))
    counts = rng.integers(0, 50, size=14)
    sup = SupervisionConfig()

    def loss():
        enc = model.forward(images, views, contexts, reports, ids, transcripts)
        gb = [GazeBatch(prior, enc.transcript_global[0], nx.take(enc.patch_features, 0))]
        total, _ = pretrain_loss(enc, labels, counts, gb, model.log_tau_contrastive,
                                 model.log_tau_gaze, sup)
        return total

    report.record("model", nx.gradient_check(loss, model.parameters(), h,
                                             max_coords=coords, rng=rng))


def run_gradient_suite(seeds: int = 20, coords: int = 2) -> GradientReport:
    report = GradientReport(seeds=seeds)
    start = time.perf_counter()
    for seed in range(seeds):
        check_losses(seed, report)
        check_model(seed, report, coords=coords)
    report.seconds = time.perf_counter() - start
    return report
