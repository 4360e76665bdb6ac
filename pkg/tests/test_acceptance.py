"""Acceptance gate: one group of tests per criterion, each at its stated tolerance."""
import math
import time

import numpy as np
import pytest

from gazevlp import numerics as nx
from gazevlp.config import config_from_dict
from gazevlp.evaluation import RetrievalIndex, auroc, precision_recall_at_k
from gazevlp.gaze import (Fixation, GazeParams, GazeSession, TranscriptSegment, build_gaze_prior,
                          duration_weights, filter_fixations, mask_fixation_regions, pool_to_patches,
                          render_heatmap, resize_bilinear, segment_fixations, top_rho_sharpen)
from gazevlp.gradcheck import run_gradient_suite
from gazevlp.supervision import (LabelState, OBSERVATIONS, binarize_labels, binarize_state,
                                 build_positive_structure, js_divergence)
from gazevlp.training import (batch_loss, eval_retrieval, eval_zeroshot, load_training_corpus, pretrain,
                              prepare_examples, split_corpus)
from gazevlp.supervision import class_counts

import oracles

ACCEPT_SPEC = {"n_studies": 500, "n_classes": 5, "noise_level": 0.1, "multi_view_fraction": 0.3,
               "context_fraction": 0.97, "gaze_fraction": 0.05, "seed": 7}


# -- 1 ----------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_gradient_suite(record):
    rep = run_gradient_suite(seeds=20)
    record(f"max rel err {rep.max_error:.2e} over {rep.seeds} seeds, {rep.seconds:.1f}s")
    expected = {"contrastive", "contrastive_single", "contrastive_literal", "focal", "cls",
                "gaze_jsd", "gaze_mse", "gaze_iou", "gaze_mask", "model"}
    assert set(rep.worst) == expected
    assert rep.seeds >= 20
    assert rep.max_error <= 1e-4, rep.worst
    assert rep.seconds < 60


# -- 2 ----------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_positive_structure_oracle(record):
    rng = np.random.default_rng(2)
    for _ in range(200):
        b = int(rng.integers(1, 65))
        ids = [f"study{k}" for k in rng.integers(0, max(1, int(rng.integers(1, b + 1))), size=b)]
        assert np.array_equal(build_positive_structure(ids).p_matrix, oracles.positive_matrix(ids))
    record("200 batches exact")


# -- 3 ----------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_jsd_closed_forms(record):
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = rng.dirichlet(np.ones(int(rng.integers(1, 20))))
        assert js_divergence(p, p) == 0.0
    assert abs(js_divergence([1, 0], [0, 1]) - math.log(2)) <= 1e-12
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        p, q = rng.dirichlet(np.ones(n) * rng.uniform(0.1, 3)), rng.dirichlet(np.ones(n) * rng.uniform(0.1, 3))
        worst = max(worst, abs(js_divergence(p, q) - js_divergence(q, p)))
    assert worst <= 1e-15
    record(f"max asymmetry {worst:.1e}")


# -- 4 ----------------------------------------------------------------------------

def _random_session(rng):
    n = int(rng.integers(1, 16))
    fixes, t = [], 0.0
    for _ in range(n):
        d = float(rng.uniform(0.01, 1.0))
        fixes.append(Fixation(float(rng.random()), float(rng.random()), t, t + d))
        t += d + float(rng.uniform(0, 0.2))
    segs = []
    for _ in range(int(rng.integers(0, 4))):
        a = float(rng.uniform(0, t))
        segs.append(TranscriptSegment((1,), a, a + float(rng.uniform(0.05, 1.5))))
    segs.append(TranscriptSegment((2,), 0.0, t, "paragraph"))
    return GazeSession(fixes, segs, "acc", "acc_0")


@pytest.mark.criterion(4)
def test_gaze_pipeline_contracts(record):
    rng = np.random.default_rng(4)
    rows = 0
    for i in range(500):
        s = _random_session(rng)
        grid = [(16, 16), (32, 32)][i % 2]
        params = GazeParams(sigma=float(rng.uniform(0.02, 0.2)), rho=float(rng.uniform(0.05, 1.0)),
                            radius=float(rng.uniform(0.0, 3.0)), min_duration=0.0,
                            heatmap_grid=grid, input_size=(32, 32), patch_grid=(4, 4))
        prior = build_gaze_prior(s, params)
        assert np.all(np.abs(prior.matrix.sum(axis=1) - 1.0) <= 1e-9)
        rows += prior.n_rows
        # retained count, recomputed from the masked map of every kept segment
        stable = filter_fixations(s.fixations, params.min_duration)
        for row, seg in zip(prior.matrix, prior.kept):
            fx = segment_fixations(stable, s.segments[seg])
            heat = render_heatmap(fx, params.heatmap_grid, params.sigma, duration_weights(fx))
            masked = mask_fixation_regions(pool_to_patches(resize_bilinear(heat, params.input_size),
                                                           params.patch_grid), fx, params.patch_grid,
                                           params.radius)
            nnz = np.count_nonzero(masked)
            k = math.ceil(round(params.rho * nnz, 9))
            assert np.count_nonzero(top_rho_sharpen(masked, params.rho)) == k
            assert np.count_nonzero(row) == k
        c = float(rng.choice([0.001, 0.37, 2.0, 3.0, 1000.0]))
        scaled = GazeSession([Fixation(f.x, f.y, f.t_start * c, f.t_end * c) for f in s.fixations],
                             [TranscriptSegment(g.text, g.t_start * c, g.t_end * c, g.level) for g in s.segments])
        assert np.array_equal(build_gaze_prior(scaled, params).matrix, prior.matrix)
    record(f"500 sessions, {rows} rows")


# -- 5 ----------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_metric_oracles(record):
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert auroc(scores, labels) == oracles.auroc_pairwise(scores.tolist(), labels.tolist())
    for _ in range(100):
        n = int(rng.integers(1, 101))
        img, rep = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        if rng.random() < 0.5:
            img, rep = np.sign(img), np.sign(rep)
        idx = RetrievalIndex(img, rep, rng.integers(0, 5, n))
        sim = (idx.image_embeddings @ idx.report_embeddings.T).tolist()
        for k in {1, min(5, n), min(10, n), n}:
            p, hit = precision_recall_at_k(idx, k)
            _, frac = precision_recall_at_k(idx, k, recall="fraction")
            op, ohit, ofrac = oracles.retrieval_at_k(sim, idx.disease_label.tolist(), k)
            assert p == pytest.approx(op, abs=1e-15) and hit == ohit
            assert frac == pytest.approx(ofrac, abs=1e-15)
    record("100 AUROC sets, 100 retrieval indices")


# -- 6 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def accepted_run(tmp_path_factory):
    cfg = config_from_dict({"data": {"synthetic": ACCEPT_SPEC, "per_class": 20}, "seed": 7,
                            "optimizer": {"epochs": 30},
                            "output_dir": str(tmp_path_factory.mktemp("accept"))})
    start = time.perf_counter()
    result = pretrain(cfg)
    return cfg, result, time.perf_counter() - start


@pytest.mark.criterion(6)
def test_end_to_end_run(accepted_run, record):
    cfg, result, seconds = accepted_run
    epochs = [h for h in result.history if h["kind"] == "epoch"]
    assert len(epochs) == 30
    retrieval = eval_retrieval(cfg, result.best_checkpoint)
    zeroshot = eval_zeroshot(cfg, result.best_checkpoint)
    assert retrieval.extra["n"] == 100
    record(f"train {seconds:.0f}s, P@1 {retrieval.p_at_k[1]:.3f}, "
           f"min AUROC {min(zeroshot.auroc.values()):.3f}, checkpoint {result.best_checkpoint.name}")
    assert seconds <= 600
    assert retrieval.p_at_k[1] >= 0.9
    for name, value in zeroshot.auroc.items():
        assert value >= 0.95, name


# -- 7 ----------------------------------------------------------------------------

ABLATIONS = {
    "single": {"supervision": {"contrastive": "single"}},
    "mask": {"supervision": {"gaze_loss": "mask"}},
    "no_context": {"supervision": {"use_context": False}},
}


@pytest.mark.criterion(7)
@pytest.mark.parametrize("variant", sorted(ABLATIONS))
def test_ablation_variants(variant, tmp_path, record):
    tree = {"data": {"synthetic": ACCEPT_SPEC}, "seed": 7, "optimizer": {"epochs": 3},
            "output_dir": str(tmp_path / variant)}
    for k, v in ABLATIONS[variant].items():
        tree[k] = v
    cfg = config_from_dict(tree)
    result = pretrain(cfg)
    for h in result.history:
        for key in ("con", "cls", "gaze", "total", "val_loss"):
            if key in h:
                assert math.isfinite(h[key]), (variant, h)
    assert any(h.get("gaze", 0) > 0 for h in result.history)
    if variant != "no_context":
        record(f"{variant}: finite")
        return
    model = result.model
    train, _ = split_corpus(load_training_corpus(cfg), cfg.data.val_fraction)
    examples = prepare_examples(train, cfg.model, cfg.supervision)
    assert all(e.context is None for e in examples)
    counts = class_counts(np.stack([s.labels.binarized for s in train]))
    names = model.context_parameter_names()
    assert names
    for k in range(0, len(examples), 64):
        model.zero_grad()
        loss, _ = batch_loss(model, examples[k:k + 64], counts, cfg.supervision)
        loss.backward()
        for n in names:
            assert np.array_equal(model.params[n].grad, np.zeros_like(model.params[n].data)), n
        assert np.any(model.params["fusion.z_image"].grad != 0)
    record(f"no_context: {len(names)} context tensors with exactly zero grad")


# -- 8 ----------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_determinism_and_resume(tmp_path, record):
    tree = {"data": {"synthetic": {**ACCEPT_SPEC, "n_studies": 120, "gaze_fraction": 0.2}}, "seed": 7,
            "optimizer": {"epochs": 3, "patience": 0}}
    cfg_a = config_from_dict({**tree, "output_dir": str(tmp_path / "a")})
    cfg_b = config_from_dict({**tree, "output_dir": str(tmp_path / "b")})
    cfg_c = config_from_dict({**tree, "output_dir": str(tmp_path / "c")})
    a = pretrain(cfg_a)
    pretrain(cfg_b)
    steps = sum(1 for h in a.history if h["kind"] == "step")
    cut = steps // 2 + 3        # lands mid-epoch
    pretrain(cfg_c, max_steps=cut)
    pretrain(cfg_c, resume=tmp_path / "c" / "state.json")
    for name in ("init.cgz", "best.cgz", "last.cgz", "state.cgz", "train_log.jsonl"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref, name
        assert (tmp_path / "c" / name).read_bytes() == ref, name
    record(f"{steps} steps, resumed at step {cut}")


# -- 9 ----------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_label_binarization(record):
    for state in LabelState:
        assert binarize_state(state) == oracles.BINARY_TABLE[state.value]
        assert binarize_state(state.value) == oracles.BINARY_TABLE[state.value]
        for slot in range(1, len(OBSERVATIONS)):
            states = [LabelState.BLANK] * len(OBSERVATIONS)
            states[slot] = state
            assert binarize_labels(states, False)[slot] == oracles.BINARY_TABLE[state.value]
    rng = np.random.default_rng(9)
    names = list(oracles.BINARY_TABLE)
    for _ in range(1000):
        states = [names[i] for i in rng.integers(0, 4, size=14)]
        nf = bool(rng.integers(0, 2))
        expect = [oracles.BINARY_TABLE[s] for s in states]
        expect[0] = int(nf)
        assert binarize_labels(states, nf).tolist() == expect
    record("4 states x 13 observations + 1000 vectors")
