import json

import numpy as np
import pytest

from gazevlp import numerics as nx
from gazevlp.config import DataError, config_from_dict
from gazevlp.encoders import VisionLanguageModel
from gazevlp.training import (AdamW, ReduceLROnPlateau, default_prompts, epoch_order, eval_retrieval,
                              eval_zeroshot, gaze_export, is_validation, pretrain, prepare_examples,
                              save_model, split_corpus)
from gazevlp.synthcorpus import SyntheticSpec, generate


def small_cfg(tmp_path, name="run", **sections):
    tree = {"data": {"synthetic": {"n_studies": 40, "gaze_fraction": 0.2, "seed": 1},
                     "eval_n_studies": 80, "per_class": 4},
            "model": {"d": 16, "m": 4, "layers": 1},
            "optimizer": {"epochs": 2},
            "seed": 2, "output_dir": str(tmp_path / name)}
    for key, value in sections.items():
        tree.setdefault(key, {}).update(value) if isinstance(value, dict) else tree.__setitem__(key, value)
    return config_from_dict(tree)


# -- optimizer / schedule -------------------------------------------------------

def test_adamw_first_step_and_decay_mask():
    w = nx.Parameter("w", np.ones((2, 2)))
    b = nx.Parameter("b", np.ones(2))
    opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.5)
    w.grad, b.grad = np.full((2, 2), 3.0), np.full(2, -2.0)
    opt.step()
    # bias-corrected first step moves by lr * sign(g); only matrices decay
    assert np.allclose(w.data, 1 - 0.1 * 0.5 - 0.1, atol=1e-7)
    assert np.allclose(b.data, 1 + 0.1, atol=1e-7)


def test_plateau_schedule():
    opt = AdamW({}, lr=1.0)
    sched = ReduceLROnPlateau(opt, factor=0.5, patience=1, min_lr=0.2)
    assert sched.step(1.0)
    assert not sched.step(1.0) and opt.lr == 1.0
    assert not sched.step(1.0) and opt.lr == 0.5
    for _ in range(10):
        sched.step(2.0)
    assert opt.lr == 0.2


# -- data plumbing -----------------------------------------------------------------

def test_validation_split_is_deterministic_and_near_fraction():
    corpus = generate(SyntheticSpec(n_studies=400))
    train, val = split_corpus(corpus, 0.1)
    assert len(train) + len(val) == 400 and 0.05 < len(val) / 400 < 0.15
    assert all(is_validation(s.study_id, 0.1) for s in val)
    assert split_corpus(corpus, 0.1)[1] == val


def test_examples_one_per_image_and_gaze_attached_once(tmp_path):
    cfg = small_cfg(tmp_path)
    corpus = generate(SyntheticSpec(n_studies=30, gaze_fraction=1.0, multi_view_fraction=1.0))
    ex = prepare_examples(corpus, cfg.model, cfg.supervision)
    assert len(ex) == sum(len(s.images) for s in corpus)
    with_prior = [e for e in ex if e.prior is not None]
    assert len(with_prior) == len(corpus)
    for e in with_prior:
        assert e.prior.shape == (len(e.segments), cfg.model.n_patches)


def test_epoch_order_depends_on_seed_and_epoch():
    a, _ = epoch_order(1, 0, 50)
    assert np.array_equal(a, epoch_order(1, 0, 50)[0])
    assert not np.array_equal(a, epoch_order(1, 1, 50)[0])
    assert sorted(a) == list(range(50))


# -- pretraining ------------------------------------------------------------------------

def test_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    cfg = small_cfg(tmp_path, optimizer={"epochs": 0})
    res = pretrain(cfg)
    assert res.history == []
    assert res.best_checkpoint.name == "init.cgz"
    init = nx.load_checkpoint(res.best_checkpoint)
    fresh = VisionLanguageModel(cfg.model, seed=cfg.seed).state_arrays()
    assert all(np.array_equal(init[k], fresh[k]) for k in fresh)


def test_identical_runs_have_identical_logs(tmp_path):
    a = pretrain(small_cfg(tmp_path, "a"))
    b = pretrain(small_cfg(tmp_path, "b"))
    assert (a.output_dir / "train_log.jsonl").read_bytes() == (b.output_dir / "train_log.jsonl").read_bytes()
    assert (a.output_dir / "last.cgz").read_bytes() == (b.output_dir / "last.cgz").read_bytes()


def test_every_output_embeds_hash_and_seed(tmp_path):
    cfg = small_cfg(tmp_path)
    res = pretrain(cfg)
    for line in (res.output_dir / "train_log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["config_hash"] == cfg.config_hash() and rec["seed"] == cfg.seed
    for ck in ("init.cgz", "best.cgz", "last.cgz"):
        meta = json.loads((res.output_dir / (ck + ".json")).read_text())
        assert meta["config_hash"] == cfg.config_hash()
    state = json.loads((res.output_dir / "state.json").read_text())
    assert state["config_hash"] == cfg.config_hash()


def test_log_has_term_breakdown(tmp_path):
    res = pretrain(small_cfg(tmp_path))
    steps = [h for h in res.history if h["kind"] == "step"]
    assert all({"con", "cls", "gaze", "total"} <= set(h) for h in steps)
    assert any(h["gaze"] > 0 for h in steps)
    assert all(abs(h["total"] - (h["con"] + h["cls"] + h["gaze"])) < 1e-12 for h in steps)


def test_contrastive_loss_decreases_on_separable_corpus(tmp_path):
    cfg = small_cfg(tmp_path, data={"synthetic": {"n_studies": 80, "gaze_fraction": 0.1, "seed": 1}},
                    optimizer={"epochs": 8})
    res = pretrain(cfg)
    by_epoch = {}
    for h in res.history:
        if h["kind"] == "step":
            by_epoch.setdefault(h["epoch"], []).append(h["con"])
    assert np.mean(by_epoch[max(by_epoch)]) < np.mean(by_epoch[0])


def test_resume_rejects_other_config(tmp_path):
    cfg = small_cfg(tmp_path)
    pretrain(cfg, max_steps=2)
    other = small_cfg(tmp_path, seed=99)
    with pytest.raises(DataError):
        pretrain(other, resume=tmp_path / "run" / "state.json")


def test_resume_mid_epoch_is_bit_identical(tmp_path):
    full = pretrain(small_cfg(tmp_path, "full"))
    steps = sum(1 for h in full.history if h["kind"] == "step")
    part_cfg = small_cfg(tmp_path, "part")
    pretrain(part_cfg, max_steps=steps // 2 + 1)
    pretrain(part_cfg, resume=tmp_path / "part" / "state.json")
    for name in ("last.cgz", "best.cgz", "train_log.jsonl", "state.cgz"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes(), name


# -- evaluation entry points ------------------------------------------------------------

@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("untrained")
    cfg = small_cfg(tmp)
    path = tmp / "init.cgz"
    save_model(path, VisionLanguageModel(cfg.model, seed=cfg.seed), cfg)
    return cfg, path


def test_untrained_retrieval_near_chance(tmp_path):
    ps = []
    for seed in range(4):
        cfg = config_from_dict({"seed": seed, "data": {"eval_n_studies": 200}})
        path = tmp_path / f"u{seed}.cgz"
        save_model(path, VisionLanguageModel(cfg.model, seed=seed), cfg)
        ps.append(eval_retrieval(cfg, path).p_at_k[1])
    assert abs(np.mean(ps) - 0.2) < 0.07


def test_retrieval_k_bounds(untrained):
    cfg, path = untrained
    one = config_from_dict({**cfg.to_dict(), "data": {**cfg.to_dict()["data"], "per_class": 1}})
    with pytest.raises(DataError):
        eval_retrieval(one, path)
    rep = eval_retrieval(one, path, clamp=True)
    assert rep.extra["n"] == 5 and set(rep.p_at_k) == {1, 5, 10}


def test_incompatible_checkpoint(untrained, tmp_path):
    cfg, _ = untrained
    other = config_from_dict({"model": {"d": 8, "m": 4, "layers": 1}})
    path = tmp_path / "o.cgz"
    save_model(path, VisionLanguageModel(other.model), other)
    with pytest.raises(DataError):
        eval_retrieval(cfg, path)


def test_zeroshot_prompts(untrained, tmp_path):
    cfg, path = untrained
    prompts = default_prompts(5)
    base = eval_zeroshot(cfg, path, prompts)
    doubled = {k: v * 3 for k, v in prompts.items()}
    assert eval_zeroshot(cfg, path, doubled).auroc == base.auroc
    missing = dict(prompts)
    missing.pop("Edema")
    with pytest.raises(DataError, match="Edema"):
        eval_zeroshot(cfg, path, missing)
    yaml_file = tmp_path / "p.yaml"
    yaml_file.write_text("".join(f"{k}: {json.dumps(v)}\n" for k, v in prompts.items()))
    assert eval_zeroshot(cfg, path, str(yaml_file)).auroc == base.auroc


def test_gaze_export(tmp_path):
    cfg = small_cfg(tmp_path)
    with pytest.raises(DataError, match="no gaze sessions"):
        gaze_export(cfg, tmp_path / "none", sessions=[])
    session = next(s.gaze for s in generate(SyntheticSpec(n_studies=10, gaze_fraction=1.0)))
    written = gaze_export(cfg, tmp_path / "one", sessions=[session])
    assert len(written) == 1 and len(list((tmp_path / "one").glob("*.json"))) == 1
    pgm = next((tmp_path / "one").glob("*.pgm")).read_bytes()
    assert f"config_hash={cfg.config_hash()}".encode() in pgm

    full = small_cfg(tmp_path, supervision={"rho": 1.0})
    gaze_export(full, tmp_path / "rho1", sessions=[session])
    sharp = np.array(json.loads(written[0].read_text())["rows"])
    dense = np.array(json.loads((tmp_path / "rho1" / written[0].name).read_text())["rows"])
    kept = sharp > 0
    assert np.all(dense[kept] > 0)
    # the sharpened rows are the dense rows with entries zeroed, renormalized
    restricted = np.where(kept, dense, 0)
    assert np.allclose(restricted / restricted.sum(1, keepdims=True), sharp, atol=1e-12)
