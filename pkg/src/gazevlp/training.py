"""Pretraining loop, optimizer, checkpoints and the evaluation entry points."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import DataError, RunConfig
from .encoders import ModelConfig, VisionLanguageModel, ViewPosition, RoleToken
from .evaluation import (MetricReport, RetrievalIndex, auroc, build_balanced_split,
                         build_prototype, f1_scores, plot_retrieval_svg,
                         precision_recall_at_k, zero_shot_classify)
from .gaze import EmptyPrior, GazeParams, build_gaze_prior, write_pgm
from .supervision import (GazeBatch, SupervisionConfig, class_counts, pretrain_loss)
from .synthcorpus import (CLASS_OBSERVATIONS, CorpusFormatError, SyntheticSpec, generate,
                          read_corpus, report_band)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Example:
    study_id: str
    image: np.ndarray
    view: ViewPosition
    context: tuple | None
    report: list
    labels: np.ndarray
    prior: np.ndarray | None = None
    segments: list = field(default_factory=list)


def gaze_params(model: ModelConfig, sup: SupervisionConfig) -> GazeParams:
    side = model.image_size
    grid = side // model.patch_size
    return GazeParams(sigma=sup.sigma, rho=sup.rho, radius=sup.radius,
                      min_duration=sup.min_duration, heatmap_grid=(side, side),
                      input_size=(side, side), patch_grid=(grid, grid))


def prepare_examples(corpus, model: ModelConfig, sup: SupervisionConfig) -> list:
    """One example per image; the gazed image carries the study's prior."""
    params = gaze_params(model, sup)
    examples = []
    for study in corpus:
        prior = None
        if study.gaze is not None and sup.use_gaze:
            try:
                prior = build_gaze_prior(study.gaze, params)
            except EmptyPrior:
                prior = None
        labels = study.labels.binarized
        for k, im in enumerate(study.images):
            if im.pixels.shape != (model.image_size, model.image_size):
                raise DataError(f"{study.study_id}: image shape {im.pixels.shape} does not "
                                f"match model.image_size={model.image_size}")
            gazed = prior is not None and (im.image_id == study.gaze.image_id
                                           or (not study.gaze.image_id and k == 0))
            ex = Example(study.study_id, im.as_float(), im.view,
                         study.context if sup.use_context else None,
                         list(study.report), labels)
            if gazed:
                ex.prior = prior.matrix
                ex.segments = [list(study.gaze.segments[i].text) for i in prior.kept]
            examples.append(ex)
    return examples


def is_validation(study_id: str, fraction: float) -> bool:
    digest = hashlib.sha256(study_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % 1000 < round(fraction * 1000)


def split_corpus(corpus, fraction: float):
    train = [s for s in corpus if not is_validation(s.study_id, fraction)]
    val = [s for s in corpus if is_validation(s.study_id, fraction)]
    return train, val


def load_training_corpus(cfg: RunConfig) -> list:
    if cfg.data.corpus:
        try:
            return read_corpus(cfg.data.corpus)
        except OSError as exc:
            raise DataError(f"cannot read corpus {cfg.data.corpus}: {exc}") from exc
        except CorpusFormatError as exc:
            raise DataError(str(exc)) from exc
    return generate(cfg.data.synthetic)


def load_eval_corpus(cfg: RunConfig) -> list:
    if cfg.data.eval_corpus:
        try:
            return read_corpus(cfg.data.eval_corpus)
        except (OSError, CorpusFormatError) as exc:
            raise DataError(f"cannot read eval corpus: {exc}") from exc
    spec = SyntheticSpec(**{**cfg.data.synthetic.to_dict(),
                            "n_studies": cfg.data.eval_n_studies,
                            "seed": cfg.data.synthetic.seed + cfg.data.eval_seed_offset,
                            "gaze_fraction": 0.0})
    return generate(spec)


def batch_loss(model: VisionLanguageModel, batch, counts, sup: SupervisionConfig):
    images = np.stack([e.image for e in batch])
    transcripts = {row: e.segments for row, e in enumerate(batch)
                   if e.prior is not None and sup.use_gaze}
    enc = model.forward(images, [e.view for e in batch], [e.context for e in batch],
                        [e.report for e in batch], [e.study_id for e in batch], transcripts)
    gaze_batches = [GazeBatch(batch[row].prior, tg, nx.take(enc.patch_features, row))
                    for row, tg in enc.transcript_global.items()]
    labels = np.stack([e.labels for e in batch])
    return pretrain_loss(enc, labels, counts, gaze_batches, model.log_tau_contrastive,
                         model.log_tau_gaze, sup)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on matrices (biases, norms and scalars are not decayed)."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data - self.lr * self.weight_decay * data
            p.data = data - self.lr * update

    def state_arrays(self) -> dict:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        for n in self.params:
            self.m[n] = np.array(arrays[f"adam.m.{n}"])
            self.v[n] = np.array(arrays[f"adam.v.{n}"])
        self.t = t


class ReduceLROnPlateau:
    def __init__(self, optimizer: AdamW, factor=0.5, patience=3, min_lr=1e-6, threshold=1e-4):
        self.optimizer = optimizer
        self.factor, self.patience, self.min_lr, self.threshold = factor, patience, min_lr, threshold
        self.best = math.inf
        self.num_bad = 0

    def step(self, metric: float) -> bool:
        """Returns True when ``metric`` is a new best."""
        improved = metric < self.best * (1.0 - self.threshold)
        if improved:
            self.best, self.num_bad = metric, 0
        else:
            self.num_bad += 1
            if self.num_bad > self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.num_bad = 0
        return improved


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    lr: float = 0.0
    best_val: float = math.inf
    num_bad: int = 0
    adam_t: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["best_val"] = None if math.isinf(self.best_val) else self.best_val
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainState":
        d = dict(d)
        d["best_val"] = math.inf if d.get("best_val") is None else d["best_val"]
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainResult:
    output_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    history: list
    model: VisionLanguageModel


def epoch_order(seed: int, epoch: int, n: int):
    """Shuffle for one epoch, derived from (seed, epoch) so resume can rebuild it."""
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n), rng.bit_generator.state


def write_meta(path: Path, cfg: RunConfig, **extra) -> None:
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def save_model(path: Path, model: VisionLanguageModel, cfg: RunConfig, **extra) -> None:
    nx.save_checkpoint(path, model.state_arrays())
    write_meta(path, cfg, **extra)


def load_model(cfg: RunConfig, checkpoint) -> VisionLanguageModel:
    model = VisionLanguageModel(cfg.model, seed=cfg.seed)
    try:
        model.load_arrays(nx.load_checkpoint(checkpoint))
    except (OSError, ValueError) as exc:
        raise DataError(f"incompatible checkpoint {checkpoint}: {exc}") from exc
    return model


def _batches(items, order, size):
    return [[items[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def evaluate_loss(model, examples, counts, sup, batch_size) -> float:
    if not examples:
        return math.nan
    total, n = 0.0, 0
    with nx.no_grad():
        for batch in _batches(examples, np.arange(len(examples)), batch_size):
            _, parts = batch_loss(model, batch, counts, sup)
            total += parts["total"] * len(batch)
            n += len(batch)
    return total / n


def pretrain(cfg: RunConfig, resume: str | Path | None = None, max_steps: int | None = None,
             corpus=None) -> TrainResult:
    """Train with AdamW + plateau schedule; writes checkpoints and a JSONL loss log."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    corpus = load_training_corpus(cfg) if corpus is None else corpus
    train_studies, val_studies = split_corpus(corpus, cfg.data.val_fraction)
    train = prepare_examples(train_studies, cfg.model, cfg.supervision)
    val = prepare_examples(val_studies, cfg.model, cfg.supervision)
    if not train:
        raise DataError("training split is empty")
    counts = class_counts(np.stack([s.labels.binarized for s in train_studies]))

    model = VisionLanguageModel(cfg.model, seed=cfg.seed)
    opt_cfg = cfg.optimizer
    opt = AdamW(model.params, opt_cfg.lr, (opt_cfg.beta1, opt_cfg.beta2), opt_cfg.eps,
                opt_cfg.weight_decay)
    sched = ReduceLROnPlateau(opt, opt_cfg.factor, opt_cfg.patience, opt_cfg.min_lr)
    state = TrainState(lr=opt.lr)
    log_path = out / "train_log.jsonl"
    best_path, last_path = out / "best.cgz", out / "last.cgz"

    if resume is not None:
        resume = Path(resume)
        meta = json.loads(resume.read_text())
        if meta.get("config_hash") != chash:
            raise DataError("resume state was produced by a different configuration")
        state = TrainState.from_dict(meta["state"])
        arrays = nx.load_checkpoint(resume.with_suffix(".cgz"))
        model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        opt.load_state_arrays(arrays, state.adam_t)
        opt.lr = state.lr
        sched.best, sched.num_bad = state.best_val, state.num_bad
        if log_path.exists():
            kept = [l for l in log_path.read_text().splitlines()
                    if json.loads(l).get("step", 0) <= state.step]
            log_path.write_text("".join(l + "\n" for l in kept))
    else:
        save_model(out / "init.cgz", model, cfg, step=0)
        log_path.write_text("")

    history = []
    steps_per_epoch = math.ceil(len(train) / opt_cfg.batch_size)
    stopped = False
    with open(log_path, "a", encoding="utf-8") as logf:
        while state.epoch < opt_cfg.epochs and not stopped:
            order, rng_state = epoch_order(cfg.seed, state.epoch, len(train))
            state.rng_state = rng_state
            batches = _batches(train, order, opt_cfg.batch_size)
            while state.step_in_epoch < steps_per_epoch:
                if max_steps is not None and state.step >= max_steps:
                    stopped = True
                    break
                model.zero_grad()
                loss, parts = batch_loss(model, batches[state.step_in_epoch],
                                         counts, cfg.supervision)
                loss.backward()
                opt.step()
                state.step += 1
                state.step_in_epoch += 1
                record = {"kind": "step", "step": state.step, "epoch": state.epoch,
                          "lr": opt.lr, **parts, "config_hash": chash, "seed": cfg.seed}
                history.append(record)
                logf.write(json.dumps(record, sort_keys=True) + "\n")
            if stopped:
                break
            val_loss = evaluate_loss(model, val or train, counts, cfg.supervision,
                                     opt_cfg.batch_size)
            if sched.step(val_loss):
                save_model(best_path, model, cfg, step=state.step, val_loss=val_loss)
            record = {"kind": "epoch", "step": state.step, "epoch": state.epoch,
                      "val_loss": val_loss, "lr": opt.lr, "config_hash": chash,
                      "seed": cfg.seed}
            history.append(record)
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d val_loss %.4f lr %.2e", state.epoch, val_loss, opt.lr)
            state.epoch += 1
            state.step_in_epoch = 0

    state.lr, state.best_val, state.num_bad, state.adam_t = opt.lr, sched.best, sched.num_bad, opt.t
    save_model(last_path, model, cfg, step=state.step)
    nx.save_checkpoint(out / "state.cgz", {**model.state_arrays(), **opt.state_arrays()})
    (out / "state.json").write_text(json.dumps(
        {"config_hash": chash, "seed": cfg.seed, "state": state.to_dict()},
        sort_keys=True, indent=2))
    if not best_path.exists():
        best_path = out / "init.cgz"
    return TrainResult(out, best_path, last_path, history, model)


# ---------------------------------------------------------------------------
# evaluation entry points
# ---------------------------------------------------------------------------

def _query_image(study):
    for im in study.images:
        if im.view != ViewPosition.LATERAL:
            return im
    return study.images[0]


def embed_images(model, studies, use_context=True) -> np.ndarray:
    out = []
    with nx.no_grad():
        for k in range(0, len(studies), 32):
            chunk = studies[k:k + 32]
            ims = [_query_image(s) for s in chunk]
            _, _, _, xg = model.encode_vision(
                np.stack([im.as_float() for im in ims]), [im.view for im in ims],
                [s.context if use_context else None for s in chunk])
            out.append(xg.data)
    return np.concatenate(out)


def embed_texts(model, texts, role=RoleToken.FINDINGS) -> np.ndarray:
    with nx.no_grad():
        return np.concatenate([model.text.embed_global(texts[k:k + 32], role).data
                               for k in range(0, len(texts), 32)])


def eval_retrieval(cfg: RunConfig, checkpoint, recall="hit", clamp=False, ks=(1, 5, 10),
                   recall_ks=(5, 10), emit_plots: str | Path | None = None) -> MetricReport:
    model = load_model(cfg, checkpoint)
    n_classes = cfg.data.synthetic.n_classes
    try:
        split = build_balanced_split(load_eval_corpus(cfg), n_classes, cfg.data.per_class,
                                     seed=cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    studies = [s for s, _ in split]
    index = RetrievalIndex(embed_images(model, studies, cfg.supervision.use_context),
                           embed_texts(model, [s.report for s in studies]),
                           np.array([c for _, c in split]))
    p_at, r_at = {}, {}
    for k in sorted(set(ks) | set(recall_ks)):
        try:
            p, r = precision_recall_at_k(index, k, recall=recall, clamp=clamp)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if k in ks:
            p_at[k] = p
        if k in recall_ks:
            r_at[k] = r
    report = MetricReport(p_at_k=p_at, r_at_k=r_at, seed=cfg.seed,
                          config_hash=cfg.config_hash(),
                          extra={"task": "retrieval", "recall": recall, "n": len(index)})
    if emit_plots is not None:
        plot_retrieval_svg(report, emit_plots)
    return report


def default_prompts(n_classes: int) -> dict:
    """One prompt per class: the class's report-token band."""
    return {CLASS_OBSERVATIONS[c]: [list(report_band(c))] for c in range(n_classes)}


def load_prompts(path) -> dict:
    import yaml
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise DataError(f"cannot read prompt file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError("prompt file must map class names to token lists")
    return data


def eval_zeroshot(cfg: RunConfig, checkpoint, prompts: dict | str | Path | None = None) -> MetricReport:
    n_classes = cfg.data.synthetic.n_classes
    if prompts is None:
        prompts = default_prompts(n_classes) if cfg.data.prompt_file is None else cfg.data.prompt_file
    if not isinstance(prompts, dict):
        prompts = load_prompts(prompts)
    model = load_model(cfg, checkpoint)
    prototypes = []
    for c in range(n_classes):
        name = CLASS_OBSERVATIONS[c]
        token_lists = prompts.get(name, prompts.get(c, prompts.get(str(c))))
        if not token_lists:
            raise DataError(f"no prompts for class {name!r}")
        prototypes.append(build_prototype(c, embed_texts(model, [list(t) for t in token_lists])))
    try:
        split = build_balanced_split(load_eval_corpus(cfg), n_classes, cfg.data.per_class,
                                     seed=cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    studies = [s for s, _ in split]
    gold = np.array([c for _, c in split])
    scores, pred = zero_shot_classify(embed_images(model, studies, cfg.supervision.use_context),
                                      prototypes)
    aucs = {CLASS_OBSERVATIONS[c]: auroc(scores[:, c], gold == c) for c in range(n_classes)}
    onehot = np.eye(n_classes, dtype=bool)
    micro, macro = f1_scores(onehot[pred], onehot[gold])
    return MetricReport(auroc=aucs, f1_micro={"zeroshot": micro}, f1_macro={"zeroshot": macro},
                        seed=cfg.seed, config_hash=cfg.config_hash(),
                        extra={"task": "zeroshot", "accuracy": float((pred == gold).mean()),
                               "prompts_per_class": [p.prompt_count for p in prototypes]})


def gaze_export(cfg: RunConfig, out_dir, sessions=None) -> list:
    """Write one prior JSON (and per-segment PGM heatmaps) per gaze session."""
    out_dir = Path(out_dir)
    if sessions is None:
        sessions = [s.gaze for s in load_training_corpus(cfg) if s.gaze is not None]
    if not sessions:
        raise DataError("no gaze sessions")
    out_dir.mkdir(parents=True, exist_ok=True)
    params = gaze_params(cfg.model, cfg.supervision)
    chash, written = cfg.config_hash(), []
    for session in sessions:
        try:
            prior = build_gaze_prior(session, params)
        except EmptyPrior as exc:
            log.warning("skipping %s: %s", session.study_id, exc)
            continue
        path = out_dir / f"{session.study_id}.json"
        path.write_text(json.dumps({
            "study_id": session.study_id, "image_id": session.image_id,
            "config_hash": chash, "seed": cfg.seed,
            "patch_grid": list(params.patch_grid), "rho": params.rho,
            "kept_segments": prior.kept, "dropped_segments": prior.dropped,
            "rows": prior.matrix.tolist()}, sort_keys=True, indent=2))
        for seg, heat in zip(prior.kept, prior.heatmaps):
            write_pgm(out_dir / f"{session.study_id}_seg{seg}.pgm", heat,
                      comment=f"config_hash={chash} seed={cfg.seed}")
        written.append(path)
    if not written:
        raise DataError("no gaze sessions produced a nonempty prior")
    return written
