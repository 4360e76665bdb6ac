"""Deterministic synthetic chest-film-like corpus with class motifs, reports,
optional clinical context and optional gaze sessions."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .encoders import ViewPosition
from .gaze import Fixation, GazeSession, TranscriptSegment
from .supervision import OBSERVATIONS, DiseaseLabels, LabelState

CLASS_OBSERVATIONS = ("Atelectasis", "Cardiomegaly", "Consolidation", "Edema",
                      "Pleural Effusion", "Pneumothorax", "Lung Opacity")
BAND = 16
FILLER = range(0, BAND)
MOTIF_SIZE = 12
# top-left corners (row, col) on a 32 x 32 canvas; scaled for other sizes
_REGIONS = ((2, 2), (2, 18), (18, 2), (18, 18), (10, 10), (2, 10), (18, 10))


class CorpusFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def report_band(c: int) -> range:
    return range(BAND * (c + 1), BAND * (c + 2))


def context_band(c: int) -> range:
    return range(128 + BAND * c, 128 + BAND * (c + 1))


@dataclass
class SyntheticSpec:
    n_studies: int = 500
    n_classes: int = 5
    multi_view_fraction: float = 0.3
    context_fraction: float = 0.97
    gaze_fraction: float = 0.01
    image_size: int = 32
    noise_level: float = 0.1
    seed: int = 0
    negative_rate: float = 0.15
    uncertain_rate: float = 0.05
    ambiguous_rate: float = 0.02

    def __post_init__(self):
        for name in ("multi_view_fraction", "context_fraction", "gaze_fraction",
                     "negative_rate", "uncertain_rate", "ambiguous_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 2 <= self.n_classes <= len(CLASS_OBSERVATIONS):
            raise ValueError(f"n_classes must lie in [2, {len(CLASS_OBSERVATIONS)}]")
        if self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudyImage:
    pixels: np.ndarray          # H x W uint8
    view: ViewPosition
    image_id: str = ""

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


@dataclass
class Study:
    study_id: str
    images: list
    report: list
    labels: DiseaseLabels
    indication: list | None = None
    history: list | None = None
    gaze: GazeSession | None = None

    @property
    def has_context(self) -> bool:
        return self.indication is not None

    @property
    def context(self):
        return None if self.indication is None else (self.indication, self.history or [])

    def __eq__(self, other):
        if not isinstance(other, Study):
            return NotImplemented
        return study_to_record(self) == study_to_record(other)


# ---------------------------------------------------------------------------
# geometry of class motifs
# ---------------------------------------------------------------------------

def motif_box(c: int, image_size: int = 32):
    """(row0, col0, size) of the class motif region in pixels."""
    scale = image_size // 32
    r, col = _REGIONS[c]
    return r * scale, col * scale, MOTIF_SIZE * scale


def motif_pattern(c: int, size: int) -> np.ndarray:
    """Binary size x size pattern unique to class ``c``."""
    yy, xx = np.mgrid[0:size, 0:size]
    half = (size - 1) / 2.0
    rr = np.hypot(yy - half, xx - half)
    s = max(size // 12, 1)
    patterns = [
        (yy // (2 * s)) % 2 == 0,                    # horizontal stripes
        (xx // (2 * s)) % 2 == 0,                    # vertical stripes
        ((yy // (2 * s)) + (xx // (2 * s))) % 2 == 0,  # checkerboard
        rr <= size * 0.4,                            # disk
        (rr >= size * 0.25) & (rr <= size * 0.45),   # ring
        ((yy + xx) // (2 * s)) % 2 == 0,             # diagonal stripes
        (np.abs(yy - half) <= s) | (np.abs(xx - half) <= s),  # cross
    ]
    return patterns[c].astype(np.float64)


def class_template(c: int, image_size: int = 32) -> np.ndarray:
    t = np.zeros((image_size, image_size))
    r, col, size = motif_box(c, image_size)
    t[r:r + size, col:col + size] = motif_pattern(c, size)
    return t


def render_image(c: int, image_size: int, noise: float, rng) -> np.ndarray:
    rows = np.linspace(0.0, 1.0, image_size)[:, None]
    img = 0.15 + 0.1 * rows * np.ones((1, image_size))
    img = img + 0.65 * class_template(c, image_size)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def nearest_motif(image: np.ndarray, n_classes: int) -> int:
    """Template-matching oracle: class whose motif contrast is largest."""
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[0]
    scores = []
    for c in range(n_classes):
        r, col, s = motif_box(c, size)
        patch = img[r:r + s, col:col + s]
        pat = motif_pattern(c, s).astype(bool)
        scores.append(patch[pat].mean() - patch[~pat].mean())
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _labels(c: int, spec: SyntheticSpec, rng) -> DiseaseLabels:
    states = [LabelState.BLANK] * len(OBSERVATIONS)
    for i in range(1, len(OBSERVATIONS)):
        u = rng.random()
        if u < spec.negative_rate:
            states[i] = LabelState.NEGATIVE
        elif u < spec.negative_rate + spec.uncertain_rate:
            states[i] = LabelState.UNCERTAIN
    class_idx = [OBSERVATIONS.index(o) for o in CLASS_OBSERVATIONS[:spec.n_classes]]
    for j, idx in enumerate(class_idx):
        if j != c and states[idx] == LabelState.UNCERTAIN and rng.random() >= spec.ambiguous_rate:
            states[idx] = LabelState.BLANK
    states[class_idx[c]] = LabelState.POSITIVE if rng.random() > 0.1 else LabelState.UNCERTAIN
    states[0] = LabelState.NEGATIVE
    return DiseaseLabels(states=states, no_finding=False)


def _tokens(rng, band, n, filler_frac, noise, n_classes):
    out = []
    for _ in range(n):
        if rng.random() < noise:
            out.append(int(rng.choice(report_band(int(rng.integers(n_classes))))))
        elif rng.random() < filler_frac:
            out.append(int(rng.choice(FILLER)))
        else:
            out.append(int(rng.choice(band)))
    return out


def _gaze(c: int, study_id: str, report: list, spec: SyntheticSpec, rng) -> GazeSession:
    r, col, size = motif_box(c, spec.image_size)
    n = int(rng.integers(4, 9))
    fixations, t = [], 0.0
    for _ in range(n):
        if rng.random() < spec.noise_level:
            x, y = rng.random(), rng.random()
        else:
            x = (col + rng.random() * size) / spec.image_size
            y = (r + rng.random() * size) / spec.image_size
        dur = float(rng.uniform(0.05, 0.6))
        fixations.append(Fixation(float(x), float(y), t, t + dur))
        t += dur + 0.03
    half = len(report) // 2
    mid = fixations[n // 2].t_start
    segments = [
        TranscriptSegment(tuple(report[:half]), 0.0, mid, "sentence"),
        TranscriptSegment(tuple(report[half:]), mid, t, "sentence"),
        TranscriptSegment(tuple(report), 0.0, t, "paragraph"),
    ]
    return GazeSession(fixations, segments, study_id, f"{study_id}_0")


def generate_study(i: int, spec: SyntheticSpec) -> Study:
    rng = np.random.default_rng([spec.seed, i])
    c = i % spec.n_classes if i < spec.n_classes else int(rng.integers(spec.n_classes))
    study_id = f"s{spec.seed:04d}_{i:06d}"
    if rng.random() < spec.multi_view_fraction:
        views = [ViewPosition.PA, ViewPosition.LATERAL]
        if rng.random() < 0.3:
            views.append(ViewPosition.AP)
    else:
        views = [ViewPosition(int(rng.choice([0, 1, 3], p=[0.5, 0.3, 0.2])))]
    images = [StudyImage(render_image(c, spec.image_size, spec.noise_level, rng), v,
                         f"{study_id}_{k}") for k, v in enumerate(views)]
    report = _tokens(rng, report_band(c), 8, 0.25, spec.noise_level, spec.n_classes)
    indication = history = None
    if rng.random() < spec.context_fraction:
        indication = _tokens(rng, context_band(c), 3, 0.5, 0.0, spec.n_classes)
        history = _tokens(rng, context_band(c), 2, 0.5, 0.0, spec.n_classes)
    gaze = _gaze(c, study_id, report, spec, rng) if rng.random() < spec.gaze_fraction else None
    return Study(study_id, images, report, _labels(c, spec, rng), indication, history, gaze)


def generate(spec: SyntheticSpec) -> list:
    return [generate_study(i, spec) for i in range(spec.n_studies)]


def primary_classes(study: Study, n_classes: int) -> list:
    """Indices of class observations that binarize to positive."""
    b = study.labels.binarized
    return [j for j, obs in enumerate(CLASS_OBSERVATIONS[:n_classes])
            if b[OBSERVATIONS.index(obs)] == 1]


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def study_to_record(study: Study) -> dict:
    context = None
    if study.indication is not None:
        context = list(study.indication) + list(study.history or [])
    return {
        "study_id": study.study_id,
        "images": [{"pixels": base64.b64encode(im.pixels.tobytes()).decode("ascii"),
                    "shape": list(im.pixels.shape), "view": im.view.name,
                    "image_id": im.image_id} for im in study.images],
        "report": list(study.report),
        "context": context,
        "context_split": None if context is None else len(study.indication),
        "labels": study.labels.to_dict(),
        "gaze": None if study.gaze is None else {
            "fixations": [f.to_dict() for f in study.gaze.fixations],
            "segments": [s.to_dict() for s in study.gaze.segments]},
    }


def study_from_record(rec: dict) -> Study:
    images = []
    for im in rec["images"]:
        raw = np.frombuffer(base64.b64decode(im["pixels"]), dtype=np.uint8)
        shape = im.get("shape")
        if shape is None:
            side = int(round(np.sqrt(raw.size)))
            shape = (side, side)
        images.append(StudyImage(raw.reshape(shape).copy(), ViewPosition.parse(im.get("view")),
                                 im.get("image_id", "")))
    context = rec.get("context")
    indication = history = None
    if context is not None:
        split = rec.get("context_split")
        split = len(context) if split is None else int(split)
        indication, history = [int(t) for t in context[:split]], [int(t) for t in context[split:]]
    gaze = None
    if rec.get("gaze") is not None:
        g = dict(rec["gaze"])
        g.setdefault("study_id", rec["study_id"])
        g.setdefault("image_id", images[0].image_id if images else "")
        gaze = GazeSession.from_dict(g)
    return Study(str(rec["study_id"]), images, [int(t) for t in rec["report"]],
                 DiseaseLabels.from_dict(rec["labels"]), indication, history, gaze)


def write_corpus(corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for study in corpus:
            fh.write(json.dumps(study_to_record(study), sort_keys=True))
            fh.write("\n")


def read_corpus(path) -> list:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                corpus.append(study_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(lineno, f"malformed record ({exc})") from exc
    return corpus


def read_gaze_sessions(path) -> list:
    """Standalone gaze-session JSONL (one session per line)."""
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sessions.append(GazeSession.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(lineno, f"malformed gaze session ({exc})") from exc
    return sessions
