"""Fixation logs and transcript timing -> per-segment patch probability priors.

Pipeline per transcript segment: pick the fixations that overlap the segment
window, render a duration-weighted Gaussian heatmap, resize it to the encoder
input resolution, mean-pool to patches, zero patches far from any fixation,
keep the top-``rho`` fraction of nonzero patches and normalize to sum 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

# Duration weights are snapped to this grid (relative to the longest
# fixation) so that rescaling every duration leaves the prior bit-identical.
_WEIGHT_GRID = 2.0 ** 20


class EmptyPrior(ValueError):
    """A heatmap row with no positive mass; it cannot become a distribution."""


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float
    t_start: float
    t_end: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"fixation position outside [0,1]^2: ({self.x}, {self.y})")
        if not self.t_end > self.t_start:
            raise ValueError(f"fixation must end after it starts: {self.t_start}..{self.t_end}")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "t_start": self.t_start, "t_end": self.t_end}


@dataclass(frozen=True)
class TranscriptSegment:
    text: tuple
    t_start: float
    t_end: float
    level: str = "sentence"

    def __post_init__(self):
        if self.level not in ("sentence", "paragraph"):
            raise ValueError(f"unknown segment level {self.level!r}")
        if self.t_end < self.t_start:
            raise ValueError("segment ends before it starts")
        object.__setattr__(self, "text", tuple(int(t) for t in self.text))

    def to_dict(self) -> dict:
        return {"text": list(self.text), "t_start": self.t_start, "t_end": self.t_end,
                "level": self.level}


@dataclass
class GazeSession:
    fixations: list
    segments: list
    study_id: str = ""
    image_id: str = ""

    def to_dict(self) -> dict:
        return {"study_id": self.study_id, "image_id": self.image_id,
                "fixations": [f.to_dict() for f in self.fixations],
                "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "GazeSession":
        return cls(
            fixations=[Fixation(float(f["x"]), float(f["y"]), float(f["t_start"]),
                                float(f["t_end"])) for f in d["fixations"]],
            segments=[TranscriptSegment(tuple(s["text"]), float(s["t_start"]),
                                        float(s["t_end"]), s.get("level", "sentence"))
                      for s in d["segments"]],
            study_id=str(d.get("study_id", "")),
            image_id=str(d.get("image_id", "")),
        )


@dataclass
class GazePrior:
    """Rows are segment distributions over patches; ``kept`` maps rows to segments."""

    matrix: np.ndarray
    mask: np.ndarray
    kept: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    heatmaps: list = field(default_factory=list)

    def __post_init__(self):
        sums = self.matrix.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= 1e-9):
            raise ValueError("gaze prior rows must sum to 1")
        if np.any(self.matrix[~self.mask] != 0):
            raise ValueError("gaze prior has mass outside its mask")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GazeParams:
    sigma: float = 0.05          # fraction of image width
    rho: float = 0.25
    radius: float = 1.5          # patch widths
    min_duration: float = 0.1    # seconds
    heatmap_grid: tuple = (32, 32)
    input_size: tuple = (32, 32)
    patch_grid: tuple = (4, 4)


def filter_fixations(raw, min_duration: float) -> list:
    return [f for f in raw if f.duration >= min_duration]


def duration_weights(fixations) -> np.ndarray:
    """Relative durations (longest = 1) on a fixed dyadic grid."""
    if not fixations:
        return np.zeros(0)
    d = np.array([f.duration for f in fixations])
    return np.round(d / d.max() * _WEIGHT_GRID) / _WEIGHT_GRID


def render_heatmap(fixations, grid, sigma: float, weights=None) -> np.ndarray:
    """Sum of isotropic Gaussian densities evaluated at cell centers.

    Positions and ``sigma`` are in units of the image width; amplitudes are
    the fixation durations unless explicit ``weights`` are given.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = grid
    if h < 1 or w < 1:
        raise ValueError("grid must be at least 1x1")
    out = np.zeros((h, w))
    if not fixations:
        return out
    if weights is None:
        weights = [f.duration for f in fixations]
    aspect = h / w  # image height in width units for square pixels
    ys = (np.arange(h) + 0.5) / h * aspect
    xs = (np.arange(w) + 0.5) / w
    norm = 1.0 / (2.0 * np.pi * sigma * sigma)
    for fix, amp in zip(fixations, weights):
        gy = np.exp(-((ys - fix.y * aspect) ** 2) / (2 * sigma * sigma))
        gx = np.exp(-((xs - fix.x) ** 2) / (2 * sigma * sigma))
        out += amp * norm * np.outer(gy, gx)
    return out


def resize_bilinear(heatmap: np.ndarray, size) -> np.ndarray:
    if heatmap.shape == tuple(size):
        return heatmap
    factors = (size[0] / heatmap.shape[0], size[1] / heatmap.shape[1])
    out = zoom(heatmap, factors, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, None)


def pool_to_patches(heatmap: np.ndarray, patches) -> np.ndarray:
    """Mean-pool an H x W map onto an h x w patch grid, row-major."""
    H, W = heatmap.shape
    h, w = patches
    if H % h or W % w:
        raise ValueError(f"map {H}x{W} is not divisible into {h}x{w} patches")
    return heatmap.reshape(h, H // h, w, W // w).mean(axis=(1, 3)).reshape(-1)


def mask_fixation_regions(patch_map: np.ndarray, fixations, patches, radius: float) -> np.ndarray:
    """Zero patches whose center is farther than ``radius`` from every fixation.

    Distances are in patch widths. The patch containing a fixation always
    survives, so ``radius=0`` keeps exactly the fixated patches.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    h, w = patches
    keep = np.zeros(h * w, dtype=bool)
    rows, cols = np.divmod(np.arange(h * w), w)
    cy, cx = rows + 0.5, cols + 0.5
    for f in fixations:
        fy, fx = f.y * h, f.x * w
        keep |= (cx - fx) ** 2 + (cy - fy) ** 2 <= radius * radius
        keep[min(int(fy), h - 1) * w + min(int(fx), w - 1)] = True
    return np.where(keep, patch_map, 0.0)


def retained_count(rho: float, nnz: int) -> int:
    # rounding guards against products like 0.1 * 30 = 3.0000000000000004
    return int(math.ceil(round(rho * nnz, 9)))


def top_rho_sharpen(patch_map: np.ndarray, rho: float) -> np.ndarray:
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    nz = np.flatnonzero(patch_map)
    if nz.size == 0:
        raise EmptyPrior("cannot sharpen an all-zero map")
    k = retained_count(rho, nz.size)
    # stable sort on negated values: ties go to the lower patch index
    order = nz[np.argsort(-patch_map[nz], kind="stable")]
    out = np.zeros_like(patch_map)
    out[order[:k]] = patch_map[order[:k]]
    return out


def normalize_prior(patch_map: np.ndarray) -> np.ndarray:
    total = patch_map.sum()
    if not total > 0:
        raise EmptyPrior("prior has no positive mass")
    return patch_map / total


def segment_fixations(fixations, segment: TranscriptSegment) -> list:
    if segment.level == "paragraph":
        return list(fixations)
    return [f for f in fixations if f.t_start <= segment.t_end and f.t_end >= segment.t_start]


def segment_row(fixations, params: GazeParams):
    """Full pipeline for one segment's fixations -> (prior row, raw heatmap)."""
    weights = duration_weights(fixations)
    heat = render_heatmap(fixations, params.heatmap_grid, params.sigma, weights)
    heat = resize_bilinear(heat, params.input_size)
    pooled = pool_to_patches(heat, params.patch_grid)
    masked = mask_fixation_regions(pooled, fixations, params.patch_grid, params.radius)
    return normalize_prior(top_rho_sharpen(masked, params.rho)), heat


def build_gaze_prior(session: GazeSession, params: GazeParams = GazeParams()) -> GazePrior:
    if not session.segments:
        raise ValueError("gaze session has no transcript segments")
    stable = filter_fixations(session.fixations, params.min_duration)
    rows, kept, dropped, heatmaps = [], [], [], []
    for i, seg in enumerate(session.segments):
        try:
            row, heat = segment_row(segment_fixations(stable, seg), params)
        except EmptyPrior:
            dropped.append(i)
            continue
        rows.append(row)
        kept.append(i)
        heatmaps.append(heat)
    if not rows:
        raise EmptyPrior(f"every segment of session {session.study_id!r} is empty")
    matrix = np.stack(rows)
    return GazePrior(matrix=matrix, mask=matrix > 0, kept=kept, dropped=dropped,
                     heatmaps=heatmaps)


def write_pgm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Binary 8-bit PGM, scaled so the maximum maps to 255."""
    peak = image.max()
    scaled = np.zeros(image.shape) if peak <= 0 else image / peak
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        header = "P5\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n255\n"
        fh.write(header.encode("ascii"))
        fh.write(pixels.tobytes())
