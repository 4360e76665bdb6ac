"""
From fixations to patch priors
==============================

A reader looks at an image while dictating. Each dictated segment gets a
probability distribution over image patches built from the fixations that
overlap it in time.
"""
import numpy as np

from gazevlp.gaze import (Fixation, GazeParams, GazeSession, TranscriptSegment, build_gaze_prior,
                          render_heatmap, pool_to_patches)

# three fixations: two on the upper left, one lower right
fixations = [
    Fixation(0.20, 0.25, 0.00, 0.40),
    Fixation(0.30, 0.20, 0.45, 0.70),
    Fixation(0.80, 0.75, 1.10, 1.60),
    Fixation(0.50, 0.50, 1.65, 1.70),   # too short, filtered out at 0.1 s
]
segments = [
    TranscriptSegment((17, 18, 19), 0.0, 0.8),            # "sentence" about the upper left
    TranscriptSegment((33, 34), 1.0, 1.7),                # about the lower right
    TranscriptSegment((17, 18, 19, 33, 34), 0.0, 1.7, "paragraph"),
]
session = GazeSession(fixations, segments, study_id="demo", image_id="demo_0")

params = GazeParams(sigma=0.05, rho=0.25, radius=1.5, heatmap_grid=(32, 32),
                    input_size=(32, 32), patch_grid=(4, 4))
prior = build_gaze_prior(session, params)

np.set_printoptions(precision=3, suppress=True)
for row, seg in zip(prior.matrix, prior.kept):
    print(f"segment {seg} ({segments[seg].level}):")
    print(row.reshape(4, 4))

# the raw heatmap before pooling, for comparison
heat = render_heatmap(fixations[:3], (32, 32), 0.05)
print("pooled heatmap, no masking or sharpening:")
print((pool_to_patches(heat, (4, 4)) / pool_to_patches(heat, (4, 4)).sum()).reshape(4, 4))

# sharpening keeps ceil(rho * nnz) patches; rho=1 keeps every masked patch
dense = build_gaze_prior(session, GazeParams(rho=1.0))
print("nonzeros rho=0.25:", np.count_nonzero(prior.matrix, axis=1),
      " rho=1:", np.count_nonzero(dense.matrix, axis=1))
