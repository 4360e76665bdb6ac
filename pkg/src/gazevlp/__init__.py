"""Gaze-guided, context-adaptive vision-language pretraining on numpy."""
from .encoders import ModelConfig, VisionLanguageModel, ViewPosition, RoleToken
from .gaze import Fixation, TranscriptSegment, GazeSession, GazePrior, GazeParams, build_gaze_prior
from .supervision import (SupervisionConfig, build_positive_structure, contrastive_loss,
                          class_balanced_focal, js_divergence, gaze_loss, pretrain_loss,
                          binarize_labels)
from .evaluation import (RetrievalIndex, precision_recall_at_k, auroc, f1_scores,
                         build_prototype, zero_shot_classify, MetricReport)
from .synthcorpus import SyntheticSpec, Study, generate, read_corpus, write_corpus
from .config import RunConfig, load_config, ConfigError, DataError

__version__ = "0.1.0"
