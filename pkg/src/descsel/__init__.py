"""Task-adaptive local-descriptor selection for few-shot classification.

The package builds few-shot episodes over grids of local descriptors,
prunes task-irrelevant descriptors on both the support and query side with
learned per-descriptor thresholds, and scores query images by gated sums of
nearest-neighbor cosine similarities.  Everything runs on a small built-in
reverse-mode autodiff engine over numpy, with a compiled top-k kernel and a
pure-numpy fallback.
"""

from .descriptors import (ClassPool, DescriptorSet, Episode, LabeledSample,
                          build_class_pool, flatten_feature_map)
from .episodic import (Dataset, EpisodeSpec, EvalReport, OptimizerConfig,
                       Pipeline, ablate, derive_rng, evaluate, sample_episode,
                       train)
from .errors import (ContractViolationError, DataFormatError,
                     InvalidInputError, TrainingDivergedError)
from .scoring import EpisodeScores, episode_loss, episode_score, support_auxiliary_loss
from .selection import (AttentionMap, SelectionModel, Strategy, SupportSubset,
                        discriminative_score, gate, knn, parse_strategy,
                        query_descriptor_scores, select_support_subset,
                        support_class_similarity, support_threshold)
from .synthetic import SyntheticSpec, generate_synthetic, synthetic_samples

__version__ = "0.1.0"

__all__ = [
    "AttentionMap", "ClassPool", "ContractViolationError", "DataFormatError",
    "Dataset", "DescriptorSet", "Episode", "EpisodeScores", "EpisodeSpec",
    "EvalReport", "InvalidInputError", "LabeledSample", "OptimizerConfig",
    "Pipeline", "SelectionModel", "Strategy", "SupportSubset", "SyntheticSpec",
    "TrainingDivergedError", "ablate", "build_class_pool", "derive_rng",
    "discriminative_score", "episode_loss", "episode_score", "evaluate",
    "flatten_feature_map", "gate", "generate_synthetic", "knn",
    "parse_strategy", "query_descriptor_scores", "sample_episode",
    "select_support_subset", "support_auxiliary_loss",
    "support_class_similarity", "support_threshold", "synthetic_samples",
    "train", "__version__",
]
