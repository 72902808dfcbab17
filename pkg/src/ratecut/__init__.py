"""Joint structured-embedding and clustering toolkit.

Learns unit-norm embeddings whose classes span near-orthogonal subspaces,
together with soft cluster memberships, by minimizing a coding-rate loss
guided by a differentiable relaxed normalized cut on a sparse cosine
affinity graph.
"""

from ratecut.coding_rate import EmbeddingBatch, Membership, rate_R, rate_Rc, rate_reduction_loss
from ratecut.graph import AffinityGraph, build_affinity, ncut_loss, spectral_labels
from ratecut.metrics import clustering_accuracy, hungarian, nmi
from ratecut.network import Model, load_checkpoint, save_checkpoint
from ratecut.trainer import TrainConfig, TrainLog, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph",
    "EmbeddingBatch",
    "Membership",
    "Model",
    "TrainConfig",
    "TrainLog",
    "build_affinity",
    "clustering_accuracy",
    "evaluate",
    "hungarian",
    "load_checkpoint",
    "ncut_loss",
    "nmi",
    "rate_R",
    "rate_Rc",
    "rate_reduction_loss",
    "save_checkpoint",
    "spectral_labels",
    "train",
]
