"""Prototype-set cross-modal retrieval with confidence-weighted re-ranking."""

from .confidence import Transform, confidence, similarity_vector
from .core import (
    Corpus,
    InvalidK,
    MismatchedK,
    Modality,
    PrototypeSet,
    ProtoconfError,
    RankedList,
    WeightVector,
    ZeroNormVector,
    cosine,
)
from .evaluation import aggregate, precision_at_k, recall_at_k
from .losses import (
    Batch,
    DiversityMode,
    LossConfig,
    conf_loss,
    div_loss,
    grad_theta,
    sim_loss,
    total_loss,
    train,
)
from .prototypes import (
    PatchGrid,
    SentenceSet,
    build_image_prototypes,
    build_report_prototypes,
    partition_axis,
)
from .ranking import CandidatePool, RerankScore, global_embedding, initial_rank, rerank

__version__ = "0.1.0"
