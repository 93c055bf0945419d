"""specstream: dynamic-graph learning on temporal event streams.

Pipeline: randomized-SVD spectral encoding of event features, per-node memory
with fixed-size window batching, framelet graph convolution with per-node
scale parameters inherited across batches, trained end-to-end for link
prediction and node classification.
"""
from __future__ import annotations

__version__ = "0.1.0"

from ._kernels import BACKEND
from .eventstream import (
    Event,
    EventLog,
    ParseError,
    SplitSpec,
    chronological_split,
    parse_jodie_csv,
    to_csv,
)
from .linalg import (
    RankDeficiencyError,
    RankSelection,
    SvdResult,
    qr_gram_schmidt,
    randomized_power_svd,
    select_rank,
    spectral_norm,
)
from .spectral_attention import (
    SpectralEncoding,
    attention_svd_gap,
    encode_rows,
    linear_attention,
    load_encoding,
    save_encoding,
    spectral_encode,
)
from .memory_window import (
    BatchGraph,
    EncodedStream,
    MemoryState,
    MessageFn,
    advance_memory,
    build_batches,
    encode_log,
    init_message_fn,
    make_batch,
    update_memory,
)
from .framelet import (
    FilterBank,
    FrameletCoeffs,
    GraphLaplacian,
    ThetaStore,
    framelet_decompose,
    framelet_reconstruct,
    haar_filter_bank,
    load_theta,
    normalized_laplacian,
    save_theta,
    theta_pull,
    theta_push,
    ufgconv_backward,
    ufgconv_forward,
)
from .model_train import (
    EvalReport,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    precision,
    roc_auc,
    save_checkpoint,
    train,
)

__all__ = [
    "BACKEND",
    "BatchGraph",
    "EncodedStream",
    "EvalReport",
    "Event",
    "EventLog",
    "FilterBank",
    "FrameletCoeffs",
    "GraphLaplacian",
    "MemoryState",
    "MessageFn",
    "ParseError",
    "RankDeficiencyError",
    "RankSelection",
    "SpectralEncoding",
    "SplitSpec",
    "SvdResult",
    "ThetaStore",
    "TrainConfig",
    "TrainResult",
    "__version__",
    "advance_memory",
    "attention_svd_gap",
    "build_batches",
    "chronological_split",
    "encode_log",
    "encode_rows",
    "evaluate",
    "framelet_decompose",
    "framelet_reconstruct",
    "haar_filter_bank",
    "init_message_fn",
    "linear_attention",
    "load_checkpoint",
    "load_encoding",
    "load_theta",
    "make_batch",
    "normalized_laplacian",
    "parse_jodie_csv",
    "precision",
    "qr_gram_schmidt",
    "randomized_power_svd",
    "roc_auc",
    "save_checkpoint",
    "save_encoding",
    "save_theta",
    "select_rank",
    "spectral_encode",
    "spectral_norm",
    "theta_pull",
    "theta_push",
    "to_csv",
    "train",
    "ufgconv_backward",
    "ufgconv_forward",
    "update_memory",
]
