"""Hypersphere descriptor embeddings: second-order-regularized triplet
losses with analytic gradients, free-embedding training on the unit
sphere, von Mises-Fisher concentration analysis, and matching metrics.
"""

__version__ = "0.1.0"

from .core import (
    LabeledDescriptorSet,
    PairBatch,
    l2_distance,
    pairwise_distances,
    project_rows,
    project_to_sphere,
)
from .dataio import (
    SyntheticSpec,
    generate_synthetic,
    load_descriptors,
    save_descriptors,
)
from .errors import (
    DescriptorFileError,
    DivergenceError,
    NondifferentiablePointError,
    NumericError,
    ValidationError,
)
from .losses import (
    LossConfig,
    LossGradReport,
    finite_difference_check,
    fos_loss,
    gradient_check_trials,
    hardest_negative,
    knn_select,
    sos_distance,
    sosr,
    total_loss,
)
from .metrics import (
    EvalReport,
    build_verification_pairs,
    evaluate_descriptor_set,
    finite_sum_ap,
    fpr_at_recall,
    matching_task,
    retrieval_task,
    verification_task,
)
from .optim import (
    EmbeddingTable,
    TrainConfig,
    TrainHistory,
    ValidationPairs,
    adam_update,
    optimizer_step,
    sample_epoch_batches,
    sgd_learning_rate,
    train,
)
from .vmf import (
    VmfParams,
    VmfStats,
    bessel_ratio_A,
    estimate_kappa,
    hypersphere_stats,
    log_bessel_i,
    mean_resultant_length,
    sample_vmf,
    vmf_log_density,
)

__all__ = [
    "__version__",
    "DescriptorFileError",
    "DivergenceError",
    "EmbeddingTable",
    "EvalReport",
    "LabeledDescriptorSet",
    "LossConfig",
    "LossGradReport",
    "NondifferentiablePointError",
    "NumericError",
    "PairBatch",
    "SyntheticSpec",
    "TrainConfig",
    "TrainHistory",
    "ValidationError",
    "ValidationPairs",
    "VmfParams",
    "VmfStats",
    "adam_update",
    "bessel_ratio_A",
    "build_verification_pairs",
    "estimate_kappa",
    "evaluate_descriptor_set",
    "finite_difference_check",
    "finite_sum_ap",
    "fos_loss",
    "fpr_at_recall",
    "generate_synthetic",
    "gradient_check_trials",
    "hardest_negative",
    "hypersphere_stats",
    "knn_select",
    "l2_distance",
    "load_descriptors",
    "matching_task",
    "mean_resultant_length",
    "optimizer_step",
    "pairwise_distances",
    "project_rows",
    "project_to_sphere",
    "retrieval_task",
    "sample_epoch_batches",
    "sample_vmf",
    "save_descriptors",
    "sgd_learning_rate",
    "sos_distance",
    "sosr",
    "total_loss",
    "train",
    "verification_task",
    "vmf_log_density",
]
