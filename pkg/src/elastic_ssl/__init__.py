"""Elastic weight-sharing supernet SSL with label-free architecture selection.

The package trains one shared-weight elastic network under a siamese
self-supervised objective with a momentum teacher held at the largest
architecture, then scores candidate sub-networks against that teacher with
domain-aware and task-aware feature-similarity metrics, so that a deployment
architecture can be chosen for a target dataset and task without labels.
"""

from .archspace import (
    ArchDescriptor,
    BudgetExhaustedError,
    BudgetSpec,
    DescriptorError,
    DimRange,
    GroupRangeError,
    ModelSpace,
    desk_space,
    flops,
    format_flops,
    group_of,
    paper_space,
    params,
    parse_flops,
    resnet50_descriptor,
)
from .config import ConfigError, RunConfig, load_config
from .container import (
    ContainerError,
    ContainerVersionError,
    read_container,
    read_feature_dump,
    write_container,
    write_feature_dump,
)
from .data import DatasetHandle, load_cifar10, synth_dataset
from .rankeval import (
    AblationReport,
    ProbeConfig,
    RankReport,
    fixed_teacher_ablation,
    linear_probe,
    ranking_experiment,
    spearman,
)
from .selector import (
    SearchEntry,
    SearchResult,
    SearchSpec,
    TaskKind,
    embedding_similarity,
    relation_matrix,
    relation_similarity,
    score_candidates,
    search,
    task_similarity,
)
from .supernet import (
    FeatureBundle,
    SubnetEncoder,
    SupernetState,
    build_supernet,
    calibrate_norm_stats,
    ema_update,
    extract_subnet,
    forward,
    load_subnet,
    parameter_count,
    save_subnet,
)
from .training import (
    KeyQueue,
    TrainConfig,
    TrainResult,
    get_criterion,
    info_nce,
    list_criteria,
    load_checkpoint,
    register_criterion,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "BudgetExhaustedError",
    "BudgetSpec",
    "DescriptorError",
    "DimRange",
    "GroupRangeError",
    "ModelSpace",
    "desk_space",
    "flops",
    "format_flops",
    "group_of",
    "paper_space",
    "params",
    "parse_flops",
    "resnet50_descriptor",
    "ConfigError",
    "RunConfig",
    "load_config",
    "ContainerError",
    "ContainerVersionError",
    "read_container",
    "read_feature_dump",
    "write_container",
    "write_feature_dump",
    "DatasetHandle",
    "load_cifar10",
    "synth_dataset",
    "AblationReport",
    "ProbeConfig",
    "RankReport",
    "fixed_teacher_ablation",
    "linear_probe",
    "ranking_experiment",
    "spearman",
    "SearchEntry",
    "SearchResult",
    "SearchSpec",
    "TaskKind",
    "embedding_similarity",
    "relation_matrix",
    "relation_similarity",
    "score_candidates",
    "search",
    "task_similarity",
    "FeatureBundle",
    "SubnetEncoder",
    "SupernetState",
    "build_supernet",
    "calibrate_norm_stats",
    "ema_update",
    "extract_subnet",
    "forward",
    "load_subnet",
    "parameter_count",
    "save_subnet",
    "KeyQueue",
    "TrainConfig",
    "TrainResult",
    "get_criterion",
    "info_nce",
    "list_criteria",
    "load_checkpoint",
    "register_criterion",
    "save_checkpoint",
    "train",
    "__version__",
]
