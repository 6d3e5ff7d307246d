"""Geometric tree branch message passing with self-supervised objectives."""

from .errors import (
    CheckpointError,
    CollinearError,
    ConfigError,
    ContractError,
    CycleError,
    DegenerateEdgeError,
    FormatError,
    GtmpError,
    InfeasibleError,
    MetricError,
    MultiRootError,
    NumericError,
    NumericFailure,
    ShapeError,
    TransformError,
    UnreachableNodeError,
    ValidationError,
)
from .tree import Branch3, GeometricTree, NodeRecord, PAD, enumerate_branches
from .io import (
    DatasetManifest,
    load_dataset,
    load_manifest,
    load_swc,
    load_tree_json,
    parse_swc,
    parse_tree_json,
    save_manifest,
    save_tree_json,
    serialize_tree_json,
)
from .geometry import (
    BranchFeatures,
    FEATURE_NAMES,
    RigidTransform,
    apply_rigid,
    extract_branch_features,
    extract_tree_features,
    random_rotation,
    reconstruct_node,
    reconstruct_tree,
)
from .synthetic import GeneratorConfig, compute_targets, generate_synthetic
from .encoder import (
    EncoderConfig,
    ModelParams,
    TreeBatch,
    encode,
    init_model,
    layer_forward,
    predict,
    score_tree,
)
from .objectives import (
    OrderLossConfig,
    RadialBasisConfig,
    RadialHistogram,
    ancestor_context,
    child_distance_histogram,
    emd_1d,
    generative_loss,
    order_loss,
    rbf_expand,
    sample_order_pairs,
    ssl_loss,
    supervised_loss,
)
from .train import (
    BenchReport,
    InvarianceReport,
    RunReport,
    TrainConfig,
    auc,
    bench_scaling,
    finetune,
    invariance_test,
    mae,
    pretrain_ssl,
    train_supervised,
)

__version__ = "0.1.0"
