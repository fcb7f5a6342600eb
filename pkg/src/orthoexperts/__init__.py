"""Orthogonal low-rank expert decomposition with dynamic gradient regrouping.

Decompose a dense weight matrix into mutually orthogonal low-rank "expert"
factor pairs over a frozen residual, train them as a mixture-of-experts
adapter, and periodically regroup their rank-1 components by gradient
direction without changing the layer's outputs. Includes a synthetic
multi-task harness with continual-learning metrics and analysis tools.
"""

from .analysis import (
    FisherDiagonal,
    OverlapReport,
    activated_neurons,
    fisher_diagonal,
    overlap_report,
    weight_gradient_stats,
)
from .decomposition import (
    ExpertBank,
    OrthogonalExpertDecomposition,
    OrthogonalityReport,
    decompose,
    expert_delta,
    load_bank,
    pairwise_orthogonality,
    reconstruct,
    save_bank,
)
from .exceptions import (
    CapacityError,
    ConstraintError,
    DegenerateInputError,
    DimensionError,
    DivisionHazardError,
    InvalidParameterError,
    InvalidRankError,
    ModeError,
    NumericInvariantError,
    OrthoExpertsError,
    ValidationError,
)
from .grouping import (
    AngleReport,
    CentroidSet,
    DogResult,
    GradientBatch,
    GradientGrouping,
    GroupingPolicy,
    assign_step,
    centroids,
    dog_run,
    extract_rank1_gradients,
    gradient_angles,
    grouping_objective,
    identity_policy,
    make_centroid_set,
    normalize_gradients,
    objective_split,
    orthogonalize_centroids,
    policy_from_experts,
    regroup,
    spherical_kmeans_init,
    validate_policy,
)
from .layer import (
    GATE_SCALAR,
    GATE_TOPK,
    LayerGradients,
    MoeLoraLayer,
    backward,
    forward,
    gate_weights,
    load_layer,
    regroup_layer,
    save_layer,
)
from .linalg import SvdResult, frobenius_inner, orthonormality_defect, truncated_svd
from .matio import (
    read_bmat,
    read_csv_matrix,
    read_matrix,
    write_bmat,
    write_csv_matrix,
    write_matrix,
)
from .metrics import (
    ScoreGrid,
    load_grid_csv,
    metric_avg_score,
    metric_backward,
    metric_forget,
    metric_forward,
    published_comparison,
    save_grid_csv,
)
from .tasks import SyntheticTaskSet, Task, build_layer, initial_weight, make_tasks
from .training import (
    TrainConfig,
    TrainResult,
    apply_sgd,
    batch_gradients,
    compute_baselines,
    evaluate_score,
    train_mixed,
    train_sequential,
)

__version__ = "0.1.0"
