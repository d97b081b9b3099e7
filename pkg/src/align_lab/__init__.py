"""Alignment of singular vectors in deep linear networks under gradient descent."""

from .alignment import (
    AlignedBasis,
    DataCondition,
    aligned_init,
    check_sensing_condition,
    find_condition,
    rank1_aligned_init,
    strong_alignment_monitor,
    verify_condition,
)
from .fastdyn import (
    SvState,
    admissible_sigmas,
    convergence_certificate,
    equivalence_check,
    limit_solution,
    lr_bound,
    reduced_loss,
    sv_step,
    sv_trajectory,
)
from .linalg import alignment_score, invariance_scores, layer_adjacent_scores, matrices_align, svd
from .minnorm import min_norm_factorization, norm_lower_bound_check
from .network import (
    Dataset,
    LinearNetwork,
    SensingData,
    TrainConfig,
    TrainTrace,
    gd_step,
    loss_and_gradients,
    train,
)
from .rng import rng
from .structured import (
    Feasibility,
    LayerStructure,
    StructuredLayer,
    conv_basis,
    feasibility,
    pinv_alignment_check,
    project,
    toeplitz_basis,
    train_structured,
)

__version__ = "0.1.0"
