"""Conflict-aware adversarial training for small dense classifiers."""

from .attacks import (
    AttackSpec,
    analytic_adv_loss,
    analytic_linear_attack,
    fgsm,
    perturb_batch,
    pgd,
)
from .data import (
    Dataset,
    load_idx,
    pad_images,
    read_checkpoint,
    read_metrics_csv,
    select_binary_task,
    synthetic_blobs,
    write_checkpoint,
    write_idx,
    write_metrics_csv,
)
from .errors import (
    CheckpointError,
    ConfigError,
    IdxBadMagic,
    IdxCountMismatch,
    IdxError,
    IdxTruncated,
    NumericError,
    SizeGuardError,
)
from .losses import LossKind, bce_loss, clp_pair_loss, softmax_ce, trades_pair_loss
from .model import (
    ForwardCache,
    ModelSpec,
    ModelState,
    flatten,
    forward,
    init_params,
    input_gradient,
    input_gradient_batch,
    model_from_vector,
    param_gradient,
    sgd_step,
    unflatten,
)
from .surgery import (
    ConflictReport,
    combine_vanilla,
    conflict_mu,
    cosine_similarity,
    lambda_star,
    project_conflict_aware,
)
from .theory import (
    BoundReport,
    finite_diff_H,
    mu_upper_bound,
    power_iteration_lmax,
    verify_bound,
)
from .training import (
    TrainConfig,
    TrainRecord,
    evaluate,
    one_cycle_lr,
    train,
    train_epoch,
)

__version__ = "0.1.0"
