"""Desk-scale lab for dynamic SFT+RL policy optimization.

Exactly-differentiable tabular softmax policies on synthetic verifiable-
reward tasks, with difficulty-routed training (discard / distill / mixed RL),
multi-teacher distillation, a pairwise group-alignment loss, and Monte Carlo
benches for the bias and variance laws the method relies on.
"""

from .errors import (
    BenchError,
    ConfigError,
    DataError,
    DypoError,
    InputError,
    StateError,
    TrainingAborted,
)
from .grading import DifficultyGrade, Route, grade, route
from .instrumentation import (
    BenchReport,
    StepMetrics,
    VarianceEstimate,
    bias_law_bench,
    estimate_score_variance,
    estimate_variance,
    measure_eta,
    read_metrics,
    variance_ordering_bench,
    write_metrics,
)
from .objectives import (
    GroupRollout,
    LossReport,
    MixConfig,
    build_pairs,
    dypo_step_loss,
    gal_loss_grad,
    grpo_loss_grad,
    grpo_policy_gradient,
    mixed_gradient,
    rollout_group,
    sft_loss_grad,
    standardize_advantages,
)
from .policy import (
    Context,
    Gradient,
    PolicyParams,
    ReferencePolicy,
    Trajectory,
    kl_to_reference,
    log_prob,
    mean_step_entropy,
    sample_group,
    score,
)
from .tasks import (
    BiasTestbedConfig,
    Query,
    TaskConfig,
    TeacherOracle,
    bias_sample,
    generate_query,
    make_teacher_ensemble,
    reward,
    teacher_sample,
)
from .trainer import (
    Checkpoint,
    EvalReport,
    QueryPool,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    load_train_config,
    run_comparison,
    save_checkpoint,
    train,
    train_config_from_dict,
    train_config_to_dict,
)

__version__ = "0.1.0"
