"""feddnc: a deterministic federated-learning simulator with divergence-guided
divide-and-conquer training, FedAvg/FedProx baselines, non-IID partitioners,
and exact communication accounting."""

from .config import ExperimentConfig, parse_config, parse_config_text, render_config
from .data import (
    Dataset,
    Partition,
    PartitionSet,
    gen_role_text,
    gen_synthetic_images,
    load_cifar10_binary,
    partition_by_group,
    partition_class_imbalance,
    partition_color_skew,
    partition_label_exclusive,
    to_grayscale,
)
from .divergence import (
    DivergenceProfile,
    SplitDecision,
    cosine_divergence,
    layer_profile,
    norm_divergence,
    prepass,
    select_split,
)
from .dnc import (
    DncConfig,
    PartialParams,
    RoundPlan,
    freeze_mask_for,
    make_round_plan,
    partial_extract,
    partial_merge,
    run_dnc_training,
)
from .federation import (
    CommLedger,
    FederationConfig,
    FederationState,
    LocalUpdate,
    RoundMetrics,
    evaluate,
    fedavg_aggregate,
    init_federation,
    local_train,
    run_round,
    select_participants,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .experiment import RunResult, run_experiment
from .nn import (
    Batch,
    FreezeMask,
    LayerSpec,
    ModelSpec,
    ParameterSet,
    backward,
    flatten_layer,
    forward,
    init_params,
    sgd_step,
)
from .report import compare_report
from .rng import Rng

__version__ = "0.1.0"
