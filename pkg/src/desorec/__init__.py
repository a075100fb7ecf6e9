"""Decoupled soft-target training for implicit-feedback recommenders."""

from .dataio import (
    InteractionLog,
    Sample,
    SplitSet,
    build_samples,
    filter_min_count,
    load_interactions,
    split_leave_one_out,
    synth_generate,
)
from .loss import (
    LossConfig,
    LossDecomposition,
    SoftTarget,
    ce_onehot,
    coupled_loss,
    decompose,
    decoupled_loss,
    make_uniform_smoothing,
    redline_lambda2,
    soft_cross_entropy,
    verify_decomposition,
    verify_redline,
)
from .metrics import Metrics, evaluate, ndcg_at_k, oracle_evaluate, rank_of_target, recall_at_k
from .model import (
    AdamState,
    ModelParams,
    PredictionDistribution,
    adam_step,
    backward,
    embed_samples,
    forward,
    init_params,
    score_and_softmax,
)
from .softlabel import (
    ClusterAssignment,
    PropagationWeights,
    SoftTargetSet,
    generate_lp,
    generate_pop,
    kmeans,
    propagate,
    propagation_weights,
    similarity,
)
from .train import (
    Dataset,
    ExperimentConfig,
    RunReport,
    build_soft_targets,
    grid_search,
    pretrain,
    run_experiment,
    train_final,
)

__version__ = "0.1.0"
