"""State-space vision encoders from first principles, with a benchmark CLI.

Layers: ``tensor`` (float64 autodiff), ``ssm`` (discretization, kernel,
selective scan, transfer-cost model), ``encoders`` (vim / vmamba / toy
baselines), ``training`` (seeded runs with early stopping), ``stats``
(AUC, paired t-tests, significance matrix), ``data`` (datasets and
splits), ``bench``/``cli`` (the benchmark front end).
"""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    elementwise,
    matmul,
    no_grad,
    reduce,
    softmax_cross_entropy,
)
from .ssm import (
    SSMParams,
    SelectiveProjections,
    TimeInvariantSSM,
    TransferCostReport,
    conv_apply,
    discretize,
    parallel_selective_scan,
    s4_kernel,
    selective_scan,
    ssm_recurrence,
    transfer_cost,
)
from .encoders import (
    EncoderSpec,
    EncoderWeights,
    FeatureMap,
    TokenSequence,
    add_positional_encoding,
    cross_scan_orders,
    downsample,
    encoder_forward,
    encoder_forward_batch,
    init_encoder_weights,
    load_checkpoint,
    patchify,
    restore_weights,
    save_checkpoint,
    vim_block_forward,
    vss_block_forward,
)
from .training import (
    Checkpoint,
    DataSplit,
    DivergenceError,
    TrainConfig,
    optimizer_step,
    seed_all,
    train_run,
)
from .stats import (
    MetricSummary,
    RunResult,
    SignificanceMatrix,
    accuracy,
    aggregate_runs,
    ovr_auc,
    paired_ttest,
    significance_matrix,
)
from .data import (
    DatasetManifest,
    SplitAssignment,
    decode_image,
    load_dataset,
    preprocess,
    stratified_split,
    synth_generate,
    union_manifests,
)

__version__ = "0.1.0"
