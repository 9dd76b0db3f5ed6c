"""Desk-scale spiking-network training engine and analysis toolkit.

Direct training of leaky integrate-and-fire networks through
backpropagation over layers and time with surrogate gradients, plus
semi-supervised learning via agreement-based pseudo-labeling over
temporally grouped predictions.
"""

from .analysis import (
    CalibrationReport,
    DiversityReport,
    EnergyModel,
    cosine_diversity,
    diversity_probe,
    ece,
    effective_rank,
    energy_estimate,
    membrane_divergence,
    pairwise_kl,
    temporal_variance,
    utilization_ratio,
)
from .augment import strong_augment, weak_augment
from .data import (
    Dataset,
    SslSplit,
    load_sdf,
    make_split,
    make_synthetic,
    sample_batches,
    save_sdf,
)
from .network import (
    LayerSpec,
    Network,
    OutputTrace,
    TemporalTape,
    backward_stbp,
    forward_sequence,
    init_weights,
    load_checkpoint,
    make_network,
    save_checkpoint,
    softmax_prediction,
    spike_rate,
)
from .neuronal import (
    NeuronConfig,
    fire,
    lif_step,
    membrane_update,
    reset,
    surrogate_gradient,
)
from .objectives import cross_entropy, log_softmax, softmax, tet_loss, total_loss
from .pseudolabel import (
    CollectionSet,
    DaState,
    GroupingScheme,
    agreement_mask,
    build_collections,
    distribution_align,
    group_outputs,
    make_grouping,
    select_pseudo_labels,
    unsupervised_loss,
)
from .training import (
    RunConfig,
    RunResult,
    cosine_lr,
    ema_update,
    evaluate,
    run_training,
    sgd_step,
    train_iteration,
)

__version__ = "0.1.0"
