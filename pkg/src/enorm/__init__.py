"""Minimum-norm weight rebalancing for ReLU networks.

The core operation walks adjacent layer pairs, scaling each hidden
channel's incoming weights and inversely scaling its outgoing weights so
the global entrywise p-norm of the weights shrinks while the network
function is exactly preserved. Iterating converges to the unique
minimum-norm representative of the rescaling-equivalence class. A trainer
interleaves these cycles with SGD, transforming momentum buffers with the
same coefficients.
"""

from .balance import (
    Asymmetric,
    BalanceReport,
    apply_pair_rescaling,
    apply_rescaling,
    asymmetric_coefficients,
    balance,
    balance_resblock,
    block_equivalent_weight,
    conv_pair_update,
    enorm_cycle,
    pair_coefficients,
    random_rescalings,
    rescale_momentum,
    run_cycles,
    validate_connectivity,
    weighted_lp_norm,
)
from .datasets import Dataset, load_idx_dataset, synth_dataset
from .diagnostics import (
    CanonicalizationReport,
    EnergyProfile,
    EquivalenceVerdict,
    canonicalization_check,
    check_equivalence,
    energy_profile,
    global_lp_norm,
    random_probe_inputs,
)
from .errors import (
    ContainerFormatError,
    DatasetError,
    DisconnectedNeuronError,
    DivergenceError,
    NumericError,
    ShapeError,
)
from .network import (
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    ResBlockC,
    backward,
    copy_network,
    count_normalized_elements,
    forward,
    forward_trace,
    infer_shapes,
    named_parameters,
    network_dtype,
)
from .architectures import fc_network, resnet18_type_c
from .serialize import load_network, save_network
from .tensor_ops import (
    conv_from_left_matrix,
    conv_from_right_matrix,
    conv_to_left_matrix,
    conv_to_right_matrix,
    pnorm_cols,
    pnorm_rows,
    scale_cols,
    scale_rows,
)
from .training import (
    EpochStats,
    MetricsRow,
    OptimizerState,
    TrainConfig,
    implicit_enorm_gradients,
    init_optimizer_state,
    lr_at,
    sgd_step,
    train_loop,
)

__version__ = "0.1.0"
