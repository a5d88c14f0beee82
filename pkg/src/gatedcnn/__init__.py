"""Conditionally computed grouped-convolution networks.

Bottleneck blocks whose parallel channel groups are weighted by a
question-conditioned gate controller and, in sparse mode, executed only for
the top-k groups by gathering the selected convolution and batch-norm
parameters. Includes an analytical multiply-accumulate model verified against
an instrumented counter, finite-difference gradient checking, and a synthetic
training task exercising the mechanism end to end.
"""

from .block import (GatedBlockParams, block_backward_reference, block_backward_sparse,
                    block_forward_dense, block_forward_masked, block_forward_sparse,
                    init_gated_block)
from .config import (ConfigError, NetworkConfig, layer_plan, load_config, parse_config,
                     resolve_config, serialize_config, stage_output_sizes)
from .data import SyntheticTask, generate_dataset, generate_val, oracle_predict
from .flops import FlopsReport, conv_flops, gated_block_flops, network_flops
from .gate import (GateControllerParams, GateDecision, attention_pool, balance_loss,
                   cv_squared, gate_forward, topk_select)
from .gradcheck import finite_diff_check, numeric_gradient
from .network import GatedNetwork, build_network, load_checkpoint, save_checkpoint
from .ops import BatchNorm2dParams, Conv2dParams, MacCounter
from .train import TrainConfig, TrainingDiverged, evaluate, train_loop

__version__ = "0.1.0"
