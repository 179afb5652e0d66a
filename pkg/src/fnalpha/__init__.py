"""Residual group attention segmentation networks on a NumPy autodiff core."""

from .blocks import (
    AttentionModule,
    AttentionSubblock,
    BasicBlock,
    GroupAttentionBlock,
    PreactBlock,
    ResABlock,
    ResidualSubblock,
    ResNeXtBlock,
    SqueezeExcite,
    channel_shuffle,
    make_block,
)
from .data import Dataset, SynthSpec, gen_synth, load_dataset, synth_arrays
from .gradcheck import grad_check, run_gradcheck_suite
from .losses import LossConfig, all_wrap, bace, hybrid_loss, segmentation_loss, tversky_index, tversky_loss
from .metrics import ConfusionCounts, compute_metrics, confusion, roc_auc, roc_curve
from .model import (
    Model,
    ModelConfig,
    build,
    count_flops,
    count_params,
    load_checkpoint,
    load_config,
    save_checkpoint,
    summary,
)
from .optim import Adam, AdamConfig, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad, zero_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
