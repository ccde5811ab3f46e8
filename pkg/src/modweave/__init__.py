"""modweave: a multimodal multitask transformer on a numpy autodiff core.

Modality tokenizers feed a shared two-stack trunk joined by cross
attention; training runs unimodal masked reconstruction, then pairwise
masked reconstruction, then supervised multitask pairs with
convergence-rate loss balancing. Everything is deterministic under a
single seed and checkpoints byte-exactly.
"""

from .config import RunConfig, default_config, from_dict, mini_config, validate
from .data import Dataset, SampleCursor, build_datasets, iterate
from .errors import (CheckpointError, ConfigError, DataError, ModweaveError,
                     NumericError, OptimizerError, ShapeError)
from .model import (ModelBundle, TaskSpec, build_bundle, build_registry,
                    forward_inference, forward_pair)
from .pretrain import plan_mask, stage1_loop, stage2_loop
from .tensor import Tensor, default_dtype, set_default_dtype, tensor
from .trainer import (BalancerState, Stage3Trainer, adapt_unseen, balance_weights,
                      evaluate, evaluate_all, sample_pair)
from .util import rng_from

__version__ = "0.1.0"

__all__ = [
    "BalancerState", "CheckpointError", "ConfigError", "DataError", "Dataset",
    "ModelBundle", "ModweaveError", "NumericError", "OptimizerError",
    "RunConfig", "SampleCursor", "ShapeError", "Stage3Trainer", "TaskSpec",
    "Tensor", "adapt_unseen", "balance_weights", "build_bundle",
    "build_datasets", "build_registry", "default_config", "default_dtype",
    "evaluate", "evaluate_all", "forward_inference", "forward_pair",
    "from_dict", "iterate", "mini_config", "plan_mask", "rng_from",
    "sample_pair", "set_default_dtype", "stage1_loop", "stage2_loop",
    "tensor", "validate", "__version__",
]
