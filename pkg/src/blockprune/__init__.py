"""Block-wise learned sparsity allocation for transformer pruning, with joint
weight quantization and an SpMM accelerator cycle model."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BlockPruneError, ConfigError, CorruptCheckpointError, DataError, DimensionError, MaskError,
    NumericError, ReportError, TrainingDivergence, UsageError,
)
from .model import BlockConfig, BlockWeights, ModelCheckpoint, block_forward, model_forward, perplexity  # noqa: E402
from .pruner import PruneConfig, prune_block, prune_model, uniform_baseline  # noqa: E402
from .quant import QuantParams, quantize  # noqa: E402
from .sparsity import CandidateRates, PruneMask, generate_mask  # noqa: E402
from .hwsim import SimConfig, simulate_spmm  # noqa: E402
