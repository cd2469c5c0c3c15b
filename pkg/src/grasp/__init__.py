"""Question-guided sparse block prompting for a frozen toy VQA backbone."""

__version__ = "0.1.0"

from .entmax import EntmaxConfig, EntmaxOutput, entmax, entmax_forward, entmax_jvp
from .mechanism import (
    BlockPartition,
    FlopCounter,
    FusionResult,
    PromptBank,
    TokenGrid,
    count_params,
    fuse,
    fusion_cost,
    inject,
    partition_grid,
    pool_blocks,
    positional_table,
)

__all__ = [
    "BlockPartition", "EntmaxConfig", "EntmaxOutput", "FlopCounter", "FusionResult",
    "PromptBank", "TokenGrid", "count_params", "entmax", "entmax_forward", "entmax_jvp",
    "fuse", "fusion_cost", "inject", "partition_grid", "pool_blocks", "positional_table",
]
