"""Mixed-precision LoRA workbench.

Prune a small MLP, quantize each layer at 4 or 8 bits with a LoftQ-initialized
low-rank adapter, and search per-layer bit-widths with a Gaussian-process
surrogate and a memory/performance Pareto frontier.
"""

from .adapters import LoftqInit, LoraAdapter, lora_forward, loftq_init, truncated_svd
from .autoloop import SearchPlan, SearchResult, TrainingEvaluator, brute_force, run_search
from .costmodel import CostModel, MemoryBreakdown, memory
from .pareto import EvalRecord, ParetoFront, dominates, frontier, select, stabilized
from .pruner import NeuronGraph, PruneGroup, PrunedModel, discover_groups, group_importance, prune, rank_groups
from .quantizer import (
    Codebook,
    CodebookKind,
    QuantizedMatrix,
    build_codebook,
    dequantize,
    quantize,
    simulated_matmul,
)
from .surrogate import GpState, fit, predict, suggest
from .workbench import (
    AssembledModel,
    Task,
    TrainHyper,
    TrainReport,
    assemble,
    evaluate,
    make_task,
    train_adapters,
)

__version__ = "0.1.0"
