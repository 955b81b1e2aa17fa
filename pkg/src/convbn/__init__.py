"""ConvBN mode engine: Train/Eval/Tune/Deploy blocks, a Conv->BN fusion
rewrite pass over a small graph IR, activation-memory accounting, and a
verification/benchmark harness."""

from .block import ConvBNBlock, Mode, SavedForBackward, fuse_params, scaling_coefficients
from .container import read_tensors, write_tensors
from .graph import (
    Graph,
    Node,
    RewriteReport,
    execute_backward,
    execute_forward,
    find_convbn_pairs,
    load_graph,
    revert,
    switch_mode,
    turn_on,
)
from .memory import FootprintReport, count_saved, verify_against_engine
from .ops import BatchStats, BNParams, ConvParams
from .tensor import Rng, broadcast_to, elementwise, reduce_to

__version__ = "0.1.0"

__all__ = [
    "BNParams", "BatchStats", "ConvBNBlock", "ConvParams", "FootprintReport",
    "Graph", "Mode", "Node", "RewriteReport", "Rng", "SavedForBackward",
    "broadcast_to", "count_saved", "elementwise", "execute_backward",
    "execute_forward", "find_convbn_pairs", "fuse_params", "load_graph",
    "read_tensors", "reduce_to", "revert", "scaling_coefficients",
    "switch_mode", "turn_on", "verify_against_engine", "write_tensors",
]
