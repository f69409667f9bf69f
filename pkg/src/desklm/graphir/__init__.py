from .build import (ADAPTER_COMPOSITE, ADAPTER_SPLIT, build_decoder_graph,
                    layer_feeds)
from .ir import Graph, Node, evaluate
from .passes import (PASSES, check_equivalence, graph_stats, pass_constant_fold,
                     pass_fuse, pass_k_layout, pass_linear_to_conv,
                     pass_mha_to_sha, pass_report)

__all__ = [
    "ADAPTER_COMPOSITE", "ADAPTER_SPLIT", "Graph", "Node", "PASSES",
    "build_decoder_graph", "check_equivalence", "evaluate", "graph_stats",
    "layer_feeds", "pass_constant_fold", "pass_fuse", "pass_k_layout",
    "pass_linear_to_conv", "pass_mha_to_sha", "pass_report",
]
