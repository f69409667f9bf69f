"""desklm: a desk-scale decoder-LM runtime.

Frozen toy decoder with a segmented KV cache, hot-swappable low-rank
adapters over one shared weight set, decoder-layer graph rewrites proved
output-equivalent, simulated INT4/INT8 quantization, concurrent multi-stream
generation, and lossless tree-speculative decoding — all verified against
brute-force oracles.
"""

from .model import (AttentionMask, DecodeSession, KvCache, ModelConfig,
                    ModelWeights, forward, greedy_decode)

__version__ = "0.1.0"

__all__ = [
    "AttentionMask", "DecodeSession", "KvCache", "ModelConfig",
    "ModelWeights", "forward", "greedy_decode", "__version__",
]
