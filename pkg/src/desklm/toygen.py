"""Seeded toy model generation, byte-level tokens, prompt corpora.

Everything here is deterministic in the seed: the same ToySpec produces
bit-identical bundles, which is what makes the bench suites reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bundle import save_adapter, save_model
from .errors import ShapeError
from .lora import LoraAdapter, LoraLayer
from .model import LayerWeights, ModelConfig, ModelWeights

INIT_SCALE = 0.02

EOS_ID = 256
PAD_ID = 257
BYTE_VOCAB = 258


@dataclass(frozen=True)
class ToySpec:
    seed: int = 0
    embed_dim: int = 64
    num_heads: int = 4
    latent_dim: int = 64
    num_layers: int = 4
    mlp_hidden: int = 256
    vocab_size: int = BYTE_VOCAB
    max_seq_len: int = 512
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    tied_head: bool = True
    n_adapters: int = 0
    rank: int = 4
    scale: float = 0.5
    forecast_prefix_len: int = 4
    forecast_depth: int = 4

    def config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, num_heads=self.num_heads,
            latent_dim=self.latent_dim, num_layers=self.num_layers,
            mlp_hidden=self.mlp_hidden, vocab_size=self.vocab_size,
            max_seq_len=self.max_seq_len, rope_theta=self.rope_theta,
            rms_eps=self.rms_eps, tied_head=self.tied_head,
        )


def _normal(rng, *shape):
    return rng.normal(0.0, INIT_SCALE, size=shape).astype(np.float32)


def build_toy_weights(spec: ToySpec) -> ModelWeights:
    cfg = spec.config()
    model_ss, _, _ = np.random.SeedSequence(spec.seed).spawn(3)
    rng = np.random.default_rng(model_ss)
    emb = _normal(rng, cfg.vocab_size, cfg.embed_dim)
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(LayerWeights(
            attn_gain=np.ones(cfg.embed_dim, np.float32),
            wq=_normal(rng, cfg.embed_dim, cfg.latent_dim),
            wk=_normal(rng, cfg.embed_dim, cfg.latent_dim),
            wv=_normal(rng, cfg.embed_dim, cfg.latent_dim),
            wo=_normal(rng, cfg.latent_dim, cfg.embed_dim),
            mlp_gain=np.ones(cfg.embed_dim, np.float32),
            w_up=_normal(rng, cfg.embed_dim, cfg.mlp_hidden),
            w_gate=_normal(rng, cfg.embed_dim, cfg.mlp_hidden),
            w_down=_normal(rng, cfg.mlp_hidden, cfg.embed_dim),
        ))
    head = None if cfg.tied_head else _normal(rng, cfg.embed_dim, cfg.vocab_size)
    return ModelWeights(cfg, emb, layers, np.ones(cfg.embed_dim, np.float32), head=head)


def build_toy_forecast(spec: ToySpec):
    """Static lookahead rows: (prefix p x E, slots m x E)."""
    _, _, fc_ss = np.random.SeedSequence(spec.seed).spawn(3)
    rng = np.random.default_rng(fc_ss)
    prefix = _normal(rng, spec.forecast_prefix_len, spec.embed_dim)
    slots = _normal(rng, spec.forecast_depth, spec.embed_dim)
    return prefix, slots


def build_toy_adapters(spec: ToySpec, task_ids=None) -> list[LoraAdapter]:
    cfg = spec.config()
    if spec.rank > min(cfg.embed_dim, cfg.latent_dim):
        raise ShapeError(
            f"rank {spec.rank} exceeds min(E, L) = {min(cfg.embed_dim, cfg.latent_dim)}")
    _, ad_ss, _ = np.random.SeedSequence(spec.seed).spawn(3)
    if task_ids is None:
        task_ids = [f"task{i}" for i in range(spec.n_adapters)]
    adapters = []
    for child, task_id in zip(ad_ss.spawn(max(spec.n_adapters, 1)), task_ids):
        rng = np.random.default_rng(child)
        layers = []
        for _ in range(cfg.num_layers):
            layers.append(LoraLayer(
                a_q=_normal(rng, cfg.embed_dim, spec.rank),
                b_q=_normal(rng, spec.rank, cfg.latent_dim),
                a_k=_normal(rng, cfg.embed_dim, spec.rank),
                b_k=_normal(rng, spec.rank, cfg.latent_dim),
                a_v=_normal(rng, cfg.embed_dim, spec.rank),
                b_v=_normal(rng, spec.rank, cfg.latent_dim),
                a_o=_normal(rng, cfg.latent_dim, spec.rank),
                b_o=_normal(rng, spec.rank, cfg.embed_dim),
            ))
        adapters.append(LoraAdapter(task_id=task_id, rank=spec.rank,
                                    scale=spec.scale, layers=layers))
    return adapters[: spec.n_adapters]


def make_toy_model(spec: ToySpec, out_dir):
    """Write the model bundle (plus adapters under <out>/lora/<task>/)."""
    out = Path(out_dir)
    weights = build_toy_weights(spec)
    save_model(out, weights, forecast=build_toy_forecast(spec))
    paths = {"model": out}
    if spec.n_adapters:
        for adapter in build_toy_adapters(spec):
            p = out / "lora" / adapter.task_id
            save_adapter(p, adapter)
            paths[adapter.task_id] = p
    return paths


# -- byte-level tokens -------------------------------------------------------


def byte_tokenize(text) -> list[int]:
    """UTF-8 bytes as token ids (vocab 256 + eos 256 + pad 257)."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def byte_detokenize(ids) -> str:
    data = bytes(t for t in ids if 0 <= t < 256)
    return data.decode("utf-8", errors="replace")


def make_prompt_corpus(seed: int, n: int, length: int = 12) -> list[str]:
    """Deterministic pseudo-text prompts (lowercase words)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0F)))
    out = []
    for _ in range(n):
        chars = rng.integers(ord("a"), ord("z") + 1, size=length)
        words = "".join(chr(c) for c in chars)
        out.append(" ".join(words[i:i + 4] for i in range(0, length, 4)))
    return out


def clone_spec(spec: ToySpec, **kw) -> ToySpec:
    return replace(spec, **kw)
