"""Reproducible desk-scale experiment suites with JSON reports.

Every metric in a report carries its provenance (the oracle or formula it
came from), and every suite sets pass/fail flags; identical seeds and flags
produce byte-identical reports apart from the wall-clock field.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graphir, kernels, multistream, quant, specdec
from .errors import BundleError
from .lora import LoraBank, StrategyRunner, merge_adapter
from .model import AttentionMask, DecodeSession, KvCache
from .toygen import (ToySpec, build_toy_adapters, build_toy_weights,
                     byte_tokenize, make_prompt_corpus)

SCHEMA = 1


@dataclass
class BenchReport:
    command: str
    config: dict
    metrics: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    schema: int = SCHEMA

    def add_metric(self, name, value, source):
        self.metrics[name] = {"value": value, "source": source}

    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self):
        return {"schema": self.schema, "command": self.command,
                "config": self.config, "metrics": self.metrics,
                "flags": self.flags, "wall_clock_s": self.wall_clock_s}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True,
                          default=_json_default)
        if path:
            Path(path).write_text(text)
        return text

    def summary_lines(self):
        lines = [f"suite: {self.command}"]
        for name, rec in self.metrics.items():
            lines.append(f"  {name}: {rec['value']}  [{rec['source']}]")
        for name, ok in self.flags.items():
            lines.append(f"  {'PASS' if ok else 'FAIL'}  {name}")
        lines.append(f"  overall: {'PASS' if self.passed() else 'FAIL'}"
                     f" ({self.wall_clock_s:.2f}s)")
        return lines


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _suite_config(seed, **kw):
    cfg = {"seed": seed, "kernel_backend": kernels.backend_name()}
    cfg.update(kw)
    return cfg


# -- suites ---------------------------------------------------------------------


def suite_lora_equivalence(seed: int = 0, n_models: int = 3, n_adapters: int = 8,
                           n_prompts: int = 100, tol: float = 1e-5) -> BenchReport:
    """Every switching strategy against the merged-weights oracle."""
    t0 = time.perf_counter()
    report = BenchReport("lora-equivalence", _suite_config(
        seed, n_models=n_models, n_adapters=n_adapters, n_prompts=n_prompts, tol=tol))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x10)))
    worst = 0.0
    checked = 0
    for mi in range(n_models):
        spec = ToySpec(seed=seed + mi, embed_dim=32, num_heads=4, latent_dim=32,
                       num_layers=2, mlp_hidden=64, vocab_size=128,
                       max_seq_len=64, n_adapters=n_adapters, rank=4)
        weights = build_toy_weights(spec)
        adapters = build_toy_adapters(spec)
        prompts = [rng.integers(0, spec.vocab_size, size=6).tolist()
                   for _ in range(n_prompts)]
        merged_logits = {}
        for adapter in adapters:
            merged = merge_adapter(weights, adapter)
            merged_logits[adapter.task_id] = [
                DecodeSession(merged).prefill(p) for p in prompts]
        banks = {s: LoraBank(s) for s in ("multi_graph", "masked", "adapter_as_input")}
        for bank in banks.values():
            for a in adapters:
                bank.add(a)
        for strat, bank in banks.items():
            runner = StrategyRunner(bank, weights)
            for adapter in adapters:
                bank.switch_task(adapter.task_id)
                for p, ref in zip(prompts, merged_logits[adapter.task_id]):
                    got = runner.forward(p, KvCache(weights.config),
                                         AttentionMask.causal(len(p), 0))
                    worst = max(worst, float(np.max(np.abs(got - ref))))
                    checked += 1
    report.add_metric("comparisons", checked, "merged-weights oracle")
    report.add_metric("max_abs_logit_diff", worst, "merged-weights oracle")
    report.wall_clock_s = time.perf_counter() - t0
    report.flags["strategies_match_merged_oracle"] = worst <= tol
    report.flags["runtime_under_60s"] = report.wall_clock_s < 60.0
    return report


def suite_ctg_latency(seed: int = 0) -> BenchReport:
    """Constant-per-step latency model plus a real lockstep run."""
    t0 = time.perf_counter()
    report = BenchReport("ctg-latency", _suite_config(seed))
    prefill_ms, ar_ms, n, tokens = 40.0, 23.0, 8, 1
    sequential, concurrent = multistream.latency_model(prefill_ms, ar_ms, n, tokens)
    report.add_metric("prefill_ms", prefill_ms, "input")
    report.add_metric("ar_ms", ar_ms, "input")
    report.add_metric("sequential_total_ms", sequential,
                      "formula prefill + ar*n*tokens")
    report.add_metric("concurrent_total_ms", concurrent,
                      "formula prefill + ar*tokens")
    report.add_metric(
        "sequential_reference_note",
        "published single-stream total of 174 ms disagrees with its own "
        "formula (23*8)+40 = 224; the formula result is reported",
        "documented discrepancy")
    report.flags["concurrent_total_is_63"] = concurrent == 63.0

    spec = ToySpec(seed=seed, embed_dim=32, num_heads=4, latent_dim=32,
                   num_layers=2, mlp_hidden=64, vocab_size=128, max_seq_len=256)
    weights = build_toy_weights(spec)
    prompt = [7, 1, 100, 42, 13]
    res = multistream.run_multistream(DecodeSession(weights), prompt, 4, 12)
    oracle = multistream.sequential_baseline(weights, prompt, res.first_tokens, 12)
    max_cont = max(len(s) - 1 for s in res.streams)
    report.add_metric("streams", 4, "input")
    report.add_metric("decode_calls", res.decode_calls, "lockstep run")
    report.add_metric("max_stream_continuation", max_cont, "lockstep run")
    report.flags["streams_match_forced_first_oracle"] = res.streams == oracle
    report.flags["decode_calls_equal_max_stream_length"] = res.decode_calls == max_cont
    report.wall_clock_s = time.perf_counter() - t0
    return report


def suite_branch_sweep(seed: int = 0, row_budget: int = 32,
                       max_depth: int = 4) -> BenchReport:
    """Per-config tokens/inference and tokens/sec under two drafter-skill
    regimes; the argmax must flip between a wide-shallow and a two-deep
    config."""
    t0 = time.perf_counter()
    report = BenchReport("branch-sweep", _suite_config(
        seed, row_budget=row_budget, max_depth=max_depth))
    configs = specdec.enumerate_branch_configs(row_budget, max_depth)
    cost = specdec.StepCostModel(c0=0.004, c1=0.0006)
    regimes = {
        "front_loaded": specdec.AcceptanceModel((0.35, 0.02, 0.02, 0.02)),
        "uniform": specdec.AcceptanceModel((0.5, 0.5, 0.5, 0.5)),
    }
    winners = {}
    for name, model in regimes.items():
        ranked = specdec.optimize_branch_config(configs, acceptance_model=model,
                                                cost_model=cost)
        winners[name] = ranked[0].config
        report.add_metric(f"{name}_table", [s.to_dict() for s in ranked],
                          "acceptance-model expectation")
        report.add_metric(f"{name}_best", ranked[0].config.label(),
                          "argmax tokens/inference")
    report.flags["argmax_flips_between_regimes"] = (
        winners["front_loaded"].branches != winners["uniform"].branches)
    report.flags["front_loaded_prefers_wide_shallow"] = (
        winners["front_loaded"].depth == 1)
    report.flags["uniform_prefers_two_deep"] = winners["uniform"].depth == 2
    report.flags["all_configs_within_budget"] = all(
        c.total_rows <= row_budget for c in configs)
    report.wall_clock_s = time.perf_counter() - t0
    return report


def suite_compression(seed: int = 0, n_prompts: int = 200,
                      agreement_floor: float = 0.9) -> BenchReport:
    """Quantization accounting plus full-vs-fake-quant top-1 agreement."""
    t0 = time.perf_counter()
    report = BenchReport("compression", _suite_config(
        seed, n_prompts=n_prompts, agreement_floor=agreement_floor))
    spec = ToySpec(seed=seed, n_adapters=2)
    weights = build_toy_weights(spec)
    adapters = build_toy_adapters(spec)
    rep = quant.compression_report(weights, adapters)
    report.add_metric("compression", rep.to_dict(), "byte accounting from shapes")
    report.flags["ratio_at_least_3"] = rep.ratio >= 3.0
    report.flags["code_ratio_exactly_4"] = rep.ratio_codes_only == 4.0

    prompts = [byte_tokenize(p) for p in make_prompt_corpus(seed + 1, n_prompts, 12)]
    qm = quant.quantize_model(weights, prompts[:8])
    agree = 0
    for p in prompts:
        full = DecodeSession(weights).prefill(p)[-1]
        fake = qm.session().prefill(p)[-1]
        agree += int(np.argmax(full) == np.argmax(fake))
    rate = agree / len(prompts)
    report.add_metric("top1_agreement", rate, "fp32 forward oracle")
    report.flags["top1_agreement_at_least_0.9"] = rate >= agreement_floor
    report.wall_clock_s = time.perf_counter() - t0
    return report


def suite_graph_passes(seed: int = 0, n_feeds: int = 10,
                       tol: float = 1e-6) -> BenchReport:
    """Per-pass and all-orderings equivalence on the decoder-layer template,
    with node/MAC accounting per pass."""
    t0 = time.perf_counter()
    report = BenchReport("graph-passes", _suite_config(seed, n_feeds=n_feeds, tol=tol))
    spec = ToySpec(seed=seed, embed_dim=16, num_heads=4, latent_dim=16,
                   num_layers=1, mlp_hidden=32, vocab_size=64, max_seq_len=64)
    weights = build_toy_weights(spec)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x61)))
    n, t = 4, 6
    base = graphir.build_decoder_graph(weights.layers[0], weights.config, n, t)
    feeds = [graphir.layer_feeds(weights.config, n, t, rng) for _ in range(n_feeds)]
    for name, p in graphir.PASSES.items():
        g2 = p(base)
        diff = graphir.check_equivalence(base, g2, feeds, tol=tol)
        rep = graphir.pass_report(base, g2)
        report.add_metric(f"pass_{name}", {
            "max_abs_diff": diff, "nodes_before": rep.before.n_nodes,
            "nodes_after": rep.after.n_nodes, "macs_before": rep.before.macs,
            "macs_after": rep.after.macs},
            "interpreter oracle")
        report.flags[f"pass_{name}_equivalent"] = diff <= tol
    kt = graphir.pass_k_layout(base, "k_transposed")
    diff = graphir.check_equivalence(base, kt, feeds, tol=tol)
    report.add_metric("pass_k_layout", {"max_abs_diff": diff}, "interpreter oracle")
    report.flags["pass_k_layout_equivalent"] = diff <= tol
    worst = 0.0
    for order in itertools.permutations(graphir.PASSES):
        g2 = base
        for nm in order:
            g2 = graphir.PASSES[nm](g2)
        worst = max(worst, graphir.check_equivalence(base, g2, feeds, tol=tol))
    report.add_metric("orderings_max_abs_diff", worst,
                      "interpreter oracle, 24 orderings")
    report.flags["all_orderings_equivalent"] = worst <= tol
    report.wall_clock_s = time.perf_counter() - t0
    return report


SUITES = {
    "lora-equivalence": suite_lora_equivalence,
    "ctg-latency": suite_ctg_latency,
    "branch-sweep": suite_branch_sweep,
    "compression": suite_compression,
    "graph-passes": suite_graph_passes,
}


def run_suite(name: str, seed: int = 0, **kw) -> BenchReport:
    if name not in SUITES:
        raise BundleError(f"unknown suite {name!r}; have {sorted(SUITES)}")
    return SUITES[name](seed=seed, **kw)
