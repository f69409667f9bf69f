"""Command-line surface.

Subcommands: make-model, gen, ctg, ds2d, branch-opt, quantize, graphopt,
suite, bench-kernels.  Shared flags: --model, --lora-dir, --strategy,
--seed, --json.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, bundle, graphir, kernels, multistream, quant, specdec, suites
from .lora import LoraBank, StrategyRunner
from .model import DecodeSession, greedy_decode
from .toygen import (EOS_ID, ToySpec, byte_detokenize, byte_tokenize,
                     make_toy_model)


def _common(parser):
    parser.add_argument("--model", help="model bundle directory")
    parser.add_argument("--lora-dir", help="directory of adapter bundles")
    parser.add_argument("--strategy", default="adapter_as_input",
                        choices=("multi_graph", "masked", "adapter_as_input"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", dest="json_path", help="write a JSON report here")


def _load_runtime(args, task=None):
    """(weights, lora_delta) for the requested model/adapters."""
    weights = bundle.load_model(args.model)
    lora_delta = None
    if args.lora_dir:
        bank = LoraBank(args.strategy)
        for p in sorted(Path(args.lora_dir).iterdir()):
            if (p / "manifest.json").exists():
                bank.add(bundle.load_adapter(p))
        if task:
            bank.switch_task(task)
        lora_delta = StrategyRunner(bank, weights).lora_delta()
    return weights, lora_delta


def _emit(args, payload, lines):
    if getattr(args, "json_path", None):
        Path(args.json_path).write_text(
            json.dumps(payload, indent=1, sort_keys=True, default=_default))
    for line in lines:
        print(line)


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _read_prompts(path):
    lines = Path(path).read_text().splitlines()
    return [ln for ln in lines if ln.strip()]


# -- subcommands ----------------------------------------------------------------


def cmd_make_model(args):
    spec = ToySpec(seed=args.seed, embed_dim=args.embed_dim,
                   num_heads=args.num_heads, latent_dim=args.latent_dim,
                   num_layers=args.num_layers, mlp_hidden=args.mlp_hidden,
                   vocab_size=args.vocab_size, max_seq_len=args.max_seq_len,
                   n_adapters=args.adapters, rank=args.rank,
                   scale=args.lora_scale)
    paths = make_toy_model(spec, args.out)
    _emit(args, {"spec": dataclasses.asdict(spec),
                 "paths": {k: str(v) for k, v in paths.items()}},
          [f"wrote {name} -> {path}" for name, path in paths.items()])
    return 0


def cmd_gen(args):
    weights, lora_delta = _load_runtime(args, task=args.task)
    prompt = byte_tokenize(args.prompt)
    out = greedy_decode(weights, prompt, args.max_new, eos=EOS_ID,
                        lora_delta=lora_delta)
    text = byte_detokenize(out)
    _emit(args, {"prompt": args.prompt, "tokens": out, "text": text},
          [text])
    return 0


def cmd_ctg(args):
    weights, lora_delta = _load_runtime(args, task=args.task)
    prompts = _read_prompts(args.prompt_file)
    runs = []
    for prompt in prompts:
        session = DecodeSession(weights, lora_delta=lora_delta)
        res = multistream.run_multistream(
            session, byte_tokenize(prompt), args.streams, args.max_len,
            eos=args.eos_id)
        seq, conc = multistream.latency_model(args.prefill_ms, args.ar_ms,
                                              args.streams, args.max_len - 1)
        runs.append({
            "prompt": prompt, **res.to_dict(),
            "texts": [byte_detokenize(s) for s in res.streams],
            "latency_model": {"sequential_ms": seq, "concurrent_ms": conc,
                              "prefill_ms": args.prefill_ms, "ar_ms": args.ar_ms},
        })
    payload = {"streams": args.streams, "max_len": args.max_len, "runs": runs}
    if args.report:
        Path(args.report).write_text(
            json.dumps(payload, indent=1, sort_keys=True, default=_default))
    lines = []
    for run in runs:
        lines.append(f"prompt: {run['prompt']!r} "
                     f"(decode_calls={run['decode_calls']})")
        lines.extend(f"  [{i}] {t!r}" for i, t in enumerate(run["texts"]))
    _emit(args, payload, lines)
    return 0


def cmd_ds2d(args):
    weights, lora_delta = _load_runtime(args, task=args.task)
    config = specdec.parse_branch_config(args.config, args.budget)
    fc = bundle.load_forecast(args.model)
    if fc is None:
        fs = specdec.ForecastState.random(weights.config.embed_dim, seed=args.seed)
    else:
        fs = specdec.ForecastState(prefix=fc[0], slots=fc[1])
    prompt = byte_tokenize(args.prompt)
    reference = None
    if args.drafter.startswith(("oracle", "noisy-oracle")):
        reference = greedy_decode(weights, prompt,
                                  args.max_tokens + config.depth + 1,
                                  lora_delta=lora_delta)
    drafter = specdec.make_drafter(args.drafter, vocab_size=weights.config.vocab_size,
                                   reference=reference, seed=args.seed)
    session = DecodeSession(weights, lora_delta=lora_delta)
    res = specdec.run_speculative(session, prompt, config, fs, drafter,
                                  args.max_tokens, eos=args.eos_id)
    payload = {"config": config.label(), "drafter": args.drafter,
               "tokens": res.tokens, "text": byte_detokenize(res.tokens),
               "stats": res.stats.to_dict()}
    if args.report:
        Path(args.report).write_text(
            json.dumps(payload, indent=1, sort_keys=True, default=_default))
    _emit(args, payload, [
        f"config ({config.label()}): {len(res.tokens)} tokens in "
        f"{res.stats.decode_steps} decode steps "
        f"({res.stats.tokens_per_inference:.3f} tokens/inference)",
        byte_detokenize(res.tokens),
    ])
    return 0


def cmd_branch_opt(args):
    configs = specdec.enumerate_branch_configs(args.budget, args.max_depth)
    if args.model:
        weights, lora_delta = _load_runtime(args, task=args.task)
        fc = bundle.load_forecast(args.model)
        fs = (specdec.ForecastState(prefix=fc[0], slots=fc[1]) if fc else
              specdec.ForecastState.random(weights.config.embed_dim, seed=args.seed))
        prompts = [byte_tokenize(p) for p in _read_prompts(args.corpus)]
        cost = specdec.measure_step_cost(weights)

        def measure(config):
            tpis = []
            for prompt in prompts:
                reference = greedy_decode(weights, prompt,
                                          args.max_tokens + config.depth + 1,
                                          lora_delta=lora_delta)
                drafter = specdec.make_drafter(
                    args.drafter, vocab_size=weights.config.vocab_size,
                    reference=reference, seed=args.seed)
                session = DecodeSession(weights, lora_delta=lora_delta)
                res = specdec.run_speculative(session, prompt, config, fs,
                                              drafter, args.max_tokens)
                tpis.append(res.stats.tokens_per_inference)
            return float(np.mean(tpis))

        ranked = specdec.optimize_branch_config(configs, measure=measure,
                                                cost_model=cost)
        source = f"measured, drafter={args.drafter}"
    else:
        model = specdec.AcceptanceModel(tuple(args.skill))
        ranked = specdec.optimize_branch_config(configs, acceptance_model=model)
        source = f"acceptance model skill={args.skill}"
    payload = {"budget": args.budget, "source": source,
               "table": [s.to_dict() for s in ranked]}
    if args.report:
        Path(args.report).write_text(
            json.dumps(payload, indent=1, sort_keys=True, default=_default))
    lines = [f"{'config':>10s} {'rows':>5s} {'tok/inf':>9s} {'tok/s':>9s}"]
    for s in ranked:
        star = " *" if s.is_best else ""
        lines.append(f"{s.config.label():>10s} {s.config.total_rows:5d} "
                     f"{s.tokens_per_inference:9.3f} {s.tokens_per_second:9.1f}{star}")
    _emit(args, payload, lines)
    return 0


def cmd_quantize(args):
    weights = bundle.load_model(args.in_dir)
    prompts = [byte_tokenize(p) for p in _read_prompts(args.calib)]
    qm = quant.quantize_model(weights, prompts)
    quant.save_quantized(args.out_dir, weights, qm)
    rep = quant.compression_report(weights)
    _emit(args, {"out": args.out_dir, "compression": rep.to_dict()},
          [f"quantized bundle -> {args.out_dir}",
           f"compression ratio (incl. scales): {rep.ratio:.2f}x"])
    return 0


def cmd_graphopt(args):
    weights = bundle.load_model(args.model)
    g = graphir.build_decoder_graph(weights.layers[args.layer], weights.config,
                                    args.rows, args.cached)
    rng = np.random.default_rng(args.seed)
    feeds = [graphir.layer_feeds(weights.config, args.rows, args.cached, rng)
             for _ in range(args.feeds)]
    applied = g
    stats = [("input", graphir.graph_stats(g))]
    names = [p for p in args.passes.split(",") if p]
    for name in names:
        if name == "k_layout":
            applied = graphir.pass_k_layout(applied, "k_transposed")
        elif name in graphir.PASSES:
            applied = graphir.PASSES[name](applied)
        else:
            raise SystemExit(f"unknown pass {name!r}; have "
                             f"{sorted(graphir.PASSES) + ['k_layout']}")
        stats.append((name, graphir.graph_stats(applied)))
    diff = None
    if args.check:
        diff = graphir.check_equivalence(g, applied, feeds)
    if args.dump:
        applied.save(args.dump)
    payload = {"passes": names, "max_abs_diff": diff,
               "stats": {name: st.to_dict() for name, st in stats},
               "diagnostics": applied.meta.get("diagnostics", [])}
    lines = [f"{'stage':>12s} {'nodes':>6s} {'macs':>10s} {'const bytes':>12s}"]
    for name, st in stats:
        lines.append(f"{name:>12s} {st.n_nodes:6d} {st.macs:10d} {st.const_bytes:12d}")
    if diff is not None:
        lines.append(f"equivalence check: max abs diff {diff:.3g}")
    _emit(args, payload, lines)
    return 0


def cmd_suite(args):
    report = suites.run_suite(args.name, seed=args.seed)
    if args.json_path:
        report.to_json(args.json_path)
    print("\n".join(report.summary_lines()))
    return 0 if report.passed() else 1


def cmd_bench_kernels(args):
    result = bench.run_benchmark(seed=args.seed, repeats=args.repeats,
                                 decode_tokens=args.decode_tokens)
    _emit(args, result.to_dict(), result.summary_lines())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="desklm",
        description="Desk-scale decoder-LM runtime: LoRA switching, graph "
                    "rewrites, fake quantization, multi-stream and "
                    "tree-speculative decoding.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-model", help="generate a seeded toy model bundle")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--latent-dim", type=int, default=64)
    p.add_argument("--num-layers", type=int, default=4)
    p.add_argument("--mlp-hidden", type=int, default=256)
    p.add_argument("--vocab-size", type=int, default=258)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--adapters", type=int, default=0)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--lora-scale", type=float, default=0.5)
    p.set_defaults(fn=cmd_make_model)

    p = sub.add_parser("gen", help="greedy generation from a text prompt")
    _common(p)
    p.add_argument("--task", help="adapter task id (with --lora-dir)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=32)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("ctg", help="concurrent multi-stream generation")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--streams", type=int, required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--max-len", type=int, required=True)
    p.add_argument("--eos-id", type=int, default=EOS_ID)
    p.add_argument("--prefill-ms", type=float, default=40.0)
    p.add_argument("--ar-ms", type=float, default=23.0)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_ctg)

    p = sub.add_parser("ds2d", help="tree-speculative decoding")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--config", default="3,2", help="branch fan-outs, e.g. 3,2")
    p.add_argument("--drafter", default="loaded",
                   help="loaded | random | oracle | noisy-oracle:P")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--budget", type=int, default=32)
    p.add_argument("--prompt", default="hello world")
    p.add_argument("--eos-id", type=int, default=None)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_ds2d)

    p = sub.add_parser("branch-opt", help="rank branch configurations")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--budget", type=int, default=32)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--corpus", help="prompt file (measured mode, with --model)")
    p.add_argument("--drafter", default="noisy-oracle:0.6")
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--skill", type=float, nargs="+", default=[0.5, 0.5, 0.5, 0.5],
                   help="per-depth acceptance skill (analytic mode)")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_branch_opt)

    p = sub.add_parser("quantize", help="write a fake-quantized bundle")
    _common(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--calib", required=True, help="calibration prompt file")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("graphopt", help="apply graph passes with an equivalence check")
    _common(p)
    p.add_argument("--pass", dest="passes", default="sha,conv,fold,fuse")
    p.add_argument("--check", action="store_true")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cached", type=int, default=8)
    p.add_argument("--feeds", type=int, default=10)
    p.add_argument("--dump", help="write the rewritten graph here")
    p.set_defaults(fn=cmd_graphopt)

    p = sub.add_parser("suite", help="run a named verification suite")
    _common(p)
    p.add_argument("name", choices=sorted(suites.SUITES))
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("bench-kernels",
                       help="compare compiled and numpy kernel backends")
    _common(p)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--decode-tokens", type=int, default=64)
    p.set_defaults(fn=cmd_bench_kernels)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
