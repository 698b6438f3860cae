"""Command-line front end.

Subcommands: ``prepare`` materializes the bundled tiny model and
datasets as files, ``quantize`` applies one method to one model,
``eval`` scores one model on one dataset or corpus, ``run`` executes a
config's full matrix, ``report`` renders a results file as a table.

Exit codes: 0 success, 1 validation error, 2 run finished with failed
cells.  Worker count comes from the MQNT_WORKERS environment variable.
"""

import argparse
import dataclasses
import json
import os
import sys


from . import formats, harness, synth
from .calibration import build_c4_style_segments
from .errors import ConfigValidationError, MqntError
from .evaluation import PromptTemplate, mc_accuracy, perplexity
from .model import ModelConfig, TinyDecoder, fit_corpus
from .quantizers import MethodSpec, compose_quantize

BUNDLED_MODEL = ModelConfig(
    vocab_size=256, context_len=1024, d_model=64, n_layers=2, n_heads=4, d_ff=256
)


def prepare_workspace(output, seed=42, fit_steps=120):
    """Write model.mqnt, corpus.mqtk, and data/*.mqtk under ``output``."""
    os.makedirs(os.path.join(output, "data"), exist_ok=True)
    corpus = synth.build_lm_corpus(seed=seed)
    formats.save_corpus(os.path.join(output, "corpus.mqtk"), corpus, vocab_size=256)
    model = TinyDecoder(BUNDLED_MODEL, seed=seed)
    fit_corpus(model, corpus, steps=fit_steps, seq_len=128, seed=seed)
    formats.save_model(model, os.path.join(output, "model.mqnt"))
    paths = {"model": os.path.join(output, "model.mqnt"),
             "corpus": os.path.join(output, "corpus.mqtk")}
    for did in synth.dataset_ids():
        p = os.path.join(output, "data", f"{did}.mqtk")
        formats.save_dataset(p, synth.build_dataset(did))
        paths[did] = p
    return paths


def _calib_sequences(path, n, seed):
    tokens, _, records, _ = formats.load_corpus(path)
    if records is not None:
        return [tokens[o : o + ln] for o, ln in records[:n]]
    return build_c4_style_segments(tokens, n=n, seg_len=256, seed=seed)


def _cmd_prepare(args):
    paths = prepare_workspace(args.output, seed=args.seed, fit_steps=args.fit_steps)
    print(json.dumps(paths, indent=2, sort_keys=True))
    return 0


def _cmd_quantize(args):
    model = formats.load_model(args.model)
    spec = MethodSpec.from_dict({
        "method": args.method, "w_bits": args.w_bits, "a_bits": args.a_bits,
        "group_size": args.group_size, "scheme": args.scheme,
        "sequential_mode": args.sequential_mode,
    })
    calib = _calib_sequences(args.calib, args.calib_n, args.seed)
    compose_quantize(model, calib, spec)
    formats.save_model(model, args.output)
    print(f"wrote {args.output}")
    return 0


def _cmd_eval(args):
    model = formats.load_model(args.model)
    out = []
    if args.metric == "ppl":
        tokens, _, records, _ = formats.load_corpus(args.dataset)
        mv = perplexity(model, tokens, context_len=args.context_len)
        out.append(mv.to_dict())
    else:
        handle = formats.load_dataset(args.dataset)
        template = PromptTemplate.load(handle.task)
        exemplars = handle.records[: args.shots]
        records = handle.records[args.shots :]
        if args.max_items:
            records = records[: args.max_items]
        mv = mc_accuracy(model, records, template, handle.choices,
                         shots=args.shots, exemplars=exemplars,
                         normalization=args.normalization,
                         context_len=args.context_len)
        out.append(mv.to_dict())
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        if "seed" not in (cfg.raw.get("calibration") or {}):
            cfg.calibration = dataclasses.replace(cfg.calibration, seed=args.seed)
    if args.output:
        cfg.output_dir = args.output
    os.makedirs(cfg.output_dir, exist_ok=True)
    results = harness.run_matrix(cfg)
    formats.write_results(os.path.join(cfg.output_dir, "results.csv"), results)
    formats.write_results(os.path.join(cfg.output_dir, "results.json"), results)
    for fmt, name in (("csv", "report.csv"), ("markdown_table", "report.md")):
        blob = harness.emit_report(results, format=fmt)
        with open(os.path.join(cfg.output_dir, name), "wb") as fh:
            fh.write(blob)
    failed = sum(r.status != "ok" for r in results)
    print(f"{len(results)} rows ({failed} failed) -> {cfg.output_dir}")
    return 2 if failed else 0


def _cmd_report(args):
    results = formats.read_results(args.results)
    blob = harness.emit_report(results, format=args.format)
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(blob)
    else:
        sys.stdout.write(blob.decode("utf-8"))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mqnt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="materialize bundled model/corpus/datasets")
    sp.add_argument("--output", default="workspace")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--fit-steps", type=int, default=120)
    sp.set_defaults(fn=_cmd_prepare)

    sp = sub.add_parser("quantize", help="one model, one method -> quantized model file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", required=True)
    sp.add_argument("--calib", required=True, help="corpus or dataset file")
    sp.add_argument("--output", required=True)
    sp.add_argument("--w-bits", type=int, default=4)
    sp.add_argument("--a-bits", type=int, default=16)
    sp.add_argument("--group-size", type=int, default=128)
    sp.add_argument("--scheme", default="asymmetric")
    sp.add_argument("--sequential-mode", default="layer_sequential")
    sp.add_argument("--calib-n", type=int, default=16)
    sp.add_argument("--seed", type=int, default=42)
    sp.set_defaults(fn=_cmd_quantize)

    sp = sub.add_parser("eval", help="score one model on one dataset/corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--metric", choices=("ppl", "accuracy"), default="ppl")
    sp.add_argument("--shots", type=int, default=0)
    sp.add_argument("--normalization", choices=("sum", "per_token"), default="per_token")
    sp.add_argument("--context-len", type=int, default=None)
    sp.add_argument("--max-items", type=int, default=None)
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("run", help="execute the full matrix from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("report", help="render a results file")
    sp.add_argument("--results", required=True)
    sp.add_argument("--format", choices=("csv", "json", "markdown_table"), default="markdown_table")
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigValidationError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except MqntError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
