"""Command-line orchestration of the full pipeline.

Subcommands: build-vocab, filter, train-tokenizer, eval-tokenizer, grid,
pretrain, finetune, make-task, flops, frontier, fit, break, icer,
correlate, report. Every command reads and writes the plain file
formats of its module (JSONL spans, text tokenizer models, RunLog CSVs,
JSON summaries) and exits non-zero on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, corpus, costmodel, grid as grid_mod, report, tasks, \
    tokenizer as tok_mod, trainer
from .config import ModelConfig
from .model import ModelParams
from .trainer import OptimizerHyper, RunLog


def _load_vocab(args) -> corpus.VocabularySpec:
    return corpus.VocabularySpec.load(args.vocab,
                                      getattr(args, "stoplist", None))


def cmd_build_vocab(args) -> int:
    stop = set()
    if args.stoplist:
        with open(args.stoplist, encoding="utf-8") as f:
            stop = {line.strip() for line in f if line.strip()}
    lines: list[bytes] = []
    for path in args.transcripts:
        with open(path, "rb") as f:
            lines.extend(f.readlines())
    vocab = corpus.build_vocabulary(lines, stop, source_label=",".join(
        str(p) for p in args.transcripts))
    vocab.save(args.out)
    print(json.dumps({"words": len(vocab), "out": str(args.out)}))
    return 0


def cmd_filter(args) -> int:
    vocab = _load_vocab(args)
    cfg = corpus.FilterConfig(mode=args.mode, span_size=args.span_size,
                              stride=args.stride,
                              target_span_words=args.target_span_words)
    docs = corpus.read_documents_jsonl(args.input)
    spans = corpus.filter_corpus(docs, vocab, cfg, corpus_id=args.corpus_id,
                                 workers=args.workers)
    n = corpus.write_spans_jsonl(spans, args.out)
    print(json.dumps({"spans": n, "out": str(args.out)}))
    return 0


def cmd_train_tokenizer(args) -> int:
    spans = corpus.read_spans_jsonl(args.spans)
    model = tok_mod.train_bpe(spans, vocab_size=args.vocab_size,
                              seed=args.seed)
    model.save(args.out)
    print(json.dumps({"vocab_size": model.vocab_size,
                      "merges": len(model.merges), "out": str(args.out)}))
    return 0


def cmd_eval_tokenizer(args) -> int:
    model = tok_mod.TokenizerModel.load(args.tokenizer)
    spans = corpus.read_spans_jsonl(args.spans)
    if args.esms_ref in ("core", "full"):
        ref = tok_mod.EsmsReference.builtin(args.esms_ref)
    else:
        ref = tok_mod.EsmsReference.from_tsv(args.esms_ref)
    ratio = tok_mod.word_split_ratio(model, spans, seed=args.seed)
    lengths = [len(model.encode(s.text)) for s in spans[:5000]]
    print(json.dumps({
        "vocab_size": model.vocab_size,
        "word_split_ratio": ratio,
        "esms": tok_mod.esms(model, ref),
        "mean_span_tokens": float(np.mean(lengths)),
    }, indent=2))
    return 0


def cmd_grid(args) -> int:
    anchor = ModelConfig.from_json_file(args.anchor)
    axes = json.loads(args.axes) if args.axes else dict(grid_mod.DEFAULT_AXES)
    spec = grid_mod.GridSpec(anchor=anchor, axes=axes, mode=args.mode,
                             sample_count=args.sample_count, seed=args.seed)
    configs = grid_mod.generate_grid(spec)
    payload = [c.to_dict() for c in configs]
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    print(json.dumps({"configs": len(configs),
                      "shapes": [list(c.shape) for c in configs]}))
    return 0


def cmd_pretrain(args) -> int:
    config = ModelConfig.from_json_file(args.config)
    tok = tok_mod.TokenizerModel.load(args.tokenizer)
    train_spans = corpus.read_spans_jsonl(args.train)
    eval_spans = corpus.read_spans_jsonl(args.eval)
    hyper = OptimizerHyper(peak_lr=args.peak_lr, schedule=args.schedule,
                           total_steps=args.steps, batch_size=args.batch_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, log = trainer.pretrain(
        config, train_spans, tok, hyper, eval_spans,
        log_every=args.log_every, seed=args.seed,
        checkpoint_dir=out_dir if args.checkpoints else None,
        run_id=args.run_id)
    log.save(out_dir / f"{args.run_id}.csv")
    params.save(out_dir / f"{args.run_id}_final.ckpt")
    last = log.records[-1]
    print(json.dumps({"steps": last[0], "eval_loss": last[4],
                      "eval_ppl": last[5],
                      "runlog": str(out_dir / f"{args.run_id}.csv")}))
    return 0


def cmd_make_task(args) -> int:
    tok = tok_mod.TokenizerModel.load(args.tokenizer)
    spans = corpus.read_spans_jsonl(args.spans)
    if args.kind == "presence":
        if not args.target_words:
            raise SystemExit("--target-words is required for kind=presence")
        task = tasks.make_word_presence_task(
            spans, tok, target_words=args.target_words.split(","),
            seq_len=args.seq_len, seed=args.seed,
            max_examples=args.max_examples)
    elif args.kind == "cloze-family":
        if not args.target_words:
            raise SystemExit("--target-words is required for "
                             "kind=cloze-family")
        families = [fam.split(",") for fam in args.target_words.split(";")]
        task = tasks.make_cloze_family_task(
            spans, tok, families, seq_len=args.seq_len, seed=args.seed,
            max_examples=args.max_examples)
    else:
        task = tasks.make_acceptability_task(
            spans, tok, seq_len=args.seq_len, seed=args.seed,
            max_examples=args.max_examples)
    tasks.save_task(task, args.out)
    print(json.dumps({"train": len(task.train_ids), "val": len(task.val_ids),
                      "out": str(args.out)}))
    return 0


def cmd_finetune(args) -> int:
    params = ModelParams.load(args.checkpoint)
    task = tasks.load_task(args.task)
    seeds = [int(s) for s in args.seeds.split(",")]
    mean_acc, per_seed = trainer.finetune(
        params, task, epochs=args.epochs, batch=args.batch,
        peak_lr=args.peak_lr, seeds=seeds, head_only=args.head_only)
    print(json.dumps({"mean_accuracy": mean_acc, "per_seed": per_seed}))
    return 0


def cmd_flops(args) -> int:
    config = ModelConfig.from_json_file(args.config)
    bd = costmodel.flops_per_sequence(config, mode=args.mode)
    payload = bd.to_dict()
    payload["param_count"] = costmodel.count_params(config)
    if args.updates and args.batch:
        payload["total_flops"] = costmodel.total_flops(
            bd.c_seq, args.updates, args.batch)
    print(json.dumps(payload, indent=2))
    return 0


def _read_frontier_points(path, x_col="flops"):
    pts = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            pts.append((float(row[x_col]), float(row["loss"])))
    return pts


def cmd_frontier(args) -> int:
    runs = [RunLog.load(p) for p in args.runs]
    frontier = analysis.compute_optimal_frontier(runs, n_bins=args.bins)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "flops", "loss", "run_id", "step",
                    "model_size", "tokens_seen"])
        for p in frontier:
            w.writerow([p.flops_bin[0], p.flops_bin[1], p.flops, p.loss,
                        p.source[0], p.source[1], *p.covariates])
    print(json.dumps({"points": len(frontier), "out": str(args.out)}))
    return 0


def cmd_fit(args) -> int:
    pts = _read_frontier_points(args.frontier, args.x_col)
    fit = analysis.fit_power_law(pts, log_space=args.log_space)
    print(json.dumps(fit.to_dict(), indent=2))
    return 0


def cmd_break(args) -> int:
    pts = _read_frontier_points(args.frontier, args.x_col)
    if args.candidates:
        cands = [float(c) for c in args.candidates.split(",")]
    else:
        xs = sorted(p[0] for p in pts)
        cands = xs  # every observed edge
    rep = analysis.detect_break(pts, cands,
                                min_exponent_gap=args.min_exponent_gap)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_icer(args) -> int:
    with open(args.ladder) as f:
        rungs = json.load(f)
    ladder = [(ModelConfig.from_dict(r["config"]), float(r["perplexity"]),
               float(r["flops"])) for r in rungs]
    entries = analysis.icer(ladder)
    writer = csv.writer(open(args.out, "w", newline="")) if args.out else \
        csv.writer(sys.stdout)
    writer.writerow(["from_shape", "to_shape", "delta_perplexity",
                     "delta_flops", "icer", "icer_per_1e15"])
    for e in entries:
        writer.writerow([e.from_config.shape, e.to_config.shape,
                         e.delta_perplexity, e.delta_flops, e.icer,
                         e.icer_per_1e15])
    return 0


def cmd_correlate(args) -> int:
    xs, ys = [], []
    with open(args.csv, newline="") as f:
        for row in csv.DictReader(f):
            xs.append(float(row[args.x_col]))
            ys.append(float(row[args.y_col]))
    rho, p = analysis.spearman(xs, ys)
    result = {"rho": rho, "p_value": p, "n": len(xs)}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    print(json.dumps(result, indent=2))
    return 0


def cmd_report(args) -> int:
    runs = [RunLog.load(p) for p in args.runs]
    manifest = report.render_report(runs, args.out_dir, n_bins=args.bins)
    print(json.dumps(manifest, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="downscale-lab",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build the closed word vocabulary")
    p.add_argument("--transcripts", nargs="+", required=True)
    p.add_argument("--stoplist")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("filter", help="filter documents into spans")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stoplist")
    p.add_argument("--mode", choices=["span", "sentence"], default="span")
    p.add_argument("--span-size", type=int, default=110)
    p.add_argument("--stride", type=int, default=30)
    p.add_argument("--target-span-words", type=int, default=110)
    p.add_argument("--corpus-id", default="corpus")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-tokenizer", help="train a byte-level BPE")
    p.add_argument("--spans", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("eval-tokenizer",
                       help="word-split ratio, ESMS, span length")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--spans", required=True)
    p.add_argument("--esms-ref", default="full",
                   help="'core', 'full', or a TSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_tokenizer)

    p = sub.add_parser("grid", help="generate a configuration grid")
    p.add_argument("--anchor", required=True)
    p.add_argument("--mode", choices=["unidirectional", "random_sample"],
                   default="unidirectional")
    p.add_argument("--axes", help="JSON axis->values map")
    p.add_argument("--sample-count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("pretrain", help="MLM pre-training run")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--steps", type=int, default=35000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--schedule", choices=list(trainer.SCHEDULES),
                   default="inverse_sqrt")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoints", action="store_true")
    p.add_argument("--run-id", default="run")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("make-task", help="synthesize a classification task")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--spans", required=True)
    p.add_argument("--kind", default="presence",
                   choices=["presence", "cloze-family", "acceptability"])
    p.add_argument("--target-words", default=None,
                   help="comma-separated word family; for cloze-family, "
                        "families separated by ';'")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--max-examples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_task)

    p = sub.add_parser("finetune", help="fine-tune on a classification task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--peak-lr", type=float, default=2e-4)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--head-only", action="store_true",
                   help="freeze the encoder and train only the head "
                        "(linear probe)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("flops", help="cost breakdown for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=list(costmodel.FFN_MODES),
                   default="s_corrected")
    p.add_argument("--updates", type=int)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("frontier", help="compute-optimal frontier from runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("fit", help="power-law fit of a frontier CSV")
    p.add_argument("--frontier", required=True)
    p.add_argument("--x-col", default="flops")
    p.add_argument("--log-space", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("break", help="two-regime break detection")
    p.add_argument("--frontier", required=True)
    p.add_argument("--x-col", default="flops")
    p.add_argument("--candidates", help="comma-separated thresholds")
    p.add_argument("--min-exponent-gap", type=float, default=0.02)
    p.set_defaults(func=cmd_break)

    p = sub.add_parser("icer", help="incremental cost-effectiveness ladder")
    p.add_argument("--ladder", required=True,
                   help="JSON list of {config, perplexity, flops}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_icer)

    p = sub.add_parser("correlate", help="Spearman correlation of two columns")
    p.add_argument("--csv", required=True)
    p.add_argument("--x-col", required=True)
    p.add_argument("--y-col", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="tables, fits, and SVG figures")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
