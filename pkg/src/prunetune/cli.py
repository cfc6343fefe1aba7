"""Command-line entry point.

Subcommands: train, prune, verify, eval, bench, mask-trace. Exit codes:
0 success, 1 verification failure, 2 usage or configuration error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evalbench, trainer
from .config import load_run_config
from .data import ingest
from .errors import ConfigError, DimensionError, LifecycleError, NumericalError
from .model import init_model, n_params
from .pruner import prune_model
from .trainer import MASK_TRACE_COLUMNS, train

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pat", description=__doc__)
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument("--f64", action="store_true",
                        help="build models in float64 (gradient-check precision)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the tuning loop from a config file")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--out", help="override the config's output_dir")
    p.add_argument("--seed", type=int, help="override model and train seeds")

    p = sub.add_parser("prune", help="merge and slice a trained checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for the residual self-check")

    p = sub.add_parser("verify", help="check pruned logits against the masked model")
    p.add_argument("base_ckpt")
    p.add_argument("pruned_ckpt")
    p.add_argument("--n-inputs", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a dataset")
    p.add_argument("ckpt")
    p.add_argument("data", help="file path, copy(L,V), or mod_add(M)")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="forward-pass wall time, optionally vs a baseline")
    p.add_argument("ckpt")
    p.add_argument("baseline", nargs="?")
    p.add_argument("--batch-sizes", default="8")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--out", help="CSV file to append results to")

    p = sub.add_parser("mask-trace", help="gate schedule table for a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--out", help="CSV file to write (default stdout)")
    p.add_argument("--upto", type=int, help="last step to tabulate")
    return parser


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.model.seed = args.seed
        cfg.train.seed = args.seed
    out_dir = args.out or cfg.output_dir
    if out_dir is None:
        raise ConfigError("no output_dir in config and no --out given")
    dataset = ingest(cfg.data_spec, cfg.train.seq_len, cfg.train.seed)
    if dataset.vocab_size > cfg.model.vocab_size:
        raise ConfigError(f"dataset vocab {dataset.vocab_size} exceeds model vocab {cfg.model.vocab_size}")
    dtype = np.float64 if args.f64 else np.float32
    model = init_model(
        cfg.model,
        r_lora=cfg.r_lora, lora_alpha=cfg.lora_alpha,
        r_hio=cfg.r_hio, s0=cfg.train.s0,
        n_target=cfg.train.n_target(cfg.model.d_model),
        eps_temp=cfg.eps_temp, dtype=dtype,
    )
    cfg.echo(out_dir)
    result = train(model, cfg.train, dataset, out_dir=out_dir, quiet=args.quiet)
    if not args.quiet:
        final = result.final
        print(f"finished {cfg.train.total_steps} steps; final loss {final['loss_total']:.4f}, "
              f"active channels {final['active_count']}")
    return EXIT_OK


def _cmd_prune(args) -> int:
    model = checkpoint.load_model(args.ckpt)
    if model.pruned:
        raise ConfigError(f"checkpoint {args.ckpt} is already pruned")
    if model.mask is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no mask state to prune with")
    merged, pruned, report = prune_model(model)
    report.max_residual = evalbench.verify_equivalence(merged, pruned, n_inputs=8, seed=args.seed)
    out = Path(args.out)
    checkpoint.save_model(pruned, out)
    (out / "prune_report.json").write_text(report.to_json())
    if not args.quiet:
        print(f"pruned {report.d} -> {report.d_kept} channels; params "
              f"{report.params_before} -> {report.params_after} "
              f"(ratio {report.ratio:.4f}), self-check residual {report.max_residual:.3g}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    base = checkpoint.load_model(args.base_ckpt)
    pruned = checkpoint.load_model(args.pruned_ckpt)
    if base.pruned:
        raise ConfigError(f"{args.base_ckpt} is a pruned checkpoint; expected the training-time one")
    if not pruned.pruned:
        raise ConfigError(f"{args.pruned_ckpt} is not a pruned checkpoint")
    if base.mask is None:
        raise ConfigError(f"{args.base_ckpt} has no mask state")
    merged, _, _ = prune_model(base)
    residual = evalbench.verify_equivalence(merged, pruned, n_inputs=args.n_inputs, seed=args.seed)
    ok = residual <= evalbench.EQUIVALENCE_TOLERANCE
    print(f"max logit residual {residual:.6g} over {args.n_inputs} inputs: "
          f"{'PASS' if ok else 'FAIL'} (tolerance {evalbench.EQUIVALENCE_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def _cmd_eval(args) -> int:
    model = checkpoint.load_model(args.ckpt)
    seq_len = args.seq_len or model.config.max_seq_len
    dataset = ingest(args.data, seq_len, args.seed)
    if dataset.vocab_size > model.config.vocab_size:
        raise ConfigError(f"dataset vocab {dataset.vocab_size} exceeds model vocab {model.config.vocab_size}")
    ppl = evalbench.perplexity(model, dataset)
    print(f"perplexity {ppl:.6g}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    batch_sizes = [int(b) for b in args.batch_sizes.split(",") if b]
    if not batch_sizes:
        raise ConfigError("bench needs at least one batch size")
    model = checkpoint.load_model(args.ckpt)
    d_kept = model.config.d_model
    results = evalbench.bench_forward(model, batch_sizes, args.seq_len, reps=args.reps,
                                      model_id=Path(args.ckpt).name)
    base_results = None
    d = d_kept
    if args.baseline:
        baseline = checkpoint.load_model(args.baseline)
        d = baseline.config.d_model
        base_results = evalbench.bench_forward(baseline, batch_sizes, args.seq_len,
                                               reps=args.reps, model_id=Path(args.baseline).name)
    if args.out:
        evalbench.append_bench_csv(args.out, results, d=d, d_kept=d_kept)
        if base_results:
            evalbench.append_bench_csv(args.out, base_results, d=d, d_kept=d)
    for i, r in enumerate(results):
        line = (f"batch {r.batch}: {r.mean_ms:.2f} ms mean, {r.median_ms:.2f} ms median "
                f"(+/- {r.std_ms:.2f}), {r.params} params")
        if base_results:
            line += f", speedup {evalbench.speedup(base_results[i], r):.3f}x"
        print(line)
    return EXIT_OK


def _cmd_mask_trace(args) -> int:
    model = checkpoint.load_model(args.ckpt)
    if model.mask is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no mask state")
    rows = trainer.replay_mask_trace(model.mask, upto=args.upto)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MASK_TRACE_COLUMNS)
            for row in rows:
                writer.writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                                 for c in MASK_TRACE_COLUMNS])
    else:
        print(",".join(MASK_TRACE_COLUMNS))
        for row in rows:
            print(",".join(str(row[c]) for c in MASK_TRACE_COLUMNS))
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "prune": _cmd_prune,
    "verify": _cmd_verify,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "mask-trace": _cmd_mask_trace,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DimensionError, LifecycleError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())
