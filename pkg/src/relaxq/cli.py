"""Command-line entry point: ``relaxq {train,eval,quantize,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .bops import model_bops
from .nn.model import clustering_report, report_csv_rows
from .train import (
    Trainer,
    TrainingDiverged,
    evaluate,
    load_config,
    load_model,
    load_splits,
    round_posthoc,
    save_model,
)

PHASES = {"hard": "eval_hard", "relaxed": "eval_relaxed"}


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def final_metrics(model, config, train, test, seeds: int = 1) -> dict:
    """Test metrics after re-estimating batchnorm under hard quantization."""
    model.reestimate_batchnorm(train.batches(config.eval_batch_size))
    hard = evaluate(model, test, "eval_hard", batch_size=config.eval_batch_size)
    relaxed = evaluate(model, test, "eval_relaxed", seeds=range(seeds), batch_size=config.eval_batch_size)
    return {"test_err_hard": hard.error, "test_loss_hard": hard.loss,
            "test_err_relaxed": relaxed.error, "test_err_relaxed_std": relaxed.error_std,
            "test_loss_relaxed": relaxed.loss}


def cmd_train(args) -> int:
    config = load_config(args.config).with_overrides(
        bits_w=args.bits_w, bits_a=args.bits_a, mode=args.mode, seed=args.seed, epochs=args.epochs,
        lr=args.lr, batch_size=args.batch_size, dtype=args.dtype, anneal_epochs=args.anneal_epochs,
        data_dir=args.data)
    train, val, test = load_splits(config)
    if args.resume:
        trainer = Trainer.resume(args.resume, train, val, out_dir=args.out, verbose=not args.quiet)
    else:
        trainer = Trainer(config, train, val, out_dir=args.out, verbose=not args.quiet)
    try:
        trainer.run()
    except TrainingDiverged as err:
        print(f"training diverged in epoch {err.epoch}: {err}", file=sys.stderr)
        if err.checkpoint:
            print(f"last good checkpoint: {err.checkpoint}", file=sys.stderr)
        return 2
    trainer.restore_best()
    summary = {"best_epoch": trainer.best_epoch, "best_val_loss": trainer.best_val_loss}
    summary.update(final_metrics(trainer.model, config, train, test, seeds=config.eval_seeds))
    os.makedirs(args.out, exist_ok=True)
    save_model(os.path.join(args.out, "model.ckpt.npz"), trainer.model, config, trainer.best_epoch)
    _dump(summary, os.path.join(args.out, "summary.json"))
    _dump(summary)
    return 0


def cmd_eval(args) -> int:
    model, config = load_model(args.checkpoint)
    if args.data:
        config = config.with_overrides(data_dir=args.data)
    train, _, test = load_splits(config)
    if args.reestimate_bn:
        model.reestimate_batchnorm(train.batches(config.eval_batch_size))
    res = evaluate(model, test, PHASES[args.phase], seeds=range(args.seeds), batch_size=config.eval_batch_size)
    _dump({"phase": args.phase, "error": res.error, "error_std": res.error_std, "loss": res.loss})
    return 0


def cmd_quantize(args) -> int:
    model, config = load_model(args.checkpoint)
    if args.data:
        config = config.with_overrides(data_dir=args.data)
    train, _, test = load_splits(config)
    before = evaluate(model, test, "eval_hard", batch_size=config.eval_batch_size)
    rounded, new_config = round_posthoc(model, config, args.bits_w, args.bits_a, train, seed=args.seed)
    after = evaluate(rounded, test, "eval_hard", batch_size=config.eval_batch_size)
    if args.out:
        save_model(args.out, rounded, new_config)
    _dump({"bits_w": args.bits_w, "bits_a": args.bits_a, "test_err_before": before.error,
           "test_err_rounded": after.error, "degradation": after.error - before.error})
    return 0


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        name, _, bits = item.partition("=")
        bw, _, ba = bits.partition("/")
        if not (name and bw and ba):
            raise SystemExit(f"bad --layer-bits {item!r}; expected NAME=BW/BA")
        out[name] = (int(bw), int(ba))
    return out


def cmd_report(args) -> int:
    model, _ = load_model(args.checkpoint)
    clusters = clustering_report(model, bins=args.bins)
    bops = model_bops(model, overrides=_parse_overrides(args.layer_bits), input_bits=args.input_bits)
    if args.format == "json":
        _dump({"clustering": clusters, "bops": bops.to_dict()}, args.out)
        return 0
    bops_rows = {row["name"]: row for row in bops.to_dict()["layers"]}
    rows = []
    for row in report_csv_rows(clusters):
        cost = bops_rows.get(row["layer"], {})
        rows.append({**row, "bits_w_bops": cost.get("bits_w"), "bits_a_bops": cost.get("bits_a"),
                     "bops": cost.get("bops"), "bops_share": cost.get("share")})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["layer"])
        writer.writeheader()
        writer.writerows(rows)
        if not args.out:
            print(f"# total_bops={bops.total} dominant={bops.dominant}")
    finally:
        if args.out:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaxq", description="Relaxed quantization training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--bits-w", type=int)
    p.add_argument("--bits-a", type=int)
    p.add_argument("--mode", choices=["rq", "rq-st", "sr", "identity"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--anneal-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--data", help="MNIST directory (overrides data_dir)")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--phase", choices=sorted(PHASES), default="hard")
    p.add_argument("--seeds", type=int, default=1, help="repetitions for the relaxed phase")
    p.add_argument("--reestimate-bn", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="post-hoc rounding of a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits-w", type=int, required=True)
    p.add_argument("--bits-a", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="where to write the rounded model")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("report", help="weight clustering and BOPs for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--input-bits", type=int, help="bit width of the network input (default 32)")
    p.add_argument("--layer-bits", action="append", metavar="NAME=BW/BA",
                   help="override the BOPs bit widths of one layer; repeatable")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as err:
        print(f"relaxq {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
