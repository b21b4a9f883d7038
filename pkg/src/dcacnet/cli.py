"""Command-line entry point: ``dcacnet {gen,train,eval,cost,diagnose}``.

Exit codes: 0 ok, 2 configuration or usage error, 3 I/O error,
4 training divergence, 5 integrity (checkpoint/config hash) mismatch.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import PRESETS, RunConfig, apply_preset, apply_seed_env, load_config
from .ctc import frame_grad_norms, norms_to_csv, spike_diagnostics
from .dcac import cost_model
from .errors import DcacError, IntegrityError, TrainingDivergedError
from .model import backbone_cost
from .srctc import total_loss

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_INTEGRITY = 0, 2, 3, 4, 5


class UsageError(DcacError):
    pass


def _dump(obj, fh=None):
    fh = sys.stdout if fh is None else fh
    fh.write(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n")


def _resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for name in getattr(args, "preset", None) or []:
        cfg = apply_preset(cfg, name)
    return apply_seed_env(cfg)


# ------------------------------------------------------------ commands


def cmd_gen(args):
    from .data import generate_dataset

    index = generate_dataset(args.seed, args.n_train, args.n_dev, args.out)
    counts = {k: len(v) for k, v in index["splits"].items()}
    _dump({"out": args.out, "seed": args.seed, "samples": counts})
    return EXIT_OK


def cmd_train(args):
    from .data import load_split
    from .train import stretch_robustness, train, write_json

    cfg = _resolve_config(args)
    if args.epochs is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    train_set = load_split(args.data, "train")
    dev_set = load_split(args.data, "dev")
    os.makedirs(args.out, exist_ok=True)
    doc = cfg.to_dict()
    write_json(os.path.join(args.out, "config.json"), doc)
    model = cfg.build_model()
    log = None if args.quiet else (lambda line: print(line, flush=True))
    try:
        records = train(model, train_set, dev_set, cfg.train, cfg.seed, args.out, doc, log)
    except TrainingDivergedError as exc:
        print(f"error: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    best = min(records, key=lambda r: (r.dev_wer, r.epoch))
    from .train import load_checkpoint

    load_checkpoint(model, os.path.join(args.out, "checkpoint"), cfg.hash)
    summary = {
        "config_hash": cfg.hash,
        "best_epoch": best.epoch,
        "best_dev_wer": best.dev_wer,
        "stretch": stretch_robustness(model, dev_set, cfg.train.beam),
    }
    write_json(os.path.join(args.out, "summary.json"), summary)
    _dump(summary)
    return EXIT_OK


def _load_model(checkpoint, config_path=None):
    from .train import load_checkpoint, read_manifest

    manifest = read_manifest(checkpoint)
    cfg = RunConfig.from_dict(manifest["config"])
    expected = load_config(config_path).hash if config_path else None
    model = cfg.build_model()
    load_checkpoint(model, checkpoint, expected)
    return model, cfg, manifest


def cmd_eval(args):
    from .data import load_split
    from .train import evaluate

    model, cfg, manifest = _load_model(args.checkpoint, args.config)
    samples = load_split(args.data, args.split)
    report = evaluate(model, samples, args.beam)
    out = report.to_dict()
    out.update({"beam": args.beam, "split": args.split, "config_hash": manifest["config_hash"], "epoch": manifest["epoch"]})
    if args.per_sample:
        with open(args.per_sample, "w", encoding="utf-8", newline="") as fh:
            report.write_csv(fh)
    _dump(out)
    return EXIT_OK


def cost_rows(cfg, T=100):
    """One row per DCAC insertion plus the backbone and the model total."""
    mc = cfg.model_config()
    rows = []
    for stage in mc.dcac_after:
        c, h, w = mc.stage_shape(stage)
        rec = cost_model(mc.dcac_config(stage), T, h, w).to_record()
        rows.append(
            {
                "name": f"dcac.{stage}",
                "flops_exact": rec["flops_exact"],
                "flops_approx": rec["flops_approx"],
                "params_exact": rec["params_exact"],
                "params_approx": rec["params_approx"],
            }
        )
    bb = backbone_cost(mc, T)
    rows.append({"name": "backbone", "flops_exact": bb["flops"], "flops_approx": bb["flops"], "params_exact": bb["params"], "params_approx": bb["params"]})
    total = {"name": "total"}
    for key in ("flops_exact", "flops_approx", "params_exact", "params_approx"):
        total[key] = sum(r[key] for r in rows)
    rows.append(total)
    return rows


def format_cost_table(rows):
    cols = ("name", "flops_exact", "flops_approx", "params_exact", "params_approx")
    lines = [" ".join(f"{c:>14s}" for c in cols)]
    for r in rows:
        cells = [f"{r['name']:>14s}"] + [f"{r[c]:>14.6g}" if isinstance(r[c], float) else f"{r[c]:>14d}" for c in cols[1:]]
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"


def parse_cost_table(text):
    """Inverse of :func:`format_cost_table` (values parsed back to numbers)."""
    lines = text.strip().splitlines()
    cols = lines[0].split()
    rows = []
    for line in lines[1:]:
        cells = line.split()
        row = {"name": cells[0]}
        for c, v in zip(cols[1:], cells[1:]):
            row[c] = int(v) if v.lstrip("-").isdigit() else float(v)
        rows.append(row)
    return rows


def cmd_cost(args):
    cfg = _resolve_config(args)
    rows = cost_rows(cfg, args.frames)
    doc = {"T": args.frames, "config_hash": cfg.hash, "rows": rows}
    if args.format in ("table", "both"):
        sys.stdout.write(format_cost_table(rows))
    if args.format in ("json", "both"):
        _dump(doc)
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            _dump(doc, fh)
    return EXIT_OK


def diagnose(model, sample, stage):
    """Per-frame gradient L2 norm at one stage tap under the training loss."""
    model.train()
    model.zero_grad()
    out = model(sample.video)
    loss = total_loss(out.log_probs, out.taps, sample.labels, getattr(model, "sr", None))
    loss.backward()
    tap = next(t for t in out.taps if t.stage_id == stage)
    g = tap.feature.grad if tap.feature.grad is not None else np.zeros(tap.feature.shape)
    return frame_grad_norms(g)


def cmd_diagnose(args):
    from .data import load_split

    if args.stage not in (2, 3, 4):
        raise UsageError(f"unknown stage {args.stage}; taps exist for stages 2, 3 and 4")
    model, _, _ = _load_model(args.checkpoint)
    samples = load_split(args.data, args.split)
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"sample index {args.sample} out of range (0..{len(samples) - 1})")
    norms = diagnose(model, samples[args.sample], args.stage)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        norms_to_csv(norms, args.stage, fh)
    summary = spike_diagnostics(norms)
    summary.update({"sample": samples[args.sample].id, "stage": args.stage, "frames": len(norms)})
    _dump(summary)
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser():
    parser = argparse.ArgumentParser(prog="dcacnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-dev", type=int, default=50)
    p.set_defaults(func=cmd_gen)

    def add_config(p):
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--preset", action="append", help=f"ablation preset, repeatable: {', '.join(sorted(PRESETS))}")

    p = sub.add_parser("train", help="train and checkpoint the lowest dev WER")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="beam-decode a split and report WER with del/ins")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--split", default="dev")
    p.add_argument("--config", help="fail with exit 5 unless the checkpoint was trained with this config")
    p.add_argument("--per-sample", metavar="CSV", help="write per-sample alignments here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="exact and approximate FLOPs/params per DCAC insertion")
    add_config(p)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--format", choices=("table", "json", "both"), default="both")
    p.add_argument("--json-out", metavar="PATH")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("diagnose", help="per-frame gradient norms at a stage tap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DcacError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
