"""Command-line entry points: synth, train, eval, predict, check.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checks, config, core
from .data import (FormatError, assign_splits, load_dataset, load_image, pad_to_multiple,
                   save_dataset, save_png, synth_generate, write_array)
from .plotting import plot_history, plot_overlays
from .train import CheckpointError, NonFiniteLossError, evaluate, load_model, predict, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3




class UsageError(Exception):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def cmd_synth(args) -> int:
    samples = assign_splits(synth_generate(args.n, args.seed, args.kind, args.size), seed=args.seed)
    try:
        root = save_dataset(args.out, samples)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}") from e
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


def _resolve(args) -> config.RunConfig:
    return config.load(args.config, args.override)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    core.set_precision(cfg.precision)
    data = Path(cfg.data)
    if not (data / "manifest.csv").is_file():
        raise UsageError(f"dataset not found: {data} (no manifest.csv)")
    m = cfg.model.multiple
    train_set = load_dataset(data, "train", m)
    val_set = load_dataset(data, "val", m)
    if not train_set:
        raise UsageError(f"no training samples in {data}")
    if not val_set:
        raise UsageError(f"no validation samples in {data}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dump(cfg))
    _, state = train_loop(cfg.model, train_set, val_set, cfg.optim, cfg.seed, out, cfg.augment)
    plot_history(state.history, out / "curves.png")
    print(json.dumps({"epochs": state.epoch, "stop_reason": state.stop_reason,
                      "best_val_loss": state.best_val_loss, "run_dir": str(out)}))
    return EXIT_OK


def _expected_model(args):
    if getattr(args, "config", None) is None and not getattr(args, "override", None):
        return None
    return _resolve(args).model


def cmd_eval(args) -> int:
    model, header = load_model(args.ckpt, _expected_model(args))
    data = Path(args.data)
    if not (data / "manifest.csv").is_file():
        raise UsageError(f"dataset not found: {data} (no manifest.csv)")
    samples = load_dataset(data, args.split, model.cfg.multiple)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty in {data}")
    res = evaluate(model, samples, threshold=args.threshold)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    summary = {"record": "summary", "split": args.split, "dsc": res["dsc"], "precision": res["precision"],
               "recall": res["recall"], "loss": res["loss"], "n": res["n"]}
    with open(out / "report.jsonl", "w") as fh:
        for row in res["per_sample"]:
            fh.write(json.dumps({"record": "sample", **row}) + "\n")
        fh.write(json.dumps(summary) + "\n")
    probs = predict(model, samples[:8]).numpy()
    plot_overlays([s.image for s in samples[:8]], [s.mask for s in samples[:8]], probs,
                  [s.meta.get("id") for s in samples[:8]], out / "overlays.png", args.threshold)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_model(args.ckpt, _expected_model(args))
    try:
        image = load_image(args.input)
    except (OSError, FormatError) as e:
        raise UsageError(f"cannot read input image {args.input}: {e}") from e
    padded, (rs, cs) = pad_to_multiple(image, model.cfg.multiple)
    x = torch.from_numpy(padded[None, None]).to(torch.get_default_dtype())
    with torch.no_grad():
        prob = model.eval()(x)[0, 0, rs, cs].double().numpy()
    mask = (prob >= args.threshold).astype(np.float64)
    save_png(args.output, mask)
    if args.prob_out:
        write_array(args.prob_out, prob.astype(np.float32))
    print(json.dumps({"output": str(args.output), "height": mask.shape[0], "width": mask.shape[1],
                      "lesion_pixels": int(mask.sum())}))
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eagle", description="EAGLE lesion segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=("ce", "ae", "mixed"), default="mixed")
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    def add_config(sp, required=False):
        sp.add_argument("--config", required=required)
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train", help="train a model")
    add_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out")
    e.add_argument("--threshold", type=float, default=0.5)
    add_config(e)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="segment one image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out", dest="output", required=True)
    pr.add_argument("--prob-out")
    pr.add_argument("--threshold", type=float, default=0.5)
    add_config(pr)
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("check", help="run property suites")
    c.add_argument("--suite", choices=("haar", "scan", "grad", "shapes", "all"), default="all")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threshold", 0.5) is not None and not 0 < getattr(args, "threshold", 0.5) < 1:
        parser.error("--threshold must lie in (0, 1)")
    try:
        return args.func(args)
    except (UsageError, config.ConfigError, CheckpointError, FormatError, FileNotFoundError) as e:
        print(f"eagle: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"eagle: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
