"""``signet`` command line: generate | train | eval | transform | verify.

Configuration comes from defaults, an optional ``--preset``, an optional
``--config`` file and trailing ``--section.key value`` overrides, in that
order. Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import evaluation, models, sigsynth, training, transforms, verify
from .config import RUNS_ENV, RunConfig, load_config
from .exceptions import ConfigError, ContainerError, SignetError, TrainingDivergence
from .numerics import NonFiniteError

log = logging.getLogger("signet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_overrides(tokens) -> dict:
    """``["--model.k", "5", "--train.epochs=3"]`` -> ``{"model.k": "5", "train.epochs": "3"}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            val = tokens[i + 1]
            i += 2
        if key in out:
            raise UsageError(f"--{key} given twice")
        out[key.replace("-", "_")] = val
    return out


def _config(args, extra) -> RunConfig:
    overrides = parse_overrides(extra)
    if getattr(args, "dataset", None):
        overrides.setdefault("dataset", args.dataset)
    return load_config(args.config, args.preset, overrides).validate()


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# -- generate -------------------------------------------------------------------


def cmd_generate(args, extra) -> int:
    cfg = _config(args, extra)
    out = args.out or cfg.run.dataset
    if not out:
        raise UsageError("generate needs --out (or a dataset= path in the config)")
    t0 = time.perf_counter()
    ds = sigsynth.generate_dataset(cfg.data)
    sigsynth.write_dataset(ds, out)
    _write_text(out + ".config", cfg.dumps())
    log.info("wrote %d samples (%d classes x %d SNRs, N=%d) to %s in %.1fs",
             len(ds), len(ds.class_names), len(ds.snr_grid), ds.length, out, time.perf_counter() - t0)
    return EXIT_OK


# -- train ----------------------------------------------------------------------------


def _read_dataset(path) -> sigsynth.SignalDataset:
    if not path:
        raise UsageError("no dataset given (use --dataset or dataset= in the config)")
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    return sigsynth.read_dataset(path)


def _run_dirs(cfg: RunConfig):
    base = os.path.join(cfg.runs_root(), cfg.run.run_name)
    fracs = cfg.run.eta_fracs
    if len(fracs) == 1:
        return [(fracs[0], base)]
    return [(f, os.path.join(base, f"eta_{f:.6g}")) for f in fracs]


def train_run(cfg: RunConfig, ds: sigsynth.SignalDataset, eta: float, run_dir: str) -> dict:
    """One training run into ``run_dir``; returns the summary dict."""
    os.makedirs(run_dir, exist_ok=True)
    train_set, val_set, test_set = training.split_dataset(ds, cfg.split)
    tcfg = replace(cfg.train, train_fraction=eta)
    if tcfg.train_per_cell:
        train_set = training.subsample_training(train_set, per_cell=tcfg.train_per_cell, seed=tcfg.seed)
    elif eta < 1:
        train_set = training.subsample_training(train_set, fraction=eta, seed=tcfg.seed)
    mcfg = cfg.resolved_model(len(ds.class_names), ds.length)
    resolved = replace(cfg, model=mcfg, train=tcfg)
    _write_text(os.path.join(run_dir, "config.txt"), resolved.dumps())

    model = models.build_model(mcfg)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(["epoch", "train_loss", "train_acc", "val_acc", "lr", "seconds"])

    def on_epoch(epoch, hist):
        with open(metrics_path, "a", newline="") as fh:
            row = list(hist.rows())[-1]
            csv.writer(fh, lineterminator="\n").writerow([row[0], *(repr(float(v)) for v in row[1:])])

    log.info("run %s: %d train / %d val / %d test, %s with %d parameters",
             run_dir, len(train_set), len(val_set), len(test_set), mcfg.architecture, model.parameter_count)
    t0 = time.perf_counter()
    meta = {"split.ratios": cfg.split.ratios, "split.seed": cfg.split.seed, "eta_frac": eta}
    try:
        best_state, hist = training.train(model, train_set, val_set, tcfg, callback=on_epoch)
    except TrainingDivergence as exc:
        if exc.checkpoint is not None:
            models.save_checkpoint(model, os.path.join(run_dir, "last_good.sigc"), exc.checkpoint, meta)
        raise
    seconds = time.perf_counter() - t0
    meta.update(best_epoch=hist.best_epoch, best_val_acc=hist.best_val_acc)
    models.save_checkpoint(model, os.path.join(run_dir, "checkpoint.sigc"), best_state, meta)
    report = evaluation.evaluate(model, test_set)
    evaluation.write_report(report, os.path.join(run_dir, "test_report.txt"))
    evaluation.write_accuracy_vs_snr(report, os.path.join(run_dir, "test_accuracy_vs_snr.csv"))
    summary = {
        "architecture": mcfg.architecture,
        "arch_hash": mcfg.arch_hash(),
        "parameters": model.parameter_count,
        "train_samples": len(train_set),
        "eta_frac": eta,
        "best_epoch": hist.best_epoch,
        "best_val_acc": hist.best_val_acc,
        "test_acc": report.accuracy,
        "test_macro_f1": report.macro_f1,
        "train_seconds": seconds,
    }
    _write_text(os.path.join(run_dir, "summary.txt"), "".join(f"{k}={v}\n" for k, v in summary.items()))
    log.info("best epoch %d val_acc=%.4f test_acc=%.4f (%.0fs)", hist.best_epoch, hist.best_val_acc, report.accuracy, seconds)
    return summary


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    ds = _read_dataset(cfg.run.dataset)
    for eta, run_dir in _run_dirs(cfg):
        train_run(cfg, ds, eta, run_dir)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------------


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    ds = _read_dataset(args.dataset)
    expected = None
    if args.config or args.preset:
        # the model config the caller believes produced this checkpoint
        expected = load_config(args.config, args.preset).resolved_model(len(ds.class_names), ds.length).arch_hash()
    model, meta = models.load_checkpoint(args.checkpoint, expected_hash=expected)
    if args.split == "all":
        data = ds
    else:
        spec = training.SplitSpec(tuple(float(v) for v in meta.get("split.ratios", "0.6,0.2,0.2").split(",")),
                                  int(meta.get("split.seed", 0)))
        data = dict(zip(("train", "val", "test"), training.split_dataset(ds, spec)))[args.split]
    report = evaluation.evaluate(model, data)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.split}")
    os.makedirs(out, exist_ok=True)
    evaluation.write_report(report, os.path.join(out, "report.txt"))
    evaluation.write_accuracy_vs_snr(report, os.path.join(out, "accuracy_vs_snr.csv"))
    if args.features:
        evaluation.export_features(model, data, os.path.join(out, "features.csv"))
    print(f"accuracy={report.accuracy!r} macro_f1={report.macro_f1!r} samples={report.n_samples} -> {out}")
    return EXIT_OK


# -- transform ---------------------------------------------------------------------------


def cmd_transform(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    if args.method not in transforms.TRANSFORMS:
        raise UsageError(f"unknown method {args.method!r}; choose from {sorted(transforms.TRANSFORMS)}")
    ds = _read_dataset(args.dataset)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"sample index {args.index} out of range [0, {len(ds)})")
    params = {}
    if args.method in ("s2m", "gram"):
        params.update(k=args.k, stride=args.stride)
    if args.method == "s2m":
        params["random_state"] = args.seed
        if args.checkpoint:
            _, state, _ = models.parse_checkpoint(open(args.checkpoint, "rb").read())
            key = "param:s2m.F" if "param:s2m.F" in state else "frozen:s2m.F"
            if key not in state or state[key].shape[0] != 2:
                raise UsageError("checkpoint has no two-channel input S2M filters")
            params.update(filters=state[key], k=state[key].shape[-1])
    tr = transforms.make_transformer(args.method, **params)
    X = ds.X[args.index : args.index + 1]
    img = tr.fit(X).transform(X)[0]
    if not 0 <= args.channel < img.shape[0]:
        raise UsageError(f"channel {args.channel} out of range; {args.method} has {img.shape[0]}")
    np.savetxt(args.out, img[args.channel], delimiter=",", fmt="%.17g")
    log.info("wrote %s %dx%d matrix (channel %d) to %s", args.method, *img.shape[1:], args.channel, args.out)
    return EXIT_OK


# -- verify --------------------------------------------------------------------------------


def cmd_verify(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    results = verify.run_all(include_models=not args.quick)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# -- entry point ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="signet", description="Trainable signal-to-matrix modulation classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--preset", help="start from a named preset (rml-mini, sig2019-mini, toy4)")

    g = sub.add_parser("generate", help="synthesize a dataset container")
    with_config(g)
    g.add_argument("--out", help="output dataset path")

    t = sub.add_parser("train", help=f"train into a run directory under ${RUNS_ENV} (default ./runs)")
    with_config(t)
    t.add_argument("--dataset", help="dataset container path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.add_argument("--features", action="store_true", help="also export penultimate features")

    tf = sub.add_parser("transform", help="dump one sample's matrix image as CSV")
    tf.add_argument("--dataset", required=True)
    tf.add_argument("--method", required=True)
    tf.add_argument("--index", type=int, default=0)
    tf.add_argument("--out", required=True)
    tf.add_argument("--channel", type=int, default=0)
    tf.add_argument("--k", type=int, default=3)
    tf.add_argument("--stride", type=int, default=1)
    tf.add_argument("--seed", type=int, default=0, help="seed for N(0,1) S2M filters")
    tf.add_argument("--checkpoint", help="take S2M filters from a trained checkpoint")

    v = sub.add_parser("verify", help="run gradient, oracle and invariant checks")
    v.add_argument("--quick", action="store_true", help="skip whole-model gradient checks")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "transform": cmd_transform,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, TrainingDivergence, NonFiniteError, SignetError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
