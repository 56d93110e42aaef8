"""Command-line entry point.

Subcommands::

    opera verify  [--trials N] [--seed S]
    opera train   CONFIG [--out DIR]
    opera eval    CHECKPOINT (--data CSV [--test CSV] | --config CONFIG) [--protocol probe|knn|ordering]
    opera compare CONFIG CONFIG [...] [--out DIR]

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 numeric
divergence. ``OPERA_OUT`` overrides the output directory named in a config.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import theory
from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_config, load_config
from .data import load_csv, save_csv
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError, OperaError, SamplingError
from .evaluation import knn_eval, linear_probe, similarity_ordering
from .gradcheck import check_opera_gradients
from .numerics import Rng
from .training import RunConfig, datasets_for, pretrain

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

COMPARE_COLUMNS = [
    "config",
    "mode",
    "arrangement",
    "seed",
    "final_loss",
    "probe_accuracy",
    "knn_accuracy",
    "mean_same_instance",
    "mean_same_class",
    "mean_cross_class",
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj, stream=None):
    stream = sys.stdout if stream is None else stream
    stream.write(json.dumps(obj) + "\n")
    stream.flush()


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def run_checks(trials=100, seed=0, perturb=0.0, gradcheck_seeds=3):
    """Every theory and gradient check as ``(name, passed, report dict)``."""
    rng = Rng(seed)
    results = []

    for i, kind in enumerate(("softmax", "infonce")):
        rep = theory.verify_gradient_identity(kind, rng.spawn(100 + i), trials, perturb=perturb)
        results.append((f"{kind}_gradient_identity", rep.max_rel_error < 1e-12, {**rep.to_dict(), "tolerance": 1e-12}))

    rep = theory.verify_proposition1(None, rng.spawn(200), trials)
    results.append(("proposition1", rep.max_rel_discrepancy < 1e-8, {**rep.to_dict(), "tolerance": 1e-8}))

    c1 = theory.verify_corollary1(None, theory.SchemeWeights.random, rng.spawn(300), 10 * trials)
    results.append(("corollary1", c1.ok, c1.to_dict()))

    # the cross-instance, same-class coefficient must match the direct gradient path
    worst = 0.0
    crng = rng.spawn(400)
    for t in range(trials):
        trng = crng.spawn(t)
        hier = theory.LinearHierarchy.random(trng)
        w = theory.SchemeWeights.random(trng)
        p = trng.normal(hier.dim)
        signed = theory.verify_corollary2(hier, w.w_n_self, w.w_p_full, p)
        direct = float(theory.hierarchical_gradient(hier, trng.normal(hier.dim), p, theory.SAME_CLASS, w) @ p)
        alpha, beta = theory.alpha_beta(hier, p)
        scale = max(w.w_n_self * alpha, w.w_p_full * beta, 1e-300)
        worst = max(worst, abs(signed - direct) / scale)
    results.append(("corollary2", worst < 1e-8, {"trials": trials, "max_rel_discrepancy": worst, "tolerance": 1e-8}))

    errs = []
    s = 0
    while len(errs) < gradcheck_seeds:
        err, dist = check_opera_gradients(seed * 1000 + s, min_distance=1e-3, perturb=perturb)
        s += 1
        if dist >= 1e-3:
            errs.append(err)
    worst_fd = max(errs) if errs else 0.0
    results.append(
        ("opera_end_to_end_gradient", worst_fd < 1e-4, {"seeds": len(errs), "max_rel_error": worst_fd, "tolerance": 1e-4})
    )
    return results


def cmd_verify(args):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    failed = False
    for name, passed, report in run_checks(args.trials, args.seed, perturb=args.perturb_gradient):
        _emit({"check": name, "passed": bool(passed), **report})
        failed |= not passed
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def resolve_out(cfg, config_path, flag=None):
    if flag:
        return Path(flag)
    env = os.environ.get("OPERA_OUT")
    if env:
        return Path(env)
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / Path(config_path).stem


def write_metrics(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


def train_run(cfg, out):
    """Train and persist one run; returns ``(pair, history, train, test)``."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets_for(cfg)
    (out / "config.resolved").write_text(format_config(cfg), encoding="utf-8")
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    try:
        # overflow on the way to a non-finite loss is reported as a divergence instead
        with np.errstate(over="ignore", invalid="ignore"):
            pair, history = pretrain(cfg, train)
    except DivergenceError as exc:
        hist = getattr(exc, "history", None)
        if hist is not None:
            write_metrics(out / "metrics.jsonl", hist.records)
        raise
    write_metrics(out / "metrics.jsonl", history.records)
    with open(out / "timing.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in history.records:
            fh.write(json.dumps({"epoch": rec.epoch, "wall_ms": rec.wall_ms}) + "\n")
    save_checkpoint(pair, out / "final.ckpt")
    return pair, history, train, test


def cmd_train(args):
    cfg = load_config(args.config)
    out = resolve_out(cfg, args.config, args.out)
    _, history, _, _ = train_run(cfg, out)
    last = history.records[-1]
    _emit({"out": str(out), "epochs": len(history.records), "final_loss": last.loss_total}, sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def evaluate(pair, train, test, protocol, cfg=None, k=None, samples=None, seed=0):
    encoder = pair.online.encode
    if train.dim != pair.online.input_dim:
        raise ConfigError(f"dataset width {train.dim} does not match model input width {pair.online.input_dim}")
    if protocol == "probe":
        epochs = cfg.probe_epochs if cfg else 100
        lr = cfg.probe_lr if cfg else 0.1
        res = linear_probe(encoder, train, test, epochs=epochs, lr=lr, seed=seed)
        return {"protocol": "probe", **res.to_dict()}
    if protocol == "knn":
        k = k or (cfg.knn_k if cfg else 5)
        return {"protocol": "knn", "k": k, "accuracy": knn_eval(encoder, train, test, k)}
    if protocol == "ordering":
        aug = (cfg or RunConfig()).augment_config()
        n = samples or (cfg.ordering_samples if cfg else 2000)
        diag = similarity_ordering(encoder, test, aug, Rng(seed).spawn(20), n)
        return {"protocol": "ordering", "samples": n, **diag.to_dict()}
    raise UsageError(f"unknown protocol {protocol}")


def cmd_eval(args):
    pair = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else None
    if args.data:
        train = load_csv(args.data)
        test = load_csv(args.test) if args.test else train
        k = max(train.num_classes, test.num_classes)
        train, test = train.with_num_classes(k), test.with_num_classes(k)
    elif cfg is not None:
        train, test = datasets_for(cfg)
    else:
        raise UsageError("eval needs --data CSV or --config CONFIG")
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    _emit(evaluate(pair, train, test, args.protocol, cfg, args.k, args.samples, seed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def compare_row(config_path, out_root):
    cfg = load_config(config_path)
    out = out_root / Path(config_path).stem
    pair, history, train, test = train_run(cfg, out)
    probe = evaluate(pair, train, test, "probe", cfg, seed=cfg.seed)
    knn = evaluate(pair, train, test, "knn", cfg, seed=cfg.seed)
    order = evaluate(pair, train, test, "ordering", cfg, seed=cfg.seed)
    return {
        "config": str(config_path),
        "mode": cfg.mode,
        "arrangement": cfg.arrangement,
        "seed": cfg.seed,
        "final_loss": history.records[-1].loss_total,
        "probe_accuracy": probe["accuracy"],
        "knn_accuracy": knn["accuracy"],
        "mean_same_instance": order["mean_same_instance"],
        "mean_same_class": order["mean_same_class"],
        "mean_cross_class": order["mean_cross_class"],
    }


def cmd_compare(args):
    if len(args.configs) < 2:
        raise UsageError("compare needs at least two configs")
    out_root = Path(args.out or os.environ.get("OPERA_OUT") or "runs/compare")
    out_root.mkdir(parents=True, exist_ok=True)
    csv_path = Path(args.csv) if args.csv else out_root / "compare.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writers = [csv.DictWriter(fh, COMPARE_COLUMNS, lineterminator="\n"), csv.DictWriter(sys.stdout, COMPARE_COLUMNS, lineterminator="\n")]
        for w in writers:
            w.writeheader()
        fh.flush()
        for path in args.configs:
            row = compare_row(path, out_root)
            for w in writers:
                w.writerow(row)
            fh.flush()
            sys.stdout.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="opera", description="Hierarchical self/full supervision experiments and checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify", help="run theory and gradient checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="pretrain from a config file")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="training CSV (probe/kNN fit set)")
    p.add_argument("--test", help="test CSV (defaults to --data)")
    p.add_argument("--config", help="regenerate the datasets from a run config")
    p.add_argument("--protocol", choices=("probe", "knn", "ordering"), default="probe")
    p.add_argument("--k", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate several configs, one CSV row each")
    p.add_argument("configs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"opera: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"opera: config error: {exc}{key}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataFormatError, SamplingError) as exc:
        print(f"opera: input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"opera: diverged at epoch {exc.epoch}; last good epoch {exc.last_good_epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OperaError as exc:
        print(f"opera: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"opera: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
