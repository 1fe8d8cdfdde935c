"""Command line entry points: train, eval, verify.

Exit codes: 0 on success, 1 when the requested operation fails (a
verification suite reports a violation, or a numeric failure surfaces),
2 for usage and configuration errors, 3 for unreadable or inconsistent data
files.
"""

import argparse
import os
import sys

import numpy as np
import yaml

from .baselines import sgd_train
from .cccp import evaluate, train_lwsvm
from .config import (build_network, load_config, load_dataset, load_weights,
                     save_weights, sgd_config, train_config)
from .errors import ConfigError, DataError, PlnetError
from .logs import TrainLog, write_manifest
from .verify import SUITES, run_all

__all__ = ["main"]


def _apply_overrides(cfg, assignments):
    for item in assignments:
        if "=" not in item:
            raise ConfigError("override %r is not key=value" % (item,))
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError("cannot parse override %r: %s" % (item, exc)) from exc
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("override %r crosses a non-mapping" % (item,))
        node[parts[-1]] = value
    return cfg


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="plnet",
        description="Layerwise SVM training for piecewise-linear networks")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="pretrain and run the layerwise schedule")
    train.add_argument("--config", required=True, help="YAML config file")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, default=None, help="override config seed")
    train.add_argument("--timing", action="store_true",
                       help="record wall-clock seconds in metrics (breaks reproducibility)")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.passes=3")

    ev = sub.add_parser("eval", help="evaluate saved weights on the test split")
    ev.add_argument("--config", required=True)
    ev.add_argument("--weights", required=True)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    ver = sub.add_parser("verify", help="run the built-in consistency suites")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--fault", choices=sorted(SUITES), default=None,
                     help="corrupt one suite on purpose (it must then fail)")
    return parser


def _cmd_train(args):
    cfg = _apply_overrides(load_config(args.config), args.set)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)

    train, val, test = load_dataset(cfg, rng)
    net = build_network(cfg, rng)
    tcfg = train_config(cfg)
    scfg = sgd_config(cfg, tcfg.lam)

    log = TrainLog()
    if scfg.epochs > 0:
        sgd_train(net, train, scfg, rng, val_data=val, log=log,
                  timing=args.timing)
    train_lwsvm(net, train, tcfg, rng, val_data=val, log=log,
                timing=args.timing)

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    weights_path = os.path.join(args.out, "weights.plnw")
    log.write_csv(metrics_path)
    save_weights(net, weights_path)
    with open(os.path.join(args.out, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)

    summary = {
        "seed": seed,
        "train": evaluate(net, train, tcfg.lam),
        "test": evaluate(net, test, tcfg.lam),
    }
    if val is not None:
        summary["val"] = evaluate(net, val, tcfg.lam)
    write_manifest(os.path.join(args.out, "manifest.json"), summary)

    print("train objective %.6f, accuracy %.4f"
          % (summary["train"]["objective"], summary["train"]["accuracy"]))
    if val is not None:
        print("val accuracy %.4f" % summary["val"]["accuracy"])
    print("test accuracy %.4f" % summary["test"]["accuracy"])
    print("wrote %s, %s" % (metrics_path, weights_path))
    return 0


def _cmd_eval(args):
    cfg = _apply_overrides(load_config(args.config), args.set)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    train, val, test = load_dataset(cfg, rng)
    net = build_network(cfg, rng)
    load_weights(net, args.weights)
    lam = train_config(cfg).lam
    for name, ds in (("train", train), ("val", val), ("test", test)):
        if ds is None:
            continue
        res = evaluate(net, ds, lam)
        print("%s objective %.6f, accuracy %.4f"
              % (name, res["objective"], res["accuracy"]))
    return 0


def _cmd_verify(args):
    results = run_all(args.seed, fault=args.fault)
    failed = False
    for res in results:
        status = "ok" if res.ok else "FAIL"
        print("%-8s %-9s %s" % (status, res.name, res.detail))
        failed = failed or not res.ok
    return 1 if failed else 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_verify(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except DataError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except PlnetError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
