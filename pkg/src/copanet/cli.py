"""Command-line entry point.

Subcommands: params, train, eval, trace, sweep, selfcheck. Configuration
flows from an optional flat key=value file plus repeatable --set overrides
(later writes win); the effective configuration is echoed and, when an
output directory is given, serialized next to the artifacts so every run is
reproducible from its directory alone.

Exit codes: 0 ok, 1 usage/configuration, 2 data, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import analysis, data as data_mod, engine, models, selfcheck, training
from .errors import ConfigurationError, DataError, NumericError, UsageError

PLAN_KEYS = ("epochs", "lr", "lr_drop_fractions", "lr_drop_factor", "momentum",
             "weight_decay", "batch_size", "augment")
DATA_KEYS = ("data", "data_dir", "per_class", "test_per_class", "normalize")
ALL_KEYS = models.MODEL_KEYS + PLAN_KEYS + DATA_KEYS

_DATA_DEFAULTS = {"data": "synthetic", "data_dir": "", "per_class": "100",
                  "test_per_class": "50", "normalize": "meanstd"}


def _split_settings(mapping):
    model_kv, plan_kv, data_kv = {}, {}, {}
    for key, value in mapping.items():
        if key in models.MODEL_KEYS:
            model_kv[key] = value
        elif key in PLAN_KEYS:
            plan_kv[key] = value
        elif key in DATA_KEYS:
            data_kv[key] = value
        else:
            raise ConfigurationError(
                f"unknown config key {key!r}; valid keys: {', '.join(ALL_KEYS)}")
    return model_kv, plan_kv, data_kv


def _plan_from_mapping(mapping, seed, precision):
    kw = {"seed": seed, "precision": precision}
    for key, value in mapping.items():
        try:
            if key == "epochs":
                kw["total_epochs"] = int(value)
            elif key == "lr":
                kw["base_lr"] = float(value)
            elif key == "lr_drop_fractions":
                kw["lr_drop_fractions"] = tuple(float(v) for v in str(value).split(",") if v)
            elif key == "lr_drop_factor":
                kw["lr_drop_factor"] = float(value)
            elif key == "momentum":
                kw["momentum"] = float(value)
            elif key == "weight_decay":
                kw["weight_decay"] = float(value)
            elif key == "batch_size":
                kw["batch_size"] = int(value)
            elif key == "augment":
                kw["augment"] = str(value).lower() in ("1", "true", "yes")
        except ValueError as exc:
            raise ConfigurationError(f"bad value for plan key {key!r}: {value!r}") from exc
    return training.TrainPlan(**kw)


def _collect_settings(args):
    mapping = {}
    if args.config:
        try:
            with open(args.config) as fh:
                mapping.update(models.parse_flat_text(fh.read()))
        except OSError as exc:
            raise DataError(f"cannot read config file: {exc}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()  # last write wins
    return mapping


def _effective_config_text(config, plan, data_kv):
    lines = [models.config_to_text(config).rstrip("\n")]
    if plan is not None:
        lines += [f"epochs = {plan.total_epochs}",
                  f"lr = {plan.base_lr}",
                  f"lr_drop_fractions = {','.join(str(f) for f in plan.lr_drop_fractions)}",
                  f"lr_drop_factor = {plan.lr_drop_factor}",
                  f"momentum = {plan.momentum}",
                  f"weight_decay = {plan.weight_decay}",
                  f"batch_size = {plan.batch_size}",
                  f"augment = {plan.augment}"]
    for key in DATA_KEYS:
        if key in data_kv:
            lines.append(f"{key} = {data_kv[key]}")
    return "\n".join(lines) + "\n"


def _write_effective_config(out_dir, text):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(text)


def _load_data(data_kv, config, seed):
    kv = dict(_DATA_DEFAULTS, **data_kv)
    if kv["data"] == "synthetic":
        train_set = data_mod.make_synthetic(config.num_classes, int(kv["per_class"]), seed=seed)
        test_set = data_mod.make_synthetic(config.num_classes, int(kv["test_per_class"]),
                                           seed=seed + 1)
    elif kv["data"] == "cifar10":
        if not kv["data_dir"]:
            raise ConfigurationError("data=cifar10 needs data_dir=PATH")
        train_set, test_set = data_mod.load_cifar10(kv["data_dir"])
    else:
        raise ConfigurationError(f"unknown data source {kv['data']!r} (synthetic or cifar10)")
    if kv["normalize"] == "scale255":
        normalizer = data_mod.Normalizer.scale255()
    else:
        normalizer = data_mod.Normalizer.fit(train_set.images)
    return train_set, test_set, normalizer


def cmd_params(args):
    mapping = _collect_settings(args)
    model_kv, plan_kv, _ = _split_settings(mapping)
    if plan_kv:
        raise ConfigurationError(f"params does not take plan keys: {sorted(plan_kv)}")
    config = models.config_from_mapping(model_kv)
    table = models.emit_deployment_table(config)
    total = models.count_parameters(models.build(config))
    print(table, end="")
    print(f"total parameters: {total}")
    if args.out:
        _write_effective_config(args.out, _effective_config_text(config, None, {}))
        with open(os.path.join(args.out, "deployment.csv"), "w") as fh:
            fh.write(table)
    return 0


def cmd_train(args):
    mapping = _collect_settings(args)
    model_kv, plan_kv, data_kv = _split_settings(mapping)
    engine.set_precision(args.precision)
    config = models.config_from_mapping(model_kv)
    plan = _plan_from_mapping(plan_kv, args.seed, args.precision)
    text = _effective_config_text(config, plan, data_kv)
    print(text, end="")
    _write_effective_config(args.out, text)

    train_set, test_set, normalizer = _load_data(data_kv, config, args.seed)
    model = models.build(config)
    training.he_init(model, np.random.default_rng(args.seed))
    log_path = os.path.join(args.out, "log.csv") if args.out else None
    log = training.train(model, train_set, plan, normalizer=normalizer,
                         test_set=test_set, log_path=log_path)
    final = log[-1]
    print(f"epoch {final[0]}: train_loss {final[2]:.4f} train_err {final[3]:.4f} "
          f"test_err {final[4]:.4f}")
    if args.out:
        rng = np.random.default_rng(plan.seed)
        training.save_checkpoint(os.path.join(args.out, "model.ckpt"), model,
                                 epoch=plan.total_epochs - 1, rng=rng, plan=plan)
    return 0


def cmd_eval(args):
    mapping = _collect_settings(args)
    _, _, data_kv = _split_settings(mapping)
    model, _ = training.load_checkpoint(args.checkpoint)
    _, test_set, normalizer = _load_data(data_kv, model.config, args.seed)
    loss, err = training.evaluate(model, test_set, normalizer)
    print(f"test_loss {loss:.6f} test_error {err:.6f}")
    return 0


def cmd_trace(args):
    mapping = _collect_settings(args)
    _, _, data_kv = _split_settings(mapping)
    model, _ = training.load_checkpoint(args.checkpoint)
    _, test_set, normalizer = _load_data(data_kv, model.config, args.seed)
    profile = analysis.trace(model, test_set, normalizer, stage=args.stage)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "profile.csv")
    analysis.profile_to_csv(profile, csv_path)
    paths = []
    if profile.k == 2:  # signed-preference heatmaps only exist for 2 pathways
        paths = analysis.export_heatmaps(profile, out_dir, top=args.maps)
    _write_effective_config(out_dir, _effective_config_text(model.config, None, data_kv))
    print(f"wrote {csv_path} and {len(paths)} heatmaps to {out_dir}")
    return 0


def cmd_sweep(args):
    mapping = _collect_settings(args)
    model_kv, plan_kv, data_kv = _split_settings(mapping)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise UsageError("sweep needs a non-empty comma-separated --values list")
    engine.set_precision(args.precision)

    rows = []
    for value in values:
        kv = dict(model_kv)
        kv[args.axis] = value
        config = models.config_from_mapping(kv)
        params = models.count_parameters(models.build(config))
        test_err = ""
        if args.train:
            plan = _plan_from_mapping(plan_kv, args.seed, args.precision)
            train_set, test_set, normalizer = _load_data(data_kv, config, args.seed)
            model = models.build(config)
            training.he_init(model, np.random.default_rng(args.seed))
            training.train(model, train_set, plan, normalizer=normalizer)
            _, err = training.evaluate(model, test_set, normalizer)
            test_err = repr(float(err))
        rows.append((value, params, test_err))

    lines = [f"{args.axis},params,test_error"] + [f"{v},{p},{e}" for v, p, e in rows]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
            fh.write(text)
    return 0


def cmd_selfcheck(args):
    ok = selfcheck.run_selfcheck(fault=args.inject_fault)
    return 0 if ok else 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="copanet",
        description="Competitive pathway networks: build, train, analyze routing.")
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable, last wins)")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", type=int, choices=(32, 64), default=32)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("params", help="deployment table and parameter count")
    sub.add_parser("train", help="train a model")
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_trace = sub.add_parser("trace", help="routing profile of a checkpoint")
    p_trace.add_argument("--checkpoint", required=True)
    p_trace.add_argument("--stage", type=int, default=3)
    p_trace.add_argument("--maps", type=int, default=4)
    p_sweep = sub.add_parser("sweep", help="parameter/error sweep over one axis")
    p_sweep.add_argument("--axis", choices=("k", "m", "depth"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--train", action="store_true", help="also train per value")
    p_check = sub.add_parser("selfcheck", help="run the fast invariant suite")
    p_check.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return parser


_HANDLERS = {"params": cmd_params, "train": cmd_train, "eval": cmd_eval,
             "trace": cmd_trace, "sweep": cmd_sweep, "selfcheck": cmd_selfcheck}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return _HANDLERS[args.command](args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
