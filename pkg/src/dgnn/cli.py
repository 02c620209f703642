"""Command-line pipeline: generate, split, train, evaluate, experiments.

Only the standard library is imported at module level; the worker modules
(and numpy with them) load inside the subcommand handlers, after
``--threads`` / ``DGNN_THREADS`` has been applied to the environment.

Every option can also come from a ``key=value`` config file (``--config``);
explicit flags win over file values, file values win over defaults.
"""

import argparse
import os
import sys


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config file and option resolution


_MISSING = object()


def load_config_file(path):
    """Parse a key=value file; blank lines and # comments are skipped."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _cast_str(raw, cast, key):
    if cast is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"bad boolean for {key}: {raw!r}")
    try:
        return cast(raw)
    except ValueError:
        raise CliError(f"bad value for {key}: {raw!r}") from None


def _resolve(args, key, cast, default):
    """Flag if given, else config-file entry, else the default."""
    val = getattr(args, key)
    if val is not None:
        return val
    raw = args.file_cfg.get(key, _MISSING)
    if raw is _MISSING:
        return default
    return _cast_str(raw, cast, key)


def _parse_fractions(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise CliError(f"expected three comma-separated fractions, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise CliError(f"bad fractions {text!r}") from None


def _set_threads(args):
    value = args.threads
    if value is None:
        value = os.environ.get("DGNN_THREADS")
    if value is None:
        return
    try:
        count = int(value)
    except ValueError:
        raise CliError(f"bad thread count {value!r}") from None
    if count < 1:
        raise CliError(f"bad thread count {count}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(count)


# ---------------------------------------------------------------------------
# shared pieces


def _model_config(args, mpnn):
    """Model settings; defaults are the tuned experiment settings."""
    from . import trainkit

    base = mpnn.ModelConfig()
    defaults = trainkit.EXP_MODEL_DEFAULTS
    strategy = _resolve(args, "strategy", str, base.strategy)
    return mpnn.ModelConfig(
        strategy=strategy,
        readout=_resolve(args, "readout", str, base.readout),
        normalize=_resolve(args, "norm", bool, base.normalize),
        hidden_dim=_resolve(args, "hidden_dim", int, defaults["hidden_dim"]),
        steps=_resolve(args, "steps", int,
                       trainkit.EXP_STRATEGY_STEPS[strategy]),
        net_width=_resolve(args, "net_width", int, defaults["net_width"]),
        seed=_resolve(args, "seed", int, 0),
    )


def _train_config(args, trainkit):
    defaults = trainkit.EXP_TRAIN_DEFAULTS
    return trainkit.TrainConfig(
        epochs=_resolve(args, "epochs", int, defaults["epochs"]),
        batch_size=_resolve(args, "batch_size", int, defaults["batch_size"]),
        lr=_resolve(args, "lr", float, defaults["lr"]),
        patience=_resolve(args, "patience", int, defaults["patience"]),
        seed=_resolve(args, "seed", int, 0),
    )


def _exp_overrides(args):
    """Only explicitly-set model/train keys, for the experiment drivers."""
    model, train = {}, {}
    for key, cast in (("hidden_dim", int), ("steps", int), ("net_width", int)):
        val = _resolve(args, key, cast, None)
        if val is not None:
            model[key] = val
    for key, cast in (("epochs", int), ("batch_size", int), ("lr", float),
                      ("patience", int)):
        val = _resolve(args, key, cast, None)
        if val is not None:
            train[key] = val
    return model, train


def _print_metric_rows(model, manifest, method, trainkit):
    print(trainkit.CSV_HEADER)
    for split_name in ("train", "val", "test"):
        if not manifest.split_samples(split_name):
            continue
        metrics = trainkit.evaluate(model, manifest, split_name)
        print(metrics.row(method, split_name))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    from . import dataset

    seed = _resolve(args, "seed", int, 0)
    gamma = _resolve(args, "gamma", float, dataset.DEFAULT_GAMMA)
    noise = _resolve(args, "noise", float, dataset.DEFAULT_NOISE)
    library = _resolve(args, "library", str, None)
    alcohols, halides = dataset.load_library(library)
    manifest = dataset.generate_dataset(alcohols, halides, seed=seed,
                                        gamma=gamma, noise_scale=noise)
    dataset.save_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return 0


def cmd_split(args):
    from . import dataset

    manifest = dataset.load_manifest(args.inp)
    protocol = _resolve(args, "protocol", str, "random").replace("-", "_")
    fractions = _parse_fractions(_resolve(args, "fractions", str, "0.8,0.1,0.1"))
    seed = _resolve(args, "seed", int, 0)
    manifest = dataset.split(manifest, protocol, fractions, seed)
    out = args.out or args.inp
    dataset.save_manifest(manifest, out)
    counts = {name: len(manifest.split_samples(name))
              for name in ("train", "val", "test")}
    print(f"wrote {out} (train {counts['train']}, val {counts['val']}, "
          f"test {counts['test']})")
    return 0


def cmd_train(args):
    from . import checkpoint, dataset, mpnn, trainkit

    manifest = dataset.load_manifest(args.inp)
    config = _model_config(args, mpnn)
    model = mpnn.new_model(config)
    model, _ = trainkit.train(model, manifest, _train_config(args, trainkit))
    checkpoint.save_model(model, args.out)
    _print_metric_rows(model, manifest, f"mpnn_{config.strategy}", trainkit)
    return 0


def cmd_baseline(args):
    from . import baseline, checkpoint, dataset, trainkit

    manifest = dataset.load_manifest(args.inp)
    base = baseline.MlpConfig()
    config = baseline.MlpConfig(
        radius=_resolve(args, "radius", int, base.radius),
        nbits=_resolve(args, "nbits", int, base.nbits),
        seed=_resolve(args, "seed", int, 0),
    )
    model = baseline.new_mlp_model(config)
    model, _ = trainkit.train(model, manifest, _train_config(args, trainkit))
    checkpoint.save_model(model, args.out)
    _print_metric_rows(model, manifest, "mlp", trainkit)
    return 0


def cmd_eval(args):
    from . import checkpoint, dataset, mpnn, trainkit

    model = checkpoint.load_model(args.ckpt)
    manifest = dataset.load_manifest(args.inp)
    split_name = _resolve(args, "split", str, "test")
    if split_name not in ("train", "val", "test"):
        raise CliError(f"unknown split {split_name!r}")
    if not manifest.split_samples(split_name):
        raise CliError(f"manifest has no {split_name!r} samples")
    if isinstance(model, mpnn.Model):
        method = f"mpnn_{model.config.strategy}"
    else:
        method = "mlp"
    metrics = trainkit.evaluate(model, manifest, split_name)
    print(trainkit.CSV_HEADER)
    print(metrics.row(method, split_name))
    return 0


def cmd_outliers(args):
    from . import dataset, mpnn, trainkit

    manifest = dataset.load_manifest(args.inp)
    config = _model_config(args, mpnn)
    max_iters = _resolve(args, "max_iters", int, 3)
    threshold_k = _resolve(args, "threshold_k", float, 6.0)
    min_residual = _resolve(args, "min_residual", float, 1.0)
    clean, outliers = trainkit.detect_outliers(
        manifest, config, _train_config(args, trainkit),
        threshold_k=threshold_k, max_iters=max_iters,
        min_residual=min_residual)
    dataset.save_manifest(clean, args.out)
    if args.report:
        import json

        with open(args.report, "w", encoding="utf-8") as fh:
            for record in outliers:
                fh.write(json.dumps(record) + "\n")
    print(f"flagged {len(outliers)} of {len(manifest)} samples; "
          f"clean manifest at {args.out}")
    return 0


def _run_experiment(args, which):
    from . import dataset, trainkit

    manifest = dataset.load_manifest(args.inp)
    os.makedirs(args.outdir, exist_ok=True)
    seed = _resolve(args, "seed", int, 0)
    model_kw, train_kw = _exp_overrides(args)
    out_csv = os.path.join(args.outdir, f"{which}_metrics.csv")
    runner = (trainkit.run_experiment1 if which == "exp1"
              else trainkit.run_experiment2)
    runner(manifest, seed=seed, out_csv=out_csv, log_dir=args.outdir,
           model_overrides=model_kw or None, train_overrides=train_kw or None)
    print(f"wrote {out_csv}")
    return 0


def cmd_exp1(args):
    return _run_experiment(args, "exp1")


def cmd_exp2(args):
    return _run_experiment(args, "exp2")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", help="thread cap; DGNN_THREADS is the fallback")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--strategy", choices=("dg", "fc", "gn"))
    model_flags.add_argument("--readout", choices=("gated", "gr", "cr"))
    model_flags.add_argument("--norm", action="store_const", const=True,
                             help="row-normalize node features")
    model_flags.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    model_flags.add_argument("--steps", type=int)
    model_flags.add_argument("--net-width", dest="net_width", type=int)

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--epochs", type=int)
    train_flags.add_argument("--batch-size", dest="batch_size", type=int)
    train_flags.add_argument("--lr", type=float)
    train_flags.add_argument("--patience", type=int)

    parser = argparse.ArgumentParser(
        prog="dgnn", description="reaction-energy models over reactant pairs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="generate a labeled manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--library", help="directory of molecule JSON files")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", parents=[common],
                       help="assign train/val/test")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", help="default: rewrite the input file")
    p.add_argument("--protocol",
                   choices=("random", "leave-alcohol-out", "leave_alcohol_out"))
    p.add_argument("--fractions", help="e.g. 0.8,0.1,0.1")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common, model_flags, train_flags],
                       help="train one message-passing model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", parents=[common, train_flags],
                       help="train the fingerprint MLP")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--radius", type=int)
    p.add_argument("--nbits", type=int)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("outliers", parents=[common, model_flags, train_flags],
                       help="iterative residual-based label cleaning")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="clean manifest path")
    p.add_argument("--report", help="outlier records as JSONL")
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--threshold-k", dest="threshold_k", type=float)
    p.add_argument("--min-residual", dest="min_residual", type=float,
                   help="flagging floor in train-label standard deviations")
    p.set_defaults(func=cmd_outliers)

    exp_model_flags = argparse.ArgumentParser(add_help=False)
    exp_model_flags.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    exp_model_flags.add_argument("--steps", type=int)
    exp_model_flags.add_argument("--net-width", dest="net_width", type=int)

    for name, fn in (("exp1", cmd_exp1), ("exp2", cmd_exp2)):
        p = sub.add_parser(name, parents=[common, exp_model_flags, train_flags],
                           help=f"run experiment {name[-1]} and emit CSV")
        p.add_argument("--in", dest="inp", required=True)
        p.add_argument("--outdir", required=True)
        p.set_defaults(func=fn)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args)
        args.file_cfg = load_config_file(args.config) if args.config else {}
        return int(args.func(args) or 0)
    except Exception as exc:  # one-line, machine-parsable error contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
