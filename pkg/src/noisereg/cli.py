"""Command line: ``noisereg {train,sweep,report,inspect}``.

Settings come from an optional TOML file (``--config``) and then from flags,
which win. The file uses the flag names with underscores; keys may sit at
top level or inside any section, e.g.::

    [data]
    dataset = ["mnist", "adult"]
    subsample = 10000

    [regularizer]
    scheme = ["none", "l2"]
    lambda = 0.01

    [train]
    epochs = 50
    noise_levels = [0.0, 0.4, 0.8, 1.2]
    seed = [0, 1, 2]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .regularizers import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

LIST_KEYS = {"dataset", "scheme", "noise_levels", "seed"}
KNOWN_KEYS = {
    "dataset", "scheme", "lambda", "dropout", "noise_levels", "epochs", "batch_size", "lr", "seed",
    "out", "subsample", "emit_noisy", "resume", "workers", "arch", "tune", "metric_split",
    "report_every", "jacobian_samples", "beta1", "beta2", "adam_eps", "lcnn_reduction", "save_checkpoints",
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def load_config_file(path) -> dict:
    """Flatten a TOML settings file into ``{flag_name: value}``."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    flat: dict = {}

    def walk(d, where):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v, f"{where}{k}.")
                continue
            key = k.replace("-", "_")
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}: unknown setting {where}{k}")
            if key in flat:
                raise ConfigError(f"{path}: setting {key} given twice")
            flat[key] = v

    walk(raw, "")
    for key in LIST_KEYS & flat.keys():
        if not isinstance(flat[key], list):
            flat[key] = [flat[key]]
    return flat


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = argparse.SUPPRESS  # unset flags must not override the config file
    p.add_argument("--config", help="TOML settings file; flags override it")
    p.add_argument("--dataset", type=_strs, default=d, help="mnist, adult or a CSV path (comma-separated for sweeps)")
    p.add_argument("--scheme", type=_strs, default=d,
                   help="none, l2, darc1, lcnn, jacobian, spectral, dropout (comma-separated for sweeps)")
    p.add_argument("--lambda", dest="lambda", type=float, default=d, help="penalty strength for lambda schemes")
    p.add_argument("--dropout", type=float, default=d, help="dropout rate p")
    p.add_argument("--noise-levels", dest="noise_levels", type=_floats, default=d, help="comma-separated noise factors t")
    p.add_argument("--epochs", type=int, default=d)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=d)
    p.add_argument("--lr", type=float, default=d)
    p.add_argument("--seed", type=_ints, default=d, help="comma-separated seeds")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--subsample", type=int, default=d, help="max training rows (0 keeps all)")
    p.add_argument("--emit-noisy", dest="emit_noisy", action="store_true", default=d,
                   help="also write each noisy training set as CSV")
    p.add_argument("--resume", action="store_true", default=d, help="skip cells that already have a manifest")
    p.add_argument("--workers", type=int, default=d, help="parallel worker processes")
    p.add_argument("--arch", choices=["shallow", "deep"], default=d)
    p.add_argument("--tune", action="store_true", default=d, help="grid-search each scheme's hyperparameter first")
    p.add_argument("--metric-split", dest="metric_split", choices=["train", "val", "test"], default=d)
    p.add_argument("--report-every", dest="report_every", type=int, default=d,
                   help="complexity report every N epochs (0: final only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisereg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"noisereg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a single cell and save its checkpoint")
    _add_run_flags(p)
    p = sub.add_parser("sweep", help="run the dataset x scheme x noise x seed matrix")
    _add_run_flags(p)
    p = sub.add_parser("report", help="re-emit summary and charts from a results CSV")
    p.add_argument("--out", required=True, help="sweep output directory (holding results.csv)")
    p = sub.add_parser("inspect", help="print the complexity report of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="dataset to evaluate on (default: the one stored in the checkpoint)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, help="split seed (default: the checkpoint's)")
    p.add_argument("--subsample", type=int, help="max training rows (default: the checkpoint's)")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    """Config-file values overlaid with explicitly given flags."""
    settings = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in KNOWN_KEYS:
        if hasattr(args, key):
            settings[key] = getattr(args, key)
    return settings


def experiment_config(settings: dict):
    from .experiment import ExperimentConfig

    s = dict(settings)
    s.pop("resume", None)
    mapping = {"dataset": "datasets", "scheme": "schemes", "lambda": "lam", "seed": "seeds"}
    kwargs = {mapping.get(k, k): v for k, v in s.items()}
    if kwargs.get("subsample") == 0:
        kwargs["subsample"] = None
    return ExperimentConfig.from_dict(kwargs)


def _cmd_run(args, single: bool) -> int:
    from .experiment import emit_reports, run_experiment_matrix

    settings = resolve_settings(args)
    if single:
        for key in LIST_KEYS:
            if key in settings and len(settings[key]) != 1:
                raise ConfigError(f"train runs one cell; give a single {key.replace('_', '-')}")
        settings.setdefault("dataset", ["mnist"])
        settings.setdefault("scheme", ["none"])
        settings.setdefault("noise_levels", [0.0])
        settings.setdefault("seed", [0])
        settings.setdefault("save_checkpoints", True)
        settings.setdefault("out", "runs/train")
    config = experiment_config(settings)
    log = lambda msg: print(msg, flush=True)
    rows = run_experiment_matrix(config, resume=bool(settings.get("resume")), log=log)
    if not single:
        for path in emit_reports(config.out):
            print(f"wrote {path}")
    for r in rows:
        head = f"{r['dataset']} {r['scheme']} t={r['noise']!r} seed={r['seed']}"
        if r["status"] == "done":
            print(f"{head}  test_acc={r['test_accuracy']:.4f}  frobenius_sum={r['frobenius_sum']:.6g}")
        else:
            print(f"{head}  {r['status']}")
    print(f"results: {Path(config.out) / 'results.csv'}")
    return 0


def _cmd_report(args) -> int:
    from .experiment import emit_reports

    for path in emit_reports(args.out):
        print(f"wrote {path}")
    return 0


def _cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint
    from .complexity import full_report
    from .data import load_dataset

    net, meta = load_checkpoint(args.checkpoint)
    cell = meta.get("cell", {})
    dataset = args.dataset or cell.get("dataset")
    if dataset is None:
        raise ConfigError("checkpoint does not record its dataset; pass --dataset")
    seed = args.seed if args.seed is not None else int(cell.get("seed", 0))
    sub = args.subsample if args.subsample is not None else meta.get("subsample", 10_000)
    bundle = load_dataset(dataset, seed=seed, max_train=sub or None)
    data = getattr(bundle, args.split)
    report = full_report(net, data.X, data.Y, args.split, seed=seed)
    print(json.dumps({"checkpoint": str(args.checkpoint), "dataset": dataset, "params": net.param_count(),
                      **report.as_row()}, indent=1))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_run(args, single=True)
        if args.command == "sweep":
            return _cmd_run(args, single=False)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_inspect(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"noisereg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
