"""The experiment matrix: dataset x regularizer x noise level x seed.

Each cell trains one network and writes its own directory::

    <out>/cells/<cell id>/epochs.csv     per-epoch metrics, long format
    <out>/cells/<cell id>/result.json    final metrics
    <out>/cells/<cell id>/manifest.json  resolved config, seeds, version, timing

The manifest is written last, so a cell counts as finished exactly when its
manifest exists. ``results.csv`` and ``tidy.csv`` are rebuilt from the cell
directories in canonical order, which makes them independent of worker
scheduling and of whether the sweep was interrupted and resumed.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .complexity import REPORT_COLUMNS
from .data import DatasetBundle, load_dataset, save_csv
from .noise import SHALLOW_LEVELS, NoiseConfig, inject_noise
from .regularizers import ConfigError, RegularizerConfig, Scheme
from .training import DivergedError, TrainConfig, build_network, grid_search, train

__all__ = [
    "ExperimentConfig",
    "Cell",
    "cells_for",
    "run_cell",
    "run_experiment_matrix",
    "read_results",
    "emit_reports",
    "RESULT_COLUMNS",
    "TIDY_COLUMNS",
    "CHART_METRICS",
]

RESULT_KEYS = ("dataset", "scheme", "hyperparameter", "noise", "seed", "status")
FINAL_METRICS = ("best_epoch", "best_val_accuracy", "test_accuracy", "test_loss",
                 *[c for c in REPORT_COLUMNS if c != "eval_split"])
RESULT_COLUMNS = (*RESULT_KEYS, *FINAL_METRICS)
TIDY_COLUMNS = ("dataset", "scheme", "noise", "seed", "metric", "epoch", "value")
CHART_METRICS = ("test_accuracy", "test_loss", "log2_frobenius_sum", "darc1_norm", "lcnn_norm", "jacobian_norm")


@dataclass
class ExperimentConfig:
    datasets: list[str] = field(default_factory=lambda: ["mnist", "adult"])
    schemes: list[str] = field(default_factory=lambda: [s.value for s in Scheme])
    #: Strength for every lambda-scheme without its own entry in ``lambdas``.
    lam: float = 1e-2
    lambdas: dict[str, float] = field(default_factory=dict)
    dropout: float = 0.5
    noise_levels: list[float] = field(default_factory=lambda: list(SHALLOW_LEVELS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    subsample: int | None = 10_000
    arch: str = "shallow"
    metric_split: str = "test"
    report_every: int = 1
    jacobian_samples: int = 2000
    lcnn_reduction: str = "all"
    #: Pick each scheme's hyperparameter by grid search on the noise-free data first.
    tune: bool = False
    workers: int = 1
    emit_noisy: bool = False
    save_checkpoints: bool = False
    out: str = "runs"

    def __post_init__(self):
        if not self.datasets or not self.schemes or not self.noise_levels or not self.seeds:
            raise ConfigError("datasets, schemes, noise_levels and seeds must be non-empty")
        for s in self.schemes:
            Scheme.parse(s)
        if any(not t >= 0 for t in self.noise_levels):
            raise ConfigError(f"noise levels must be nonnegative, got {self.noise_levels}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.train_config()  # validates epochs, batch size, lr, split

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, seed, self.beta1, self.beta2,
                           self.adam_eps, self.metric_split, self.report_every, self.jacobian_samples)

    def regularizer(self, scheme: str, value: float | None = None) -> RegularizerConfig:
        s = Scheme.parse(scheme)
        if s is Scheme.DROPOUT:
            return RegularizerConfig(s, 0.0, self.dropout if value is None else value, self.lcnn_reduction)
        lam = value if value is not None else self.lambdas.get(s.value, self.lam)
        return RegularizerConfig(s, lam if s.uses_lambda else 0.0, None, self.lcnn_reduction)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Cell:
    dataset: str
    reg: RegularizerConfig
    noise: float
    level_index: int
    seed: int

    @property
    def cell_id(self) -> str:
        hyper = self.reg.hyperparameter
        tag = "" if hyper is None else f"-{hyper!r}"
        return f"{Path(self.dataset).stem}__{self.reg.scheme.value}{tag}__t{self.noise!r}__s{self.seed}"

    def key(self) -> dict:
        return {"dataset": self.dataset, "scheme": self.reg.scheme.value,
                "hyperparameter": self.reg.hyperparameter, "noise": self.noise, "seed": self.seed}


def cells_for(config: ExperimentConfig, tuned: dict[tuple[str, str], float] | None = None) -> list[Cell]:
    """Every cell in canonical order: dataset, scheme, noise level, seed."""
    tuned = tuned or {}
    out = []
    for ds in config.datasets:
        for scheme in config.schemes:
            s = Scheme.parse(scheme).value
            reg = config.regularizer(s, tuned.get((ds, s)))
            for i, t in enumerate(config.noise_levels):
                for seed in config.seeds:
                    out.append(Cell(ds, reg, float(t), i, int(seed)))
    return out


# ---------------------------------------------------------------- one cell


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")
    os.replace(tmp, path)


_BUNDLES: dict[tuple, DatasetBundle] = {}


def _bundle(name: str, seed: int, subsample: int | None) -> DatasetBundle:
    key = (name, seed, subsample)
    if key not in _BUNDLES:
        _BUNDLES.clear()  # keep at most one dataset in memory per process
        _BUNDLES[key] = load_dataset(name, seed=seed, max_train=subsample)
    return _BUNDLES[key]


def run_cell(cell: Cell, config: ExperimentConfig, out: Path,
             log: Callable[[str], None] | None = None) -> dict:
    """Train one cell, write its files, and return its result row."""
    t0 = time.time()
    cdir = out / "cells" / cell.cell_id
    cdir.mkdir(parents=True, exist_ok=True)
    bundle = _bundle(cell.dataset, cell.seed, config.subsample)
    noise_cfg = NoiseConfig(cell.noise, cell.seed, (cell.level_index,))
    train_set = inject_noise(bundle.train, noise_cfg)
    if config.emit_noisy:
        ndir = out / "noisy"
        ndir.mkdir(exist_ok=True)
        save_csv(train_set, ndir / f"{Path(cell.dataset).stem}__t{cell.noise!r}__s{cell.seed}.csv")
    net = build_network(config.arch, bundle.train.dim, bundle.train.num_classes, cell.reg, cell.seed)
    tcfg = config.train_config(cell.seed)
    row = {**cell.key(), "status": "done"}
    epoch_rows: list[tuple[str, int, float]] = []
    error = None
    try:
        report = train(net, train_set, bundle.val, cell.reg, tcfg, bundle.test, log=log)
    except DivergedError as exc:
        error = str(exc)
        row["status"] = "diverged"
        row.update({m: math.nan for m in FINAL_METRICS})
    else:
        row.update(report.final_metrics())
        for rec in report.epochs:
            epoch_rows += [(k, rec.epoch, v) for k, v in rec.metrics().items()]
        if config.save_checkpoints:
            save_checkpoint(net, cdir / "model.ckpt", {"cell": cell.key(), "train": asdict(tcfg),
                                                               "arch": config.arch, "subsample": config.subsample})
    with open(cdir / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "epoch", "value"))
        for metric, epoch, value in epoch_rows:
            w.writerow((metric, epoch, repr(float(value))))
    _write_json(cdir / "result.json", {k: row.get(k) for k in RESULT_COLUMNS})
    manifest = {
        "cell": cell.cell_id,
        "key": cell.key(),
        "regularizer": cell.reg.to_dict(),
        "noise": asdict(noise_cfg),
        "train": asdict(tcfg),
        "data": bundle.info,
        "preprocessing": "split -> subsample train -> standardize (train statistics) -> inject noise (train only)",
        "experiment": config.to_dict(),
        "status": row["status"],
        "error": error,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "started": t0,
        "seconds": time.time() - t0,
    }
    _write_json(cdir / "manifest.json", manifest)
    return row


def _cell_done(out: Path, cell: Cell) -> bool:
    return (out / "cells" / cell.cell_id / "manifest.json").exists()


def _worker(args):
    cell, config, out = args
    run_cell(cell, config, Path(out))
    return cell.cell_id


# ---------------------------------------------------------------- the matrix


def _tune(config: ExperimentConfig, out: Path, log) -> dict[tuple[str, str], float]:
    path = out / "tuning.json"
    chosen = json.loads(path.read_text()) if path.exists() else {}
    for ds in config.datasets:
        for scheme in config.schemes:
            s = Scheme.parse(scheme)
            key = f"{ds}|{s.value}"
            if key in chosen or not (s.uses_lambda or s is Scheme.DROPOUT):
                continue
            bundle = _bundle(ds, config.seeds[0], config.subsample)
            result = grid_search(bundle, s, None, config.train_config(config.seeds[0]), config.arch)
            chosen[key] = result.best_value
            if log:
                log(f"tuned {key}: {result.best_value!r}")
            _write_json(path, chosen)
    return {tuple(k.split("|")): v for k, v in chosen.items()}


def run_experiment_matrix(config: ExperimentConfig, resume: bool = False,
                          max_cells: int | None = None,
                          log: Callable[[str], None] | None = None) -> list[dict]:
    """Run every pending cell, then rebuild the result tables.

    With ``resume`` finished cells (those with a manifest) are skipped;
    without it every cell is recomputed. ``max_cells`` stops after that
    many newly run cells, leaving the sweep resumable.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "experiment.json", config.to_dict())
    tuned = _tune(config, out, log) if config.tune else {}
    cells = cells_for(config, tuned)
    pending = [c for c in cells if not (resume and _cell_done(out, c))]
    if max_cells is not None:
        pending = pending[:max_cells]
    if config.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for cid in pool.map(_worker, [(c, config, str(out)) for c in pending]):
                if log:
                    log(f"finished {cid}")
    else:
        for c in pending:
            if log:
                log(f"running {c.cell_id}")
            run_cell(c, config, out)
    return collect_results(out, cells)


def collect_results(out: Path, cells: Sequence[Cell]) -> list[dict]:
    """Write results.csv and tidy.csv from every finished cell, in ``cells`` order."""
    rows, tidy = [], []
    for c in cells:
        cdir = out / "cells" / c.cell_id
        if not (cdir / "manifest.json").exists():
            continue
        row = json.loads((cdir / "result.json").read_text())
        rows.append(row)
        with open(cdir / "epochs.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                tidy.append((row["dataset"], row["scheme"], row["noise"], row["seed"],
                             rec["metric"], rec["epoch"], rec["value"]))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in RESULT_COLUMNS])
    with open(out / "tidy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIDY_COLUMNS)
        for t in tidy:
            w.writerow([_fmt(v) for v in t])
    return rows


def read_results(path) -> list[dict]:
    """Rows of a results.csv with numeric fields parsed."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k in ("dataset", "scheme", "status"):
                    row[k] = v
                elif v == "":
                    row[k] = None
                else:
                    row[k] = float(v)
            row["seed"] = int(row["seed"])
            rows.append(row)
    return rows


# ---------------------------------------------------------------- reports


def _summary(rows: Iterable[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["scheme"], r["hyperparameter"], r["noise"]), []).append(r)
    out = []
    for (ds, scheme, hyper, noise), rs in groups.items():
        for metric in FINAL_METRICS:
            vals = np.array([r[metric] for r in rs if r.get(metric) is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            out.append({"dataset": ds, "scheme": scheme, "hyperparameter": hyper, "noise": noise,
                        "metric": metric, "n": len(vals),
                        "mean": float(vals.mean()) if len(vals) else math.nan,
                        "std": float(vals.std()) if len(vals) else math.nan})
    return out


def emit_reports(out_dir, metrics: Sequence[str] = CHART_METRICS) -> list[Path]:
    """Write summary.csv (mean and std over seeds) and one SVG chart per dataset and metric.

    Reads ``results.csv`` from ``out_dir``; returns the files written.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    rows = read_results(out_dir / "results.csv")
    summary = _summary(rows)
    written = [out_dir / "summary.csv"]
    with open(written[0], "w", newline="") as fh:
        cols = ("dataset", "scheme", "hyperparameter", "noise", "metric", "n", "mean", "std")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in summary:
            w.writerow([_fmt(s[c]) for c in cols])
    chart_dir = out_dir / "charts"
    chart_dir.mkdir(exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "noisereg"
    for ds in dict.fromkeys(r["dataset"] for r in rows):
        for metric in metrics:
            fig, ax = plt.subplots(figsize=(6, 4))
            for scheme in dict.fromkeys(s["scheme"] for s in summary if s["dataset"] == ds):
                pts = sorted((s["noise"], s["mean"], s["std"]) for s in summary
                             if s["dataset"] == ds and s["scheme"] == scheme and s["metric"] == metric)
                if not pts:
                    continue
                x, y, e = map(np.array, zip(*pts))
                ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=scheme)
            ax.set_xlabel("noise level t")
            ax.set_ylabel(metric)
            ax.set_title(f"{Path(ds).stem}: {metric}")
            ax.grid(alpha=0.3)
            ax.legend(fontsize=8)
            path = chart_dir / f"{Path(ds).stem}__{metric}.svg"
            fig.tight_layout()
            fig.savefig(path, metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
