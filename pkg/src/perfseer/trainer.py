"""Training schedule, evaluation metrics and checkpoint bundles for SeerNet."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .errors import DivergedLoss, NonFiniteError, NotFitted, TooSmall, WidthMismatch, ZeroTarget
from .featurize import PHASES, NormStats, PerfGraph, build_perfgraph, fit_norm_stats, load_norm_stats, normalize, \
    save_norm_stats
from .numkernel import Adam, Tape, backward, load_checkpoint, save_checkpoint
from .pcgrad import project_conflicts
from .seernet import METRICS, GraphBatch, SeerNet, SeerNetConfig

log = logging.getLogger(__name__)

_METRIC_INDEX = {"time": 0, "mem": 1, "util": 2}


def target_phase(target: str) -> str:
    if target not in METRICS:
        raise ValueError(f"unknown target {target!r}; expected one of {METRICS}")
    return target.split("_")[0]


def target_value(labels: dict, target: str) -> float:
    phase, metric = target.split("_")
    return labels[phase][_METRIC_INDEX[metric]]


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr_init: float = 1e-3
    lr_floor: float = 1e-6
    patience_epochs: int = 5
    lr_decay: float = 0.5
    max_epochs: int = 500
    seed: int = 0
    loss: str = "mse"
    split_ratio: tuple = (2, 1, 1)
    targets: tuple = ("infer_time",)
    use_pcgrad: bool = False
    improvement_tol: float = 1e-6  # relative decrease that counts as improvement
    # model shape
    hidden: int = 256
    head_hidden: int = 256
    synmm: bool = True
    gnpb: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.split_ratio = tuple(self.split_ratio)
        self.targets = tuple(self.targets)
        if not self.targets:
            raise ValueError("at least one target is required")
        for t in self.targets:
            target_phase(t)
        if any(r <= 0 for r in self.split_ratio) or len(self.split_ratio) != 3:
            raise ValueError(f"split ratio must be three positive numbers, got {self.split_ratio}")
        if not 0 < self.lr_floor < self.lr_init:
            raise ValueError("need 0 < lr_floor < lr_init")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")

    def model_config(self) -> SeerNetConfig:
        return SeerNetConfig(hidden=self.hidden, head_hidden=self.head_hidden, heads=self.targets,
                             synmm=self.synmm, gnpb=self.gnpb, seed=self.seed, dtype=self.dtype)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


# splitting

def split_sizes(n: int, ratio: Sequence[float]) -> tuple:
    """Floor each share, then hand out the remainder one by one, train first."""
    total = sum(ratio)
    sizes = [int(math.floor(n * r / total)) for r in ratio]
    i = 0
    while sum(sizes) < n:
        sizes[i % len(sizes)] += 1
        i += 1
    return tuple(sizes)


def split(dataset: Sequence, ratio=(2, 1, 1), seed=0) -> tuple:
    if not dataset:
        raise TooSmall("cannot split an empty dataset")
    sizes = split_sizes(len(dataset), ratio)
    if min(sizes) == 0:
        raise TooSmall(f"{len(dataset)} samples give an empty split {sizes}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    a, b = sizes[0], sizes[0] + sizes[1]
    return tuple([dataset[i] for i in part] for part in (order[:a], order[a:b], order[b:]))


# learning-rate schedule

class PlateauSchedule:
    """Multiply the LR by ``decay`` after ``patience`` epochs without improvement.

    ``reference`` is the loss measured before the first epoch; an epoch
    improves only if its loss is below ``best * (1 - tol)``.
    """

    def __init__(self, lr_init, lr_floor, patience=5, decay=0.5, tol=1e-6, reference=math.inf):
        self.lr = lr_init
        self.lr_floor = lr_floor
        self.patience = patience
        self.decay = decay
        self.tol = tol
        self.best = reference
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.tol):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.decay, self.lr_floor)
                self.bad_epochs = 0
        return self.lr


# data preparation

@dataclass
class Item:
    graph_id: str
    phase: str
    pg: PerfGraph  # normalized
    y: np.ndarray  # per-target physical value, NaN where the target's phase differs


@dataclass(frozen=True)
class TargetStats:
    mean: np.ndarray
    std: np.ndarray

    def forward(self, y: np.ndarray) -> np.ndarray:
        return (np.log(y) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.exp(z * self.std + self.mean)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def featurize_samples(samples: Sequence, targets: Sequence[str]) -> list:
    """Raw PerfGraphs for every (sample, phase) pair the targets need."""
    phases = [p for p in PHASES if any(target_phase(t) == p for t in targets)]
    out = []
    for s in samples:
        for ph in phases:
            y = np.array([target_value(s.labels, t) if target_phase(t) == ph else np.nan for t in targets])
            out.append((s.graph_id, ph, build_perfgraph(s.graph, ph), y))
    return out


def make_items(raw: Sequence, stats: NormStats) -> list:
    return [Item(gid, ph, normalize(pg, stats), y) for gid, ph, pg, y in raw]


def fit_target_stats(items: Sequence[Item]) -> TargetStats:
    ys = np.stack([it.y for it in items])
    if np.any(ys[~np.isnan(ys)] <= 0):
        raise ZeroTarget("log-scaled targets must be positive")
    logs = np.log(np.where(np.isnan(ys), 1.0, ys))
    mask = ~np.isnan(ys)
    n = mask.sum(axis=0)
    if np.any(n == 0):
        raise TooSmall("a target has no training samples")
    mean = (logs * mask).sum(axis=0) / n
    std = np.sqrt((((logs - mean) * mask) ** 2).sum(axis=0) / n)
    return TargetStats(mean, np.where(std > 1e-12, std, 1.0))


# fitted model bundle

@dataclass
class FittedModel:
    model: SeerNet
    norm_stats: NormStats
    target_stats: TargetStats
    train_config: TrainConfig

    @property
    def targets(self) -> tuple:
        return self.model.config.heads

    def head_index(self, target: str) -> int:
        try:
            return self.targets.index(target)
        except ValueError:
            raise KeyError(f"model has no head for {target!r} (heads: {self.targets})") from None

    def predict_normalized(self, pgs: Sequence[PerfGraph], chunk: int = 256) -> np.ndarray:
        return np.concatenate([self.model.predict_all(pgs[i:i + chunk]) for i in range(0, len(pgs), chunk)])

    def predict_physical(self, pgs: Sequence[PerfGraph]) -> np.ndarray:
        """``(len(pgs), num_targets)`` predictions in physical units."""
        return self.target_stats.inverse(self.predict_normalized(pgs))

    def prepare(self, pg: PerfGraph) -> PerfGraph:
        return normalize(pg, self.norm_stats)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stats_path = path.parent / "norm_stats.json"
        save_norm_stats(self.norm_stats, stats_path)
        meta = {
            "toolkit_version": __version__,
            "model": self.model.config.to_dict(),
            "train": self.train_config.to_dict(),
            "target_stats": self.target_stats.to_dict(),
            "norm_stats_file": stats_path.name,
            "norm_stats_sha256": self.norm_stats.digest(),
            "seed": self.train_config.seed,
            "dtype": self.model.config.dtype,
        }
        return save_checkpoint(path, self.model.params(), meta)

    @classmethod
    def load(cls, path) -> "FittedModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        arrays, manifest = load_checkpoint(path)
        stats_path = path.parent / manifest["norm_stats_file"]
        if not stats_path.exists():
            raise NotFitted(f"normalization statistics {stats_path} are missing")
        stats = load_norm_stats(stats_path)
        if stats.digest() != manifest["norm_stats_sha256"]:
            raise WidthMismatch(f"{stats_path} does not match the checkpoint (hash mismatch)")
        model = SeerNet(SeerNetConfig.from_dict(manifest["model"]))
        model.load_arrays(arrays)
        return cls(model, stats, TargetStats.from_dict(manifest["target_stats"]),
                   TrainConfig.from_dict(manifest["train"]))


# training

@dataclass
class History:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, val_loss
    initial_val_loss: float = math.nan
    best_epoch: int = 0

    def lrs(self) -> list:
        return [e["lr"] for e in self.epochs]

    def val_losses(self) -> list:
        return [e["val_loss"] for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "lr", "train_loss", "val_loss"))
            for e in self.epochs:
                w.writerow((e["epoch"], repr(e["lr"]), repr(e["train_loss"]), repr(e["val_loss"])))


def _task_masks(items: Sequence[Item]):
    ys = np.stack([it.y for it in items])
    return ys, ~np.isnan(ys)


def validation_loss(fitted: FittedModel, items: Sequence[Item]) -> float:
    """Mean over targets of the masked MSE in normalized target space."""
    pred = fitted.predict_normalized([it.pg for it in items])
    ys, mask = _task_masks(items)
    z = fitted.target_stats.forward(np.where(mask, ys, 1.0))
    losses = [float(((pred[:, k] - z[:, k])[mask[:, k]] ** 2).mean()) for k in range(ys.shape[1])]
    return float(np.mean(losses))


def _flatten(grads: dict, params) -> np.ndarray:
    return np.concatenate([grads[p.name].ravel().astype(np.float64) for p in params])


def _unflatten(flat: np.ndarray, params) -> dict:
    out, i = {}, 0
    for p in params:
        n = p.value.size
        out[p.name] = flat[i:i + n].reshape(p.value.shape).astype(p.value.dtype)
        i += n
    return out


def train_step(model: SeerNet, batch: GraphBatch, z: np.ndarray, mask: np.ndarray, use_pcgrad: bool, rng):
    """One forward/backward pass; returns ``(grads by param name, summed loss)``."""
    tape = Tape()
    outs = model.forward(tape, batch)
    losses = [tape.masked_mse(o, z[:, k:k + 1], mask[:, k:k + 1]) for k, o in enumerate(outs)]
    total_loss = float(sum(l.value for l in losses))
    if not use_pcgrad or len(losses) < 2:
        total = losses[0]
        for l in losses[1:]:
            total = tape.add(total, l)
        return backward(tape, output=total).params, total_loss
    shared = model.shared_params()
    task_flat, grads = [], {}
    for k, loss in enumerate(losses):
        g = backward(tape, output=loss).params
        task_flat.append(_flatten(g, shared))
        for p in model.head_params(k):
            grads[p.name] = g[p.name]
    grads.update(_unflatten(project_conflicts(task_flat, rng), shared))
    return grads, total_loss


def train(config: TrainConfig, train_samples: Sequence, val_samples: Sequence,
          validate: Callable[[FittedModel], float] | None = None,
          on_epoch: Callable[[dict], None] | None = None):
    """Fit a SeerNet (one head per target) and return ``(best FittedModel, History)``.

    ``validate`` overrides the validation loss (defaults to masked MSE on
    ``val_samples`` in normalized target space).
    """
    raw_train = featurize_samples(train_samples, config.targets)
    raw_val = featurize_samples(val_samples, config.targets)
    stats = fit_norm_stats([pg for _, _, pg, _ in raw_train])
    train_items, val_items = make_items(raw_train, stats), make_items(raw_val, stats)
    tstats = fit_target_stats(train_items)
    model = SeerNet(config.model_config())
    fitted = FittedModel(model, stats, tstats, config)
    validate = validate or (lambda f: validation_loss(f, val_items))

    ys, mask = _task_masks(train_items)
    z = tstats.forward(np.where(mask, ys, 1.0))
    rng = np.random.default_rng([config.seed, 1])
    pc_rng = np.random.default_rng([config.seed, 2])
    opt = Adam(model.params(), config.lr_init)

    history = History(initial_val_loss=validate(fitted))
    sched = PlateauSchedule(config.lr_init, config.lr_floor, config.patience_epochs, config.lr_decay,
                            config.improvement_tol, reference=history.initial_val_loss)
    best_loss, best_params = math.inf, {p.name: p.value.copy() for p in model.params()}
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        opt.lr = lr
        order = rng.permutation(len(train_items))
        batch_losses = []
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = GraphBatch.from_graphs([train_items[i].pg for i in idx], config.dtype)
                grads, loss = train_step(model, batch, z[idx], mask[idx], config.use_pcgrad, pc_rng)
                if not math.isfinite(loss):
                    raise NonFiniteError("training loss is not finite")
                opt.step(grads)
                batch_losses.append(loss)
            val_loss = validate(fitted)
            if not math.isfinite(val_loss):
                raise NonFiniteError("validation loss is not finite")
        except NonFiniteError as exc:
            model.load_arrays(best_params)
            raise DivergedLoss(epoch, last_good=fitted) from exc
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(batch_losses)), "val_loss": val_loss}
        history.epochs.append(record)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {p.name: p.value.copy() for p in model.params()}
            history.best_epoch = epoch
        sched.step(val_loss)
        log.debug("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, record["train_loss"], val_loss)
        if on_epoch:
            on_epoch(record)
    model.load_arrays(best_params)
    return fitted, history


# evaluation

@dataclass
class TargetMetrics:
    mape: float
    rmspe: float
    acc_at: dict  # x (percent) -> accuracy (percent)
    n: int


@dataclass
class MetricsReport:
    per_target: dict  # target -> TargetMetrics
    num_samples: int

    @property
    def mean(self) -> dict:
        vals = list(self.per_target.values())
        return {
            "mape": float(np.mean([m.mape for m in vals])),
            "rmspe": float(np.mean([m.rmspe for m in vals])),
            **{f"acc_{x}": float(np.mean([m.acc_at[x] for m in vals])) for x in ACC_LEVELS},
        }

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "targets": {t: {"mape": m.mape, "rmspe": m.rmspe, "n": m.n,
                            **{f"acc_{x}": m.acc_at[x] for x in ACC_LEVELS}}
                        for t, m in self.per_target.items()},
            "mean": self.mean,
        }

    def table(self) -> str:
        head = f"{'target':<12} {'n':>6} {'MAPE%':>8} {'RMSPE%':>8}" + "".join(f" {f'Acc{x}%':>7}" for x in ACC_LEVELS)
        lines = [head, "-" * len(head)]
        for t, m in self.per_target.items():
            lines.append(f"{t:<12} {m.n:>6} {m.mape:>8.3f} {m.rmspe:>8.3f}"
                         + "".join(f" {m.acc_at[x]:>7.1f}" for x in ACC_LEVELS))
        mean = self.mean
        lines.append(f"{'mean':<12} {self.num_samples:>6} {mean['mape']:>8.3f} {mean['rmspe']:>8.3f}"
                     + "".join(f" {mean[f'acc_{x}']:>7.1f}" for x in ACC_LEVELS))
        return "\n".join(lines)


ACC_LEVELS = (5, 10)


def target_metrics(y_pred, y_true) -> TargetMetrics:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if np.any(y_true == 0):
        raise ZeroTarget("percentage errors are undefined for zero targets")
    rel = (y_pred - y_true) / y_true
    ape = np.abs(rel)
    return TargetMetrics(
        mape=float(np.mean(ape) * 100),
        rmspe=float(np.sqrt(np.mean(rel ** 2)) * 100),
        acc_at={x: float(100.0 * np.mean(ape <= x / 100)) for x in ACC_LEVELS},
        n=int(y_true.size),
    )


def report_from_rows(rows: Sequence[tuple]) -> MetricsReport:
    """Rows are ``(graph_id, target, y_true, y_pred)``; target order is first appearance."""
    by_target: dict = {}
    for _, t, yt, yp in rows:
        by_target.setdefault(t, ([], []))
        by_target[t][0].append(yt)
        by_target[t][1].append(yp)
    per = {t: target_metrics(yp, yt) for t, (yt, yp) in by_target.items()}
    return MetricsReport(per, len({r[0] for r in rows}))


def prediction_rows(fitted: FittedModel, items: Sequence[Item], targets: Sequence[str] | None = None) -> list:
    targets = tuple(targets or fitted.targets)
    pred = fitted.predict_physical([it.pg for it in items])
    rows = []
    for t in targets:
        k = fitted.head_index(t)
        for it, p in zip(items, pred[:, k]):
            if not np.isnan(it.y[k]):
                rows.append((it.graph_id, t, float(it.y[k]), float(p)))
    return rows


def evaluate(fitted: FittedModel, samples: Sequence, targets: Sequence[str] | None = None):
    """Metrics in physical units on ``samples``; returns ``(MetricsReport, rows)``."""
    targets = tuple(targets or fitted.targets)
    raw = featurize_samples(samples, fitted.targets)
    rows = prediction_rows(fitted, make_items(raw, fitted.norm_stats), targets)
    return report_from_rows(rows), rows


def write_predictions(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("graph_id", "target", "y_true", "y_pred"))
        for gid, t, yt, yp in rows:
            w.writerow((gid, t, repr(yt), repr(yp)))


def read_predictions(path) -> list:
    with open(path, newline="") as fh:
        return [(r["graph_id"], r["target"], float(r["y_true"]), float(r["y_pred"])) for r in csv.DictReader(fh)]


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
