"""
Training and Evaluation

Adam with separate learning rates for embedding tables and network weights,
reduce-on-plateau scheduling, early stopping on validation cross-entropy,
per-hop / per-noise accuracy reports, the layer-count sweep against the
breadth baseline and the depth-aggregator comparison.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core.breadth_baseline import smoothing_metric
from core.depwise_engine import AggregatorKind
from core.io_utils import PathLike, load_yaml_section, write_csv
from core.model import BreadthModel, Checkpoint, DepwiseModel, ModelConfig, StoryModel, load_tables
from core.monitoring import span
from core.taskgen import MAX_HOPS, StoryInstance
from core.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")
SWEEP_COLUMNS = ("model", "layers", "k", "accuracy")
EVAL_COLUMNS = ("k", "noise", "n", "accuracy")


class TrainingError(RuntimeError):
    """Raised for empty datasets or a non-finite loss."""


# ============================ CONFIGURATION ============================

@dataclass
class TrainConfig:
    """Optimisation settings (``training`` config section)."""
    lr_engine: float = 1e-4
    lr_embed: float = 1e-4
    batch_size: int = 32
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    early_stop_patience: int = 3
    min_delta: float = 1e-3
    max_epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_engine < 0 or self.lr_embed < 0:
            raise ValueError("Learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("Patience values must be >= 1")
        if self.min_delta < 0:
            raise ValueError(f"min_delta must be non-negative, got {self.min_delta}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    @staticmethod
    def from_yaml(path: PathLike = "config.yaml") -> "TrainConfig":
        section = load_yaml_section(path, "training")
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = sorted(set(section) - known)
        if unknown:
            logger.warning(f"Ignoring unknown training settings: {unknown}")
        return TrainConfig(**{k: v for k, v in section.items() if k in known})


@dataclass
class SweepConfig:
    """Layer-count sweep settings (``sweep`` config section)."""
    min_layers: int = 1
    max_layers: int = 5
    smoothing_samples: int = 50

    def __post_init__(self):
        if not 1 <= self.min_layers <= self.max_layers:
            raise ValueError(f"Invalid layer range {self.min_layers}..{self.max_layers}")

    @property
    def layer_range(self) -> range:
        return range(self.min_layers, self.max_layers + 1)

    @staticmethod
    def from_yaml(path: PathLike = "config.yaml") -> "SweepConfig":
        section = load_yaml_section(path, "sweep")
        defaults = SweepConfig()
        return SweepConfig(
            min_layers=int(section.get("min_layers", defaults.min_layers)),
            max_layers=int(section.get("max_layers", defaults.max_layers)),
            smoothing_samples=int(section.get("smoothing_samples", defaults.smoothing_samples)),
        )


# ============================ OPTIMISATION ============================

class AdamOptimizer:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(
        self,
        groups: Dict[str, Dict[str, Tensor]],
        lrs: Dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        missing = set(groups) - set(lrs)
        if missing:
            raise ValueError(f"No learning rate for parameter groups {sorted(missing)}")
        self.groups = groups
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[Tuple[str, str], np.ndarray] = {}
        self._v: Dict[Tuple[str, str], np.ndarray] = {}

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params.values():
                p.zero_grad()

    def step(self) -> List[str]:
        """Apply one update; returns the names of groups whose parameters changed."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        updated = []
        for group, params in self.groups.items():
            lr = self.lrs[group]
            if lr == 0.0:
                continue
            changed = False
            for name, p in params.items():
                if p.grad is None:
                    continue
                key = (group, name)
                m = self._m.get(key, np.zeros_like(p.data))
                v = self._v.get(key, np.zeros_like(p.data))
                m = self.beta1 * m + (1.0 - self.beta1) * p.grad
                v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
                self._m[key], self._v[key] = m, v
                p.assign(p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps))
                changed = True
            if changed:
                updated.append(group)
        return updated


class ReduceLROnPlateau:
    """
    Multiply every group's learning rate by ``factor`` once the validation
    loss has failed to improve by more than ``min_delta`` for ``patience``
    consecutive epochs.
    """

    def __init__(self, optimizer: AdamOptimizer, factor: float = 0.1, patience: int = 2, min_delta: float = 1e-3):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.lrs:
                self.optimizer.lrs[group] *= self.factor
            self.bad_epochs = 0
            logger.info(f"Validation plateau: learning rates reduced to {self.optimizer.lrs}")
            return True
        return False


class EarlyStopping:
    """Signals a stop after ``patience`` epochs without an improvement above ``min_delta``."""

    def __init__(self, patience: int = 3, min_delta: float = 1e-3):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ============================ TRAINING ============================

class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=1)
    train_loss: float
    val_loss: float
    lr: float = Field(..., ge=0.0)
    lr_embed: float = Field(..., ge=0.0)
    val_accuracy: float = Field(..., ge=0.0, le=1.0)
    seconds: float = Field(..., ge=0.0)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]
    best_epoch: int
    stopped_early: bool

    def history_rows(self) -> List[Tuple]:
        return [(r.epoch, r.train_loss, r.val_loss, r.lr) for r in self.history]


def split_dataset(
    instances: Sequence[StoryInstance],
    val_fraction: float,
    seed: int,
) -> Tuple[List[StoryInstance], List[StoryInstance]]:
    """Deterministic train / validation split."""
    order = np.random.default_rng([seed, 0]).permutation(len(instances))
    n_val = int(round(len(instances) * val_fraction))
    val = [instances[i] for i in order[:n_val]]
    train = [instances[i] for i in order[n_val:]]
    return train, val


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"Non-finite loss ({value}) during {where}")


def train_step(model: StoryModel, batch: Sequence[StoryInstance], optimizer: AdamOptimizer) -> float:
    """One optimizer step on the mean loss of ``batch``; returns that mean loss."""
    optimizer.zero_grad()
    total = 0.0
    scale = 1.0 / len(batch)
    for instance in batch:
        loss = model.loss(instance)
        _check_finite(loss.item(), "training")
        backward(loss * scale)
        total += loss.item()
    model.after_step(optimizer.step())
    return total / len(batch)


def mean_loss(model: StoryModel, instances: Sequence[StoryInstance]) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy without recording a tape."""
    total, correct = 0.0, 0
    with no_grad():
        for instance in instances:
            logits = model.forward(instance)
            total += _xent(logits, instance)
            correct += int(np.argmax(logits.data)) == instance.gold.index
    return total / len(instances), correct / len(instances)


def _xent(logits: Tensor, instance: StoryInstance) -> float:
    z = logits.data - logits.data.max()
    return float(np.log(np.exp(z).sum()) - z[instance.gold.index])


def train(
    model: StoryModel,
    dataset: Sequence[StoryInstance],
    cfg: Optional[TrainConfig] = None,
    validation: Optional[Sequence[StoryInstance]] = None,
    start_epoch: int = 0,
) -> TrainResult:
    """
    Train ``model`` in place and restore its best-validation weights.

    Without an explicit ``validation`` set, ``cfg.val_fraction`` of
    ``dataset`` is held out. Epoch numbering continues from ``start_epoch``.

    Raises:
        TrainingError: empty dataset or non-finite loss
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise TrainingError("Training dataset is empty")
    if validation is None:
        train_set, val_set = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_set, val_set = list(dataset), list(validation)
    if not train_set:
        raise TrainingError("No training instances left after the validation split")
    if not val_set:
        logger.warning("Validation set is empty; validating on the training set")
        val_set = train_set

    groups = model.parameter_groups()
    lrs = {name: (cfg.lr_embed if name == "embed" else cfg.lr_engine) for name in groups}
    optimizer = AdamOptimizer(groups, lrs, cfg.beta1, cfg.beta2, cfg.eps)
    scheduler = ReduceLROnPlateau(optimizer, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)

    history: List[EpochRecord] = []
    best_val = math.inf
    best: Optional[Checkpoint] = None
    best_epoch = start_epoch
    stopped_early = False
    logger.info(f"Training {model.name} on {len(train_set)} instances ({len(val_set)} validation)")

    for epoch in range(start_epoch + 1, start_epoch + cfg.max_epochs + 1):
        with span("train.epoch") as timing:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                losses.append(train_step(model, batch, optimizer) * len(batch))
            train_loss = sum(losses) / len(train_set)
            val_loss, val_acc = mean_loss(model, val_set)
            _check_finite(val_loss, "validation")

        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            lr=optimizer.lrs.get("engine", 0.0),
            lr_embed=optimizer.lrs.get("embed", 0.0),
            val_accuracy=val_acc,
            seconds=timing["seconds"],
        )
        history.append(record)
        logger.info(
            f"Epoch {epoch}: train {train_loss:.4f}, val {val_loss:.4f}, "
            f"val acc {val_acc:.3f}, lr {record.lr:.2e}"
        )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = model.to_checkpoint({
                "epoch": epoch,
                "val_loss": val_loss,
                "lr_engine": record.lr,
                "lr_embed": record.lr_embed,
            })

        stop = stopper.step(val_loss)
        scheduler.step(val_loss)
        if stop:
            stopped_early = True
            logger.info(f"Early stop after epoch {epoch} (best epoch {best_epoch})")
            break

    if best is None:
        best = model.to_checkpoint({"epoch": start_epoch, "val_loss": best_val})
    else:
        load_tables(model.parameters(), best.tables)
    return TrainResult(best, history, best_epoch, stopped_early)


# ============================ EVALUATION ============================

def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, else ``DEPWISE_THREADS``, else CPU count."""
    if threads is None:
        env = os.getenv("DEPWISE_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                logger.warning(f"Ignoring non-integer DEPWISE_THREADS={env!r}")
    return max(1, threads or os.cpu_count() or 1)


class EvalCell(BaseModel):
    k: int
    noise: str
    n: int = Field(..., ge=1)
    accuracy: float = Field(..., ge=0.0, le=1.0)


class EvalReport(BaseModel):
    """Accuracy per hop count and per noise kind."""
    n: int = Field(..., ge=0)
    accuracy: Optional[float] = None
    per_k_accuracy: Dict[int, float] = Field(default_factory=dict)
    per_noise_accuracy: Dict[str, float] = Field(default_factory=dict)
    cells: List[EvalCell] = Field(default_factory=list)
    mean_low: Optional[float] = Field(default=None, description="Mean of per-k accuracy for k 1-5")
    mean_high: Optional[float] = Field(default=None, description="Mean of per-k accuracy for k 6-10")
    runtime_seconds: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def check_means(self) -> "EvalReport":
        for name, lo, hi in (("mean_low", 1, 5), ("mean_high", 6, MAX_HOPS)):
            expected = _bucket_mean(self.per_k_accuracy, lo, hi)
            got = getattr(self, name)
            if (expected is None) != (got is None) or (got is not None and abs(got - expected) > 1e-12):
                raise ValueError(f"{name}={got} does not match per-k accuracies ({expected})")
        return self

    def csv_rows(self) -> List[Tuple]:
        return [(c.k, c.noise, c.n, c.accuracy) for c in self.cells]

    def summary(self) -> str:
        lines = [f"instances: {self.n}"]
        if self.accuracy is not None:
            lines.append(f"accuracy: {self.accuracy:.4f}")
        for k, acc in self.per_k_accuracy.items():
            lines.append(f"  k={k:<2d} {acc:.4f}")
        for noise, acc in self.per_noise_accuracy.items():
            lines.append(f"  noise={noise:<12s} {acc:.4f}")
        if self.mean_low is not None:
            lines.append(f"mean(k=1-5): {self.mean_low:.4f}")
        if self.mean_high is not None:
            lines.append(f"mean(k=6-10): {self.mean_high:.4f}")
        lines.append(f"runtime: {self.runtime_seconds:.2f}s")
        return "\n".join(lines)


def _bucket_mean(per_k: Dict[int, float], lo: int, hi: int) -> Optional[float]:
    values = [acc for k, acc in per_k.items() if lo <= k <= hi]
    return sum(values) / len(values) if values else None


def _fraction(hits: List[bool]) -> float:
    return sum(hits) / len(hits)


def evaluate(model: StoryModel, dataset: Sequence[StoryInstance], threads: Optional[int] = None) -> EvalReport:
    """
    Accuracy of ``model`` on a labelled dataset.

    Predictions run in a thread pool (``DEPWISE_THREADS``); each worker
    evaluates without recording a tape. Results do not depend on the
    worker count.
    """
    started = time.perf_counter()
    with span("evaluate"):
        workers = resolve_threads(threads)
        if workers == 1 or len(dataset) < 2:
            predictions = [model.predict(inst) for inst in dataset]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                predictions = list(pool.map(model.predict, dataset))

    per_k: Dict[int, List[bool]] = {}
    per_noise: Dict[str, List[bool]] = {}
    per_cell: Dict[Tuple[int, str], List[bool]] = {}
    for inst, pred in zip(dataset, predictions):
        hit = pred is inst.gold
        per_k.setdefault(inst.k, []).append(hit)
        per_noise.setdefault(inst.noise.value, []).append(hit)
        per_cell.setdefault((inst.k, inst.noise.value), []).append(hit)

    per_k_accuracy = {k: _fraction(per_k[k]) for k in sorted(per_k)}
    report = EvalReport(
        n=len(dataset),
        accuracy=_fraction([h for hits in per_k.values() for h in hits]) if dataset else None,
        per_k_accuracy=per_k_accuracy,
        per_noise_accuracy={noise: _fraction(per_noise[noise]) for noise in sorted(per_noise)},
        cells=[
            EvalCell(k=k, noise=noise, n=len(hits), accuracy=_fraction(hits))
            for (k, noise), hits in sorted(per_cell.items())
        ],
        mean_low=_bucket_mean(per_k_accuracy, 1, 5),
        mean_high=_bucket_mean(per_k_accuracy, 6, MAX_HOPS),
        runtime_seconds=time.perf_counter() - started,
    )
    logger.info(f"Evaluated {report.n} instances in {report.runtime_seconds:.2f}s")
    return report


# ============================ EXPERIMENTS ============================

class SweepRow(BaseModel):
    model: str
    layers: Optional[int] = None
    k: int
    accuracy: float


class SweepResult(BaseModel):
    rows: List[SweepRow]
    smoothing: Dict[int, float] = Field(default_factory=dict, description="Breadth layers -> mean pairwise cosine")

    def points(self) -> List[Tuple[str, Optional[int]]]:
        """Distinct (model, layers) curve points in row order."""
        return list(dict.fromkeys((r.model, r.layers) for r in self.rows))

    def csv_rows(self) -> List[Tuple]:
        return [(r.model, "" if r.layers is None else r.layers, r.k, r.accuracy) for r in self.rows]

    def write_csv(self, path: PathLike) -> None:
        write_csv(path, SWEEP_COLUMNS, self.csv_rows())


def _smoothing_at_depth(model: BreadthModel, instances: Sequence[StoryInstance]) -> Optional[float]:
    values = []
    with no_grad():
        for inst in instances:
            _, h = model.node_states(inst)
            if len(h) >= 2:
                values.append(smoothing_metric(h))
    return float(np.mean(values)) if values else None


def oversmoothing_sweep(
    train_set: Sequence[StoryInstance],
    test_set: Sequence[StoryInstance],
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
    sweep_config: Optional[SweepConfig] = None,
) -> SweepResult:
    """
    Train the breadth baseline once per layer count and the depth-wise model
    once, and report per-k test accuracy for each. The depth-wise rows have
    no layer value.
    """
    model_config = model_config or ModelConfig()
    sweep_config = sweep_config or SweepConfig()
    rows: List[SweepRow] = []
    smoothing: Dict[int, float] = {}
    max_k = max(inst.k for inst in test_set)
    deepest = [inst for inst in test_set if inst.k == max_k][:sweep_config.smoothing_samples]

    for layers in sweep_config.layer_range:
        with span("sweep.breadth"):
            baseline = BreadthModel.create(model_config, layers)
            train(baseline, train_set, train_config)
            report = evaluate(baseline, test_set)
        rows.extend(SweepRow(model="breadth", layers=layers, k=k, accuracy=acc) for k, acc in report.per_k_accuracy.items())
        value = _smoothing_at_depth(baseline, deepest)
        if value is not None:
            smoothing[layers] = value
        logger.info(f"Breadth baseline with {layers} layers: accuracy {report.accuracy:.4f}")

    with span("sweep.depwise"):
        depwise = DepwiseModel.create(model_config)
        train(depwise, train_set, train_config)
        report = evaluate(depwise, test_set)
    rows.extend(SweepRow(model="depwise", k=k, accuracy=acc) for k, acc in report.per_k_accuracy.items())
    logger.info(f"Depth-wise model: accuracy {report.accuracy:.4f}")
    return SweepResult(rows=rows, smoothing=smoothing)


def compare_aggregators(
    train_set: Sequence[StoryInstance],
    test_set: Sequence[StoryInstance],
    kinds: Sequence[AggregatorKind] = (AggregatorKind.RECURRENT_GATED, AggregatorKind.MEAN, AggregatorKind.MAX),
    model_config: Optional[ModelConfig] = None,
    train_config: Optional[TrainConfig] = None,
) -> Dict[str, EvalReport]:
    """Train one depth-wise model per aggregator under the same budget."""
    model_config = model_config or ModelConfig()
    reports: Dict[str, EvalReport] = {}
    for kind in kinds:
        kind = AggregatorKind(kind)
        model = DepwiseModel.create(replace(model_config, aggregator=kind))
        train(model, train_set, train_config)
        reports[kind.value] = evaluate(model, test_set)
        logger.info(f"Aggregator {kind.value}: accuracy {reports[kind.value].accuracy:.4f}")
    return reports
