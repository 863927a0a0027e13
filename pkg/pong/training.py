"""
Adam, plateau schedule with early stopping, evaluation and the epoch loop.
"""

import dataclasses
import logging
import math
import pathlib
from multiprocessing.pool import ThreadPool
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import tqdm

from .checkpoint import save_checkpoint
from .config import ModelConfig
from .dataset import Batch, Dataset
from .exceptions import ConfigurationError, GradientError
from .generator import format_pairs
from .layers import Parameter
from .metrics import MetricReport
from .model import PoNG, loss
from .tensor import Precision, no_grad, precision
from .utils import build_dataclass_repr

logger = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,val_loss,val_acc,lr"
METRICS_CSV = "metrics.csv"
CHECKPOINT = "checkpoint"

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_BATCH_SIZE = 128
DEFAULT_EPOCHS = 100
REDUCE_PATIENCE = 5
STOP_PATIENCE = 10
REDUCE_FACTOR = 0.1


### OPTIMIZER ###


@dataclasses.dataclass
class OptimizerState:
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    second: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def __repr__(self):
        return build_dataclass_repr(self, ignored_field_names=("first", "second"))


class Adam:
    """
    Bias-corrected Adam over named parameters.
    """

    def __init__(self, named_parameters: Iterable[Tuple[str, Parameter]], **kwargs):
        self.parameters: List[Tuple[str, Parameter]] = list(named_parameters)
        self.state = OptimizerState(**kwargs)
        for name, parameter in self.parameters:
            self.state.first[name] = np.zeros_like(parameter.data)
            self.state.second[name] = np.zeros_like(parameter.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def check_gradients(self):
        for name, parameter in self.parameters:
            if parameter.grad is not None and not np.all(np.isfinite(parameter.grad)):
                raise GradientError(f"Non-finite gradient in parameter {name!r}")

    def step(self):
        self.check_gradients()
        state = self.state
        state.step += 1
        correction1 = 1.0 - state.beta1 ** state.step
        correction2 = 1.0 - state.beta2 ** state.step
        for name, parameter in self.parameters:
            grad = parameter.grad
            if grad is None:
                continue
            first = state.first[name] = (
                state.beta1 * state.first[name] + (1 - state.beta1) * grad
            )
            second = state.second[name] = (
                state.beta2 * state.second[name] + (1 - state.beta2) * grad * grad
            )
            denominator = np.sqrt(second / correction2) + state.eps
            update = state.lr * (first / correction1) / denominator
            parameter.data = (parameter.data - update).astype(parameter.data.dtype)

    def zero_grad(self):
        for _, parameter in self.parameters:
            parameter.grad = None


### SCHEDULE ###


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float

    def csv_row(self) -> str:
        return "{},{!r},{!r},{!r},{!r}".format(
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.lr
        )


@dataclasses.dataclass
class TrainState:
    lr: float = DEFAULT_LEARNING_RATE
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    #: epochs since the last strict improvement; drives early stopping
    stale: int = 0
    #: epochs since the last improvement or learning-rate reduction
    plateau: int = 0
    seed: int = 0
    reduce_patience: int = REDUCE_PATIENCE
    stop_patience: int = STOP_PATIENCE
    factor: float = REDUCE_FACTOR
    history: List[EpochRecord] = dataclasses.field(default_factory=list)

    def __repr__(self):
        return build_dataclass_repr(self, ignored_field_names=("history",))


@dataclasses.dataclass
class Decision:
    stop: bool
    lr: float
    improved: bool = False
    reduced: bool = False


def schedule_and_stop(state: TrainState, val_loss: float) -> Decision:
    """
    Any strict decrease resets both counters. The learning rate drops by ``factor``
    every ``reduce_patience`` stale epochs; training stops after ``stop_patience``
    stale epochs, counted from the last improvement.
    """
    state.epoch += 1
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.stale = state.plateau = 0
        return Decision(stop=False, lr=state.lr, improved=True)
    state.stale += 1
    state.plateau += 1
    reduced = False
    if state.plateau >= state.reduce_patience:
        state.lr *= state.factor
        state.plateau = 0
        reduced = True
        logger.info("Epoch %d: learning rate reduced to %g", state.epoch, state.lr)
    stop = state.stale >= state.stop_patience
    if stop:
        logger.info(
            "Epoch %d: no improvement for %d epochs, stopping", state.epoch, state.stale
        )
    return Decision(stop=stop, lr=state.lr, reduced=reduced)


### EVALUATION ###


def check_compatible(config: ModelConfig, dataset: Dataset):
    if dataset.geometry is not config.geometry:
        raise ConfigurationError(
            f"Dataset geometry {dataset.geometry.value} != model geometry "
            f"{config.geometry.value}"
        )
    if dataset.rule_dim != config.rule_dim:
        raise ConfigurationError(
            f"Dataset rule_dim {dataset.rule_dim} != model rule_dim {config.rule_dim}"
        )
    if dataset.image_size != config.image_size:
        raise ConfigurationError(
            f"Dataset image size {dataset.image_size} != model image size "
            f"{config.image_size}"
        )


def model_precision(model: PoNG) -> Precision:
    return Precision.WIDE if model.dtype == np.float64 else Precision.STANDARD


@dataclasses.dataclass
class Scores:
    #: (N, n_a) answer logits in dataset order
    logits: np.ndarray
    loss_total: float

    @property
    def loss(self) -> float:
        return self.loss_total / len(self.logits)


def score(
    model: PoNG,
    dataset: Dataset,
    batch_size: int = DEFAULT_BATCH_SIZE,
    workers: int = 1,
) -> Scores:
    """
    Answer logits and the summed training objective over ``dataset`` in eval mode.
    Batches may run on worker threads; they are reassembled in order.
    """
    if not len(dataset):
        raise ConfigurationError("Cannot evaluate an empty dataset")
    check_compatible(model.config, dataset)
    model.eval()
    config = model.config
    mode = model_precision(model)

    def run(batch: Batch):
        with precision(mode), no_grad():
            scores = model(batch.panels)
            value = loss(scores, batch.targets, batch.rules, config.beta, config.gamma)
        return scores.target.data.astype(np.float64), float(value.item()) * len(batch)

    batches = dataset.batches(batch_size, drop_singleton=False)
    if workers > 1:
        with ThreadPool(workers) as pool:
            results = pool.map(run, list(batches))
    else:
        results = [run(batch) for batch in batches]
    logits = np.concatenate([logits for logits, _ in results])
    return Scores(logits, math.fsum(total for _, total in results))


def labels(dataset: Dataset) -> List[List[str]]:
    return [
        format_pairs(dataset.pairs(index)).split(",") for index in range(len(dataset))
    ]


def evaluate(
    model: PoNG,
    dataset: Dataset,
    batch_size: int = DEFAULT_BATCH_SIZE,
    workers: int = 1,
) -> MetricReport:
    scores = score(model, dataset, batch_size, workers)
    return MetricReport.from_logits(scores.logits, dataset.targets, labels(dataset))


def predictions_csv(dataset: Dataset, logits: np.ndarray) -> str:
    exponentials = np.exp(logits - logits.max(axis=1, keepdims=True))
    probabilities = exponentials / exponentials.sum(axis=1, keepdims=True)
    predicted = probabilities.argmax(axis=1)
    lines = ["index,target,predicted,p_target,correct"]
    for index, (target, guess) in enumerate(zip(dataset.targets, predicted)):
        lines.append(
            f"{index},{target},{guess},{probabilities[index, target]:.6f},"
            f"{int(target == guess)}"
        )
    return "\n".join(lines) + "\n"


### TRAINING ###


@dataclasses.dataclass
class TrainReport:
    epochs: int
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    history: List[EpochRecord]
    checkpoint: Optional[pathlib.Path] = None
    model: Optional[PoNG] = None

    def __repr__(self):
        return build_dataclass_repr(self, ignored_field_names=("history", "model"))


def train_epoch(
    model: PoNG,
    optimizer: Adam,
    dataset: Dataset,
    batch_size: int,
    seed: int,
    epoch: int,
    progress: bool = False,
) -> float:
    config = model.config
    model.train()
    total, count = 0.0, 0
    batches = dataset.batches(batch_size, seed=seed, epoch=epoch)
    batches = tqdm.tqdm(
        batches, desc=f"epoch {epoch}", disable=not progress, leave=False
    )
    for batch in batches:
        optimizer.zero_grad()
        scores = model(batch.panels)
        value = loss(scores, batch.targets, batch.rules, config.beta, config.gamma)
        value.backward()
        optimizer.step()
        total += float(value.item()) * len(batch)
        count += len(batch)
        logger.debug("epoch %d batch loss %.6f", epoch, value.item())
    return total / count


def train(
    config: ModelConfig,
    train_data: Dataset,
    val_data: Dataset,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LEARNING_RATE,
    out: Optional[pathlib.Path] = None,
    reduce_patience: int = REDUCE_PATIENCE,
    stop_patience: int = STOP_PATIENCE,
    workers: int = 1,
    progress: bool = False,
) -> TrainReport:
    """
    Train a fresh model; with ``out`` set, append one CSV row per epoch to
    ``metrics.csv`` and checkpoint on every new best validation loss.
    """
    for dataset in (train_data, val_data):
        check_compatible(config, dataset)
    if len(train_data) < 2:
        raise ConfigurationError("Training needs at least two instances")
    model = PoNG(config, seed=seed)
    optimizer = Adam(model.named_parameters(), lr=lr)
    state = TrainState(
        lr=lr, seed=seed, reduce_patience=reduce_patience, stop_patience=stop_patience
    )
    checkpoint_path = csv_path = None
    if out is not None:
        out = pathlib.Path(out)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path, csv_path = out / CHECKPOINT, out / METRICS_CSV
        csv_path.write_text(CSV_HEADER + "\n")
    decision = Decision(stop=False, lr=lr)
    for epoch in range(1, epochs + 1):
        train_loss = train_epoch(
            model, optimizer, train_data, batch_size, seed, epoch, progress
        )
        scores = score(model, val_data, batch_size, workers)
        report = MetricReport.from_logits(scores.logits, val_data.targets)
        record = EpochRecord(
            epoch, train_loss, scores.loss, report.accuracy, optimizer.lr
        )
        state.history.append(record)
        if csv_path is not None:
            with csv_path.open("a") as file_pointer:
                file_pointer.write(record.csv_row() + "\n")
        logger.info(
            "Epoch %d: train %.4f, val %.4f, acc %.4f, lr %g",
            epoch,
            train_loss,
            scores.loss,
            report.accuracy,
            optimizer.lr,
        )
        decision = schedule_and_stop(state, scores.loss)
        optimizer.lr = decision.lr
        if decision.improved and checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path, extra={"epoch": epoch})
        if decision.stop:
            break
    return TrainReport(
        epochs=state.epoch,
        best_epoch=state.best_epoch,
        best_val_loss=state.best_val_loss,
        stopped_early=decision.stop,
        history=state.history,
        checkpoint=checkpoint_path,
        model=model,
    )
