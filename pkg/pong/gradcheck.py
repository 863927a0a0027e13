"""
Central finite-difference checks of analytic gradients.
"""

import dataclasses
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GradientError, ShapeError
from .model import PoNG, loss
from .tensor import Precision, Tensor, no_grad
from .utils import build_dataclass_repr, derive_seed

logger = logging.getLogger(__name__)

#: relative error bound in wide precision
WIDE_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(
            f"Gradient check needs a scalar function, got shape {value.shape}"
        )
    return float(value.data.reshape(-1)[0])


def central_difference(
    fn: Callable[[], Tensor], x: Tensor, index, step: float
) -> float:
    original = x.data[index].copy()
    try:
        with no_grad():
            x.data[index] = original + step
            plus = _scalar(fn())
            x.data[index] = original - step
            minus = _scalar(fn())
    finally:
        x.data[index] = original
    return (plus - minus) / (2.0 * step)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = DEFAULT_STEP,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
) -> float:
    """
    Largest ``|analytic - central difference| / max(1, |analytic|)`` over the
    coordinates of ``x`` (or the given ``indices``).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if not x.requires_grad:
        raise GradientError("grad_check needs a tensor that requires a gradient")
    x.grad = None
    out = fn(x)
    reference = _scalar(out)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    with no_grad():
        again = _scalar(fn(x))
    if again != reference:
        raise GradientError(
            f"Function is not deterministic: {reference!r} != {again!r}"
        )
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    for index in indices:
        numeric = central_difference(lambda: fn(x), x, index, step)
        worst = max(worst, relative_error(float(analytic[index]), numeric))
    return worst


@dataclasses.dataclass
class GradCheckEntry:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclasses.dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]
    tolerance: float = WIDE_TOLERANCE

    def __repr__(self):
        return build_dataclass_repr(self)

    @property
    def max_error(self) -> float:
        return max((entry.error for entry in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def tiny_batch(model: PoNG, batch: int, seed: int):
    """
    Random panels, targets and rule vectors sized for ``model``.
    """
    config = model.config
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", "batch"))
    size = config.image_size
    panels = rng.uniform(0.0, 1.0, size=(batch, config.panels, size, size))
    targets = np.eye(config.answer_panels)[rng.integers(0, config.answer_panels, batch)]
    rules = (rng.uniform(size=(batch, config.rule_dim)) < 0.3).astype(np.float64)
    return panels, targets, rules


def check_model_gradients(
    model: PoNG,
    samples: int = 50,
    batch: int = 2,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare backpropagated gradients of the full loss with central differences on
    ``samples`` coordinates, each drawn by picking a parameter tensor and then a
    coordinate.
    """
    model.to(Precision.WIDE).train()
    panels, targets, rules = tiny_batch(model, batch, seed)
    beta, gamma = model.config.beta, model.config.gamma
    snapshot = {name: array.copy() for name, (_, array) in model.state().items()}

    def objective() -> Tensor:
        return loss(model(panels), targets, rules, beta, gamma)

    model.zero_grad()
    objective().backward()
    with no_grad():
        first, second = _scalar(objective()), _scalar(objective())
    if first != second:
        raise GradientError(f"Model loss is not deterministic: {first!r} != {second!r}")
    named = list(model.named_parameters())
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", "coordinates"))
    entries = []
    for _ in range(samples):
        name, parameter = named[rng.integers(len(named))]
        index = tuple(int(rng.integers(extent)) for extent in parameter.shape)
        analytic = float(parameter.grad[index]) if parameter.grad is not None else 0.0
        numeric = central_difference(objective, parameter, index, step)
        error = relative_error(analytic, numeric)
        entry = GradCheckEntry(name, index, analytic, numeric, error)
        logger.debug("gradcheck %s%s: %.3e", name, list(index), entry.error)
        entries.append(entry)
    # finite differences step BatchNorm running statistics along
    model.load_state(snapshot)
    return GradCheckReport(entries)
