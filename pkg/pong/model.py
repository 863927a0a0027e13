"""
Pathways of normalized group convolution (PoNG).

A panel encoder embeds every panel; a reasoner reads the context panels stacked with
one candidate and emits a latent ``z`` per candidate; three heads turn the ``z`` set
into answer scores and two rule predictions.
"""

import dataclasses
import logging
from typing import Dict, Sequence

import numpy as np

from . import functional
from .config import ModelConfig
from .exceptions import ConfigurationError, ShapeError
from .layers import (
    POSITION_STD,
    AdaptiveAvgPool1d,
    AvgPool1d,
    BatchNorm1d,
    BatchNorm2d,
    Conv1d,
    Conv2d,
    GroupConv,
    GroupPairConv,
    LayerNorm,
    Linear,
    MaxPool2d,
    Module,
    Parameter,
    ReLU,
    Sequential,
)
from .tensor import Tensor, concat, get_precision, stack
from .utils import build_dataclass_repr, derive_seed

logger = logging.getLogger(__name__)

ENCODER_KERNEL = 7
PATHWAY_KERNEL = 7
ADAPTIVE_LENGTH = 16
BOTTLENECKS = ((10, 8, 1), (6, 4, 1))


@dataclasses.dataclass
class AnswerScores:
    #: (B, n_a) pre-softmax answer scores
    target: Tensor
    #: (B, d_r) pre-sigmoid logits of the aggregate rule head
    rules_aggregate: Tensor
    #: (B, d_r) pre-sigmoid logits of the target-conditioned rule head
    rules_conditioned: Tensor

    def __repr__(self):
        return build_dataclass_repr(self)

    def probabilities(self) -> np.ndarray:
        return functional.softmax(self.target.detach(), axis=-1).data


### PANEL ENCODER ###


class EncoderBlock(Module):
    """
    Two parallel pathways summed: strided convolutions, and max pooling plus a 1x1 conv.
    """

    def __init__(self, in_channels: int, channels: int, rng):
        pad = ENCODER_KERNEL // 2
        self.convolutions = Sequential(
            Conv2d(in_channels, channels, ENCODER_KERNEL, rng, stride=2, padding=pad),
            ReLU(),
            BatchNorm2d(channels),
            Conv2d(channels, channels, ENCODER_KERNEL, rng, stride=2, padding=pad),
            ReLU(),
            BatchNorm2d(channels),
        )
        self.pooling = Sequential(
            MaxPool2d(3, 2, 1),
            MaxPool2d(3, 2, 1),
            Conv2d(in_channels, channels, 1, rng),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.convolutions(x) + self.pooling(x)


class PanelEncoder(Module):
    def __init__(self, config: ModelConfig, rng):
        self.config = config
        channels = config.channels
        self.block_1 = EncoderBlock(1, channels, rng)
        self.block_2 = EncoderBlock(channels, channels, rng)
        self.spatial = Linear(config.spatial_dim, config.spatial_dim, rng)
        content = config.content_dim
        self.norm_1 = LayerNorm(content)
        self.expand = Linear(content, 2 * content, rng)
        self.norm_2 = LayerNorm(2 * content)
        self.contract = Linear(2 * content, content, rng)
        # one slot per context panel plus the missing slot every answer fills
        slots = config.context_panels + 1
        data = rng.normal(0.0, POSITION_STD, size=(slots, config.position_dim))
        self.position = Parameter(data.astype(get_precision().dtype))

    def embed(self, images: Tensor) -> Tensor:
        """
        Content embedding of ``(N, 1, H, W)`` images, shape ``(N, channels * spatial)``.
        """
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (1, size, size):
            raise ShapeError(
                f"Expected (N, 1, {size}, {size}) images, got {images.shape}"
            )
        x = self.block_2(self.block_1(images))
        count, channels = x.shape[:2]
        x = self.spatial(x.reshape(count, channels, -1)).relu()
        x = x.reshape(count, -1)
        residual = self.contract(self.norm_2(self.expand(self.norm_1(x)).relu()))
        return x + residual

    def forward(self, images: Tensor, slots: Sequence[int]) -> Tensor:
        slots = np.asarray(slots, dtype=np.int64)
        if slots.shape != (images.shape[0],):
            raise ShapeError(
                f"Need one slot per image, got {slots.shape} for {images.shape}"
            )
        if slots.min() < 0 or slots.max() > self.config.context_panels:
            raise ShapeError(
                f"Slot indices must lie in [0, {self.config.context_panels}]"
            )
        return concat([self.embed(images), self.position[slots]], axis=1)

    def encode_panel(self, image, slot: int) -> Tensor:
        image = _as_images(image, self.position.dtype)
        if image.ndim != 3 or image.shape[0] != 1:
            raise ShapeError(f"Expected a (1, H, W) panel, got {image.shape}")
        if image.data.min() < 0 or image.data.max() > 1:
            raise ShapeError("Panel pixels must lie in [0, 1]")
        return self(image.reshape((1,) + image.shape), [slot]).reshape(-1)


### REASONER ###


def _pathway(stages: int, make_layer, channels: int, in_channels: int) -> Sequential:
    layers = []
    for stage in range(stages):
        layers.extend(
            [
                make_layer(in_channels if stage == 0 else channels),
                ReLU(),
                BatchNorm1d(channels),
            ]
        )
    return Sequential(*layers)


class PathwaysBlock(Module):
    """
    BatchNorm followed by four parallel pathways whose outputs are summed.

    P1 mixes channels pointwise; P2 stacks local convolutions; P3 convolves channel
    groups with one shared kernel; P4 does the same over cyclic group pairs. P3 and P4
    normalize their group outputs with task context normalization.
    """

    def __init__(self, in_channels: int, first: bool, config: ModelConfig, rng):
        channels = config.channels
        stages = 1 if first else 2
        self.in_channels = in_channels
        self.norm = BatchNorm1d(in_channels)
        self.p1 = self.p2 = self.p3 = self.p4 = None
        pad = PATHWAY_KERNEL // 2
        tcn = not config.disable_tcn
        if not config.disable_p1p2:
            self.p1 = Conv1d(in_channels, channels, 1, rng, bias=False)
            self.p2 = _pathway(
                stages,
                lambda c_in: Conv1d(c_in, channels, PATHWAY_KERNEL, rng, padding=pad),
                channels,
                in_channels,
            )
        if not config.disable_p3p4:
            groups = config.first_layer_groups if first else config.group_conv_groups
            pairs = config.first_layer_groups if first else config.group_pair_groups
            self.p3 = _pathway(
                stages,
                lambda c_in: GroupConv(
                    c_in,
                    channels,
                    groups,
                    PATHWAY_KERNEL,
                    rng,
                    padding=pad,
                    tcn=tcn,
                    tcn_mode=config.tcn_mode,
                ),
                channels,
                in_channels,
            )
            self.p4 = _pathway(
                stages,
                lambda c_in: GroupPairConv(
                    c_in,
                    channels,
                    pairs,
                    PATHWAY_KERNEL,
                    rng,
                    padding=pad,
                    tcn=tcn,
                    tcn_mode=config.tcn_mode,
                ),
                channels,
                in_channels,
            )

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(x)
        outputs = [
            pathway(x)
            for pathway in (self.p1, self.p2, self.p3, self.p4)
            if pathway is not None
        ]
        total = outputs[0]
        for output in outputs[1:]:
            total = total + output
        return total


class Reasoner(Module):
    def __init__(self, config: ModelConfig, rng):
        self.config = config
        channels = config.channels
        self.block_1 = PathwaysBlock(config.reasoner_channels, True, config, rng)
        self.bottleneck_1 = AvgPool1d(*BOTTLENECKS[0])
        self.block_2 = PathwaysBlock(channels, False, config, rng)
        self.bottleneck_2 = AvgPool1d(*BOTTLENECKS[1])
        self.block_3 = PathwaysBlock(channels, False, config, rng)
        self.pool = AdaptiveAvgPool1d(ADAPTIVE_LENGTH)
        hidden = channels * ADAPTIVE_LENGTH
        self.hidden = Linear(hidden, hidden, rng)
        self.hidden_norm = BatchNorm1d(hidden)
        self.project = Linear(hidden, config.latent_dim, rng)
        self.check_trace()

    def trace(self) -> Sequence[int]:
        """
        Feature lengths after the input, each bottleneck and the adaptive pool.
        """
        lengths = [self.config.embed_dim]
        for kernel, stride, padding in BOTTLENECKS:
            length = functional.output_length(lengths[-1], kernel, stride, padding)
            lengths.append(length)
        lengths.append(ADAPTIVE_LENGTH)
        return lengths

    def check_trace(self):
        lengths = self.trace()
        if lengths[-2] < ADAPTIVE_LENGTH:
            raise ConfigurationError(
                f"Reasoner feature trace {lengths} cannot pool to 16"
            )

    def forward(self, x: Tensor) -> Tensor:
        """
        Map stacked embeddings ``(N, n_c + 1, d_h)`` to latents ``(N, latent_dim)``.
        """
        expected = (self.config.reasoner_channels, self.config.embed_dim)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(
                f"Reasoner expects (N, {expected[0]}, {expected[1]}), got {x.shape}"
            )
        x = self.bottleneck_1(self.block_1(x))
        x = self.bottleneck_2(self.block_2(x))
        x = self.pool(self.block_3(x))
        x = x.reshape(x.shape[0], -1)
        x = self.hidden_norm(self.hidden(x).relu())
        return self.project(x)

    def reason(self, context: Sequence[Tensor], candidate: Tensor) -> Tensor:
        expected = self.config.context_panels
        if len(context) != expected:
            raise ShapeError(
                f"Need {expected} context embeddings, got {len(context)}"
            )
        stacked = stack(list(context) + [candidate], axis=0)
        return self(stacked.reshape((1,) + stacked.shape)).reshape(-1)


### PREDICTION HEADS ###


class TargetHead(Module):
    def __init__(self, latent_dim: int, rng):
        self.hidden = Linear(latent_dim, latent_dim, rng)
        self.score = Linear(latent_dim, 1, rng)

    def forward(self, z: Tensor) -> Tensor:
        out = self.score(self.hidden(z).relu())
        return out.reshape(out.shape[:-1])


class AggregateRuleHead(Module):
    def __init__(self, latent_dim: int, rule_dim: int, rng):
        self.hidden = Linear(latent_dim, latent_dim, rng)
        self.rules = Linear(latent_dim, rule_dim, rng)

    def forward(self, zs: Tensor) -> Tensor:
        """
        ``(B, n_a, latent)`` -> ``(B, d_r)``; invariant to the answer order.
        """
        if zs.shape[1] == 0:
            raise ShapeError("Aggregate rule head needs at least one answer")
        return self.rules(self.hidden(zs.sum(axis=1)).relu())


class ConditionedRuleHead(Module):
    def __init__(self, latent_dim: int, rule_dim: int, rng):
        self.rules = Linear(latent_dim, rule_dim, rng)

    def forward(self, zs: Tensor, scores: Tensor) -> Tensor:
        if scores.shape != zs.shape[:2]:
            raise ShapeError(f"Scores {scores.shape} do not match latents {zs.shape}")
        weights = functional.softmax(scores, axis=-1)
        weighted = (zs * weights.reshape(weights.shape + (1,))).sum(axis=1)
        # linear-then-weighted-sum equals weighted-sum-then-linear: weights sum to 1
        return self.rules(weighted)


### MODEL ###


def _as_images(panels, dtype) -> Tensor:
    if isinstance(panels, Tensor):
        return panels
    array = np.asarray(panels)
    if array.dtype == np.uint8:
        array = array / 255.0
    return Tensor(array.astype(dtype))


class PoNG(Module):
    def __init__(self, config: ModelConfig = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        rng = np.random.default_rng(derive_seed(seed, "init"))
        self.encoder = PanelEncoder(self.config, rng)
        self.reasoner = Reasoner(self.config, rng)
        self.target_head = TargetHead(self.config.latent_dim, rng)
        self.aggregate_head = AggregateRuleHead(
            self.config.latent_dim, self.config.rule_dim, rng
        )
        self.conditioned_head = ConditionedRuleHead(
            self.config.latent_dim, self.config.rule_dim, rng
        )
        logger.debug(
            "Built %s with seed %d (%s)",
            type(self).__name__,
            seed,
            self.config.geometry.value,
        )

    @property
    def dtype(self):
        return self.encoder.position.dtype

    def slots(self) -> np.ndarray:
        n_c, n_a = self.config.context_panels, self.config.answer_panels
        return np.array(list(range(n_c)) + [n_c] * n_a, dtype=np.int64)

    def encode(self, panels) -> Tensor:
        """
        Embed ``(B, n, H, W)`` panels into ``(B, n, d_h)``: context panels at their own
        slots, every answer at the missing slot.
        """
        panels = _as_images(panels, self.dtype)
        n = self.config.panels
        if panels.ndim != 4 or panels.shape[1] != n:
            raise ShapeError(f"Expected (B, {n}, H, W) panels, got {panels.shape}")
        batch, _, height, width = panels.shape
        images = panels.reshape(batch * n, 1, height, width)
        embeddings = self.encoder(images, np.tile(self.slots(), batch))
        return embeddings.reshape(batch, n, -1)

    def reason(self, context: Tensor, answers: Tensor) -> Tensor:
        """
        Latents ``(B, n_a, latent)`` for ``(B, n_c, d_h)`` context and ``(B, n_a, d_h)``
        candidate embeddings. Each candidate is stacked after the context on its own.
        """
        batch, n_c, dim = context.shape
        n_a = answers.shape[1]
        tiled = context.reshape(batch, 1, n_c, dim).expand(batch, n_a, n_c, dim)
        stacked = concat([tiled, answers.reshape(batch, n_a, 1, dim)], axis=2)
        z = self.reasoner(stacked.reshape(batch * n_a, n_c + 1, dim))
        return z.reshape(batch, n_a, -1)

    def predict(self, zs: Tensor) -> AnswerScores:
        target = self.target_head(zs)
        return AnswerScores(
            target=target,
            rules_aggregate=self.aggregate_head(zs),
            rules_conditioned=self.conditioned_head(zs, target),
        )

    def forward(self, panels) -> AnswerScores:
        embeddings = self.encode(panels)
        n_c = self.config.context_panels
        zs = self.reason(embeddings[:, :n_c], embeddings[:, n_c:])
        return self.predict(zs)


### LOSS ###


def one_hot(indices, classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= classes):
        raise ConfigurationError(f"Target index out of range [0, {classes})")
    encoded = np.zeros((indices.size, classes))
    encoded[np.arange(indices.size), indices] = 1.0
    return encoded


def check_one_hot(targets, classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets.reshape(1, -1)
    valid = (
        targets.shape[-1] == classes
        and np.all((targets == 0) | (targets == 1))
        and np.all(targets.sum(axis=-1) == 1)
    )
    if not valid:
        raise ConfigurationError(f"Targets must be one-hot over {classes} answers")
    return targets


def loss_terms(scores: AnswerScores, targets, rules) -> Dict[str, Tensor]:
    """
    Cross-entropy of the answer distribution and the two coordinate-mean rule BCE terms,
    each averaged over the batch.
    """
    dtype = scores.target.dtype
    classes = scores.target.shape[-1]
    targets = check_one_hot(targets, classes).astype(dtype)
    rules = np.asarray(rules, dtype=dtype).reshape(scores.rules_aggregate.shape)
    if not np.all((rules == 0) | (rules == 1)):
        raise ConfigurationError("Rule targets must be multi-hot")
    log_probabilities = functional.log_softmax(scores.target, axis=-1)
    bce = functional.bce_with_logits
    return {
        "ce": -(log_probabilities * targets).sum(axis=1).mean(),
        "bce_aggregate": bce(scores.rules_aggregate, rules).mean(),
        "bce_conditioned": bce(scores.rules_conditioned, rules).mean(),
    }


def loss(scores: AnswerScores, targets, rules, beta: float, gamma: float) -> Tensor:
    terms = loss_terms(scores, targets, rules)
    return (
        terms["ce"]
        + beta * terms["bce_aggregate"]
        + gamma * terms["bce_conditioned"]
    )


def param_count(config: ModelConfig) -> int:
    return sum(parameter.size for parameter in PoNG(config).parameters())
