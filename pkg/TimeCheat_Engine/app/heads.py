from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app import logger
from app.errors import ChannelRangeError, ConfigError, ShapeError
from app.layers import Linear, collect_parameters, constant
from app.patcher import patch_boundaries
from app.tensor import (
    Tensor,
    concat,
    gather_rows,
    log_softmax,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sin,
    sub,
    take_along_rows,
)


@dataclass
class ClassifierHead:
    """Mean-pool R over patches and channels, then a linear map to class logits."""

    linear: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, patch_dim: int, num_classes: int, dtype=None) -> "ClassifierHead":
        if num_classes < 2:
            raise ConfigError(f"classification needs at least 2 classes, got {num_classes}")
        return cls(linear=Linear.init(rng, patch_dim, num_classes, "head.classifier", dtype))

    @property
    def num_classes(self) -> int:
        return self.linear.fan_out

    def parameters(self):
        return collect_parameters(self)


@dataclass
class ValueDecoder:
    """Predict one value per (channel, query time) from patch-local context and a time encoding."""

    time_ffn: Linear
    hidden: Linear
    output: Linear

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        patch_dim: int,
        time_dim: int = 16,
        hidden_dim: int = 32,
        dtype=None,
    ) -> "ValueDecoder":
        return cls(
            time_ffn=Linear.init(rng, 1, time_dim, "head.decoder.time_ffn", dtype),
            hidden=Linear.init(rng, patch_dim + time_dim, hidden_dim, "head.decoder.hidden", dtype),
            output=Linear.init(rng, hidden_dim, 1, "head.decoder.output", dtype),
        )

    def parameters(self):
        return collect_parameters(self)


@dataclass(frozen=True)
class QueryBatch:
    """Flat list of value queries across a batch of instances."""

    instance: np.ndarray
    channel: np.ndarray
    time: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.channel)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[int, float]]) -> "QueryBatch":
        channels = np.array([int(c) for c, _ in pairs], dtype=np.int64)
        times = np.array([float(t) for _, t in pairs], dtype=np.float64)
        return cls(
            instance=np.zeros(len(pairs), dtype=np.int64),
            channel=channels,
            time=times,
            target=np.zeros(len(pairs), dtype=np.float64),
        )


def classify(R: Tensor, head: ClassifierHead) -> Tensor:
    """Logits of shape (B, classes) from R of shape (B, P, C, T_P), or (classes,) from (P, C, T_P)."""
    single = R.ndim == 3
    pooled = reduce_mean(R, axes=(0, 1) if single else (1, 2))
    if single:
        pooled = reshape(pooled, (1, pooled.shape[0]))
    logits = head.linear(pooled)
    if single:
        return reshape(logits, (head.num_classes,))
    return logits


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise ConfigError(f"label {bad} out of range for {num_classes} classes")
    picked = take_along_rows(log_softmax(logits), labels)
    return scale(reduce_mean(picked), -1.0)


def decode_values(
    R: Tensor,
    queries,
    decoder: ValueDecoder,
    num_channels: Optional[int] = None,
) -> Tensor:
    """
    One prediction per query. ``R`` is (B, P, C, T_P) with a ``QueryBatch``, or
    (P, C, T_P) with a list of (channel, time) pairs for a single instance.
    """
    if not isinstance(queries, QueryBatch):
        queries = QueryBatch.from_pairs(list(queries))
    if R.ndim == 3:
        R = reshape(R, (1,) + R.shape)
    batch, num_patches, channels, width = R.shape
    num_channels = num_channels if num_channels is not None else channels
    if len(queries) == 0:
        raise ShapeError("decode_values", (0,), detail="no queries to decode")
    bad = (queries.channel < 0) | (queries.channel >= num_channels)
    if bad.any():
        raise ChannelRangeError(int(queries.channel[bad][0]), num_channels)

    # forecasting queries past the window clamp to the last patch
    patches = np.searchsorted(patch_boundaries(num_patches), queries.time, side="right") - 1
    patches = np.clip(patches, 0, num_patches - 1)
    rows = (queries.instance * num_patches + patches) * channels + queries.channel
    context = gather_rows(reshape(R, (batch * num_patches * channels, width)), rows)

    times = constant(queries.time.reshape(-1, 1), R)
    time_code = sin(decoder.time_ffn(times))
    hidden = relu(decoder.hidden(concat([context, time_code], axis=1)))
    return reshape(decoder.output(hidden), (len(queries),))


def masked_mse(pred: Tensor, target, valid_mask) -> Tensor:
    """Squared error averaged over entries where ``valid_mask`` is 1."""
    target = np.asarray(target, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=np.float64)
    if pred.shape != target.shape or target.shape != valid_mask.shape:
        raise ShapeError("masked_mse", pred.shape, target.shape, valid_mask.shape)
    count = float(valid_mask.sum())
    if count == 0:
        logger.warning("masked_mse: no valid targets; loss is 0")
        return Tensor(0.0, dtype=pred.data.dtype)
    # masked-out targets never enter the arithmetic
    safe_target = np.where(valid_mask > 0, target, pred.data)
    diff = sub(pred, constant(safe_target, pred))
    weighted = mul(mul(diff, diff), constant(valid_mask, pred))
    return scale(reduce_sum(weighted), 1.0 / count)
