from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.embedder import EmbedderParams, embed_batch
from app.encoder import EncoderParams, SeriesRepresentation, encode
from app.errors import CheckpointError, ConfigError, ShapeError
from app.heads import (
    ClassifierHead,
    QueryBatch,
    ValueDecoder,
    class_probabilities,
    classify,
    cross_entropy,
    decode_values,
    masked_mse,
)
from app.layers import collect_parameters
from app.models import ISMTSInstance, TaskKind, resolve_task
from app.run_config import ModelConfig
from app.tensor import Tensor


@dataclass
class ModelParams:
    embedder: EmbedderParams
    encoder: EncoderParams
    classifier: Optional[ClassifierHead] = None
    decoder: Optional[ValueDecoder] = None

    def parameters(self) -> Dict[str, Tensor]:
        return collect_parameters(self)

    def trainable(self) -> Dict[str, Tensor]:
        return {name: tensor for name, tensor in self.parameters().items() if tensor.requires_grad}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"checkpoint parameters do not match the model (missing {missing}, unexpected {unexpected})")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise CheckpointError(f"parameter {name}: checkpoint shape {value.shape} != model shape {tensor.shape}")
            tensor.data = value.astype(tensor.data.dtype, copy=True)


def build_params(
    config: ModelConfig,
    num_channels: int,
    task,
    num_classes: Optional[int] = None,
    seed: int = 0,
    dtype=None,
) -> ModelParams:
    task = resolve_task(task)
    if num_channels < 1:
        raise ConfigError(f"the model needs at least one channel, got {num_channels}")
    rng = np.random.default_rng(seed)
    embedder = EmbedderParams.init(
        rng,
        num_channels,
        config.ref_points,
        hidden=config.embedder.hidden,
        num_heads=config.embedder.heads,
        num_layers=config.embedder.layers,
        patch_dim=config.patch_dim,
        node_residual=config.embedder.node_residual,
        patch_relative_time=config.embedder.patch_relative_time,
        dtype=dtype,
    )
    if config.embedder.freeze_channel_matrix:
        embedder.freeze_channel_encoding()
    encoder = EncoderParams.init(
        rng,
        config.patch_dim,
        num_layers=config.encoder.layers,
        num_heads=config.encoder.heads,
        ffn_dim=config.encoder.ffn_dim,
        mode=config.encoder.mode,
        dtype=dtype,
    )
    if task is TaskKind.CLASSIFICATION:
        return ModelParams(embedder, encoder, classifier=ClassifierHead.init(rng, config.patch_dim, num_classes or 2, dtype))
    decoder = ValueDecoder.init(
        rng,
        config.patch_dim,
        time_dim=config.head.time_dim,
        hidden_dim=config.head.decoder_hidden,
        dtype=dtype,
    )
    return ModelParams(embedder, encoder, decoder=decoder)


# Flatten the query triples of a batch of instances, in instance then canonical order.
def query_batch(instances: Sequence[ISMTSInstance]) -> QueryBatch:
    owner, channel, time, target = [], [], [], []
    for index, instance in enumerate(instances):
        for query in instance.queries:
            owner.append(index)
            channel.append(query.channel)
            time.append(query.time)
            target.append(query.value)
    return QueryBatch(
        instance=np.asarray(owner, dtype=np.int64),
        channel=np.asarray(channel, dtype=np.int64),
        time=np.asarray(time, dtype=np.float64),
        target=np.asarray(target, dtype=np.float64),
    )


class TimeCheatModel:
    """Forward passes and losses for one task over normalized instances."""

    def __init__(self, params: ModelParams, num_patches: int, task):
        self.params = params
        self.num_patches = num_patches
        self.task = resolve_task(task)
        if self.task is TaskKind.CLASSIFICATION and params.classifier is None:
            raise ConfigError("classification models need a classifier head")
        if self.task.predicts_values and params.decoder is None:
            raise ConfigError(f"{self.task.value} models need a value decoder")

    @property
    def num_channels(self) -> int:
        return self.params.embedder.num_channels

    def embed(self, instances: Sequence[ISMTSInstance]) -> Tensor:
        return embed_batch(instances, self.num_patches, self.params.embedder)

    def represent(self, instances: Sequence[ISMTSInstance], keep_attention: bool = False) -> SeriesRepresentation:
        return encode(self.embed(instances), self.params.encoder, keep_attention=keep_attention)

    def logits(self, instances: Sequence[ISMTSInstance]) -> Tensor:
        return classify(self.represent(instances).R, self.params.classifier)

    def predict_values(self, instances: Sequence[ISMTSInstance], queries: Optional[QueryBatch] = None) -> Tensor:
        queries = queries if queries is not None else query_batch(instances)
        R = self.represent(instances).R
        return decode_values(R, queries, self.params.decoder, num_channels=self.num_channels)

    def loss(self, instances: Sequence[ISMTSInstance]) -> Tensor:
        if not instances:
            raise ShapeError("loss", (0,), detail="empty batch")
        if self.task is TaskKind.CLASSIFICATION:
            labels = np.array([instance.label for instance in instances], dtype=np.int64)
            return cross_entropy(self.logits(instances), labels)
        queries = query_batch(instances)
        if len(queries) == 0:
            return masked_mse(Tensor(np.zeros(0)), np.zeros(0), np.zeros(0))
        predictions = self.predict_values(instances, queries)
        return masked_mse(predictions, queries.target, np.ones(len(queries)))

    def predict(self, instances: Sequence[ISMTSInstance], batch_size: int = 64) -> np.ndarray:
        """Class probabilities (N, classes) or flattened query predictions, without recording."""
        outputs: List[np.ndarray] = []
        for start in range(0, len(instances), batch_size):
            chunk = instances[start:start + batch_size]
            if self.task is TaskKind.CLASSIFICATION:
                outputs.append(class_probabilities(self.logits(chunk).data.astype(np.float64)))
            elif len(query_batch(chunk)):
                outputs.append(self.predict_values(chunk).data.astype(np.float64))
        if not outputs:
            width = (self.params.classifier.num_classes,) if self.task is TaskKind.CLASSIFICATION else ()
            return np.zeros((0,) + width)
        return np.concatenate(outputs, axis=0)
