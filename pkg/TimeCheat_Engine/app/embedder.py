from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app import logger
from app.errors import ConfigError
from app.graph import GraphBatch, batch_graphs, build_graph
from app.layers import Linear, collect_parameters, constant, set_trainable
from app.models import ISMTSInstance
from app.patcher import reference_grid, segment
from app.tensor import (
    Tensor,
    concat,
    gather_rows,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    segment_softmax,
    segment_sum,
    sin,
    add,
)


@dataclass
class GnnLayerParams:
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    edge_ffn: Linear


@dataclass
class EmbedderParams:
    channel_matrix: Tensor
    channel_ffn: Linear
    time_ffn: Linear
    edge_ffn: Linear
    layers: List[GnnLayerParams]
    readout: Linear
    num_heads: int
    node_residual: bool = True
    patch_relative_time: bool = True
    frozen_channels: bool = False

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        num_channels: int,
        num_ref_points: int,
        hidden: int = 32,
        num_heads: int = 2,
        num_layers: int = 2,
        patch_dim: int = 32,
        node_residual: bool = True,
        patch_relative_time: bool = True,
        dtype=None,
    ) -> "EmbedderParams":
        if hidden % num_heads != 0:
            raise ConfigError(f"embedder heads ({num_heads}) must divide the hidden width ({hidden})")
        if num_layers < 0:
            raise ConfigError("embedder layer count must be >= 0")
        cm = Tensor(np.eye(num_channels), requires_grad=True, name="embedder.channel_matrix", dtype=dtype)
        layers = [
            GnnLayerParams(
                query=Linear.init(rng, hidden, hidden, f"embedder.layers.{index}.query", dtype),
                key=Linear.init(rng, 2 * hidden, hidden, f"embedder.layers.{index}.key", dtype),
                value=Linear.init(rng, 2 * hidden, hidden, f"embedder.layers.{index}.value", dtype),
                output=Linear.init(rng, hidden, hidden, f"embedder.layers.{index}.output", dtype),
                edge_ffn=Linear.init(rng, 3 * hidden, hidden, f"embedder.layers.{index}.edge_ffn", dtype),
            )
            for index in range(num_layers)
        ]
        return cls(
            channel_matrix=cm,
            channel_ffn=Linear.init(rng, num_channels, hidden, "embedder.channel_ffn", dtype),
            time_ffn=Linear.init(rng, 1, hidden, "embedder.time_ffn", dtype),
            edge_ffn=Linear.init(rng, 2, hidden, "embedder.edge_ffn", dtype),
            layers=layers,
            readout=Linear.init(rng, num_ref_points * hidden, patch_dim, "embedder.readout", dtype),
            num_heads=num_heads,
            node_residual=node_residual,
            patch_relative_time=patch_relative_time,
        )

    @property
    def hidden(self) -> int:
        return self.channel_ffn.fan_out

    @property
    def num_channels(self) -> int:
        return self.channel_matrix.shape[0]

    @property
    def num_ref_points(self) -> int:
        return self.readout.fan_in // self.hidden

    @property
    def patch_dim(self) -> int:
        return self.readout.fan_out

    def parameters(self):
        return collect_parameters(self)

    def freeze_channel_encoding(self) -> None:
        """Hold CM and the channel FFN fixed so channel encodings stay one-hot images."""
        set_trainable((self.channel_matrix, *self.channel_ffn.tensors()), False)
        self.frozen_channels = True


@dataclass
class GraphFeatures:
    node: Tensor
    edge: Tensor
    layer: int
    attention: Optional[np.ndarray] = field(default=None, repr=False)


# Block indicator (hidden, heads) summing each head's slice of a feature row.
def _head_pool(hidden: int, num_heads: int, like: Tensor) -> Tensor:
    width = hidden // num_heads
    pool = np.zeros((hidden, num_heads))
    for head in range(num_heads):
        pool[head * width:(head + 1) * width, head] = 1.0
    return constant(pool, like)


def encode_initial(batch: GraphBatch, params: EmbedderParams) -> GraphFeatures:
    like = params.channel_matrix
    channel_rows = gather_rows(params.channel_matrix, batch.channel_ids)
    channel_nodes = params.channel_ffn(channel_rows)
    times = constant(batch.time_values.reshape(-1, 1), like)
    time_nodes = sin(params.time_ffn(times))
    edges = params.edge_ffn(constant(batch.edge_features, like))
    return GraphFeatures(node=concat([channel_nodes, time_nodes], axis=0), edge=edges, layer=0)


def gnn_layer(batch: GraphBatch, feats: GraphFeatures, params: EmbedderParams, layer: int) -> GraphFeatures:
    if layer != feats.layer or layer >= len(params.layers):
        raise ConfigError(f"gnn_layer {layer} applied to features at layer {feats.layer}")
    weights = params.layers[layer]
    hidden = params.hidden
    heads = params.num_heads
    nodes, edges = feats.node, feats.edge
    num_nodes = batch.num_nodes

    neighbour_rows = concat(
        [gather_rows(nodes, batch.message_sender), gather_rows(edges, batch.message_edge)], axis=1
    )
    keys = weights.key(neighbour_rows)
    values = weights.value(neighbour_rows)
    queries = gather_rows(weights.query(nodes), batch.message_receiver)

    pool = _head_pool(hidden, heads, nodes)
    scores = scale(matmul(mul(queries, keys), pool), 1.0 / np.sqrt(hidden // heads))
    attention = segment_softmax(scores, batch.message_receiver, num_nodes)
    spread = matmul(attention, constant(pool.data.T, nodes))
    aggregated = segment_sum(mul(spread, values), batch.message_receiver, num_nodes)
    updated = weights.output(aggregated)

    if params.node_residual:
        updated = add(updated, nodes)
    if not batch.has_neighbors.all():
        # isolated nodes keep their features
        keep = np.repeat(batch.has_neighbors[:, None], hidden, axis=1).astype(np.float64)
        updated = add(mul(updated, constant(keep, nodes)), mul(nodes, constant(1.0 - keep, nodes)))

    channel_side = gather_rows(nodes, batch.edge_channel_node)
    time_side = gather_rows(nodes, batch.edge_time_node)
    edge_input = concat([channel_side, time_side, edges], axis=1)
    new_edges = relu(add(edges, weights.edge_ffn(edge_input)))
    return GraphFeatures(node=updated, edge=new_edges, layer=layer + 1, attention=attention.data)


def readout(batch: GraphBatch, feats: GraphFeatures, params: EmbedderParams) -> Tensor:
    """Gather each channel's K reference edges, concatenate, and project to T_P: (G, C, T_P)."""
    if feats.layer != len(params.layers):
        raise ConfigError(f"readout expects layer {len(params.layers)} features, got layer {feats.layer}")
    g, c, k = batch.reference_edges.shape
    gathered = gather_rows(feats.edge, batch.reference_edges.reshape(-1))
    stacked = reshape(gathered, (g * c, k * params.hidden))
    return reshape(params.readout(stacked), (g, c, params.patch_dim))


def build_batch(instances: Sequence[ISMTSInstance], num_patches: int, params: EmbedderParams) -> GraphBatch:
    graphs = []
    for instance in instances:
        for patch in segment(instance, num_patches):
            grid = reference_grid(patch, params.num_ref_points)
            graphs.append(build_graph(patch, grid, params.num_channels))
    return batch_graphs(graphs, relative_time=params.patch_relative_time)


def embed_graphs(batch: GraphBatch, params: EmbedderParams) -> Tensor:
    feats = encode_initial(batch, params)
    for layer in range(len(params.layers)):
        feats = gnn_layer(batch, feats, params, layer)
    return readout(batch, feats, params)


def embed_batch(instances: Sequence[ISMTSInstance], num_patches: int, params: EmbedderParams) -> Tensor:
    """Patch embeddings for a batch of normalized instances: (B, P, C, T_P)."""
    batch = build_batch(instances, num_patches, params)
    logger.debug(
        "embedding %d instances: %d graphs, %d nodes, %d edges",
        len(instances), batch.num_graphs, batch.num_nodes, batch.num_edges,
    )
    embedded = embed_graphs(batch, params)
    return reshape(embedded, (len(instances), num_patches, params.num_channels, params.patch_dim))


def embed_series(instance: ISMTSInstance, num_patches: int, params: EmbedderParams) -> Tensor:
    """Patch embeddings H of one normalized instance: (P, C, T_P)."""
    embedded = embed_batch([instance], num_patches, params)
    return reshape(embedded, (num_patches, params.num_channels, params.patch_dim))
