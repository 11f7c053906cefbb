from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from app.errors import ShapeError
from app.patcher import Patch, ReferenceGrid


@dataclass(frozen=True)
class BipartiteGraph:
    num_channels: int
    observed_times: np.ndarray
    observed_relative: np.ndarray
    tau: np.ndarray
    tau_relative: np.ndarray
    edge_channel: np.ndarray
    edge_time: np.ndarray
    edge_value: np.ndarray
    edge_indicator: np.ndarray
    num_observed_edges: int

    @property
    def num_reference_points(self) -> int:
        return len(self.tau)

    @property
    def num_time_nodes(self) -> int:
        return len(self.observed_times) + len(self.tau)

    @property
    def num_edges(self) -> int:
        return len(self.edge_channel)

    @property
    def num_reference_edges(self) -> int:
        return self.num_edges - self.num_observed_edges

    # Edge ids of the reference edges, shape (C, K), in grid order.
    def reference_edges(self) -> np.ndarray:
        k = self.num_reference_points
        return self.num_observed_edges + np.arange(self.num_channels * k).reshape(self.num_channels, k)

    def time_inputs(self, relative: bool) -> np.ndarray:
        if relative:
            return np.concatenate([self.observed_relative, self.tau_relative])
        return np.concatenate([self.observed_times, self.tau])

    def edge_features(self) -> np.ndarray:
        return np.stack([self.edge_value, self.edge_indicator], axis=1)


# Observed edges in (time, channel) order, then reference edges in (channel, grid index) order.
def build_graph(patch: Patch, grid: ReferenceGrid, num_channels: int) -> BipartiteGraph:
    observations = sorted(patch.observations, key=lambda obs: (obs.time, obs.channel))
    times = np.array(sorted({obs.time for obs in observations}), dtype=np.float64)
    time_lookup = {time: index for index, time in enumerate(times.tolist())}
    num_observed = len(times)
    k = grid.size

    edge_channel = [obs.channel for obs in observations]
    edge_time = [time_lookup[obs.time] for obs in observations]
    edge_value = [obs.value for obs in observations]
    edge_indicator = [1.0] * len(observations)
    for channel in range(num_channels):
        for point in range(k):
            edge_channel.append(channel)
            edge_time.append(num_observed + point)
            edge_value.append(0.0)
            edge_indicator.append(0.0)

    relative = (times - patch.start) / patch.width
    return BipartiteGraph(
        num_channels=num_channels,
        observed_times=times,
        observed_relative=relative,
        tau=np.array(grid.tau, dtype=np.float64),
        tau_relative=np.array(grid.relative, dtype=np.float64),
        edge_channel=np.array(edge_channel, dtype=np.int64),
        edge_time=np.array(edge_time, dtype=np.int64),
        edge_value=np.array(edge_value, dtype=np.float64),
        edge_indicator=np.array(edge_indicator, dtype=np.float64),
        num_observed_edges=len(observations),
    )


@dataclass(frozen=True)
class GraphBatch:
    """
    Disjoint union of graphs sharing C and K.

    Node rows are laid out as all channel nodes (graph-major, G*C rows) followed by
    all timestamp nodes. Every edge sends one message to each of its endpoints;
    ``message_receiver`` / ``message_sender`` / ``message_edge`` index those messages.
    """

    num_graphs: int
    num_channels: int
    num_reference_points: int
    channel_ids: np.ndarray
    time_values: np.ndarray
    edge_features: np.ndarray
    edge_channel_node: np.ndarray
    edge_time_node: np.ndarray
    reference_edges: np.ndarray
    message_receiver: np.ndarray
    message_sender: np.ndarray
    message_edge: np.ndarray
    has_neighbors: np.ndarray

    @property
    def num_channel_nodes(self) -> int:
        return self.num_graphs * self.num_channels

    @property
    def num_time_nodes(self) -> int:
        return len(self.time_values)

    @property
    def num_nodes(self) -> int:
        return self.num_channel_nodes + self.num_time_nodes

    @property
    def num_edges(self) -> int:
        return len(self.edge_features)


def batch_graphs(graphs: Sequence[BipartiteGraph], relative_time: bool = True) -> GraphBatch:
    if not graphs:
        raise ShapeError("batch_graphs", detail="no graphs to batch")
    num_channels = graphs[0].num_channels
    k = graphs[0].num_reference_points
    for graph in graphs:
        if graph.num_channels != num_channels or graph.num_reference_points != k:
            raise ShapeError(
                "batch_graphs",
                (num_channels, k),
                (graph.num_channels, graph.num_reference_points),
                detail="graphs must share C and K",
            )

    num_channel_nodes = len(graphs) * num_channels
    time_values: List[np.ndarray] = []
    features: List[np.ndarray] = []
    channel_nodes: List[np.ndarray] = []
    time_nodes: List[np.ndarray] = []
    references: List[np.ndarray] = []
    time_offset = 0
    edge_offset = 0
    for index, graph in enumerate(graphs):
        time_values.append(graph.time_inputs(relative_time))
        features.append(graph.edge_features())
        channel_nodes.append(index * num_channels + graph.edge_channel)
        time_nodes.append(num_channel_nodes + time_offset + graph.edge_time)
        references.append(edge_offset + graph.reference_edges())
        time_offset += graph.num_time_nodes
        edge_offset += graph.num_edges

    edge_channel_node = np.concatenate(channel_nodes)
    edge_time_node = np.concatenate(time_nodes)
    edge_ids = np.arange(edge_offset, dtype=np.int64)
    receiver = np.concatenate([edge_channel_node, edge_time_node])
    sender = np.concatenate([edge_time_node, edge_channel_node])
    num_nodes = num_channel_nodes + time_offset
    has_neighbors = np.zeros(num_nodes, dtype=bool)
    has_neighbors[receiver] = True

    return GraphBatch(
        num_graphs=len(graphs),
        num_channels=num_channels,
        num_reference_points=k,
        channel_ids=np.tile(np.arange(num_channels, dtype=np.int64), len(graphs)),
        time_values=np.concatenate(time_values),
        edge_features=np.concatenate(features, axis=0),
        edge_channel_node=edge_channel_node,
        edge_time_node=edge_time_node,
        reference_edges=np.stack(references),
        message_receiver=receiver,
        message_sender=sender,
        message_edge=np.concatenate([edge_ids, edge_ids]),
        has_neighbors=has_neighbors,
    )
