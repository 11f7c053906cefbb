import enum
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ChannelRangeError, ConfigError, DuplicateObservationError


class TaskKind(enum.Enum):
    CLASSIFICATION = "classification"
    INTERPOLATION = "interpolation"
    FORECASTING = "forecasting"

    @property
    def predicts_values(self) -> bool:
        return self is not TaskKind.CLASSIFICATION


# Resolves a task given as enum member, value or name (case-insensitive).
def resolve_task(value) -> TaskKind:
    if isinstance(value, TaskKind):
        return value
    text = str(value or "").strip().lower()
    try:
        return TaskKind(text)
    except ValueError as exc:
        raise ConfigError(f"unknown task '{value}'") from exc


@dataclass(frozen=True)
class Observation:
    """One measured value: the (channel, time) cell of the series where the mask is 1."""

    channel: int
    time: float
    value: float

    def to_list(self) -> List[float]:
        return [self.channel, self.time, self.value]


# Canonical order used everywhere observations are stored: by time, then channel.
def _canonical(observations: Sequence[Observation]) -> Tuple[Observation, ...]:
    return tuple(sorted(observations, key=lambda obs: (obs.time, obs.channel)))


@dataclass(frozen=True)
class ISMTSInstance:
    observations: Tuple[Observation, ...]
    span: Tuple[float, float]
    label: Optional[int] = None
    queries: Tuple[Observation, ...] = ()
    source_span: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        t_min, t_max = float(self.span[0]), float(self.span[1])
        if not (math.isfinite(t_min) and math.isfinite(t_max)) or t_max < t_min:
            raise ConfigError(f"invalid span {self.span!r}")
        object.__setattr__(self, "span", (t_min, t_max))
        object.__setattr__(self, "observations", _canonical(self.observations))
        object.__setattr__(self, "queries", _canonical(self.queries))
        seen = set()
        for obs in self.observations:
            if not math.isfinite(obs.value):
                raise ConfigError(f"non-finite value on channel {obs.channel} at time {obs.time!r}")
            if obs.time < t_min or obs.time > t_max:
                raise ConfigError(f"observation time {obs.time!r} lies outside span [{t_min}, {t_max}]")
            key = (obs.channel, obs.time)
            if key in seen:
                raise DuplicateObservationError(obs.channel, obs.time)
            seen.add(key)

    @property
    def cutoff(self) -> float:
        return self.span[1]

    # Returns observation lists per channel, each sorted by time.
    def by_channel(self, num_channels: int) -> List[List[Observation]]:
        channels: List[List[Observation]] = [[] for _ in range(num_channels)]
        for obs in self.observations:
            channels[obs.channel].append(obs)
        return channels

    def check_channels(self, num_channels: int) -> None:
        for obs in self.observations + self.queries:
            if obs.channel < 0 or obs.channel >= num_channels:
                raise ChannelRangeError(obs.channel, num_channels)

    def check_queries(self, task: "TaskKind") -> None:
        t_min, t_max = self.span
        for query in self.queries:
            if task is TaskKind.FORECASTING and not query.time > t_max:
                raise ConfigError(f"forecasting query at {query.time!r} does not exceed the cutoff {t_max}")
            if task is TaskKind.INTERPOLATION and not (t_min <= query.time <= t_max):
                raise ConfigError(f"interpolation query at {query.time!r} lies outside span [{t_min}, {t_max}]")

    # Serialize into the JSONL record layout.
    def to_dict(self) -> Dict:
        data = {
            "span": [self.span[0], self.span[1]],
            "obs": [obs.to_list() for obs in self.observations],
        }
        if self.label is not None:
            data["label"] = int(self.label)
        if self.queries:
            data["queries"] = [query.to_list() for query in self.queries]
        return data


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation over training-split observations."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    @classmethod
    def identity(cls, num_channels: int) -> "ChannelStats":
        return cls(mean=(0.0,) * num_channels, std=(1.0,) * num_channels)

    def to_dict(self) -> Dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: Dict) -> "ChannelStats":
        return cls(mean=tuple(float(v) for v in data["mean"]), std=tuple(float(v) for v in data["std"]))


@dataclass(frozen=True)
class Dataset:
    instances: Tuple[ISMTSInstance, ...]
    num_channels: int
    task: TaskKind
    horizon: Optional[float] = None
    stats: Optional[ChannelStats] = None
    normalized: bool = False
    num_classes: Optional[int] = None
    metadata: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "task", resolve_task(self.task))
        if self.instances and self.num_channels < 1:
            raise ConfigError("a non-empty dataset needs at least one channel")
        for instance in self.instances:
            instance.check_channels(self.num_channels)
            instance.check_queries(self.task)
            if self.task is TaskKind.CLASSIFICATION and instance.label is None:
                raise ConfigError("classification instances need a label")
        if self.task is TaskKind.CLASSIFICATION and self.num_classes is None and self.instances:
            object.__setattr__(self, "num_classes", max(2, max(inst.label for inst in self.instances) + 1))

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([instance.label for instance in self.instances], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, instances=tuple(self.instances[i] for i in indices))

    def with_instances(self, instances: Sequence[ISMTSInstance]) -> "Dataset":
        return replace(self, instances=tuple(instances))

    def header(self) -> Dict:
        meta = {"C": self.num_channels, "task": self.task.value}
        if self.horizon is not None:
            meta["horizon"] = self.horizon
        if self.num_classes is not None:
            meta["classes"] = self.num_classes
        return {"meta": meta}
