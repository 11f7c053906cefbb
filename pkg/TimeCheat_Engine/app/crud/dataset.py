from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import logger
from app.errors import (
    ChannelRangeError,
    ConfigError,
    DatasetParseError,
    DuplicateObservationError,
)
from app.models import ChannelStats, Dataset, ISMTSInstance, Observation, TaskKind, resolve_task

SUPPORTED_SCHEMAS = {"jsonl"}
STD_FLOOR = 1e-8


def _parse_triples(raw, field_name: str, num_channels: int, line_number: int) -> List[Observation]:
    if not isinstance(raw, list):
        raise DatasetParseError(f"'{field_name}' must be a list of [channel, time, value]", line_number)
    triples = []
    for entry in raw:
        if not isinstance(entry, (list, tuple)) or len(entry) != 3:
            raise DatasetParseError(f"'{field_name}' entries must be [channel, time, value], got {entry!r}", line_number)
        channel, time, value = entry
        if isinstance(channel, bool) or not isinstance(channel, int):
            if isinstance(channel, float) and channel.is_integer():
                channel = int(channel)
            else:
                raise DatasetParseError(f"channel must be an integer, got {channel!r}", line_number)
        if channel < 0 or channel >= num_channels:
            raise ChannelRangeError(channel, num_channels, line_number)
        try:
            time, value = float(time), float(value)
        except (TypeError, ValueError) as exc:
            raise DatasetParseError(f"time and value must be numbers in {entry!r}", line_number) from exc
        if not (math.isfinite(time) and math.isfinite(value)):
            raise DatasetParseError(f"non-finite number in {entry!r}", line_number)
        triples.append(Observation(channel=channel, time=time, value=value))
    return triples


def _parse_header(line: str) -> Dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"invalid JSON header: {exc.msg}", 1) from exc
    meta = header.get("meta") if isinstance(header, dict) else None
    if not isinstance(meta, dict):
        raise DatasetParseError("first line must be a {\"meta\": {...}} header", 1)
    num_channels = meta.get("C")
    if isinstance(num_channels, bool) or not isinstance(num_channels, int) or num_channels < 1:
        raise DatasetParseError(f"header 'C' must be a positive integer, got {num_channels!r}", 1)
    try:
        task = resolve_task(meta.get("task"))
    except ConfigError as exc:
        raise DatasetParseError(str(exc), 1) from exc
    horizon = meta.get("horizon")
    classes = meta.get("classes")
    return {
        "C": num_channels,
        "task": task,
        "horizon": float(horizon) if horizon is not None else None,
        "classes": int(classes) if classes is not None else None,
    }


def _parse_record(line: str, meta: Dict, line_number: int) -> ISMTSInstance:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"invalid JSON: {exc.msg}", line_number) from exc
    if not isinstance(record, dict):
        raise DatasetParseError("record must be a JSON object", line_number)
    span = record.get("span")
    if not isinstance(span, list) or len(span) != 2:
        raise DatasetParseError("'span' must be [t_min, t_max]", line_number)

    task: TaskKind = meta["task"]
    num_channels = meta["C"]
    observations = _parse_triples(record.get("obs", []), "obs", num_channels, line_number)
    queries = _parse_triples(record.get("queries", []), "queries", num_channels, line_number)
    label = record.get("label")
    if task is TaskKind.CLASSIFICATION:
        if isinstance(label, bool) or not isinstance(label, int) or label < 0:
            raise DatasetParseError(f"classification records need a non-negative integer 'label', got {label!r}", line_number)
    try:
        instance = ISMTSInstance(observations=tuple(observations), span=(span[0], span[1]), label=label, queries=tuple(queries))
        instance.check_queries(task)
    except DuplicateObservationError as exc:
        raise DuplicateObservationError(exc.channel, exc.time, line_number) from exc
    except (ConfigError, TypeError, ValueError) as exc:
        raise DatasetParseError(str(exc), line_number) from exc
    return instance


def load_dataset(path: str, schema: str = "jsonl") -> Dataset:
    """Read a JSONL dataset: a meta header line followed by one instance per line."""
    if schema not in SUPPORTED_SCHEMAS:
        raise ConfigError(f"unsupported dataset schema '{schema}'")
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()

    content = [(number, line) for number, line in enumerate(lines, start=1) if line.strip()]
    if not content:
        logger.warning("dataset file %s is empty; returning a dataset with 0 instances", path)
        return Dataset(instances=(), num_channels=0, task=TaskKind.CLASSIFICATION)

    first_number, first_line = content[0]
    meta = _parse_header(first_line)
    instances = [_parse_record(line, meta, number) for number, line in content[1:]]
    if not instances:
        logger.warning("dataset file %s has a header but no instances", path)
    logger.info("loaded %d instances (C=%d, task=%s) from %s", len(instances), meta["C"], meta["task"].value, path)
    return Dataset(
        instances=tuple(instances),
        num_channels=meta["C"],
        task=meta["task"],
        horizon=meta["horizon"],
        num_classes=meta["classes"],
    )


def save_dataset(dataset: Dataset, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(dataset.header()) + "\n")
        for instance in dataset.instances:
            handle.write(json.dumps(instance.to_dict()) + "\n")


# Per-channel mean and population std over all observed values, std floored.
def compute_stats(dataset: Dataset) -> ChannelStats:
    values: List[List[float]] = [[] for _ in range(dataset.num_channels)]
    for instance in dataset.instances:
        for obs in instance.observations:
            values[obs.channel].append(obs.value)
    means, stds = [], []
    for channel, observed in enumerate(values):
        if not observed:
            means.append(0.0)
            stds.append(1.0)
            continue
        array = np.asarray(observed, dtype=np.float64)
        means.append(float(array.mean()))
        stds.append(float(max(array.std(), STD_FLOOR)))
    return ChannelStats(mean=tuple(means), std=tuple(stds))


def _scale_time(time: float, t_min: float, width: float) -> float:
    return (time - t_min) / width


def normalize(dataset: Dataset, stats: Optional[ChannelStats] = None) -> Dataset:
    """
    Standardize values per channel and rescale timestamps to [0, 1] over each span.
    Without ``stats`` the dataset is treated as a training split and supplies them.
    """
    if dataset.normalized:
        return dataset
    if stats is None:
        stats = compute_stats(dataset)
    elif len(stats.mean) != dataset.num_channels:
        raise ConfigError(f"stats cover {len(stats.mean)} channels, dataset has {dataset.num_channels}")
    means = np.asarray(stats.mean)
    stds = np.asarray(stats.std)

    def convert(obs: Observation, t_min: float, width: float) -> Observation:
        return Observation(
            channel=obs.channel,
            time=_scale_time(obs.time, t_min, width),
            value=(obs.value - means[obs.channel]) / stds[obs.channel],
        )

    instances = []
    for instance in dataset.instances:
        t_min, t_max = instance.span
        width = t_max - t_min if t_max > t_min else 1.0
        instances.append(
            ISMTSInstance(
                observations=tuple(convert(obs, t_min, width) for obs in instance.observations),
                span=(0.0, 1.0),
                label=instance.label,
                queries=tuple(convert(query, t_min, width) for query in instance.queries),
                source_span=instance.span,
            )
        )
    return replace(dataset, instances=tuple(instances), stats=stats, normalized=True)


def denormalize_values(values, channels, stats: ChannelStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    channels = np.asarray(channels, dtype=np.int64)
    return values * np.asarray(stats.std)[channels] + np.asarray(stats.mean)[channels]


def denormalize(dataset: Dataset) -> Dataset:
    """Invert ``normalize``: original values, timestamps and spans."""
    if not dataset.normalized:
        return dataset
    stats = dataset.stats

    def restore(obs: Observation, t_min: float, width: float, t_max: Optional[float] = None) -> Observation:
        time = obs.time * width + t_min
        if t_max is not None:
            # rounding must not push an observation outside its span
            time = min(max(time, t_min), t_max)
        return Observation(
            channel=obs.channel,
            time=time,
            value=obs.value * stats.std[obs.channel] + stats.mean[obs.channel],
        )

    instances = []
    for instance in dataset.instances:
        t_min, t_max = instance.source_span or (0.0, 1.0)
        width = t_max - t_min if t_max > t_min else 1.0
        instances.append(
            ISMTSInstance(
                observations=tuple(restore(obs, t_min, width, t_max) for obs in instance.observations),
                span=(t_min, t_max),
                label=instance.label,
                queries=tuple(restore(query, t_min, width) for query in instance.queries),
            )
        )
    return replace(dataset, instances=tuple(instances), stats=None, normalized=False)


# Split sizes by the largest-remainder rule so they always sum to n.
def split_sizes(total: int, ratios: Sequence[float]) -> List[int]:
    raw = np.asarray(ratios, dtype=np.float64) * total
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = total - int(sizes.sum())
    if remainder > 0:
        order = np.argsort(-(raw - sizes), kind="mergesort")
        for index in order[:remainder]:
            sizes[index] += 1
    return sizes.tolist()


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    keys = np.empty(len(labels), dtype=np.float64)
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        shuffled = rng.permutation(members)
        offset = rng.uniform()
        keys[shuffled] = (np.arange(len(shuffled)) + offset) / len(shuffled)
    tie_break = rng.permutation(len(labels))
    return np.lexsort((tie_break, keys))


def split(dataset: Dataset, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Partition into train/val/test; classification splits are stratified by label."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    sizes = split_sizes(len(dataset), ratios)
    if min(sizes) == 0:
        raise ConfigError(f"split of {len(dataset)} instances by {ratios} leaves an empty part {sizes}")

    rng = np.random.default_rng(seed)
    if dataset.task is TaskKind.CLASSIFICATION:
        order = _stratified_order(dataset.labels, rng)
    else:
        order = rng.permutation(len(dataset))
    bounds = np.cumsum(sizes)
    parts = np.split(order, bounds[:-1])
    return tuple(dataset.subset(sorted(part.tolist())) for part in parts)


def convert_csv(
    csv_path: str,
    num_channels: Optional[int] = None,
    task: str = "classification",
    span: Optional[Tuple[float, float]] = None,
) -> Dataset:
    """
    Build a dataset from a long-format CSV (instance_id, channel, time, value[, label]).
    Each instance spans [span] when given, otherwise [min time, max time] of its rows.
    """
    task_kind = resolve_task(task)
    rows: Dict[str, List[Observation]] = defaultdict(list)
    labels: Dict[str, int] = {}
    order: List[str] = []
    with open(csv_path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"instance_id", "channel", "time", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DatasetParseError(f"CSV header must contain {sorted(required)}", 1)
        for line_number, row in enumerate(reader, start=2):
            key = row["instance_id"].strip()
            try:
                obs = Observation(channel=int(row["channel"]), time=float(row["time"]), value=float(row["value"]))
            except (TypeError, ValueError) as exc:
                raise DatasetParseError(f"invalid row {row!r}", line_number) from exc
            if num_channels is not None and not (0 <= obs.channel < num_channels):
                raise ChannelRangeError(obs.channel, num_channels, line_number)
            if key not in rows:
                order.append(key)
            rows[key].append(obs)
            if row.get("label") not in (None, ""):
                labels[key] = int(row["label"])

    if num_channels is None:
        num_channels = 1 + max((obs.channel for group in rows.values() for obs in group), default=-1)
    instances = []
    for key in order:
        observations = rows[key]
        times = [obs.time for obs in observations]
        instance_span = span if span is not None else (min(times), max(times))
        label = labels.get(key)
        if task_kind is TaskKind.CLASSIFICATION and label is None:
            raise DatasetParseError(f"instance '{key}' has no label column value")
        instances.append(ISMTSInstance(observations=tuple(observations), span=instance_span, label=label))
    logger.info("converted %d CSV instances from %s", len(instances), csv_path)
    return Dataset(instances=tuple(instances), num_channels=max(num_channels, 1), task=task_kind)
