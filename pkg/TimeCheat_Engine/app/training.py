import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import logger
from app.crud.checkpoint import Checkpoint, save_checkpoint
from app.crud.dataset import denormalize_values, load_dataset, normalize, split
from app.errors import (
    CheckpointError,
    ConfigError,
    NonFiniteError,
    TaskMismatchError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from app.metrics import MetricsReport, auprc, auroc, classification_suite, mse_report
from app.models import ChannelStats, Dataset, TaskKind, resolve_task
from app.network import TimeCheatModel, build_params, query_batch
from app.run_config import RunConfig
from app.tensor import ComputationTape, Tensor, backward, get_default_dtype
from app.utils.synthetic import generate_synthetic, resolve_preset


class Adam:
    """Adaptive moment estimation over named tensors; frozen tensors are never touched."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], grads) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            param = params[name]
            if not param.requires_grad:
                continue
            grad = np.asarray(grads[param], dtype=np.float64)
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.data = (param.data - update).astype(param.data.dtype)


@dataclass
class TrainingResult:
    run_dir: str
    checkpoint: Checkpoint
    history: List[Dict] = field(default_factory=list)
    report: Optional[MetricsReport] = None


def interpolation_protocol(dataset: Dataset, observed_fraction: float, seed: int) -> Dataset:
    """
    Per instance, keep a seeded random ``observed_fraction`` of observations as input and
    turn the rest into value queries. The conditioning count is floor(fraction * n), at least 1.
    """
    if not 0.0 < observed_fraction < 1.0:
        raise ConfigError(f"observed fraction must lie in (0, 1), got {observed_fraction}")
    instances = []
    for index, instance in enumerate(dataset.instances):
        observations = instance.observations
        count = len(observations)
        if count == 0:
            instances.append(replace(instance, queries=()))
            continue
        keep = max(1, int(math.floor(observed_fraction * count + 1e-9)))
        order = np.random.default_rng([seed, index]).permutation(count)
        conditioning = tuple(observations[i] for i in sorted(order[:keep]))
        targets = tuple(observations[i] for i in sorted(order[keep:]))
        instances.append(replace(instance, observations=conditioning, queries=targets))
    return replace(dataset, instances=tuple(instances), task=TaskKind.INTERPOLATION)


def per_channel_mean_baseline(dataset: Dataset) -> np.ndarray:
    """Predict every query with the mean conditioning value of its channel in the same instance."""
    predictions = []
    for instance in dataset.instances:
        channels = instance.by_channel(dataset.num_channels)
        means = [float(np.mean([obs.value for obs in group])) if group else 0.0 for group in channels]
        predictions.extend(means[query.channel] for query in instance.queries)
    return np.asarray(predictions, dtype=np.float64)


def _with_targets(dataset: Dataset, observed_fraction: float, seed: int) -> Dataset:
    if dataset.task is TaskKind.INTERPOLATION and not any(instance.queries for instance in dataset.instances):
        return interpolation_protocol(dataset, observed_fraction, seed)
    return dataset


def prepare_splits(config: RunConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """Raw (unnormalized) train/val/test splits for a run."""
    data = config.data
    if data.train:
        source = load_dataset(data.train)
        if data.val and data.test:
            return source, load_dataset(data.val), load_dataset(data.test)
        if data.val or data.test:
            logger.warning("only one of data.val / data.test given; splitting data.train instead")
    elif data.synthetic:
        overrides = {}
        if data.synthetic_instances is not None:
            overrides["num_instances"] = data.synthetic_instances
        source = generate_synthetic(resolve_preset(data.synthetic, **overrides), seed=config.seed)
    else:
        raise ConfigError("no training data: set data.train or data.synthetic")
    if len(source) == 0:
        raise ConfigError("the training dataset has no instances")
    return split(source, data.split, seed=config.seed)


def _check_compatible(reference: Dataset, other: Dataset, name: str) -> None:
    if other.task is not reference.task:
        raise TaskMismatchError(f"{name} split task {other.task.value} != training task {reference.task.value}")
    if other.num_channels != reference.num_channels:
        raise ConfigError(f"{name} split has C={other.num_channels}, training has C={reference.num_channels}")


def _dataset_loss(model: TimeCheatModel, dataset: Dataset, batch_size: int) -> float:
    total, weight = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.instances[start:start + batch_size]
        size = len(chunk) if model.task is TaskKind.CLASSIFICATION else len(query_batch(chunk))
        if size == 0:
            continue
        total += model.loss(chunk).item() * size
        weight += size
    return total / weight if weight else 0.0


def load_model(checkpoint: Checkpoint) -> TimeCheatModel:
    """Rebuild the model a checkpoint was trained with and load its parameters."""
    config = RunConfig.from_dict(checkpoint.config)
    meta = checkpoint.dataset
    try:
        task = resolve_task(meta["task"])
        num_channels = int(meta["num_channels"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing dataset field {exc}") from exc
    params = build_params(config.model, num_channels, task, meta.get("num_classes"), seed=config.seed, dtype=get_default_dtype())
    params.load_state(checkpoint.params)
    return TimeCheatModel(params, config.model.patches, task)


# Writes config.json, best.ckpt and metrics.jsonl into run_dir.
def _train_once(config: RunConfig, splits: Tuple[Dataset, Dataset, Dataset], run_dir: str) -> TrainingResult:
    train_raw, val_raw, test_raw = splits
    train_set = normalize(train_raw)
    stats = train_set.stats
    val_set = normalize(val_raw, stats)
    test_set = normalize(test_raw, stats)
    fraction = config.data.observed_fraction
    train_set = _with_targets(train_set, fraction, config.seed)
    val_set = _with_targets(val_set, fraction, config.seed + 1)
    test_set = _with_targets(test_set, fraction, config.seed + 2)

    task = train_set.task
    params = build_params(
        config.model,
        train_set.num_channels,
        task,
        train_set.num_classes,
        seed=config.seed,
        dtype=get_default_dtype(),
    )
    model = TimeCheatModel(params, config.model.patches, task)
    opt = config.optimizer
    optimizer = Adam(opt.lr, opt.beta1, opt.beta2, opt.eps)

    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)
    dataset_meta = {
        "task": task.value,
        "num_channels": train_set.num_channels,
        "num_classes": train_set.num_classes,
        "horizon": train_set.horizon,
    }
    best_path = os.path.join(run_dir, "best.ckpt")
    metrics_path = os.path.join(run_dir, "metrics.jsonl")

    history: List[Dict] = []
    best_loss = math.inf
    best_checkpoint: Optional[Checkpoint] = None
    since_best = 0
    with open(metrics_path, "w", encoding="utf-8") as metrics_log:
        for epoch in range(opt.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
            batch_losses = []
            for batch_index, start in enumerate(range(0, len(order), opt.batch_size)):
                ids = order[start:start + opt.batch_size]
                batch = [train_set.instances[i] for i in ids]
                try:
                    with ComputationTape() as tape:
                        loss = model.loss(batch)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(epoch, batch_index, ids.tolist(), float("nan")) from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, batch_index, ids.tolist(), value)
                if len(tape) == 0:
                    continue
                optimizer.step(params.trainable(), backward(tape, output=loss))
                batch_losses.append(value)

            train_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
            val_loss = _dataset_loss(model, val_set, opt.batch_size)
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            history.append(record)
            metrics_log.write(json.dumps(record) + "\n")
            metrics_log.flush()
            logger.info("epoch %d: train_loss=%.6f val_loss=%.6f", epoch, train_loss, val_loss)

            if val_loss < best_loss:
                best_loss = val_loss
                since_best = 0
                best_checkpoint = Checkpoint(
                    params=params.state_dict(),
                    config=config.to_dict(),
                    epoch=epoch,
                    history=list(history),
                    stats=stats.to_dict(),
                    dataset=dataset_meta,
                )
                save_checkpoint(best_checkpoint, best_path)
                logger.info("epoch %d: validation loss improved to %.6f; saved %s", epoch, val_loss, best_path)
            else:
                since_best += 1
                if since_best >= opt.patience:
                    logger.info("early stopping at epoch %d (no improvement for %d epochs)", epoch, opt.patience)
                    break

    if best_checkpoint is None:
        raise TrainingDivergedError(len(history) - 1, -1, [], best_loss)
    best_checkpoint.history = list(history)
    save_checkpoint(best_checkpoint, best_path)
    report = evaluate(best_checkpoint, test_set)
    return TrainingResult(run_dir=run_dir, checkpoint=best_checkpoint, history=history, report=report)


def train(config: RunConfig) -> List[TrainingResult]:
    """Train ``config.runs`` models (seeds seed .. seed+runs-1) on one fixed split."""
    config.validate()
    splits = prepare_splits(config)
    _check_compatible(splits[0], splits[1], "validation")
    _check_compatible(splits[0], splits[2], "test")
    results = []
    for run in range(config.runs):
        run_config = replace(config, seed=config.seed + run)
        run_dir = config.out_dir if config.runs == 1 else os.path.join(config.out_dir, f"run_{run}")
        logger.info("starting run %d/%d (seed %d) in %s", run + 1, config.runs, run_config.seed, run_dir)
        results.append(_train_once(run_config, splits, run_dir))
    write_final_report(config, results)
    return results


def summarize_runs(results: Sequence[TrainingResult]) -> Dict:
    names = sorted(set().union(*(result.report.metrics for result in results)))
    mean, std = {}, {}
    for name in names:
        values = np.array([result.report.metrics[name] for result in results if name in result.report.metrics])
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return {
        "task": results[0].report.task.value,
        "runs": [
            {
                "run_dir": result.run_dir,
                "best_epoch": result.checkpoint.epoch,
                "epochs_run": len(result.history),
                "test": result.report.to_dict(),
            }
            for result in results
        ],
        "mean": mean,
        "std": std,
    }


def write_final_report(config: RunConfig, results: Sequence[TrainingResult]) -> Dict:
    summary = summarize_runs(results)
    path = os.path.join(config.out_dir, "final_report.json")
    os.makedirs(config.out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
    return summary


def _prepare_eval_set(checkpoint: Checkpoint, dataset: Dataset) -> Dataset:
    meta = checkpoint.dataset
    task = resolve_task(meta.get("task"))
    if dataset.task is not task:
        raise TaskMismatchError(f"checkpoint task {task.value} does not match dataset task {dataset.task.value}")
    if len(dataset) and dataset.num_channels != int(meta.get("num_channels", dataset.num_channels)):
        raise ConfigError(f"dataset has C={dataset.num_channels}, checkpoint expects C={meta.get('num_channels')}")
    num_classes = meta.get("num_classes")
    if task is TaskKind.CLASSIFICATION and len(dataset) and num_classes is not None:
        highest = int(dataset.labels.max())
        if highest >= int(num_classes):
            raise ConfigError(f"dataset label {highest} is out of range for a {num_classes}-class checkpoint")
    if not dataset.normalized:
        stats = ChannelStats.from_dict(checkpoint.stats) if checkpoint.stats else None
        dataset = normalize(dataset, stats)
    config = RunConfig.from_dict(checkpoint.config)
    return _with_targets(dataset, config.data.observed_fraction, config.seed + 2)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, model: Optional[TimeCheatModel] = None) -> MetricsReport:
    """Task-appropriate metrics for ``dataset`` under the checkpoint's parameters."""
    dataset = _prepare_eval_set(checkpoint, dataset)
    model = model or load_model(checkpoint)
    if dataset.task is TaskKind.CLASSIFICATION:
        probabilities = model.predict(dataset.instances)
        labels = dataset.labels
        num_classes = probabilities.shape[1]
        metrics: Dict[str, float] = {}
        if num_classes == 2:
            try:
                metrics["auroc"] = auroc(probabilities[:, 1], labels == 1)
                metrics["auprc"] = auprc(probabilities[:, 1], labels == 1)
            except UndefinedMetricError as exc:
                logger.warning("ranking metrics skipped: %s", exc)
        metrics.update(classification_suite(probabilities.argmax(axis=1), labels, num_classes))
        return MetricsReport(task=dataset.task, count=len(dataset), metrics=metrics)

    targets = query_batch(dataset.instances).target
    predictions = model.predict(dataset.instances)
    return MetricsReport(task=dataset.task, count=len(targets), metrics={"mse": mse_report(predictions, targets)})


def interpolation_report(
    checkpoint: Checkpoint,
    dataset: Dataset,
    fractions: Sequence[float],
    seed: int = 0,
) -> List[Dict]:
    """Model and per-channel-mean MSE for each observed fraction."""
    if resolve_task(checkpoint.dataset.get("task")) is not TaskKind.INTERPOLATION:
        raise TaskMismatchError("interpolation reports need an interpolation checkpoint")
    if dataset.task is not TaskKind.INTERPOLATION:
        raise TaskMismatchError(f"dataset task {dataset.task.value} is not interpolation")
    if not dataset.normalized:
        stats = ChannelStats.from_dict(checkpoint.stats) if checkpoint.stats else None
        dataset = normalize(dataset, stats)
    # queries already in the file are observations too
    merged = dataset.with_instances(
        [replace(instance, observations=instance.observations + instance.queries, queries=()) for instance in dataset.instances]
    )
    stats = dataset.stats or ChannelStats.identity(dataset.num_channels)
    model = load_model(checkpoint)
    rows = []
    for fraction in fractions:
        masked = interpolation_protocol(merged, fraction, seed)
        report = evaluate(checkpoint, masked, model=model)
        queries = query_batch(masked.instances)
        baseline_predictions = per_channel_mean_baseline(masked)
        baseline = mse_report(baseline_predictions, queries.target)
        # the same errors in the units the data was recorded in
        targets_original = denormalize_values(queries.target, queries.channel, stats)
        predictions_original = denormalize_values(model.predict(masked.instances), queries.channel, stats)
        rows.append(
            {
                "observed": fraction,
                "count": report.count,
                "mse": report["mse"],
                "baseline_mse": baseline,
                "mse_original": mse_report(predictions_original, targets_original),
                "baseline_mse_original": mse_report(
                    denormalize_values(baseline_predictions, queries.channel, stats), targets_original
                ),
            }
        )
        logger.info("observed %.2f: mse=%.6f baseline=%.6f", fraction, report["mse"], baseline)
    return rows
