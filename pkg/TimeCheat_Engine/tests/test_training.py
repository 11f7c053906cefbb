import json
import os
from dataclasses import replace

import numpy as np
import pytest

from app.crud.checkpoint import load_checkpoint
from app.crud.dataset import normalize
from app.errors import ConfigError, NonFiniteError, TaskMismatchError, TrainingDivergedError
from app.models import ChannelStats, Dataset, TaskKind
from app.network import TimeCheatModel, query_batch
from app.run_config import RunConfig, apply_overrides
from app.tensor import Tensor
from app.training import (
    Adam,
    evaluate,
    interpolation_protocol,
    interpolation_report,
    load_model,
    per_channel_mean_baseline,
    prepare_splits,
    summarize_runs,
    train,
)
from app.utils.synthetic import generate_synthetic, resolve_preset
from tests.conftest import make_instance


def interpolation_dataset(count=10):
    triples = [(i % 2, (i + 0.5) / count, float(i)) for i in range(count)]
    return Dataset((make_instance(triples),), 2, TaskKind.INTERPOLATION)


def test_adam_first_step_moves_by_learning_rate_and_skips_frozen():
    live = Tensor([1.0, -1.0], requires_grad=True, name="live")
    frozen = Tensor([3.0], requires_grad=False, name="frozen")
    grads = {live: np.array([0.5, -2.0]), frozen: np.array([1.0])}
    Adam(lr=0.1).step({"live": live, "frozen": frozen}, grads)
    np.testing.assert_allclose(live.data, [0.9, -0.9], atol=1e-6)
    assert frozen.data.tolist() == [3.0]


@pytest.mark.parametrize("fraction, kept", [(0.5, 5), (0.9, 9), (0.05, 1)])
def test_interpolation_protocol_split_counts(fraction, kept):
    dataset = interpolation_dataset()
    masked = interpolation_protocol(dataset, fraction, seed=0)
    instance = masked.instances[0]
    assert len(instance.observations) == kept
    assert len(instance.queries) == 10 - kept
    everything = sorted(instance.observations + instance.queries, key=lambda o: (o.time, o.channel))
    assert tuple(everything) == dataset.instances[0].observations


def test_interpolation_protocol_is_seeded():
    dataset = interpolation_dataset()
    first = interpolation_protocol(dataset, 0.5, seed=4)
    assert first == interpolation_protocol(dataset, 0.5, seed=4)
    assert first.instances != interpolation_protocol(dataset, 0.5, seed=5).instances


@pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
def test_interpolation_protocol_rejects_fraction(fraction):
    with pytest.raises(ConfigError):
        interpolation_protocol(interpolation_dataset(), fraction, seed=0)


def test_per_channel_mean_baseline():
    instance = make_instance([(0, 0.1, 1.0), (0, 0.2, 3.0)], queries=[(0, 0.5, 0.0), (1, 0.6, 0.0)])
    dataset = Dataset((instance,), 2, TaskKind.INTERPOLATION)
    np.testing.assert_array_equal(per_channel_mean_baseline(dataset), [2.0, 0.0])


def test_prepare_splits_needs_a_source(tiny_run_config):
    config = replace(tiny_run_config, data=replace(tiny_run_config.data, synthetic=None))
    with pytest.raises(ConfigError):
        prepare_splits(config)


def test_train_writes_run_directory(tiny_run_config):
    results = train(tiny_run_config)
    run_dir = tiny_run_config.out_dir
    for name in ("config.json", "best.ckpt", "metrics.jsonl", "final_report.json"):
        assert os.path.exists(os.path.join(run_dir, name))
    with open(os.path.join(run_dir, "metrics.jsonl"), encoding="utf-8") as handle:
        records = [json.loads(line) for line in handle]
    assert [record["epoch"] for record in records] == [0, 1]
    assert all(set(record) == {"epoch", "train_loss", "val_loss"} for record in records)
    assert results[0].report.task is TaskKind.CLASSIFICATION
    checkpoint = load_checkpoint(os.path.join(run_dir, "best.ckpt"))
    assert checkpoint.history == records


def test_same_config_and_seed_reproduce_metrics(tiny_run_config, tmp_path):
    train(tiny_run_config)
    again = replace(tiny_run_config, out_dir=str(tmp_path / "again"))
    train(again)
    first = tmp_path / "run" / "metrics.jsonl"
    second = tmp_path / "again" / "metrics.jsonl"
    assert first.read_bytes() == second.read_bytes()


def test_frozen_channel_matrix_stays_identity(tiny_run_config):
    config = apply_overrides(tiny_run_config, {"model.embedder.freeze_channel_matrix": True})
    result = train(config)[0]
    np.testing.assert_array_equal(result.checkpoint.params["embedder.channel_matrix"], np.eye(2))
    unfrozen = train(replace(tiny_run_config, out_dir=tiny_run_config.out_dir + "_free"))[0]
    assert not np.array_equal(unfrozen.checkpoint.params["embedder.channel_matrix"], np.eye(2))


def test_evaluate_is_repeatable_and_task_checked(tiny_run_config):
    result = train(tiny_run_config)[0]
    _, _, test_raw = prepare_splits(tiny_run_config)
    first = evaluate(result.checkpoint, test_raw).to_dict()
    assert evaluate(result.checkpoint, test_raw).to_dict() == first
    assert set(first["metrics"]) == {"auroc", "auprc", "accuracy", "precision", "recall", "f1"}
    with pytest.raises(TaskMismatchError):
        evaluate(result.checkpoint, interpolation_dataset())


def test_evaluate_rejects_labels_beyond_the_trained_classes(tiny_run_config):
    result = train(tiny_run_config)[0]
    three_class = Dataset(
        tuple(make_instance([(0, 0.5, 1.0), (1, 0.25, -1.0)], label=label) for label in (0, 1, 2)),
        2,
        TaskKind.CLASSIFICATION,
    )
    with pytest.raises(ConfigError, match="label 2"):
        evaluate(result.checkpoint, three_class)


def test_multiclass_report_has_four_metrics(tiny_run_config):
    config = apply_overrides(tiny_run_config, {"data.synthetic": "multiclass", "data.synthetic_instances": 30})
    report = train(config)[0].report
    assert set(report.metrics) == {"accuracy", "precision", "recall", "f1"}


def test_repeated_runs_are_summarized(tiny_run_config):
    config = replace(tiny_run_config, runs=2)
    results = train(config)
    assert [os.path.basename(result.run_dir) for result in results] == ["run_0", "run_1"]
    summary = summarize_runs(results)
    assert len(summary["runs"]) == 2
    assert set(summary["mean"]) == set(summary["std"]) == set(results[0].report.metrics)
    with open(os.path.join(config.out_dir, "final_report.json"), encoding="utf-8") as handle:
        assert json.load(handle) == summary


def test_non_finite_loss_aborts_with_batch_details(tiny_run_config, monkeypatch):
    def explode(self, instances):
        raise NonFiniteError("log produced nan")

    monkeypatch.setattr(TimeCheatModel, "loss", explode)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_run_config)
    assert info.value.epoch == 0
    assert info.value.batch_index == 0
    assert len(info.value.instance_ids) == tiny_run_config.optimizer.batch_size


def test_interpolation_run_and_report(tiny_run_config):
    config = apply_overrides(tiny_run_config, {"data.synthetic": "interpolation", "data.observed_fraction": 0.5})
    result = train(config)[0]
    assert set(result.report.metrics) == {"mse"}
    held_out = generate_synthetic(resolve_preset("interpolation", num_instances=6), seed=99)
    rows = interpolation_report(result.checkpoint, held_out, fractions=(0.5, 0.9), seed=1)
    assert [row["observed"] for row in rows] == [0.5, 0.9]
    assert rows[0]["count"] > rows[1]["count"]
    assert all(row["mse"] >= 0 and row["baseline_mse"] >= 0 for row in rows)

    stats = ChannelStats.from_dict(result.checkpoint.stats)
    normalized = normalize(held_out, stats)
    merged = normalized.with_instances(
        [replace(inst, observations=inst.observations + inst.queries, queries=()) for inst in normalized.instances]
    )
    masked = interpolation_protocol(merged, 0.5, seed=1)
    queries = query_batch(masked.instances)
    predictions = load_model(result.checkpoint).predict(masked.instances)
    scale = np.asarray(stats.std)[queries.channel]
    expected = float(np.mean(((predictions - queries.target) * scale) ** 2))
    assert rows[0]["mse_original"] == pytest.approx(expected, rel=1e-9)
    assert rows[0]["baseline_mse_original"] >= 0


def test_forecasting_run_restores_model(tiny_run_config):
    config = apply_overrides(tiny_run_config, {"data.synthetic": "forecasting"})
    result = train(config)[0]
    assert result.checkpoint.dataset["horizon"] == pytest.approx(12.0)
    model = load_model(result.checkpoint)
    assert model.task is TaskKind.FORECASTING
    assert result.report["mse"] >= 0


@pytest.mark.slow
def test_two_class_synthetic_is_learned(tmp_path):
    config = apply_overrides(
        RunConfig(out_dir=str(tmp_path / "fit")),
        {"data.synthetic": "two-class", "optimizer.patience": 200},
    )
    result = train(config)[0]
    train_raw, _, _ = prepare_splits(config)
    assert evaluate(result.checkpoint, train_raw)["accuracy"] >= 0.95
    losses = np.array([record["train_loss"] for record in result.history])
    moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(moving) <= 1e-3)


@pytest.mark.slow
def test_interpolation_beats_channel_mean(tmp_path):
    config = apply_overrides(
        RunConfig(out_dir=str(tmp_path / "interp")),
        {"data.synthetic": "interpolation", "data.observed_fraction": 0.5},
    )
    result = train(config)[0]
    held_out = generate_synthetic(resolve_preset("interpolation", num_instances=32), seed=123)
    row = interpolation_report(result.checkpoint, held_out, fractions=(0.5,), seed=0)[0]
    assert row["mse"] <= 0.5 * row["baseline_mse"]

@pytest.mark.slow
def test_frozen_channel_matrix_does_not_beat_default_on_correlated_channels(tmp_path):
    scores = {False: [], True: []}
    for seed in range(5):
        for frozen in (False, True):
            config = apply_overrides(
                RunConfig(out_dir=str(tmp_path / f"seed{seed}_{'frozen' if frozen else 'default'}")),
                {
                    "data.synthetic": "correlated",
                    "data.synthetic_instances": 128,
                    "model.embedder.freeze_channel_matrix": frozen,
                    "optimizer.epochs": 60,
                    "seed": seed,
                },
            )
            result = train(config)[0]
            _, val_raw, _ = prepare_splits(config)
            scores[frozen].append(evaluate(result.checkpoint, val_raw)["auroc"])
    assert np.median(scores[True]) <= np.median(scores[False])
