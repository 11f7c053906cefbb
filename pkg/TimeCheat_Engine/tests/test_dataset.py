import json
import logging

import numpy as np
import pytest

from app.crud.dataset import (
    compute_stats,
    convert_csv,
    denormalize,
    denormalize_values,
    load_dataset,
    normalize,
    save_dataset,
    split,
    split_sizes,
)
from app.errors import ChannelRangeError, ConfigError, DatasetParseError, DuplicateObservationError
from app.models import Dataset, TaskKind
from tests.conftest import make_instance


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


HEADER = json.dumps({"meta": {"C": 2, "task": "classification"}})


def test_load_single_record(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [HEADER, '{"span":[0,48],"obs":[[0,1.5,0.7]],"label":1}'])
    dataset = load_dataset(path)
    assert len(dataset) == 1
    instance = dataset.instances[0]
    assert instance.label == 1
    assert len(instance.observations) == 1
    assert instance.observations[0].to_list() == [0, 1.5, 0.7]
    assert dataset.num_classes == 2


def test_empty_file_warns_instead_of_failing(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    with caplog.at_level(logging.WARNING, logger="app"):
        dataset = load_dataset(str(path))
    assert len(dataset) == 0
    assert "empty" in caplog.text


def test_channel_out_of_range_names_channel_and_line(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [HEADER, '{"span":[0,1],"obs":[[5,1.0,0.3]],"label":0}'])
    with pytest.raises(ChannelRangeError) as info:
        load_dataset(path)
    assert info.value.channel == 5
    assert info.value.line_number == 2
    assert "channel 5" in str(info.value)


def test_duplicate_observation_is_rejected(tmp_path):
    record = '{"span":[0,1],"obs":[[0,0.5,1.0],[0,0.5,2.0]],"label":0}'
    path = write_lines(tmp_path / "d.jsonl", [HEADER, record])
    with pytest.raises(DuplicateObservationError, match="line 2"):
        load_dataset(path)


@pytest.mark.parametrize(
    "record",
    [
        "{not json",
        '{"obs":[],"label":0}',
        '{"span":[0,1],"obs":[[0,2.0,1.0]],"label":0}',
        '{"span":[0,1],"obs":[],"label":-1}',
    ],
)
def test_malformed_lines_report_line_number(tmp_path, record):
    path = write_lines(tmp_path / "d.jsonl", [HEADER, '{"span":[0,1],"obs":[],"label":0}', record])
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line_number == 3


def test_unsupported_schema(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path / "x.csv"), schema="csv")


def test_normalize_two_point_channel():
    dataset = Dataset(
        instances=(make_instance([(0, 0.2, 2.0), (0, 0.4, 4.0)], label=0),),
        num_channels=2,
        task=TaskKind.CLASSIFICATION,
    )
    normalized = normalize(dataset)
    assert normalized.stats.mean[0] == 3.0
    assert normalized.stats.std[0] == 1.0
    assert [obs.value for obs in normalized.instances[0].observations] == [-1.0, 1.0]
    # channel 1 is never observed
    assert (normalized.stats.mean[1], normalized.stats.std[1]) == (0.0, 1.0)


def test_normalize_rescales_time_to_unit_span():
    dataset = Dataset(
        instances=(make_instance([(0, 13.5, 1.0)], span=(0.0, 48.0), label=0),),
        num_channels=1,
        task=TaskKind.CLASSIFICATION,
    )
    instance = normalize(dataset).instances[0]
    assert instance.observations[0].time == 0.28125
    assert instance.span == (0.0, 1.0)
    assert instance.source_span == (0.0, 48.0)


def test_normalize_uses_given_stats_and_checks_channel_count(instance_factory):
    train = Dataset((instance_factory([(0, 0.1, 10.0), (0, 0.2, 20.0)], label=0),), 1, TaskKind.CLASSIFICATION)
    test = Dataset((instance_factory([(0, 0.5, 15.0)], label=1),), 1, TaskKind.CLASSIFICATION)
    stats = compute_stats(train)
    assert normalize(test, stats).instances[0].observations[0].value == 0.0
    with pytest.raises(ConfigError):
        normalize(Dataset((), 3, TaskKind.CLASSIFICATION), stats)


def test_denormalize_restores_values_and_times(random_instance):
    instances = [random_instance(span=(10.0, 58.0), label=i % 2) for i in range(5)]
    dataset = Dataset(tuple(instances), 2, TaskKind.CLASSIFICATION)
    restored = denormalize(normalize(dataset))
    for original, back in zip(dataset.instances, restored.instances):
        assert back.span == original.span
        for a, b in zip(original.observations, back.observations):
            assert a.channel == b.channel
            assert b.time == pytest.approx(a.time, abs=1e-9)
            assert b.value == pytest.approx(a.value, abs=1e-9)


def test_denormalize_values_maps_predictions_back_per_channel():
    dataset = Dataset(
        instances=(make_instance([(0, 0.2, 2.0), (0, 0.4, 4.0), (1, 0.1, 8.0), (1, 0.3, 12.0)], label=0),),
        num_channels=2,
        task=TaskKind.CLASSIFICATION,
    )
    stats = normalize(dataset).stats
    restored = denormalize_values([1.0, -1.0, 0.5], [0, 0, 1], stats)
    np.testing.assert_allclose(restored, [4.0, 2.0, 11.0])


def test_save_then_load_preserves_instances(tmp_path, random_instance):
    dataset = Dataset(tuple(random_instance(label=i % 3) for i in range(4)), 2, TaskKind.CLASSIFICATION, num_classes=3)
    path = str(tmp_path / "nested" / "out.jsonl")
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.instances == dataset.instances
    assert loaded.num_classes == 3


def balanced(count=10):
    return Dataset(
        tuple(make_instance([(0, 0.5, float(i))], label=i % 2) for i in range(count)),
        1,
        TaskKind.CLASSIFICATION,
    )


def test_split_sizes_follow_ratios():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert sum(split_sizes(97, (0.8, 0.1, 0.1))) == 97
    train, val, test = split(balanced(), seed=1)
    assert (len(train), len(val), len(test)) == (8, 1, 1)


def test_split_is_deterministic_and_disjoint():
    dataset = balanced(30)
    first = split(dataset, seed=5)
    second = split(dataset, seed=5)
    assert [part.instances for part in first] == [part.instances for part in second]
    values = [obs.value for part in first for inst in part.instances for obs in inst.observations]
    assert sorted(values) == list(range(30))


def test_split_is_stratified():
    for seed in range(20):
        train, _, _ = split(balanced(), seed=seed)
        counts = np.bincount(train.labels, minlength=2)
        assert counts.tolist() == [4, 4]


def test_split_rejects_empty_parts_and_bad_ratios():
    with pytest.raises(ConfigError):
        split(balanced(3))
    with pytest.raises(ConfigError):
        split(balanced(), ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        split(balanced(), ratios=(1.0, 0.0, 0.0))


def test_convert_csv_groups_rows_by_instance(tmp_path):
    path = tmp_path / "long.csv"
    path.write_text(
        "instance_id,channel,time,value,label\n"
        "a,0,0.0,1.0,1\n"
        "a,1,2.0,3.0,1\n"
        "b,0,1.0,5.0,0\n"
        "b,0,4.0,6.0,0\n",
        encoding="utf-8",
    )
    dataset = convert_csv(str(path))
    assert dataset.num_channels == 2
    assert [inst.label for inst in dataset.instances] == [1, 0]
    assert dataset.instances[1].span == (1.0, 4.0)
    with pytest.raises(ChannelRangeError):
        convert_csv(str(path), num_channels=1)


def test_convert_csv_requires_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,time\n1,2\n", encoding="utf-8")
    with pytest.raises(DatasetParseError):
        convert_csv(str(path))
