import logging
import math

import numpy as np
import pytest

from app.errors import ChannelRangeError, ConfigError
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
from app.tensor import ComputationTape, Tensor, backward
from app.utils.gradcheck import check_gradients


def test_zero_head_gives_uniform_probabilities(rng):
    head = ClassifierHead.init(rng, patch_dim=4, num_classes=2)
    head.linear.weight.data[:] = 0.0
    R = Tensor(rng.standard_normal((3, 2, 4)))
    logits = classify(R, head)
    np.testing.assert_allclose(class_probabilities(logits.data), [0.5, 0.5])
    assert cross_entropy(logits, 1).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(Tensor([10.0, -10.0]), 0).item() < 1e-4
    assert cross_entropy(Tensor([0.0, 0.0]), 1).item() == pytest.approx(0.693147, abs=1e-6)
    pair = cross_entropy(Tensor([[10.0, -10.0], [0.0, 0.0]]), [0, 1]).item()
    expected = (cross_entropy(Tensor([10.0, -10.0]), 0).item() + math.log(2)) / 2
    assert pair == pytest.approx(expected, abs=1e-12)


def test_out_of_range_label_is_rejected():
    with pytest.raises(ConfigError, match="label 2"):
        cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_cross_entropy_gradient_sums_to_zero(rng):
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="logits")
    with ComputationTape() as tape:
        cross_entropy(logits, [0, 2, 1, 1])
    grad = backward(tape)[logits]
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_classification_is_channel_permutation_invariant(rng):
    head = ClassifierHead.init(rng, patch_dim=4, num_classes=3)
    R = rng.standard_normal((2, 5, 4))
    a = classify(Tensor(R), head).data
    b = classify(Tensor(R[:, ::-1]), head).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_classifier_needs_two_classes(rng):
    with pytest.raises(ConfigError):
        ClassifierHead.init(rng, patch_dim=4, num_classes=1)


def test_masked_mse_example():
    loss = masked_mse(Tensor([1.0, 2.0, 3.0]), [1.0, 0.0, 5.0], [1.0, 0.0, 1.0])
    assert loss.item() == 2.0


def test_masked_mse_without_valid_targets_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="app"):
        loss = masked_mse(Tensor([1.0, 2.0]), [0.0, 0.0], [0.0, 0.0])
    assert loss.item() == 0.0
    assert "no valid targets" in caplog.text


def test_masked_targets_do_not_affect_loss():
    pred = Tensor([0.3, -1.2, 4.0])
    mask = [1.0, 0.0, 1.0]
    first = masked_mse(pred, [0.1, 0.0, 2.0], mask).item()
    second = masked_mse(pred, [0.1, 1e300, 2.0], mask).item()
    assert first == second


@pytest.fixture
def decoder(rng):
    return ValueDecoder.init(rng, patch_dim=4, time_dim=3, hidden_dim=5)


def test_identical_queries_get_identical_predictions(decoder, rng):
    R = Tensor(rng.standard_normal((2, 2, 4)))
    preds = decode_values(R, [(1, 0.3), (1, 0.3), (0, 0.3)], decoder).data
    assert preds.shape == (3,)
    assert preds[0] == preds[1]


def test_prediction_reads_only_its_channel(decoder, rng):
    R = rng.standard_normal((3, 2, 4))
    changed = R.copy()
    changed[:, 0] += 5.0
    before = decode_values(Tensor(R), [(1, 0.5)], decoder).data
    after = decode_values(Tensor(changed), [(1, 0.5)], decoder).data
    np.testing.assert_array_equal(before, after)


def test_forecast_query_uses_last_patch(decoder, rng):
    R = rng.standard_normal((4, 1, 4))
    early = R.copy()
    early[:3] += 1.0
    late = R.copy()
    late[3] += 1.0
    base = decode_values(Tensor(R), [(0, 1.2)], decoder).data
    np.testing.assert_array_equal(base, decode_values(Tensor(early), [(0, 1.2)], decoder).data)
    assert not np.array_equal(base, decode_values(Tensor(late), [(0, 1.2)], decoder).data)


def test_unknown_channel_is_a_range_error(decoder, rng):
    with pytest.raises(ChannelRangeError):
        decode_values(Tensor(rng.standard_normal((2, 2, 4))), [(5, 0.1)], decoder)


def test_batched_queries_pick_their_instance(decoder, rng):
    R = rng.standard_normal((2, 2, 1, 4))
    batch = QueryBatch(
        instance=np.array([0, 1]),
        channel=np.array([0, 0]),
        time=np.array([0.2, 0.2]),
        target=np.zeros(2),
    )
    preds = decode_values(Tensor(R), batch, decoder).data
    single = decode_values(Tensor(R[1]), [(0, 0.2)], decoder).data
    assert preds[1] == pytest.approx(single[0], abs=1e-12)


def test_head_gradients_match_finite_differences(rng):
    head = ClassifierHead.init(rng, patch_dim=4, num_classes=3)
    decoder = ValueDecoder.init(rng, patch_dim=4, time_dim=2, hidden_dim=3)
    R = Tensor(rng.standard_normal((2, 2, 4)), requires_grad=True, name="R")
    queries = [(0, 0.1), (1, 0.7), (1, 0.9)]
    targets = [0.5, -0.2, 1.0]

    def loss():
        return cross_entropy(classify(R, head), 2) + masked_mse(decode_values(R, queries, decoder), targets, [1.0, 1.0, 0.0])

    checked = [R, head.linear.weight, decoder.hidden.weight, decoder.time_ffn.weight]
    errors = check_gradients(loss, checked)
    assert max(errors.values()) < 1e-5
