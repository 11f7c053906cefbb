import numpy as np
import pytest

from app.errors import NonFiniteError, ShapeError, UsageError
from app.tensor import (
    ComputationTape,
    Tensor,
    add,
    affine,
    backward,
    concat,
    cos,
    exp,
    gather_rows,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    segment_softmax,
    segment_sum,
    set_default_dtype,
    sin,
    softmax,
    sub,
    take_along_rows,
    transpose,
)
from app.utils.gradcheck import check_gradients


def leaf(values, name):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


def test_product_gradient_is_other_operand():
    x = leaf([1.0, 2.0, 3.0], "x")
    y = leaf([4.0, 5.0, 6.0], "y")
    with ComputationTape() as tape:
        loss = reduce_sum(mul(x, y))
    grads = backward(tape)
    np.testing.assert_array_equal(grads[x], y.data)
    np.testing.assert_array_equal(grads[y], x.data)
    assert set(grads.named()) == {"x", "y"}


def test_backward_before_forward_is_usage_error():
    with pytest.raises(UsageError):
        backward(ComputationTape())


def test_seed_shape_must_match_output():
    x = leaf([1.0, 2.0], "x")
    with ComputationTape() as tape:
        out = relu(x)
    with pytest.raises(ShapeError):
        backward(tape, seed=np.ones(3), output=out)


def test_only_scalar_broadcasting():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    x = leaf(np.ones((2, 2)), "x")
    s = leaf(1.5, "s")
    with ComputationTape() as tape:
        loss = reduce_sum(add(x, s))
    assert backward(tape)[s] == pytest.approx(4.0)


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        relu(Tensor([np.nan, 1.0]))
    with pytest.raises(NonFiniteError):
        log(Tensor([0.0]))


def test_item_requires_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0]).item()


def test_nothing_recorded_without_gradients():
    with ComputationTape() as tape:
        relu(Tensor([1.0, -1.0]))
    assert len(tape) == 0


def test_repeated_gather_accumulates():
    a = leaf(np.arange(6.0).reshape(3, 2), "a")
    with ComputationTape() as tape:
        loss = reduce_sum(gather_rows(a, np.array([0, 0, 2])))
    np.testing.assert_array_equal(backward(tape)[a], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_visit_order_is_reverse_of_recording():
    x = leaf([0.5, -0.5], "x")
    with ComputationTape() as tape:
        loss = reduce_sum(relu(mul(x, x)))
    grads = backward(tape)
    assert grads.visit_order == sorted(grads.visit_order, reverse=True)
    assert len(grads.visit_order) == len(tape)


def test_replay_reproduces_forward_bit_for_bit(rng):
    x = leaf(rng.standard_normal((3, 4)), "x")
    w = leaf(rng.standard_normal((4, 2)), "w")
    with ComputationTape() as tape:
        out = reduce_mean(softmax(matmul(x, w)))
    np.testing.assert_array_equal(tape.replay(), out.data)


def test_softmax_rows_sum_to_one(rng):
    probs = softmax(Tensor(rng.standard_normal((5, 7)) * 30))
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)


def test_segment_softmax_sums_per_segment(rng):
    scores = Tensor(rng.standard_normal((6, 2)))
    ids = np.array([0, 0, 1, 2, 2, 2])
    weights = segment_softmax(scores, ids, 3).data
    for segment in range(3):
        np.testing.assert_allclose(weights[ids == segment].sum(axis=0), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: reduce_sum(matmul(a, b)),
        lambda a, b: reduce_sum(mul(log_softmax(matmul(a, b)), matmul(a, b))),
        lambda a, b: reduce_sum(mul(segment_softmax(matmul(a, b), np.array([0, 1, 1]), 2), matmul(a, b))),
    ],
)
def test_primitive_gradients_match_finite_differences(rng, build):
    a = leaf(rng.standard_normal((3, 4)), "a")
    b = leaf(rng.standard_normal((4, 2)), "b")
    errors = check_gradients(lambda: build(a, b), [a, b])
    assert max(errors.values()) < 1e-5


def test_batched_matmul_and_layer_norm_gradients(rng):
    a = leaf(rng.standard_normal((2, 3, 4)), "a")
    b = leaf(rng.standard_normal((2, 4, 3)), "b")
    gain = leaf(rng.uniform(0.5, 1.5, size=3), "gain")
    bias = leaf(rng.standard_normal(3), "bias")
    weights = Tensor(rng.standard_normal((6, 3)))

    def loss():
        product = reshape(transpose(matmul(a, b), (1, 0, 2)), (6, 3))
        normed = layer_norm(product, gain, bias)
        return reduce_sum(mul(normed, weights))

    errors = check_gradients(loss, [a, b, gain, bias])
    assert max(errors.values()) < 1e-5


def test_float32_parameters_accumulate_in_float64():
    set_default_dtype(np.float32)
    try:
        x = Tensor([0.1] * 10_000)
        assert x.data.dtype == np.float32
        total = reduce_sum(x)
        assert total.data.dtype == np.float32
        assert total.item() == pytest.approx(1000.0, rel=1e-6)
    finally:
        set_default_dtype(np.float64)


UNARY_CASES = {
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": lambda x: log(add(mul(x, x), Tensor(1.0))),
    "relu": relu,
    "scale": lambda x: scale(x, -2.5),
    "softmax": softmax,
    "log_softmax": log_softmax,
    "reduce_mean": lambda x: reduce_mean(x, axes=1),
    "reduce_sum": lambda x: reduce_sum(x, axes=0),
    "reshape": lambda x: reshape(x, (4, 3)),
    "transpose": lambda x: transpose(x, (1, 0)),
    "gather_rows": lambda x: gather_rows(x, np.array([2, 0, 2, 1])),
    "take_along_rows": lambda x: take_along_rows(x, np.array([3, 0, 1])),
    "segment_sum": lambda x: segment_sum(x, np.array([1, 0, 1]), 2),
    "segment_softmax": lambda x: segment_softmax(x, np.array([0, 0, 1]), 2),
}

BINARY_CASES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda x, y: concat([x, y], axis=0),
    "matmul": lambda x, y: matmul(x, transpose(y, (1, 0))),
}


def random_weights(out, rng):
    return Tensor(rng.standard_normal(out.shape))


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_primitive_matches_finite_differences(rng, name):
    op = UNARY_CASES[name]
    x = leaf(rng.standard_normal((3, 4)), "x")
    weights = random_weights(op(x), rng)
    errors = check_gradients(lambda: reduce_sum(mul(op(x), weights)), [x])
    assert errors["x"] < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY_CASES))
def test_binary_primitive_matches_finite_differences(rng, name):
    op = BINARY_CASES[name]
    x = leaf(rng.standard_normal((3, 4)), "x")
    y = leaf(rng.standard_normal((3, 4)), "y")
    weights = random_weights(op(x, y), rng)
    errors = check_gradients(lambda: reduce_sum(mul(op(x, y), weights)), [x, y])
    assert max(errors.values()) < 1e-4


def test_affine_matches_finite_differences(rng):
    x = leaf(rng.standard_normal((5, 3)), "x")
    w = leaf(rng.standard_normal((3, 2)), "w")
    b = leaf(rng.standard_normal(2), "b")
    weights = Tensor(rng.standard_normal((5, 2)))
    errors = check_gradients(lambda: reduce_sum(mul(affine(x, w, b), weights)), [x, w, b])
    assert max(errors.values()) < 1e-4


def test_sine_derivative_at_zero_is_one():
    x = leaf([0.0], "x")
    with ComputationTape() as tape:
        reduce_sum(sin(x))
    assert backward(tape)[x][0] == pytest.approx(1.0, abs=1e-12)


def test_softmax_total_has_zero_gradient(rng):
    v = leaf(rng.standard_normal(6), "v")
    with ComputationTape() as tape:
        reduce_sum(softmax(v))
    np.testing.assert_allclose(backward(tape)[v], 0.0, atol=1e-12)


def test_softmax_entries_lie_strictly_inside_unit_interval(rng):
    probs = softmax(Tensor(rng.standard_normal((4, 5)) * 3)).data
    assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_softmax_of_huge_logits_stays_finite():
    probs = softmax(Tensor([1000.0, 999.0, -1000.0])).data
    assert np.all(np.isfinite(probs))
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert probs[0] > probs[1] > probs[2]
