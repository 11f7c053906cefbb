from typing import Callable, Dict, Iterable, Optional

import numpy as np

from app.tensor import ComputationTape, Tensor, backward

# Absolute floor in the relative-error denominator, so near-zero gradients compare absolutely.
ERROR_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


# Central differences of a scalar loss with respect to every entry of ``param``.
def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + step
        plus = fn().item()
        flat[index] = original - step
        minus = fn().item()
        flat[index] = original
        grad.reshape(-1)[index] = (plus - minus) / (2 * step)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
) -> Dict[str, float]:
    """
    Compare tape gradients of the scalar ``fn()`` against central differences.

    Returns the maximum relative error per parameter name. ``max_entries`` limits
    the check to the first entries of each parameter for large models.
    """
    params = list(params)
    with ComputationTape() as tape:
        loss = fn()
    grads = backward(tape, output=loss)

    errors: Dict[str, float] = {}
    for position, param in enumerate(params):
        name = param.name or f"param{position}"
        analytic = np.asarray(grads[param], dtype=np.float64)
        if max_entries is None or param.size <= max_entries:
            numeric = numeric_gradient(fn, param, step)
            errors[name] = relative_error(analytic, numeric)
            continue
        flat = param.data.reshape(-1)
        worst = 0.0
        for index in range(max_entries):
            original = flat[index]
            flat[index] = original + step
            plus = fn().item()
            flat[index] = original - step
            minus = fn().item()
            flat[index] = original
            numeric = np.array([(plus - minus) / (2 * step)])
            worst = max(worst, relative_error(analytic.reshape(-1)[index:index + 1], numeric))
        errors[name] = worst
    return errors
