"""Central finite differences for validating analytic gradients."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .params import ParamStore


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    """max |a - n| / max(1e-8, |a| + |n|) over all entries; differences below ``atol`` count as zero."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    diff = np.maximum(np.abs(a - n) - atol, 0.0)
    return float(np.max(diff / denom)) if a.size else 0.0


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Perturb ``array`` in place entry by entry; ``loss_fn`` must read the same array."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + h
        plus = loss_fn()
        array[idx] = original - h
        minus = loss_fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def check_store_gradients(
    store: ParamStore,
    loss_fn: Callable[[], float],
    analytic: Dict[str, np.ndarray],
    names: Optional[Iterable[str]] = None,
    h: float = 1e-4,
    atol: float = 0.0,
) -> Dict[str, float]:
    """Relative error per parameter name; parameters absent from ``analytic`` are expected to be zero."""
    report: Dict[str, float] = {}
    for name in names if names is not None else store.names():
        param = store.params[name]
        if not param.flags.writeable:
            param = param.copy()
            store.params[name] = param
        numeric = numeric_gradient(loss_fn, param, h)
        report[name] = relative_error(analytic.get(name, np.zeros_like(param)), numeric, atol)
    return report
