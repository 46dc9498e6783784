"""Central finite differences in float64, independent of the backward rules."""
from __future__ import annotations

import numpy as np

from partstyle import tensor as T


def numeric_grad(fn, arrays: list[np.ndarray], index: int, h: float = 1e-4) -> np.ndarray:
    base = [a.astype(np.float64).copy() for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + h
        plus = float(fn(*[T.Tensor(a) for a in base]).data)
        target[i] = orig - h
        minus = float(fn(*[T.Tensor(a) for a in base]).data)
        target[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return out


def analytic_grads(fn, arrays: list[np.ndarray], wrt: list[int]) -> list[np.ndarray]:
    ts = [T.Tensor(a.astype(np.float64), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = fn(*ts)
    T.backward(loss)
    return [ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data) for i in wrt]


def max_rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-5) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check(fn, arrays: list[np.ndarray], wrt: list[int] | None = None, h: float = 1e-4, reference=None) -> float:
    """Worst relative error of analytic vs numeric gradient over ``wrt`` inputs.

    ``reference`` is differenced instead of ``fn`` when the op's gradient is a
    deliberate surrogate (straight-through).
    """
    if wrt is None:
        wrt = list(range(len(arrays)))
    grads = analytic_grads(fn, arrays, wrt)
    ref = reference or fn
    worst = 0.0
    for g, i in zip(grads, wrt):
        worst = max(worst, max_rel_error(g, numeric_grad(ref, arrays, i, h)))
    return worst


def projected(op, out_shape_seed: int = 0):
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    cache: dict[tuple, np.ndarray] = {}

    def fn(*ts):
        out = op(*ts)
        key = out.shape
        if key not in cache:
            cache[key] = np.random.default_rng(out_shape_seed).normal(size=key)
        return T.tsum(T.mul(out, cache[key]))

    return fn
