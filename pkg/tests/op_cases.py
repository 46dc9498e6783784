"""One gradient-check case per registered op: (fn, input arrays, indices to check)."""
from __future__ import annotations

import numpy as np

from partstyle import tensor as T


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)


def build_cases(seed: int = 0):
    """name -> (fn, arrays, wrt, reference or None)."""
    r = np.random.default_rng(seed)
    n = lambda *s: r.normal(size=s)  # noqa: E731
    targets = r.integers(0, 5, size=4)
    ids = np.array([[0, 3, 3], [1, 4, 0]])
    pick = (np.array([0, 2, 2]), slice(1, 3))
    cases = {
        "add": (lambda a, b: T.add(a, b), [n(3, 4), n(4)], [0, 1]),
        "sub": (lambda a, b: T.sub(a, b), [n(3, 4), n(3, 1)], [0, 1]),
        "mul": (lambda a, b: T.mul(a, b), [n(2, 3, 4), n(3, 4)], [0, 1]),
        "square": (T.square, [n(3, 3)], [0]),
        "exp": (T.exp, [n(2, 4)], [0]),
        "log": (T.log, [np.abs(n(2, 4)) + 0.5], [0]),
        "relu": (T.relu, [_away_from_zero(r, (4, 4))], [0]),
        "tanh": (T.tanh, [n(3, 4)], [0]),
        "sum": (lambda a: T.tsum(a, axis=1, keepdims=False), [n(3, 4)], [0]),
        "mean": (lambda a: T.mean(a, axis=0, keepdims=True), [n(3, 4)], [0]),
        "reshape": (lambda a: T.reshape(a, (6, 2)), [n(3, 4)], [0]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [n(2, 3, 4)], [0]),
        "getitem": (lambda a: T.getitem(a, pick), [n(4, 4)], [0]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n(2, 3), n(2, 2)], [0, 1]),
        "matmul": (lambda a, b: T.matmul(a, b), [n(2, 3, 4), n(4, 3)], [0, 1]),
        "conv1d": (
            lambda x, w, b: T.conv1d(x, w, b, stride=2, padding=1),
            [n(2, 3, 7), n(4, 3, 3), n(4)],
            [0, 1, 2],
        ),
        "upsample_nearest": (lambda a: T.upsample_nearest(a, 2), [n(2, 3, 4)], [0]),
        "layer_norm": (lambda x, w, b: T.layer_norm(x, w, b), [n(3, 4), n(4), n(4)], [0, 1, 2]),
        "softmax": (T.softmax, [n(3, 4)], [0]),
        "log_softmax": (T.log_softmax, [n(3, 4)], [0]),
        "softmax_cross_entropy": (
            lambda z: T.softmax_cross_entropy(z, targets),
            [n(4, 5)],
            [0],
        ),
        "embedding": (lambda w: T.embedding(w, ids), [n(5, 4)], [0]),
        "l2_normalize": (T.l2_normalize, [n(3, 4)], [0]),
    }
    cases = {k: (*v, None) for k, v in cases.items()}
    c0, q0 = n(3, 4), n(3, 4)
    # surrogate: identity in the continuous input plus a frozen offset
    cases["straight_through"] = (
        lambda c, q: T.straight_through(c, q),
        [c0, q0],
        [0],
        lambda c, q: T.add(c, q0 - c0),
    )
    return cases
