"""Shared oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np

from vindit import numcore as nc

FD_STEP = 1e-5


def fd_check(fn, inputs, *, coords: int = 64, seed: int = 0, h: float = FD_STEP):
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps the list of input Tensors to a scalar Tensor. Returns
    ``(max relative error, number of coordinates checked)``; coordinates are
    sampled across all inputs (every coordinate when there are fewer).
    """
    tensors = [nc.Tensor(np.array(x, dtype=np.float64, order="C"), requires_grad=True) for x in inputs]
    with nc.Tape():
        loss = fn(tensors)
    grads = nc.grad(loss, tensors)

    pool = [(i, j) for i, t in enumerate(tensors) for j in range(t.size)]
    rng = np.random.default_rng(seed)
    if len(pool) > coords:
        pick = rng.choice(len(pool), size=coords, replace=False)
        pool = [pool[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in pool:
        flat = tensors[i].data.reshape(-1)
        keep = flat[j]
        flat[j] = keep + h
        up = fn(tensors).item()
        flat[j] = keep - h
        down = fn(tensors).item()
        flat[j] = keep
        numeric = (up - down) / (2 * h)
        analytic = grads[i].reshape(-1)[j]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst, len(pool)


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def loop_mha(q_src, kv_src, p, prefix, heads):
    d = q_src.shape[1]
    dh = d // heads
    Q = q_src @ p[f"{prefix}.wq"].data
    K = kv_src @ p[f"{prefix}.wk"].data
    V = kv_src @ p[f"{prefix}.wv"].data
    out = np.zeros((q_src.shape[0], d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(q_src.shape[0]):
            scores = [float(Q[i, cols] @ K[j, cols]) / math.sqrt(dh) for j in range(kv_src.shape[0])]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            total = sum(e)
            for j, w in enumerate(e):
                out[i, cols] += (w / total) * V[j, cols]
    return out @ p[f"{prefix}.wo"].data


def primitive_cases(rng):
    """One scalar-valued case per differentiable primitive: ``(label, inputs, fn)``."""
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((3, 4))
    return [
        ("add", [A, B], lambda t: nc.sum(nc.square(nc.add(t[0], t[1])))),
        ("add-broadcast", [A, B[0]], lambda t: nc.sum(nc.square(nc.add(t[0], t[1])))),
        ("sub", [A, B], lambda t: nc.sum(nc.square(nc.sub(t[0], t[1])))),
        ("mul", [A, B], lambda t: nc.sum(nc.mul(t[0], t[1]))),
        ("neg", [A], lambda t: nc.sum(nc.square(nc.neg(t[0])))),
        ("scale", [A], lambda t: nc.sum(nc.square(nc.scale(t[0], -1.7)))),
        ("gelu", [A], lambda t: nc.sum(nc.gelu(t[0]))),
        ("reshape", [A], lambda t: nc.sum(nc.square(nc.reshape(t[0], (2, 6))) * np.arange(12.0).reshape(2, 6))),
        ("transpose", [A], lambda t: nc.sum(nc.transpose(t[0]) * np.arange(12.0).reshape(4, 3))),
        ("getitem", [A], lambda t: nc.sum(nc.square(t[0][1:, ::2]))),
        ("take_rows", [A], lambda t: nc.sum(nc.square(nc.take_rows(t[0], np.array([2, 0, 2]))))),
        ("concat", [A, B], lambda t: nc.sum(nc.square(nc.concat([t[0], t[1]], axis=1)) * np.arange(24.0).reshape(3, 8))),
        ("mean", [A], lambda t: nc.mean(nc.square(t[0]))),
        ("sum-axis", [A], lambda t: nc.sum(nc.square(nc.sum(t[0], axis=0)))),
        ("matmul", [A, B.T], lambda t: nc.sum(nc.square(nc.matmul(t[0], t[1])))),
        ("softmax", [A], lambda t: nc.sum(nc.softmax(t[0], axis=-1) * np.arange(12.0).reshape(3, 4))),
        ("softmax-axis0", [A], lambda t: nc.sum(nc.softmax(t[0], axis=0) * np.arange(12.0).reshape(3, 4))),
        (
            "layer_norm",
            [A, rng.standard_normal(4), rng.standard_normal(4)],
            lambda t: nc.sum(nc.layer_norm(t[0], t[1], t[2]) * np.arange(12.0).reshape(3, 4)),
        ),
    ]
