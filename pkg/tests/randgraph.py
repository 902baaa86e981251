"""Random differentiable graphs over the tensor primitives, for gradient checks."""

import numpy as np

from parot import numkernel as nk

SHAPE = (4, 3)


def _unary(x, rng, leaves):
    kind = rng.integers(12)
    if kind == 0:
        return nk.relu(nk.add(x, rng.normal(size=SHAPE)))
    if kind == 1:
        return nk.leaky_relu(x, 0.2)
    if kind == 2:
        return nk.sqrt(nk.add(nk.sumsq(x, axis=-1, keepdims=True), 1.0)) * x
    if kind == 3:
        return nk.normalize(nk.add(x, 0.5))
    if kind == 4:
        return nk.reshape(nk.swapaxes(nk.reshape(x, (3, 4)), 0, 1), SHAPE)
    if kind == 5:
        pooled, _ = nk.max_pool(x, axis=0)
        return nk.add(x, pooled)
    if kind == 6:
        return nk.sub(x, nk.mean(x, axis=0, keepdims=True))
    if kind == 7:
        return nk.getitem(x, np.array([3, 1, 1, 0]))
    if kind == 8:
        idx = rng.integers(0, 4, size=(1, 4))
        return nk.reshape(nk.gather(nk.reshape(x, (1,) + SHAPE), idx), SHAPE)
    if kind == 9:
        act = ("none", "relu", "leaky_relu")[rng.integers(3)]
        return nk.batch_norm(x, leaves["gamma"], leaves["beta"], np.zeros(3), np.ones(3), True, activation=act)
    if kind == 10:
        y = nk.reshape(x, (2, 2, 3))
        return nk.reshape(nk.tsum(y, axis=1, keepdims=True) * y, SHAPE)
    return nk.reshape(nk.getitem(nk.concat([x, x * 2.0], axis=0), slice(None, None, 2)), SHAPE)


def _binary(a, b, rng, leaves):
    kind = rng.integers(7)
    if kind == 0:
        return nk.add(a, b)
    if kind == 1:
        return nk.sub(a, b)
    if kind == 2:
        return nk.mul(a, b)
    if kind == 3:
        return nk.div(a, nk.add(nk.sumsq(b, axis=-1, keepdims=True), 1.0))
    if kind == 4:
        return nk.matmul(a, nk.einsum("ic,id->cd", a, b) * 0.3)
    if kind == 5:
        return nk.cross(a, b)
    return nk.linear(a, leaves["w"], leaves["bias"])


def random_graph(seed, depth=None):
    """Return ``(fn, leaves)``; ``fn()`` rebuilds the same scalar graph from the leaves every call."""
    rng = np.random.default_rng(seed)
    leaves = {
        "a": nk.Tensor(rng.normal(size=SHAPE), requires_grad=True),
        "b": nk.Tensor(rng.normal(size=SHAPE), requires_grad=True),
        "w": nk.Tensor(rng.normal(size=(3, 3)), requires_grad=True),
        "bias": nk.Tensor(rng.normal(size=3), requires_grad=True),
        "gamma": nk.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True),
        "beta": nk.Tensor(rng.normal(size=3), requires_grad=True),
    }
    depth = depth or int(rng.integers(3, 9))
    graph_seed = int(rng.integers(2**32))
    weights = rng.normal(size=SHAPE)
    labels = rng.integers(0, 3, size=4)

    def fn():
        r = np.random.default_rng(graph_seed)
        pool = [leaves["a"], leaves["b"]]
        for _ in range(depth):
            if r.random() < 0.5:
                x = pool[r.integers(len(pool))]
                pool.append(_unary(x, r, leaves))
            else:
                i, j = r.integers(len(pool), size=2)
                pool.append(_binary(pool[i], pool[j], r, leaves))
        out = pool[-1]
        return nk.add(nk.tsum(nk.mul(out, weights)), nk.softmax_cross_entropy(out, labels))

    return fn, list(leaves.values())
