"""Parameterised layers built on the tensor engine."""

import numpy as np

from .. import kernels
from .tensor import Tensor, _node, _trace, leaky_relu, linear, relu


class Module:
    """Container that discovers parameters, buffers and sub-modules by attribute order."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_blocks(self):
        """Ordered name -> array map of everything a checkpoint must hold."""
        blocks = {name: p.data for name, p in self.named_parameters()}
        blocks.update({f"{name}#buffer": b for name, b in self.named_buffers()})
        return blocks

    def load_state_blocks(self, blocks):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, target in list(expected.items()) + [(f"{n}#buffer", b) for n, b in buffers.items()]:
            if name not in blocks:
                raise KeyError(f"checkpoint is missing block '{name}'")
            src = np.asarray(blocks[name])
            cur = target.data if isinstance(target, Tensor) else target
            if src.shape != cur.shape:
                raise ValueError(f"block '{name}': checkpoint shape {src.shape} != model shape {cur.shape}")
            cur[...] = src
        extra = set(blocks) - set(expected) - {f"{n}#buffer" for n in buffers}
        if extra:
            raise KeyError(f"checkpoint has unknown blocks: {sorted(extra)}")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, dtype=np.float32, bias=True):
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


ACT_SLOPE = {"relu": 0.0, "leaky_relu": 0.2}


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5, activation="none"):
    """Normalise the last (channel) axis over every leading axis, optionally followed by an activation.

    In training mode the batch statistics are used and the running estimates are
    updated in place; in eval mode the running estimates are used.  Fusing the
    activation saves two full passes over the data.
    """
    act = activation != "none"
    slope = ACT_SLOPE[activation] if act else 0.0
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if training:
        mu, var = kernels.channel_stats(x2)
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    out = kernels.bn_act_forward(x2, scale, beta.data - mu * scale, slope, act)
    if act:
        _trace(out > 0)

    def backward(g):
        gx, dgamma, dbeta = kernels.bn_act_backward(
            g.reshape(-1, c), x2, out, mu, inv, gamma.data, slope, act, training
        )
        return gx.reshape(x.shape), dgamma, dbeta

    op = "batch_norm" if not act else f"batch_norm+{activation}"
    return _node(out.reshape(x.shape), (x, gamma, beta), backward, op)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, activation="none"):
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps, activation,
        )


def dropout(x, p, rng, training):
    """Inverted dropout; identity outside training."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return _node(x.data * keep, (x,), backward, "dropout")


class Dropout(Module):
    """Dropout layer; ``rng`` is assigned by the owning model before training."""

    def __init__(self, p, rng=None):
        self.p = p
        self.rng = rng

    def __call__(self, x):
        return dropout(x, self.p, self.rng, self.training)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "none": lambda x: x,
}


class Dense(Module):
    """Linear -> BatchNorm -> activation, the building block of every MLP here."""

    def __init__(self, fan_in, fan_out, rng, dtype=np.float32, activation="relu", norm=True):
        # a bias in front of batch norm is cancelled by the mean subtraction, so it is left out
        self.fc = Linear(fan_in, fan_out, rng, dtype, bias=not norm)
        self.bn = BatchNorm(fan_out, dtype) if norm else None
        self.activation = activation

    def __call__(self, x):
        return self.norm_act(self.fc(x))

    def norm_act(self, h):
        """Batch norm and activation applied to an already computed ``fc`` output."""
        if self.bn is not None:
            return self.bn(h, self.activation)
        return ACTIVATIONS[self.activation](h)


class MLP(Module):
    def __init__(self, widths, rng, dtype=np.float32, activation="relu", final_activation=True):
        self.layers = [
            Dense(a, b, rng, dtype, activation if (i < len(widths) - 2 or final_activation) else "none",
                  norm=(i < len(widths) - 2 or final_activation))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
