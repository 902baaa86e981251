import numpy as np


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


class Adam:
    """Adam with bias correction and L2-coupled weight decay.

    ``named_params`` is a sequence of ``(name, Tensor)``; names are only used to
    report a block whose gradient is not finite.
    """

    def __init__(self, named_params, weight_decay=1e-6, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.weight_decay = weight_decay
        self.state = AdamState(self.params, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        if lr <= 0:
            raise ValueError(f"adam_step: learning rate must be positive, got {lr}")
        grads = []
        for name, p in zip(self.names, self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"adam_step: non-finite gradient in parameter block '{name}'")
            grads.append(g)
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def adam_step(params, grads, state, lr, weight_decay=1e-6):
    """Functional single Adam update over plain arrays; returns the new arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in parameter block {i}")
        g = g + weight_decay * p
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - (lr / c1) * state.m[i] / (np.sqrt(state.v[i] / c2) + state.eps))
    return out
