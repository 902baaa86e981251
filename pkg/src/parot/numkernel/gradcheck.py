"""Central finite-difference checks of reverse-mode gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import backward, record_kinks


def _same_trace(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple = None


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(fn, params, h=1e-5, coords=None, rng=None, floor=1e-6):
    """Compare ``backward`` of the scalar ``fn()`` against central differences.

    ``params`` are float64 leaf tensors that ``fn`` reads.  ``coords`` limits
    the number of probed entries per parameter (chosen with ``rng``).  A probe
    whose perturbed evaluations take a different branch of any piecewise op
    than the unperturbed one is skipped, since the function is not
    differentiable across that kink.

    The error floor scales with ``max(1, |fn()|)``: a difference quotient of a
    large loss carries proportionally larger roundoff, so a vanishing true
    gradient would otherwise read as a large relative error.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradcheck needs float64 parameters")
        p.grad = None
    with record_kinks() as base_trace:
        loss = fn()
    backward(loss)
    floor = floor * max(1.0, abs(float(loss.data)))
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst, where, checked, skipped = 0.0, None, 0, 0
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None or coords >= flat.size else rng.choice(flat.size, coords, replace=False)
        for i in idx:
            old = flat[i]
            values = []
            ok = True
            for sign in (1.0, -1.0):
                flat[i] = old + sign * h
                with record_kinks() as trace:
                    values.append(float(fn().data))
                ok = ok and _same_trace(trace, base_trace)
            flat[i] = old
            if not ok:
                skipped += 1
                continue
            numeric = (values[0] - values[1]) / (2 * h)
            err = relative_error(float(grads[pi].reshape(-1)[i]), numeric, floor)
            checked += 1
            if err > worst:
                worst, where = err, (pi, int(i))
    return GradCheck(worst, checked, skipped, where)
