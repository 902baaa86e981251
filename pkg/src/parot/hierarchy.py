"""Relation encoding, intra-scale edge convolution, inter-scale fusion and the classifier."""

import numpy as np

from . import numkernel as nk
from .geom import ZERO_OFFSET

RELATION_WIDTH = {"full": 16, "orientation": 9, "position": 7, "none": 0}
RELATION_CHANNELS = 32
ALIASES = {"orientation_only": "orientation", "position_only": "position"}


def relation_mode(name):
    mode = ALIASES.get(name, name)
    if mode not in RELATION_WIDTH:
        raise ValueError(f"unknown relation mode '{name}'; expected one of {sorted(RELATION_WIDTH)}")
    return mode


def _offset(p_m, p_n, dtype):
    u = np.asarray(p_n, dtype=np.float64) - np.asarray(p_m, dtype=np.float64)
    dist = np.sqrt(np.einsum("...c,...c->...", u, u))
    u_hat = np.where(dist[..., None] < ZERO_OFFSET, 0.0, u / np.maximum(dist, ZERO_OFFSET)[..., None])
    return dist.astype(dtype), u_hat.astype(dtype)


def relation_features(frames_m, frames_n, p_m, p_n, mode="full"):
    """Differentiable patch-patch relation, sliced by ``mode``.

    ``frames_*`` are unit-row frame tensors (..., 3, 3) (broadcastable against
    each other), ``p_*`` the matching world reference points as arrays.  Order
    of the full 16-vector: distance, 9 frame-frame cosines, 3 cosines of frame m
    against ``p_n - p_m``, 3 of frame n.
    """
    mode = relation_mode(mode)
    dtype = frames_m.dtype
    dist, u_hat = _offset(p_m, p_n, dtype)
    lead = np.broadcast_shapes(frames_m.shape[:-2], frames_n.shape[:-2], dist.shape)
    parts = []
    if mode in ("full", "position"):
        parts.append(nk.Tensor(np.broadcast_to(dist, lead)[..., None]))
    if mode in ("full", "orientation"):
        oo = nk.einsum("...ic,...jc->...ij", frames_m, frames_n)
        parts.append(nk.reshape(oo, lead + (9,)))
    if mode in ("full", "position"):
        uu = nk.Tensor(np.broadcast_to(u_hat, lead + (3,)))
        parts.append(nk.einsum("...ic,...c->...i", frames_m, uu))
        parts.append(nk.einsum("...ic,...c->...i", frames_n, uu))
    if not parts:
        return None
    return nk.concat(parts, axis=-1)


def point_relation_features(frames_q, p, q):
    """Differentiable point-to-patch relation: distance and cosines of each ``d_i^q`` against ``q - p``."""
    dist, u_hat = _offset(p, q, frames_q.dtype)
    lead = np.broadcast_shapes(frames_q.shape[:-2], dist.shape)
    cos = nk.einsum("...ic,...c->...i", frames_q, nk.Tensor(np.broadcast_to(u_hat, lead + (3,))))
    return nk.concat([nk.Tensor(np.broadcast_to(dist, lead)[..., None]), cos], axis=-1)


class RelationEncoder(nk.Module):
    """FC to 32 channels, batch norm, ReLU."""

    def __init__(self, width, rng, dtype=np.float32):
        self.width = width
        self.layer = nk.Dense(width, RELATION_CHANNELS, rng, dtype, "relu")

    def __call__(self, relation):
        if relation.shape[-1] != self.width:
            raise ValueError(f"relation_encode: expected width {self.width}, got {relation.shape[-1]}")
        return self.layer(relation)


def relation_encode(relation, params):
    rel = relation if isinstance(relation, nk.Tensor) else nk.Tensor(np.asarray(relation, dtype=params.layer.fc.weight.dtype))
    return params(rel)


def _split_rows(weight, sizes):
    out, start = [], 0
    for s in sizes:
        out.append(weight[start : start + s])
        start += s
    return out


class IntraScale(nk.Module):
    """Edge convolution over reference-point neighbours with relation encodings.

    For reference ``i`` and neighbour ``j``: ``MLP([f_j, f_j - f_i, delta(G_ij)])``
    max-pooled over ``j`` (288-128-128-128, LeakyReLU 0.2).  The first layer is
    evaluated per point and gathered per edge, which is algebraically the same
    as applying it to the concatenation.
    """

    def __init__(self, rng, dtype=np.float32, width=128, mode="full"):
        self.mode = relation_mode(mode)
        self.width = width
        rel = RELATION_WIDTH[self.mode]
        self.relation = RelationEncoder(rel, rng, dtype) if rel else None
        self.first = nk.Dense(2 * width + (RELATION_CHANNELS if rel else 0), 128, rng, dtype, "leaky_relu")
        self.rest = nk.MLP([128, 128, 128], rng, dtype, "leaky_relu")

    def __call__(self, f, frames, refs, nbr):
        b, n, _ = f.shape
        k = nbr.shape[-1]
        if k > n:
            raise ValueError(f"intra_scale_conv: k_intra={k} exceeds the {n} reference points")
        pieces = [self.width, self.width] + ([RELATION_CHANNELS] if self.relation else [])
        w = _split_rows(self.first.fc.weight, pieces)
        a = nk.linear(f, nk.add(w[0], w[1]))
        c = nk.linear(f, w[1])
        h = nk.sub(nk.gather(a, nbr), nk.reshape(c, (b, n, 1, -1)))
        if self.relation is not None:
            fm = nk.reshape(frames, (b, n, 1, 3, 3))
            fn = nk.gather(frames, nbr)
            q_nbr = _gather_np(refs, nbr)
            rel = relation_features(fm, fn, refs[:, :, None, :], q_nbr, self.mode)
            h = nk.add(h, nk.linear(self.relation(rel), w[2]))
        h = self.rest(self.first.norm_act(h))
        out, _ = nk.max_pool(h, axis=2)
        return out


def _gather_np(x, idx):
    """Batched numpy gather matching :func:`numkernel.gather`."""
    b = np.arange(x.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return x[b, idx]


class InterScale(nk.Module):
    """Fuse each local feature with its global counterpart and their relation; max-pool over references.

    MLP 288-256-512-1024 with LeakyReLU 0.2.  ``use_global=False`` drops the
    global branch (component study) and lifts the local features alone.
    """

    def __init__(self, rng, dtype=np.float32, width=128, mode="full", use_global=True):
        self.mode = relation_mode(mode)
        self.use_global = use_global
        rel = RELATION_WIDTH[self.mode] if use_global else 0
        self.relation = RelationEncoder(rel, rng, dtype) if rel else None
        in_w = width + (width if use_global else 0) + (RELATION_CHANNELS if rel else 0)
        self.mlp = nk.MLP([in_w, 256, 512, 1024], rng, dtype, "leaky_relu")

    def per_reference(self, f_local, f_global=None, frames_local=None, frames_global=None, refs=None):
        parts = [f_local]
        if self.use_global:
            parts.append(f_global)
            if self.relation is not None:
                rel = relation_features(frames_local, frames_global, refs, np.zeros_like(refs), self.mode)
                parts.append(self.relation(rel))
        x = nk.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        return self.mlp(x)

    def __call__(self, *args, **kwargs):
        h = self.per_reference(*args, **kwargs)
        pooled, _ = nk.max_pool(h, axis=-2)
        return pooled, h


class Classifier(nk.Module):
    """1024-512-256-C with batch norm, ReLU and dropout 0.5 on the hidden layers."""

    def __init__(self, num_classes, rng, dtype=np.float32, p_drop=0.5):
        self.hidden = [nk.Dense(1024, 512, rng, dtype), nk.Dense(512, 256, rng, dtype)]
        self.drops = [nk.Dropout(p_drop), nk.Dropout(p_drop)]
        self.out = nk.Linear(256, num_classes, rng, dtype)

    def __call__(self, x):
        for layer, drop in zip(self.hidden, self.drops):
            x = drop(layer(x))
        return self.out(x)


def classify(fused, params, mode="eval"):
    """Logits for pooled 1024-wide descriptors; ``mode`` toggles dropout/batch statistics."""
    params.train(mode == "train")
    x = fused if isinstance(fused, nk.Tensor) else nk.Tensor(np.asarray(fused, dtype=params.out.weight.dtype))
    squeeze = x.ndim == 1
    if squeeze:
        x = nk.reshape(x, (1, -1))
    logits = params(x)
    return nk.reshape(logits, (-1,)) if squeeze else logits
