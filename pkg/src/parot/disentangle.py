"""Siamese disentanglement of patch content (invariant) and orientation (equivariant)."""

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .geom import DEGENERATE_CROSS, ZERO_OFFSET

CONTENT_WIDTH = 128


@dataclass
class DisentangleOutput:
    f: nk.Tensor
    frames: nk.Tensor  # (..., 3, 3), rows d1, d2, d3 in the un-rotated patch pose
    d1_raw: nk.Tensor  # head outputs in the rotated pose the branch saw
    d2_raw: nk.Tensor
    degenerate: np.ndarray


class Disentangler(nk.Module):
    """Light PointNet shared by both siamese branches.

    Per-point MLP 3-64-128, max-pool to the 128-wide descriptor, FC 128-128,
    then a linear content head (128) and a direction trunk (128-64) with two
    linear 3-vector heads.
    """

    def __init__(self, rng, dtype=np.float32, content_width=CONTENT_WIDTH):
        self.dtype = np.dtype(dtype)
        self.point_mlp = nk.MLP([3, 64, 128], rng, dtype)
        self.descriptor = nk.Dense(128, 128, rng, dtype)
        self.content = nk.Linear(128, content_width, rng, dtype)
        self.trunk = nk.Dense(128, 64, rng, dtype)
        self.head1 = nk.Linear(64, 3, rng, dtype)
        self.head2 = nk.Linear(64, 3, rng, dtype)

    def encode(self, patches, content_only=False):
        """(..., k, 3) patch coordinates -> (f, d1_raw, d2_raw)."""
        x = nk.Tensor(np.asarray(patches, dtype=self.dtype))
        h = self.point_mlp(x)
        pooled, _ = nk.max_pool(h, axis=-2)
        z = self.descriptor(pooled)
        f = self.content(z)
        if content_only:
            return f, None, None
        t = self.trunk(z)
        return f, self.head1(t), self.head2(t)

    def branch(self, patches, rotation=None):
        """Run one branch: rotate the patches, encode, rotate the directions back."""
        patches = np.asarray(patches)
        if rotation is not None:
            rotation = np.asarray(rotation, dtype=self.dtype)
            patches = np.matmul(patches.astype(self.dtype), rotation)
        f, d1_raw, d2_raw = self.encode(patches)
        if rotation is None:
            d1, d2 = d1_raw, d2_raw
        else:
            d1 = nk.einsum("...c,...dc->...d", d1_raw, rotation)
            d2 = nk.einsum("...c,...dc->...d", d2_raw, rotation)
        frames, degenerate = frames_from_directions(d1, d2)
        return DisentangleOutput(f, frames, d1_raw, d2_raw, degenerate)


def frames_from_directions(d1, d2):
    """Differentiable frame completion: unit d1, unit d2, unit d1 x d2 stacked as rows."""
    n1 = nk.normalize(d1, ZERO_OFFSET)
    n2 = nk.normalize(d2, ZERO_OFFSET)
    c = nk.cross(n1, n2)
    cn = np.linalg.norm(c.data, axis=-1)
    n3 = nk.normalize(c, ZERO_OFFSET)
    lead = n1.shape[:-1]
    rows = [nk.reshape(v, lead + (1, 3)) for v in (n1, n2, n3)]
    frames = nk.concat(rows, axis=-2)
    degenerate = (
        (cn < DEGENERATE_CROSS)
        | (np.linalg.norm(d1.data, axis=-1) < ZERO_OFFSET)
        | (np.linalg.norm(d2.data, axis=-1) < ZERO_OFFSET)
    )
    return frames, degenerate


def siamese_forward(patches, R_a, R_b, params):
    """Feed two rotated copies of each patch through shared weights.

    ``R_a``/``R_b`` are per-patch rotations broadcastable to ``patches``' leading
    axes, or ``None`` for the identity.  With ``R_b`` of ``None`` (inference)
    branch b is skipped and ``None`` is returned in its place.
    """
    out_a = params.branch(patches, R_a)
    out_b = params.branch(patches, R_b) if R_b is not None else None
    return out_a, out_b


def encode_patch(patch, params):
    """Encode a single (k, 3) patch; returns numpy ``(f, d1_raw, d2_raw)``."""
    with nk.no_grad():
        f, d1, d2 = params.encode(np.asarray(patch)[None])
    return f.data[0], d1.data[0], d2.data[0]


# ---------------------------------------------------------------- losses


def _t(x):
    return x if isinstance(x, nk.Tensor) else nk.Tensor(np.asarray(x, dtype=np.float64))


def loss_inv(f_a, f_b):
    """Squared L2 distance between content features, averaged over leading axes."""
    return nk.mean(nk.sumsq(nk.sub(_t(f_a), _t(f_b)), axis=-1))


def loss_equi(raw_d_a, raw_d_b, R_a, R_b):
    """Equivariance of both direction heads across the pair of rotations.

    With row vectors, branch b's prediction is carried into branch a's pose by
    ``R_b^T R_a``; ideally equivariant heads give exactly zero.
    ``raw_d_a``/``raw_d_b`` are ``(d1, d2)`` pairs.
    """
    R_a = np.asarray(R_a)
    R_b = np.asarray(R_b)
    transfer = np.einsum("...dc,...de->...ce", R_b, R_a)
    total = None
    for da, db in zip(raw_d_a, raw_d_b):
        da, db = _t(da), _t(db)
        target = nk.einsum("...c,...ce->...e", db, transfer.astype(db.dtype))
        term = nk.sumsq(nk.sub(da, target), axis=-1)
        total = term if total is None else nk.add(total, term)
    return nk.mean(total)


def loss_orth(raw_d1, raw_d2):
    """Squared dot product of the two direction heads, averaged over leading axes."""
    dot = nk.tsum(nk.mul(_t(raw_d1), _t(raw_d2)), axis=-1)
    return nk.mean(nk.mul(dot, dot))
