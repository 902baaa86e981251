"""Pose-aware propagation from reference patches to dense points, and the part-segmentation head."""

import numpy as np

from . import numkernel as nk
from .hierarchy import RelationEncoder, _gather_np, _split_rows, point_relation_features

POINT_RELATION_WIDTH = 4


class PoseAwarePropagation(nk.Module):
    """Per dense point, sum over its ``k`` nearest references of ``MLP([f_i^p, f_j^q, delta(G(p_i, q_j))])``.

    MLP (C_p + C_q + 32)-256-128 with batch norm and ReLU.  The first layer is
    split by input block so the dense and sparse parts are computed once per
    point instead of once per edge.
    """

    def __init__(self, rng, dtype=np.float32, dense_width=128, sparse_width=128):
        self.widths = (dense_width, sparse_width, 32)
        self.relation = RelationEncoder(POINT_RELATION_WIDTH, rng, dtype)
        self.first = nk.Dense(sum(self.widths), 256, rng, dtype)
        self.second = nk.Dense(256, 128, rng, dtype)

    def __call__(self, dense_points, dense_features, sparse_points, sparse_features, sparse_frames, nbr):
        b, n = dense_features.shape[:2]
        w_p, w_q, w_r = _split_rows(self.first.fc.weight, self.widths)
        h = nk.add(nk.reshape(nk.linear(dense_features, w_p), (b, n, 1, -1)), nk.gather(nk.linear(sparse_features, w_q), nbr))
        q = _gather_np(sparse_points, nbr)
        rel = point_relation_features(nk.gather(sparse_frames, nbr), np.asarray(dense_points)[:, :, None, :], q)
        h = nk.add(h, nk.linear(self.relation(rel), w_r))
        h = self.second(self.first.norm_act(h))
        return nk.tsum(h, axis=2)


class InterpolationPropagation(nk.Module):
    """Inverse-distance interpolation of sparse features with coordinates stripped, then MLP 256-256-128.

    Kept only as the comparison baseline for pose-aware propagation.
    """

    def __init__(self, rng, dtype=np.float32, dense_width=128, sparse_width=128):
        self.mlp = nk.MLP([dense_width + sparse_width, 256, 128], rng, dtype)

    def __call__(self, dense_points, dense_features, sparse_points, sparse_features, sparse_frames, nbr):
        q = _gather_np(sparse_points, nbr)
        d = np.linalg.norm(q - np.asarray(dense_points)[:, :, None, :], axis=-1)
        w = 1.0 / np.maximum(d, 1e-8)
        w = (w / w.sum(axis=-1, keepdims=True)).astype(dense_features.dtype)
        interp = nk.tsum(nk.mul(nk.gather(sparse_features, nbr), w[..., None]), axis=2)
        return self.mlp(nk.concat([dense_features, interp], axis=-1))


PROPAGATION = {"pose": PoseAwarePropagation, "interp": InterpolationPropagation}


def propagate(dense_points, dense_features, sparse_points, sparse_features, sparse_frames, params, k_prop=11):
    """Propagate features of one cloud; inputs are unbatched arrays or tensors.

    Neighbours are the ``k_prop`` nearest sparse points in ascending distance
    (ties to the lower index), so the summation order is fixed.
    """
    from .geom import knn

    sparse_points = np.asarray(sparse_points, dtype=np.float64)
    if k_prop > len(sparse_points):
        raise ValueError(f"propagate: k_prop={k_prop} exceeds the {len(sparse_points)} sparse points")
    nbr = knn(dense_points, sparse_points, k_prop)
    dtype = params.parameters()[0].dtype

    def batched(x):
        x = x if isinstance(x, nk.Tensor) else nk.Tensor(np.asarray(x, dtype=dtype))
        return nk.reshape(x, (1,) + x.shape)

    out = params(
        np.asarray(dense_points, dtype=np.float64)[None], batched(dense_features),
        sparse_points[None], batched(sparse_features), batched(sparse_frames), nbr[None],
    )
    return nk.reshape(out, out.shape[1:])


class SegHead(nk.Module):
    """(128 + one-hot) -> 128 (BN, ReLU, dropout 0.5) -> part logits."""

    def __init__(self, num_classes, num_parts, rng, dtype=np.float32, p_drop=0.5):
        self.num_classes = num_classes
        self.hidden = nk.Dense(128 + num_classes, 128, rng, dtype)
        self.drop = nk.Dropout(p_drop)
        self.out = nk.Linear(128, num_parts, rng, dtype)

    def __call__(self, features, onehot):
        onehot = check_onehot(onehot, self.num_classes)
        b, n = features.shape[:2]
        tiled = np.broadcast_to(onehot.reshape(b, 1, -1), (b, n, self.num_classes)).astype(features.dtype)
        x = nk.concat([features, nk.Tensor(tiled)], axis=-1)
        return self.out(self.drop(self.hidden(x)))


def check_onehot(onehot, width):
    onehot = np.atleast_2d(np.asarray(onehot))
    if onehot.shape[-1] != width:
        raise ValueError(f"segment: one-hot width {onehot.shape[-1]} != class count {width}")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=-1) == 1)):
        raise ValueError("segment: class vector is not a valid one-hot")
    return onehot


def segment(per_point_features, class_onehot, params, mode="eval"):
    """Per-point part logits for one cloud (N, 128) given its class one-hot."""
    params.train(mode == "train")
    x = per_point_features if isinstance(per_point_features, nk.Tensor) else nk.Tensor(
        np.asarray(per_point_features, dtype=params.out.weight.dtype))
    out = params(nk.reshape(x, (1,) + x.shape), class_onehot)
    return nk.reshape(out, out.shape[1:])
