import numpy as np
import pytest

from parot import numkernel as nk
from parot.geom import knn, oracle_content, oracle_frames, point_relations, random_rotation_so3
from parot.seghead import (
    InterpolationPropagation,
    PoseAwarePropagation,
    SegHead,
    check_onehot,
    propagate,
    segment,
)

F64 = np.float64


def cloud(rng, n=40, m=8):
    pts = rng.normal(size=(n, 3))
    sparse = pts[:m]
    frames = oracle_frames(rng.normal(size=(m, 6, 3)) + 0.4)
    return pts, sparse, frames


def test_pose_aware_matches_explicit_edges():
    rng = np.random.default_rng(0)
    prop = PoseAwarePropagation(rng, F64).eval()
    pts, sparse, frames = cloud(rng)
    fp, fq = rng.normal(size=(40, 128)), rng.normal(size=(8, 128))
    k = 5
    nbr = knn(pts, sparse, k)
    with nk.no_grad():
        fast = propagate(pts, fp, sparse, fq, frames, prop, k_prop=k).data
        rel = point_relations(pts[:, None, :], sparse[nbr], frames[nbr])
        enc = prop.relation(nk.Tensor(rel)).data
        edge = np.concatenate([np.broadcast_to(fp[:, None], (40, k, 128)), fq[nbr], enc], axis=-1)
        slow = prop.second(prop.first(nk.Tensor(edge))).data.sum(axis=1)
    np.testing.assert_allclose(fast, slow, atol=1e-10)
    assert fast.shape == (40, 128)


def test_interpolation_weights_and_shape():
    rng = np.random.default_rng(1)
    prop = InterpolationPropagation(rng, F64).eval()
    pts, sparse, frames = cloud(rng)
    fq = np.ones((8, 128))
    out = propagate(pts, np.zeros((40, 128)), sparse, fq, frames, prop, k_prop=3)
    assert out.shape == (40, 128)
    # a dense point on top of a sparse point takes (almost) exactly its feature
    nbr = knn(pts, sparse, 3)
    q = sparse[nbr]
    d = np.linalg.norm(q - pts[:, None], axis=-1)
    w = 1 / np.maximum(d, 1e-8)
    w /= w.sum(1, keepdims=True)
    assert w[0, 0] > 0.999999


def test_propagate_rejects_large_k():
    rng = np.random.default_rng(2)
    pts, sparse, frames = cloud(rng)
    with pytest.raises(ValueError, match="k_prop=9"):
        propagate(pts, np.zeros((40, 128)), sparse, np.zeros((8, 128)), frames, PoseAwarePropagation(rng), k_prop=9)


def test_pose_aware_invariant_with_oracle_inputs():
    rng = np.random.default_rng(3)
    prop = PoseAwarePropagation(rng, F64).eval()
    pts = rng.normal(size=(30, 3))
    sparse_idx = np.arange(6)
    dense_nbr = knn(pts, pts, 6)
    sparse_nbr = knn(pts[sparse_idx], pts, 8)

    def run(R):
        p = pts @ R
        fp = oracle_content(p[dense_nbr] - p[:, None])
        patches = p[sparse_nbr] - p[sparse_idx, None]
        fq = oracle_content(patches)
        with nk.no_grad():
            return propagate(p, fp, p[sparse_idx], fq, oracle_frames(patches), prop, k_prop=4).data

    base = run(np.eye(3))
    for _ in range(5):
        assert np.abs(run(random_rotation_so3(rng)) - base).max() < 1e-9


def test_segment_head():
    rng = np.random.default_rng(4)
    head = SegHead(2, 3, rng, F64)
    feats = rng.normal(size=(20, 128))
    out = segment(feats, [0, 1], head, "eval")
    assert out.shape == (20, 3)
    other = segment(feats, [1, 0], head, "eval")
    assert not np.allclose(out.data, other.data)


def test_onehot_validation():
    assert check_onehot([0, 1], 2).shape == (1, 2)
    with pytest.raises(ValueError, match="width"):
        check_onehot([0, 0, 1], 2)
    with pytest.raises(ValueError, match="one-hot"):
        check_onehot([1, 1], 2)
    with pytest.raises(ValueError, match="one-hot"):
        check_onehot([0.5, 0.5], 2)
