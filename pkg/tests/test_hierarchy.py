import numpy as np
import pytest

from parot import numkernel as nk
from parot.geom import geo_relations, knn, oracle_frames, random_rotation_so3
from parot.hierarchy import (
    RELATION_WIDTH,
    Classifier,
    InterScale,
    IntraScale,
    RelationEncoder,
    classify,
    relation_encode,
    relation_features,
    relation_mode,
)
from parot.numkernel.gradcheck import gradcheck

F64 = np.float64


def frames_for(rng, shape):
    pts = rng.normal(size=shape + (6, 3)) + 0.5
    return oracle_frames(pts)


def setup(rng, b=2, n=10, k=4):
    f = nk.Tensor(rng.normal(size=(b, n, 128)))
    frames = nk.Tensor(frames_for(rng, (b, n)))
    refs = rng.normal(size=(b, n, 3))
    nbr = np.stack([knn(r, r, k) for r in refs])
    return f, frames, refs, nbr


@pytest.mark.parametrize("mode", ["full", "orientation", "position"])
def test_relation_slices_match_full_vector(mode):
    rng = np.random.default_rng(0)
    fm, fn = frames_for(rng, (5,)), frames_for(rng, (5,))
    pm, pn = rng.normal(size=(2, 5, 3))
    full = geo_relations(pm, fm, pn, fn)
    got = relation_features(nk.Tensor(fm), nk.Tensor(fn), pm, pn, mode).data
    cols = {"full": list(range(16)), "orientation": list(range(1, 10)), "position": [0] + list(range(10, 16))}[mode]
    np.testing.assert_allclose(got, full[:, cols], atol=1e-14)
    assert got.shape[-1] == RELATION_WIDTH[mode]


def test_relation_mode_none_and_aliases():
    assert relation_features(nk.Tensor(np.eye(3)), nk.Tensor(np.eye(3)), np.zeros(3), np.ones(3), "none") is None
    assert relation_mode("orientation_only") == "orientation"
    with pytest.raises(ValueError, match="relation mode"):
        relation_mode("diagonal")


def test_relation_encoder_width_check():
    enc = RelationEncoder(16, np.random.default_rng(0), F64)
    assert relation_encode(np.zeros((3, 16)), enc).shape == (3, 32)
    with pytest.raises(ValueError, match="width"):
        enc(nk.Tensor(np.zeros((3, 9))))


def naive_intra(layer, f, frames, refs, nbr):
    """Edge features built explicitly by concatenation, then the same weights."""
    b, n, _ = f.shape
    fi = np.broadcast_to(f.data[:, :, None, :], (b, n, nbr.shape[-1], 128))
    fj = np.stack([f.data[i][nbr[i]] for i in range(b)])
    parts = [fj, fj - fi]
    if layer.relation is not None:
        fr = frames.data
        fm = np.broadcast_to(fr[:, :, None], fj.shape[:3] + (3, 3))
        fnb = np.stack([fr[i][nbr[i]] for i in range(b)])
        qn = np.stack([refs[i][nbr[i]] for i in range(b)])
        rel = relation_features(nk.Tensor(fm), nk.Tensor(fnb), refs[:, :, None, :], qn, layer.mode)
        parts.append(layer.relation(rel).data)
    edge = nk.Tensor(np.concatenate(parts, axis=-1))
    h = layer.rest(layer.first(edge))
    return h.data.max(axis=2)


@pytest.mark.parametrize("mode", ["full", "position", "none"])
@pytest.mark.parametrize("training", [False, True])
def test_intra_scale_matches_explicit_concatenation(mode, training):
    rng = np.random.default_rng(1)
    layer = IntraScale(rng, F64, mode=mode).train(training)
    f, frames, refs, nbr = setup(rng)
    with nk.no_grad():
        fast = layer(f, frames, refs, nbr).data
        slow = naive_intra(layer, f, frames, refs, nbr)
    np.testing.assert_allclose(fast, slow, atol=1e-10)


def test_intra_scale_rejects_large_k():
    rng = np.random.default_rng(2)
    layer = IntraScale(rng, F64)
    f, frames, refs, _ = setup(rng, n=4)
    with pytest.raises(ValueError, match="k_intra=5"):
        layer(f, frames, refs, np.zeros((2, 4, 5), dtype=int))


def test_intra_scale_input_width():
    assert IntraScale(np.random.default_rng(0)).first.fc.weight.shape == (288, 128)
    assert IntraScale(np.random.default_rng(0), mode="none").first.fc.weight.shape == (256, 128)


def test_intra_scale_gradient():
    rng = np.random.default_rng(3)
    layer = IntraScale(rng, F64, mode="full").eval()
    f, frames, refs, nbr = setup(rng, b=1, n=6, k=3)
    f.requires_grad = True
    frames.requires_grad = True
    w = rng.normal(size=(1, 6, 128))
    res = gradcheck(lambda: nk.tsum(nk.mul(layer(f, frames, refs, nbr), w)), [f, frames], coords=20, rng=rng)
    assert res.max_rel_error < 1e-4


def test_inter_scale_shapes_and_toggle():
    rng = np.random.default_rng(4)
    b, n = 2, 5
    fl, fg = nk.Tensor(rng.normal(size=(2, b, n, 128)))
    frl, frg = nk.Tensor(frames_for(rng, (b, n))), nk.Tensor(frames_for(rng, (b, n)))
    refs = rng.normal(size=(b, n, 3))
    inter = InterScale(rng, F64)
    pooled, per_ref = inter(fl, fg, frl, frg, refs)
    assert pooled.shape == (b, 1024) and per_ref.shape == (b, n, 1024)
    np.testing.assert_allclose(pooled.data, per_ref.data.max(axis=1))
    local_only = InterScale(rng, F64, use_global=False)
    assert local_only.mlp.layers[0].fc.weight.shape[0] == 128
    assert local_only(fl)[0].shape == (b, 1024)
    assert inter.mlp.layers[0].fc.weight.shape[0] == 288


def test_inter_scale_relation_uses_origin_reference():
    # with global references at the origin the offset is -q_i
    rng = np.random.default_rng(5)
    frl, frg = frames_for(rng, (3,)), frames_for(rng, (3,))
    q = rng.normal(size=(3, 3))
    rel = relation_features(nk.Tensor(frl), nk.Tensor(frg), q, np.zeros_like(q)).data
    np.testing.assert_allclose(rel, geo_relations(q, frl, np.zeros_like(q), frg))
    np.testing.assert_allclose(rel[:, 0], np.linalg.norm(q, axis=1))


def test_pipeline_invariant_with_oracle_inputs():
    rng = np.random.default_rng(6)
    intra = IntraScale(rng, F64).eval()
    inter = InterScale(rng, F64).eval()
    pts = rng.normal(size=(1, 12, 8, 3)) + 0.3
    glob = rng.normal(size=(1, 12, 8, 3)) + 0.3
    refs = rng.normal(size=(1, 12, 3))
    nbr = knn(refs[0], refs[0], 4)[None]
    from parot.geom import oracle_content

    def run(R):
        fl = nk.Tensor(oracle_content(pts @ R))
        frl = nk.Tensor(oracle_frames(pts @ R))
        fg = nk.Tensor(oracle_content(glob @ R))
        frg = nk.Tensor(oracle_frames(glob @ R))
        with nk.no_grad():
            h = intra(fl, frl, refs @ R, nbr)
            return inter(h, fg, frl, frg, refs @ R)[0].data

    base = run(np.eye(3))
    for _ in range(5):
        assert np.abs(run(random_rotation_so3(rng)) - base).max() < 1e-9


def test_classifier_modes():
    rng = np.random.default_rng(7)
    clf = Classifier(4, rng, F64)
    clf.drops[0].rng = clf.drops[1].rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 1024))
    a = classify(x, clf, "eval").data
    b = classify(x, clf, "eval").data
    assert a.shape == (3, 4) and np.array_equal(a, b)
    assert classify(x[0], clf, "eval").shape == (4,)
    assert not np.allclose(classify(x, clf, "train").data, a)
