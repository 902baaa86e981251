"""Invariance checks shared by the command line and the test-suite."""

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .geom import geo_relations, oracle_content, oracle_frames, point_relations, random_rotation_so3
from .model import NetConfig, ParotNet, build_geometry


def randomize_statistics(model, rng):
    """Give every batch-norm layer non-trivial affine parameters and running statistics."""
    stack = [model]
    while stack:
        m = stack.pop()
        if isinstance(m, nk.BatchNorm):
            c = m.gamma.data.shape[0]
            m.gamma.data[...] = rng.uniform(0.5, 1.5, c)
            m.beta.data[...] = rng.uniform(-0.2, 0.2, c)
            m.running_mean[...] = rng.normal(0, 0.3, c)
            m.running_var[...] = rng.uniform(0.5, 2.0, c)
        stack.extend(ch for _, ch in m.children())
    return model


def oracle_forward(model, geom, onehot=None):
    """Network output with the disentanglers replaced by handcrafted invariant content and equivariant frames."""
    dense = oracle_content(geom.dense) if geom.dense is not None else None
    with nk.no_grad():
        out = model.head_from_parts(
            geom,
            oracle_content(geom.local), oracle_frames(geom.local),
            oracle_content(geom.global_), oracle_frames(geom.global_),
            dense, onehot,
        )
    return out.data


@dataclass
class OracleReport:
    classification: float
    propagation: float
    clouds: int
    rotations: int

    @property
    def worst(self):
        return max(self.classification, self.propagation)


def _propagation_output(model, geom):
    dense = nk.Tensor(oracle_content(geom.dense))
    f_l = nk.Tensor(oracle_content(geom.local))
    frames = nk.Tensor(oracle_frames(geom.local))
    with nk.no_grad():
        f_l = model.intra(f_l, frames, geom.refs, geom.intra_nbr)
        _, per_ref = model.inter(
            f_l, nk.Tensor(oracle_content(geom.global_)), frames,
            nk.Tensor(oracle_frames(geom.global_)), geom.refs,
        )
        f_q = model.sparse(per_ref)
        return model.propagation(geom.points, dense, geom.refs, f_q, frames, geom.prop_nbr).data


def oracle_pipeline_residual(n_clouds=20, n_rotations=20, seed=0, n_points=64, cfg_overrides=None):
    """Largest change of classification logits and propagation outputs under global rotations (64-bit).

    Features and frames come from the handcrafted oracle, so any residual is
    due to the aggregation architecture rather than learned approximation.
    """
    rng = np.random.default_rng(seed)
    base = dict(n_local=16, k_local=8, n_global=8, k_intra=4, k_prop=4, k_dense=8)
    base.update(cfg_overrides or {})
    cls_model = randomize_statistics(ParotNet(NetConfig(task="cls", **base), seed, np.float64), rng).eval()
    seg_model = randomize_statistics(
        ParotNet(NetConfig(task="seg", num_classes=2, **base), seed + 1, np.float64), rng
    ).eval()
    worst_cls = worst_seg = 0.0
    for c in range(n_clouds):
        pts = rng.normal(size=(n_points, 3)) * rng.uniform(0.5, 1.5, 3)
        g0 = build_geometry([pts], cls_model.cfg, np.random.default_rng(c))
        s0 = build_geometry([pts], seg_model.cfg, np.random.default_rng(c))
        ref_cls = oracle_forward(cls_model, g0)
        ref_seg = _propagation_output(seg_model, s0)
        for _ in range(n_rotations):
            R = random_rotation_so3(rng)
            g1 = build_geometry([pts @ R], cls_model.cfg, np.random.default_rng(c))
            s1 = build_geometry([pts @ R], seg_model.cfg, np.random.default_rng(c))
            worst_cls = max(worst_cls, float(np.abs(oracle_forward(cls_model, g1) - ref_cls).max()))
            worst_seg = max(worst_seg, float(np.abs(_propagation_output(seg_model, s1) - ref_seg).max()))
    return OracleReport(worst_cls, worst_seg, n_clouds, n_rotations)


def relation_residual(n_trials=1000, seed=0):
    """Largest change of patch-patch and point-patch relation vectors under joint rotation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        pm, pn, p = rng.normal(size=(3, 3))
        fm = oracle_frames(rng.normal(size=(8, 3)) + 0.3)
        fn = oracle_frames(rng.normal(size=(8, 3)) + 0.3)
        R = random_rotation_so3(rng)
        g0 = geo_relations(pm, fm, pn, fn)
        g1 = geo_relations(pm @ R, fm @ R, pn @ R, fn @ R)
        e0 = point_relations(p, pn, fn)
        e1 = point_relations(p @ R, pn @ R, fn @ R)
        worst = max(worst, float(np.abs(g1 - g0).max()), float(np.abs(e1 - e0).max()))
    return worst
