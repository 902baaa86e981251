"""Full network: patch geometry, two-scale disentanglement, aggregation and task heads."""

from dataclasses import dataclass, field, fields

import numpy as np

from . import numkernel as nk
from .disentangle import Disentangler
from .geom import ball_query, fps, knn
from .hierarchy import Classifier, InterScale, IntraScale, relation_mode
from .seghead import PROPAGATION, SegHead


@dataclass
class NetConfig:
    task: str = "cls"
    num_classes: int = 4
    num_parts: int = 2
    n_local: int = 64
    k_local: int = 32
    n_global: int = 16
    k_intra: int = 16
    k_prop: int = 11
    k_dense: int = 16
    relation_mode: str = "full"
    use_intra: bool = True
    use_inter: bool = True
    neighbor_search: str = "knn"
    radius: float = 0.2
    propagation: str = "pose"
    dropout: float = 0.5

    def __post_init__(self):
        self.relation_mode = relation_mode(self.relation_mode)
        if self.task not in ("cls", "seg"):
            raise ValueError(f"task must be 'cls' or 'seg', got '{self.task}'")
        if self.propagation not in PROPAGATION:
            raise ValueError(f"propagation must be one of {sorted(PROPAGATION)}, got '{self.propagation}'")
        if self.neighbor_search not in ("knn", "ball"):
            raise ValueError(f"neighbor_search must be 'knn' or 'ball', got '{self.neighbor_search}'")
        for f in fields(self):
            if f.type is int and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.k_intra > self.n_local:
            raise ValueError(f"k_intra={self.k_intra} exceeds n_local={self.n_local}")
        if self.k_prop > self.n_local:
            raise ValueError(f"k_prop={self.k_prop} exceeds n_local={self.n_local}")


@dataclass
class Geometry:
    """Batched, non-differentiable neighbourhood structure of a set of clouds."""

    points: np.ndarray  # (B, N, 3)
    refs: np.ndarray  # (B, Nl, 3)
    local: np.ndarray  # (B, Nl, kl, 3) patch coordinates
    global_: np.ndarray  # (B, Nl, Ng, 3)
    intra_nbr: np.ndarray  # (B, Nl, k_intra), self first
    ref_index: np.ndarray  # (B, Nl) indices of the references in the cloud
    dense: np.ndarray = field(default=None)  # (B, N, k_dense, 3) per-point patches (segmentation)
    prop_nbr: np.ndarray = field(default=None)  # (B, N, k_prop)

    @property
    def batch(self):
        return self.points.shape[0]


def cloud_geometry(points, cfg, rng):
    """Patches and neighbour lists of one (N, 3) cloud; FPS starts are drawn from ``rng``."""
    pts = np.asarray(points, dtype=np.float64)
    if cfg.k_local > len(pts):
        raise ValueError(f"k_local={cfg.k_local} exceeds N={len(pts)}")
    ref = fps(pts, cfg.n_local, rng)
    q = pts[ref]
    if cfg.neighbor_search == "knn":
        nbr = knn(q, pts, cfg.k_local)
    else:
        nbr, _ = ball_query(q, pts, cfg.radius, cfg.k_local)
    g = pts[fps(pts, cfg.n_global, rng)]
    out = {
        "points": pts,
        "refs": q,
        "local": pts[nbr] - q[:, None, :],
        "global_": g[None, :, :] - q[:, None, :],
        "intra_nbr": knn(q, q, cfg.k_intra),
        "ref_index": ref,
    }
    if cfg.task == "seg":
        dn = knn(pts, pts, cfg.k_dense)
        out["dense"] = pts[dn] - pts[:, None, :]
        out["prop_nbr"] = knn(pts, q, cfg.k_prop)
    return out


def build_geometry(clouds, cfg, rng):
    per = [cloud_geometry(c, cfg, rng) for c in clouds]
    return Geometry(**{k: np.stack([p[k] for p in per]) for k in per[0]})


@dataclass
class ForwardResult:
    logits: nk.Tensor
    local_a: object = None
    local_b: object = None
    global_a: object = None
    global_b: object = None
    rotations: dict = field(default_factory=dict)


class ParotNet(nk.Module):
    """Classification or part-segmentation network over two patch scales."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        mode = cfg.relation_mode
        self.local_dis = Disentangler(rng, dtype)
        self.global_dis = Disentangler(rng, dtype) if cfg.use_inter else None
        self.intra = IntraScale(rng, dtype, mode=mode) if cfg.use_intra else None
        self.inter = InterScale(rng, dtype, mode=mode, use_global=cfg.use_inter)
        if cfg.task == "cls":
            self.classifier = Classifier(cfg.num_classes, rng, dtype, cfg.dropout)
        else:
            self.sparse = nk.Dense(1024, 128, rng, dtype)
            self.propagation = PROPAGATION[cfg.propagation](rng, dtype)
            self.head = SegHead(cfg.num_classes, cfg.num_parts, rng, dtype, cfg.dropout)
        self.set_rng(np.random.default_rng(seed + 1))

    def set_rng(self, rng):
        """Share ``rng`` with every dropout layer."""
        stack = [self]
        while stack:
            m = stack.pop()
            if isinstance(m, nk.Dropout):
                m.rng = rng
            stack.extend(c for _, c in m.children())

    def forward(self, geom, rotations=None, branch_b=(False, False), onehot=None):
        """Run the network on a :class:`Geometry`.

        ``rotations`` maps ``local_a``/``local_b``/``global_a``/``global_b``/``dense``
        to per-patch rotation stacks (omitted keys mean no rotation).
        ``branch_b`` selects whether the second siamese branch runs for the
        local and global scales.
        """
        rot = rotations or {}
        la = self.local_dis.branch(geom.local, rot.get("local_a"))
        lb = self.local_dis.branch(geom.local, rot.get("local_b")) if branch_b[0] else None
        ga = gb = None
        if self.global_dis is not None:
            ga = self.global_dis.branch(geom.global_, rot.get("global_a"))
            gb = self.global_dis.branch(geom.global_, rot.get("global_b")) if branch_b[1] else None
        dense = None
        if self.cfg.task == "seg":
            pts = geom.dense
            if rot.get("dense") is not None:
                pts = np.matmul(pts.astype(self.dtype), rot["dense"].astype(self.dtype))
            dense, _, _ = self.local_dis.encode(pts, content_only=True)
        logits = self.head_from_parts(
            geom, la.f, la.frames,
            ga.f if ga is not None else None, ga.frames if ga is not None else None,
            dense, onehot,
        )
        return ForwardResult(logits, la, lb, ga, gb, rot)

    def head_from_parts(self, geom, f_local, frames_local, f_global=None, frames_global=None,
                        dense_features=None, onehot=None):
        """Everything after disentanglement; lets tests feed hand-made invariant features and frames."""
        f_local, frames_local, f_global, frames_global, dense_features = (
            x if x is None or isinstance(x, nk.Tensor) else nk.Tensor(np.asarray(x, dtype=self.dtype))
            for x in (f_local, frames_local, f_global, frames_global, dense_features)
        )
        f_l = self.intra(f_local, frames_local, geom.refs, geom.intra_nbr) if self.intra is not None else f_local
        pooled, per_ref = self.inter(f_l, f_global, frames_local, frames_global, geom.refs)
        if self.cfg.task == "cls":
            return self.classifier(pooled)
        f_q = self.sparse(per_ref)
        feats = self.propagation(geom.points, dense_features, geom.refs, f_q, frames_local, geom.prop_nbr)
        return self.head(feats, onehot)

    def __call__(self, geom, **kwargs):
        return self.forward(geom, **kwargs).logits
