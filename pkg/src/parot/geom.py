"""Rotations, sampling/neighbourhood kernels, patches, frames and relation vectors.

Conventions: points and direction vectors are rows, a rotation ``R`` acts by
right multiplication ``p @ R``, and a frame is stored as a 3x3 array whose rows
are ``d1, d2, d3``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

ZERO_OFFSET = 1e-8
DEGENERATE_CROSS = 1e-6


# ---------------------------------------------------------------- clouds and rotations


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    class_id: int | None = None

    def __len__(self):
        return len(self.points)


def quaternion_to_rotation(q):
    """Row-convention rotation matrix for a (w, x, y, z) quaternion."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    col = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return col.T


def random_rotation_so3(rng):
    """Uniform rotation from a normalised Gaussian quaternion."""
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) > 1e-8:
            return quaternion_to_rotation(q)


def random_rotations_so3(rng, shape):
    """Stack of independent uniform rotations with leading ``shape``."""
    q = rng.standard_normal(tuple(shape) + (4,))
    norm = np.linalg.norm(q, axis=-1)
    bad = norm < 1e-8
    while bad.any():
        q[bad] = rng.standard_normal((int(bad.sum()), 4))
        norm = np.linalg.norm(q, axis=-1)
        bad = norm < 1e-8
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)
    out = np.empty(tuple(shape) + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 1, 0] = 2 * (x * y - w * z)
    out[..., 2, 0] = 2 * (x * z + w * y)
    out[..., 0, 1] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 2, 1] = 2 * (y * z - w * x)
    out[..., 0, 2] = 2 * (x * z - w * y)
    out[..., 1, 2] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotation_z(angle):
    """Counter-clockwise rotation about z: ``(1, 0, 0) @ rotation_z(a) = (cos a, sin a, 0)``."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation_z(rng):
    return rotation_z(rng.uniform(0.0, 2.0 * np.pi))


def is_rotation(R, tol=1e-6):
    R = np.asarray(R)
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def apply_rotation(obj, R):
    """Rotate a point array, :class:`PointCloud`, :class:`Patch` or :class:`PatchSet`."""
    R = np.asarray(R)
    if isinstance(obj, PointCloud):
        return PointCloud(obj.points @ R, obj.labels, obj.class_id)
    if isinstance(obj, Patch):
        return Patch(obj.local_points @ R, obj.reference_point @ R, obj.scale_tag)
    if isinstance(obj, PatchSet):
        return PatchSet(
            obj.points @ R, obj.reference_points @ R, obj.offsets @ R, obj.scale_tag, obj.index,
        )
    return np.asarray(obj) @ R


def center_and_scale(cloud):
    """Move the centroid to the origin and scale the farthest point to norm 1."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise ValueError(f"center_and_scale: expected a non-empty (N, 3) array, got {pts.shape}")
    centred = pts - pts.mean(axis=0)
    scale = np.sqrt((centred * centred).sum(axis=1)).max()
    if scale < 1e-12:
        raise ValueError("center_and_scale: degenerate cloud, all points coincide")
    out = centred / scale
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.labels, cloud.class_id)
    return out


# ---------------------------------------------------------------- sampling and neighbourhoods


def fps(points, m, rng=None, start=None):
    """Farthest point sampling.  The first index comes from ``rng`` unless ``start`` is given."""
    pts = np.asarray(points, dtype=np.float64)
    if m > len(pts):
        raise ValueError(f"fps: cannot select m={m} points from N={len(pts)}")
    if start is None:
        start = int(rng.integers(len(pts))) if rng is not None else 0
    return kernels.fps(pts, m, start)


def knn(query_points, base_points, k):
    """Indices of the ``k`` nearest base points per query, nearest first, ties to the lower index."""
    return kernels.knn(query_points, base_points, k)


def ball_query(query_points, base_points, radius, k_max):
    """Up to ``k_max`` base indices within ``radius`` in index order, padded with the first hit.

    A query with an empty ball falls back to its nearest neighbour.  Returns
    ``(indices, fallback_count)``.
    """
    return kernels.ball_query(query_points, base_points, radius, k_max)


# ---------------------------------------------------------------- patches


@dataclass
class Patch:
    local_points: np.ndarray
    reference_point: np.ndarray
    scale_tag: str = "local"


@dataclass
class PatchSet:
    """A batch of equally sized patches stored as arrays.

    ``points`` is (n, k, 3) in patch coordinates, ``offsets`` holds the world
    point each patch was translated by, ``reference_points`` the world reference
    used in relations (equal to ``offsets`` for local patches, the origin for
    global ones).
    """

    points: np.ndarray
    reference_points: np.ndarray
    offsets: np.ndarray
    scale_tag: str
    index: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return Patch(self.points[i], self.reference_points[i], self.scale_tag)


def extract_local_patches(cloud, n_local, k_local, rng, search="knn", radius=0.2):
    """FPS reference points, neighbourhoods around them, translated to put each reference at the origin.

    Returns ``(patches, reference_indices)``; ``patches.index`` holds the
    neighbour indices into the cloud.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k_local > len(pts):
        raise ValueError(f"extract_local_patches: k_local={k_local} exceeds N={len(pts)}")
    ref = fps(pts, n_local, rng)
    q = pts[ref]
    if search == "knn":
        nbr = knn(q, pts, k_local)
    elif search == "ball":
        nbr, _ = ball_query(q, pts, radius, k_local)
    else:
        raise ValueError(f"unknown neighbour search '{search}'")
    local = pts[nbr] - q[:, None, :]
    return PatchSet(local, q.copy(), q.copy(), "local", nbr), ref


def extract_global_patches(cloud, n_global, reference_points, rng):
    """One copy of the FPS-downsampled cloud per reference point, translated by that reference."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    g_idx = fps(pts, n_global, rng)
    g = pts[g_idx]
    refs = np.asarray(reference_points, dtype=np.float64)
    local = g[None, :, :] - refs[:, None, :]
    origin = np.zeros_like(refs)
    return PatchSet(local, origin, refs.copy(), "global", np.broadcast_to(g_idx, (len(refs), n_global)))


# ---------------------------------------------------------------- frames


@dataclass
class OrientationFrame:
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    degenerate: bool = False

    @property
    def matrix(self):
        """Rows d1, d2, d3."""
        return np.stack([self.d1, self.d2, self.d3])


def _orthogonal_unit(v):
    axis = np.eye(3)[np.argmin(np.abs(v))]
    w = np.cross(v, axis)
    return w / np.linalg.norm(w)


def complete_frame(d1_raw, d2_raw):
    """Normalise two direction vectors and add ``d3 = d1 x d2``.

    Vanishing inputs are replaced by a canonical axis; (near-)parallel inputs
    get a deterministic ``d3`` orthogonal to ``d1``.  Both set ``degenerate``.
    ``d1 . d2`` is left as predicted.
    """
    degenerate = False
    vecs = []
    for v, fallback in ((d1_raw, np.array([1.0, 0.0, 0.0])), (d2_raw, np.array([0.0, 1.0, 0.0]))):
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if n < ZERO_OFFSET:
            degenerate = True
            vecs.append(fallback)
        else:
            vecs.append(v / n)
    d1, d2 = vecs
    c = np.cross(d1, d2)
    cn = np.linalg.norm(c)
    if cn < DEGENERATE_CROSS:
        return OrientationFrame(d1, d2, _orthogonal_unit(d1), True)
    return OrientationFrame(d1, d2, c / cn, degenerate)


def complete_frames(d1_raw, d2_raw):
    """Vectorised :func:`complete_frame`: returns ``(frames (..., 3, 3), degenerate mask)``."""
    d1_raw = np.asarray(d1_raw, dtype=np.float64)
    d2_raw = np.asarray(d2_raw, dtype=np.float64)
    n1 = np.linalg.norm(d1_raw, axis=-1, keepdims=True)
    n2 = np.linalg.norm(d2_raw, axis=-1, keepdims=True)
    d1 = np.where(n1 < ZERO_OFFSET, np.array([1.0, 0.0, 0.0]), d1_raw / np.maximum(n1, ZERO_OFFSET))
    d2 = np.where(n2 < ZERO_OFFSET, np.array([0.0, 1.0, 0.0]), d2_raw / np.maximum(n2, ZERO_OFFSET))
    c = np.cross(d1, d2)
    cn = np.linalg.norm(c, axis=-1, keepdims=True)
    flat = cn[..., 0] < DEGENERATE_CROSS
    d3 = c / np.maximum(cn, DEGENERATE_CROSS)
    if flat.any():
        d3[flat] = np.stack([_orthogonal_unit(v) for v in d1[flat]])
    degenerate = flat | (n1[..., 0] < ZERO_OFFSET) | (n2[..., 0] < ZERO_OFFSET)
    return np.stack([d1, d2, d3], axis=-2), degenerate


def rotate_frame(frame, R):
    """Rotate every direction of a frame: ``d -> d @ R``."""
    m = frame.matrix @ np.asarray(R)
    return OrientationFrame(m[0], m[1], m[2], frame.degenerate)


def derotate_frame(frame, R):
    """Undo a rotation on the predicted directions (``d @ R.T``) and re-complete the frame."""
    R = np.asarray(R)
    out = complete_frame(frame.d1 @ R.T, frame.d2 @ R.T)
    out.degenerate = out.degenerate or frame.degenerate
    return out


# ---------------------------------------------------------------- relations


def _unit_or_zero(u):
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    return np.where(n < ZERO_OFFSET, 0.0, u / np.maximum(n, ZERO_OFFSET)), n[..., 0]


def _unit_rows(m):
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def _as_matrix(frame):
    return frame.matrix if isinstance(frame, OrientationFrame) else np.asarray(frame, dtype=np.float64)


def geo_relations(p_m, frames_m, p_n, frames_n):
    """Patch-patch relation vectors, vectorised over leading axes.

    Layout per entry (16 values): distance, the nine cosines between frame
    directions ``(d_i^m, d_j^n)`` in row-major order, the three cosines of
    ``d_i^m`` against ``u = p_n - p_m`` and the three of ``d_i^n`` against ``u``.
    Cosines against a vanishing offset are 0.
    """
    u_hat, dist = _unit_or_zero(np.asarray(p_n, dtype=np.float64) - np.asarray(p_m, dtype=np.float64))
    om = _unit_rows(np.asarray(frames_m, dtype=np.float64))
    on = _unit_rows(np.asarray(frames_n, dtype=np.float64))
    oo = np.einsum("...ic,...jc->...ij", om, on)
    mu = np.einsum("...ic,...c->...i", om, u_hat)
    nu = np.einsum("...ic,...c->...i", on, u_hat)
    lead = oo.shape[:-2]
    return np.concatenate([dist[..., None], oo.reshape(lead + (9,)), mu, nu], axis=-1)


def geo_relation(patch_m, frame_m, patch_n, frame_n):
    """Relation between two patches (16 scalars); see :func:`geo_relations`."""
    pm = patch_m.reference_point if isinstance(patch_m, Patch) else patch_m
    pn = patch_n.reference_point if isinstance(patch_n, Patch) else patch_n
    return geo_relations(pm, _as_matrix(frame_m), pn, _as_matrix(frame_n))


def point_relations(p, q, frames_q):
    """Point-to-patch relations (4 scalars): ``|q - p|`` and cosines of ``d_i^q`` against ``q - p``."""
    u_hat, dist = _unit_or_zero(np.asarray(q, dtype=np.float64) - np.asarray(p, dtype=np.float64))
    oq = _unit_rows(np.asarray(frames_q, dtype=np.float64))
    cos = np.einsum("...ic,...c->...i", oq, u_hat)
    return np.concatenate([dist[..., None], cos], axis=-1)


def point_relation(point_p, point_q, frame_q):
    return point_relations(point_p, point_q, _as_matrix(frame_q))


# ---------------------------------------------------------------- test oracle


def oracle_equivariant_frame(patch):
    """Handcrafted rotation-equivariant frame of a patch.

    ``d1`` points at the patch centroid, ``d2`` is the part of the direction to
    the farthest point (lowest index on ties) orthogonal to ``d1``.
    """
    pts = patch.local_points if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    return _oracle_frame_matrix(pts)


def _oracle_frame_matrix(pts):
    c = pts.mean(axis=0)
    cn = np.linalg.norm(c)
    if cn < DEGENERATE_CROSS:
        raise ValueError("oracle_equivariant_frame: patch centroid coincides with the reference")
    d1 = c / cn
    far = pts[int(np.argmax(np.einsum("ij,ij->i", pts, pts)))]
    w = far - (far @ d1) * d1
    wn = np.linalg.norm(w)
    if wn < DEGENERATE_CROSS:
        raise ValueError("oracle_equivariant_frame: farthest point is parallel to the centroid direction")
    d2 = w / wn
    return OrientationFrame(d1, d2, np.cross(d1, d2))


def oracle_frames(patch_points):
    """Oracle frames for an (..., k, 3) stack of patches, as (..., 3, 3)."""
    pts = np.asarray(patch_points, dtype=np.float64)
    flat = pts.reshape(-1, pts.shape[-2], 3)
    out = np.stack([_oracle_frame_matrix(p).matrix for p in flat])
    return out.reshape(pts.shape[:-2] + (3, 3))


def oracle_content(patch_points, width=128):
    """Rotation-invariant content signature: the patch's sorted pairwise distances, zero padded."""
    pts = np.asarray(patch_points, dtype=np.float64)
    k = pts.shape[-2]
    iu, ju = np.triu_indices(k, 1)
    diff = pts[..., iu, :] - pts[..., ju, :]
    d = np.sort(np.sqrt(np.einsum("...c,...c->...", diff, diff)), axis=-1)[..., :width]
    out = np.zeros(pts.shape[:-2] + (width,))
    out[..., : d.shape[-1]] = d
    return out
