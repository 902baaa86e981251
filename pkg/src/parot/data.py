"""Synthetic shape datasets, point-cloud text files, coloured PLY export, augmentation and rotation protocols."""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import PointCloud, apply_rotation, center_and_scale, random_rotation_so3, random_rotation_z

CLASS_NAMES = ("sphere", "box", "cylinder", "torus")
SEG_CLASS_NAMES = ("sphere_handle", "box_post")
NOISE = 0.005
SCALE_RANGE = (0.67, 1.5)
PROTOCOLS = {
    "zz": ("z", "z"),
    "zso3": ("z", "so3"),
    "so3so3": ("so3", "so3"),
}


@dataclass
class Dataset:
    samples: list
    split: str
    seed: int
    kind: str = "cls"
    class_names: tuple = field(default=CLASS_NAMES)

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self):
        return len(self.class_names)


# ---------------------------------------------------------------- surface samplers


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    radii = np.array([1.0, rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15)])
    return _unit_vectors(rng, n) * radii


def _box(rng, n, half=None):
    half = np.array([1.0, rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.8)]) if half is None else np.asarray(half)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(rng, n, radius=None, height=None):
    radius = rng.uniform(0.3, 0.6) if radius is None else radius
    height = rng.uniform(1.4, 2.2) if height is None else height
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    on_side = rng.random(n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-height / 2, height / 2, n), np.where(rng.random(n) < 0.5, -1, 1) * height / 2)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n):
    major = 1.0
    minor = rng.uniform(0.2, 0.45)
    # rejection sampling for area-uniform coverage of the tube angle
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n]


SAMPLERS = (_sphere, _box, _cylinder, _torus)


def _finish(rng, pts, n, labels=None):
    """Resample to ``n`` points with replacement, add noise, centre and scale."""
    pick = rng.integers(0, len(pts), n)
    pts = pts[pick] + rng.normal(scale=NOISE, size=(n, 3))
    return center_and_scale(pts), (None if labels is None else labels[pick])


def gen_classification_set(num_per_class, n_points, seed, split="train"):
    """Four surface-sampled primitive classes with per-sample shape jitter."""
    if n_points < 64:
        raise ValueError(f"gen_classification_set: N must be >= 64, got {n_points}")
    rng = np.random.default_rng(seed)
    samples = []
    for class_id, sampler in enumerate(SAMPLERS):
        for _ in range(num_per_class):
            pts, _ = _finish(rng, sampler(rng, 4 * n_points), n_points)
            samples.append(PointCloud(pts, None, class_id))
    return Dataset(samples, split, seed, "cls", CLASS_NAMES)


def _sphere_handle(rng, n):
    body = _sphere(rng, n) * rng.uniform(0.8, 1.0)
    length = rng.uniform(0.8, 1.4)
    handle = _cylinder(rng, n, radius=rng.uniform(0.12, 0.25), height=length)
    handle[:, 2] += body[:, 2].max() + length / 2 - 0.05
    return body, handle


def _box_post(rng, n):
    half = np.array([rng.uniform(0.7, 1.0), rng.uniform(0.5, 0.9), rng.uniform(0.25, 0.5)])
    body = _box(rng, n, half)
    height = rng.uniform(0.8, 1.5)
    post = _cylinder(rng, n, radius=rng.uniform(0.15, 0.3), height=height)
    post[:, 0] += rng.uniform(-0.4, 0.4) * half[0]
    post[:, 2] += half[2] + height / 2
    return body, post


def _two_part(rng, maker, n_points):
    while True:
        body, part = maker(rng, 2 * n_points)
        frac = rng.uniform(0.25, 0.6)
        n_part = int(round(frac * 2 * n_points))
        pts = np.concatenate([body[: 2 * n_points - n_part], part[:n_part]])
        labels = np.concatenate([np.zeros(2 * n_points - n_part, int), np.ones(n_part, int)])
        pts, lab = _finish(rng, pts, n_points, labels)
        share = lab.mean()
        if 0.15 <= share <= 0.85:
            return pts, lab


def gen_segmentation_set(num_samples, n_points, seed, split="train"):
    """Composite two-part shapes labelled by the primitive that generated each point (body 0, attachment 1)."""
    if n_points < 256:
        raise ValueError(f"gen_segmentation_set: N must be >= 256, got {n_points}")
    rng = np.random.default_rng(seed)
    makers = (_sphere_handle, _box_post)
    samples = []
    for i in range(num_samples):
        class_id = i % len(makers)
        pts, lab = _two_part(rng, makers[class_id], n_points)
        samples.append(PointCloud(pts, lab, class_id))
    return Dataset(samples, split, seed, "seg", SEG_CLASS_NAMES)


# ---------------------------------------------------------------- protocols and augmentation


def protocol_rotations(protocol):
    try:
        return PROTOCOLS[protocol.lower().replace("/", "")]
    except KeyError:
        raise ValueError(f"unknown protocol '{protocol}'; expected one of {sorted(PROTOCOLS)}") from None


def random_rotation(kind, rng):
    if kind == "z":
        return random_rotation_z(rng)
    if kind == "so3":
        return random_rotation_so3(rng)
    if kind == "none":
        return np.eye(3)
    raise ValueError(f"unknown rotation kind '{kind}'")


def augment(cloud, rng, scale=None):
    """Isotropic scaling by a factor drawn uniformly from [0.67, 1.5] (or the given ``scale``)."""
    s = rng.uniform(*SCALE_RANGE) if scale is None else scale
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    out = pts * s
    return PointCloud(out, cloud.labels, cloud.class_id) if isinstance(cloud, PointCloud) else out


def prepare(cloud, kind, rng, train):
    """Protocol rotation first, then (training only) scale augmentation."""
    out = apply_rotation(cloud, random_rotation(kind, rng))
    return augment(out, rng) if train else out


# ---------------------------------------------------------------- files


def save_points(cloud, path):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    labels = cloud.labels if isinstance(cloud, PointCloud) else None
    with open(path, "w", encoding="ascii") as fh:
        if isinstance(cloud, PointCloud) and cloud.class_id is not None:
            fh.write(f"# class {cloud.class_id}\n")
        for i, p in enumerate(pts):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if labels is not None:
                line += f" {int(labels[i])}"
            fh.write(line + "\n")


def load_points(path):
    """Read ``x y z`` or ``x y z label`` lines; '#' starts a comment."""
    pts, labels, class_id = [], [], None
    with open(path, encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.strip()
            if text.startswith("#"):
                parts = text[1:].split()
                if len(parts) == 2 and parts[0] == "class":
                    class_id = int(parts[1])
                continue
            text = text.split("#", 1)[0].strip()
            if not text:
                continue
            cols = text.split()
            try:
                if len(cols) not in (3, 4):
                    raise ValueError(f"expected 3 or 4 columns, found {len(cols)}")
                pts.append([float(c) for c in cols[:3]])
                labels.append(int(cols[3]) if len(cols) == 4 else None)
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: malformed point line {raw.rstrip()!r} ({err})") from None
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise ValueError(f"{path}: labels present on some lines only")
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return PointCloud(arr, np.array(labels, dtype=np.int64) if pts and all(has) else None, class_id)


def save_dataset(ds, directory):
    """One text file per sample plus ``index.csv`` (file, class_id)."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "index.csv"), "w", encoding="ascii") as fh:
        fh.write(f"# kind={ds.kind} split={ds.split} seed={ds.seed} classes={','.join(ds.class_names)}\n")
        fh.write("file,class_id\n")
        for i, s in enumerate(ds.samples):
            name = f"{i:05d}.txt"
            save_points(s, os.path.join(directory, name))
            fh.write(f"{name},{s.class_id}\n")


def load_dataset(directory):
    index = os.path.join(directory, "index.csv")
    if not os.path.exists(index):
        raise FileNotFoundError(f"{directory}: no index.csv, not a dataset directory")
    with open(index, encoding="ascii") as fh:
        meta = dict(kv.split("=", 1) for kv in fh.readline().lstrip("#").split())
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    samples = []
    for name, class_id in rows:
        cloud = load_points(os.path.join(directory, name))
        samples.append(PointCloud(cloud.points, cloud.labels, int(class_id)))
    return Dataset(samples, meta["split"], int(meta["seed"]), meta["kind"], tuple(meta["classes"].split(",")))


def export_colored_ply(cloud, rgb, path):
    """ASCII PLY with float x y z and 8-bit colours; values outside [0, 1] are clamped with a warning."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != (len(pts), 3):
        raise ValueError(f"export_colored_ply: expected colours of shape {(len(pts), 3)}, got {rgb.shape}")
    if np.any(rgb < 0) or np.any(rgb > 1) or not np.all(np.isfinite(rgb)):
        warnings.warn("export_colored_ply: colours outside [0, 1] were clamped", stacklevel=2)
        rgb = np.clip(np.nan_to_num(rgb), 0.0, 1.0)
    colors = np.rint(rgb * 255).astype(int)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(pts.astype(np.float32), colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


def load_ply(path):
    """Parse the ASCII PLY written by :func:`export_colored_ply`; returns (points, colours)."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise ValueError(f"{path}: not an ASCII PLY file")
    end = lines.index("end_header")
    count = None
    props = []
    for line in lines[2:end]:
        parts = line.split()
        if parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
    if props != ["x", "y", "z", "red", "green", "blue"] or count is None:
        raise ValueError(f"{path}: unexpected PLY header")
    body = [line.split() for line in lines[end + 1 :] if line.strip()]
    if len(body) != count or any(len(b) != 6 for b in body):
        raise ValueError(f"{path}: vertex count does not match header ({len(body)} != {count})")
    pts = np.array([[float(v) for v in b[:3]] for b in body]).reshape(-1, 3)
    col = np.array([[int(v) for v in b[3:]] for b in body], dtype=np.int64).reshape(-1, 3)
    if np.any(col < 0) or np.any(col > 255):
        raise ValueError(f"{path}: colour outside 0..255")
    return pts, col
