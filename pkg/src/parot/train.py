"""Loss assembly, the training loop and evaluation metrics."""

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numkernel as nk
from .data import PROTOCOLS, prepare, protocol_rotations
from .disentangle import loss_equi, loss_inv, loss_orth
from .geom import random_rotations_so3
from .model import NetConfig, ParotNet, build_geometry

CSV_HEADER = ["epoch", "split", "protocol", "loss", "accuracy", "imiou", "cmiou", "inv_gap"]


@dataclass
class TrainConfig:
    task: str = "cls"
    epochs: int = 250
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-6
    alpha_local: float = 0.2
    alpha_global: float = 0.1
    beta_local: float = 0.0
    beta_global: float = 0.0
    protocol: str = "zso3"
    seed: int = 0
    n_local: int = 256
    k_local: int = 64
    n_global: int = 32
    k_intra: int = 32
    k_prop: int = 11
    k_dense: int = 16
    relation_mode: str = "full"
    use_intra: bool = True
    use_inter: bool = True
    neighbor_search: str = "knn"
    radius: float = 0.2
    propagation: str = "pose"
    dropout: float = 0.5
    eval_patch_rotation: bool = True
    eval_every: int = 1
    num_classes: int = 4
    num_parts: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and f.name != "seed" and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
            if f.name.startswith(("alpha", "beta")) and v < 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ValueError("learning rates must be positive")
        protocol_rotations(self.protocol)
        self.protocol = self.protocol.lower().replace("/", "")
        self.net_config()

    def net_config(self):
        names = {f.name for f in fields(NetConfig)}
        return NetConfig(**{k: v for k, v in asdict(self).items() if k in names})


def segmentation_defaults(**overrides):
    """Segmentation settings differ only in the global patch size and the intra-scale neighbour count."""
    base = dict(task="seg", n_global=64, k_intra=16, num_classes=2, num_parts=2)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- losses and schedule


def total_loss(task_loss, branch_losses, cfg):
    """Task loss plus weighted disentanglement terms of both scales.

    ``branch_losses`` maps ``equi_l``, ``orth_l``, ``inv_l``, ``equi_g``,
    ``orth_g``, ``inv_g`` to scalars (missing keys count as absent terms).
    Orthogonality terms carry unit weight; a zero weight drops its term entirely.
    """
    weights = {
        "equi_l": cfg.alpha_local, "orth_l": 1.0, "inv_l": cfg.beta_local,
        "equi_g": cfg.alpha_global, "orth_g": 1.0, "inv_g": cfg.beta_global,
    }
    total = task_loss
    for key, w in weights.items():
        term = branch_losses.get(key)
        if term is None or w == 0:
            continue
        total = nk.add(total, term if w == 1.0 else nk.mul(term, w))
    return total


def cosine_lr(step, total_steps, lr_start=1e-3, lr_end=1e-5):
    if total_steps <= 0:
        return lr_start
    step = min(max(step, 0), total_steps)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def branch_losses(result, cfg):
    out = {}
    for tag, a, b, key in (("l", result.local_a, result.local_b, "local"), ("g", result.global_a, result.global_b, "global")):
        if a is None:
            continue
        out[f"orth_{tag}"] = loss_orth(a.d1_raw, a.d2_raw)
        if b is not None:
            R_a, R_b = result.rotations[f"{key}_a"], result.rotations[f"{key}_b"]
            out[f"equi_{tag}"] = loss_equi((a.d1_raw, a.d2_raw), (b.d1_raw, b.d2_raw), R_a, R_b)
            out[f"inv_{tag}"] = loss_inv(a.f, b.f)
    return out


def need_branch_b(cfg):
    return (cfg.alpha_local > 0 or cfg.beta_local > 0, cfg.alpha_global > 0 or cfg.beta_global > 0)


# ---------------------------------------------------------------- batches


def _onehot(class_ids, width):
    return np.eye(width)[np.asarray(class_ids)]


def make_batch(samples, net_cfg, rng, rotation_kind, train):
    clouds = [prepare(s, rotation_kind, rng, train) for s in samples]
    geom = build_geometry([c.points for c in clouds], net_cfg, rng)
    labels = np.array([s.class_id for s in samples])
    parts = np.stack([s.labels for s in samples]) if net_cfg.task == "seg" else None
    return geom, labels, parts


def patch_rotations(cfg, geom, rng, keys=("local_a", "local_b", "global_a", "global_b")):
    """Independent uniform rotations for every patch of the requested branches."""
    b, nl = geom.refs.shape[:2]
    rot = {k: random_rotations_so3(rng, (b, nl)) for k in keys}
    if cfg.task == "seg":
        rot["dense"] = random_rotations_so3(rng, geom.points.shape[:2])
    return rot


def batches(n, batch_size, rng=None):
    """Index batches; the last partial batch is dropped unless it would be the only one."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    if n < batch_size:
        return [order]
    return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    loss: float = float("nan")
    accuracy: float = float("nan")
    imiou: float = float("nan")
    cmiou: float = float("nan")
    class_iou: dict = field(default_factory=dict)
    inv_gap: float = float("nan")
    cosine: float = float("nan")
    orth: float = float("nan")


def shape_iou(pred, target, parts):
    """Mean IoU over ``parts`` for one shape; a part absent from both counts as 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (target == p))
        union = np.sum((pred == p) | (target == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def segmentation_scores(preds, targets, class_ids, parts_per_class):
    """Instance mIoU, class mIoU and the per-class table."""
    per_shape = [shape_iou(p, t, parts_per_class[c]) for p, t, c in zip(preds, targets, class_ids)]
    table = {}
    for c in sorted(set(class_ids)):
        table[c] = float(np.mean([s for s, k in zip(per_shape, class_ids) if k == c]))
    return float(np.mean(per_shape)), float(np.mean(list(table.values()))), table


def feature_invariance(model, clouds, rng, max_patches=4096):
    """Mean cosine similarity of local content features of patches and randomly rotated copies,
    plus the mean |d1 . d2| of the unit direction heads."""
    cfg = model.cfg
    geom = build_geometry(clouds, cfg, rng)
    patches = geom.local.reshape(-1, cfg.k_local, 3)[:max_patches]
    R = random_rotations_so3(rng, (len(patches),))
    model.eval()
    with nk.no_grad():
        f0, d1, d2 = model.local_dis.encode(patches)
        f1, _, _ = model.local_dis.encode(np.matmul(patches, R))
    a, b = f0.data.astype(np.float64), f1.data.astype(np.float64)
    cos = np.sum(a * b, axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    u1 = d1.data / np.maximum(np.linalg.norm(d1.data, axis=1, keepdims=True), 1e-12)
    u2 = d2.data / np.maximum(np.linalg.norm(d2.data, axis=1, keepdims=True), 1e-12)
    return float(cos.mean()), float(np.abs(np.sum(u1 * u2, axis=1)).mean())


def evaluate(model, dataset, protocol, seed=0, batch_size=32, invariance=True, patch_rotation=True):
    """Metrics of ``model`` on ``dataset`` under the test-time rotation of ``protocol``.

    With ``patch_rotation`` every patch is shown to the disentangler in an
    independent uniform pose, as during training; the frames undo that pose, so
    the output distribution does not depend on the cloud's orientation.
    Deterministic for a fixed ``seed``; the model's parameters and running
    statistics are not modified.
    """
    cfg = model.cfg
    _, test_kind = protocol_rotations(protocol)
    rng = np.random.default_rng([seed, 7])
    model.eval()
    losses, correct, preds, targets, class_ids = [], 0, [], [], []
    for idx in batches(len(dataset), batch_size):
        samples = [dataset.samples[i] for i in idx]
        geom, labels, parts = make_batch(samples, cfg, rng, test_kind, train=False)
        with nk.no_grad():
            onehot = _onehot(labels, cfg.num_classes) if cfg.task == "seg" else None
            rot = patch_rotations(cfg, geom, rng, ("local_a", "global_a")) if patch_rotation else None
            logits = model.forward(geom, rotations=rot, onehot=onehot).logits
            target = parts if cfg.task == "seg" else labels
            losses.append(float(nk.softmax_cross_entropy(logits, target).data) * len(idx))
        if cfg.task == "cls":
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == labels))
        else:
            p = np.argmax(logits.data, axis=-1)
            preds.extend(p)
            targets.extend(parts)
            class_ids.extend(labels.tolist())
    m = Metrics(loss=sum(losses) / max(len(dataset), 1))
    if cfg.task == "cls":
        m.accuracy = correct / max(len(dataset), 1)
    else:
        parts_per_class = {c: tuple(range(cfg.num_parts)) for c in range(cfg.num_classes)}
        m.imiou, m.cmiou, m.class_iou = segmentation_scores(preds, targets, class_ids, parts_per_class)
        m.accuracy = float(np.mean([np.mean(p == t) for p, t in zip(preds, targets)]))
    if invariance:
        clouds = [s.points for s in dataset.samples[: min(len(dataset), 16)]]
        m.cosine, m.orth = feature_invariance(model, clouds, rng)
        m.inv_gap = 1.0 - m.cosine
    return m


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ParotNet
    history: list
    best_path: str = None
    last_path: str = None
    log_path: str = None


def build_model(cfg, dtype=np.float32):
    return ParotNet(cfg.net_config(), seed=cfg.seed, dtype=dtype)


def write_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in asdict(cfg).items():
            fh.write(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n")


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def train(train_set, test_set, cfg, out_dir=None, log=None, dtype=np.float32):
    """Train with Adam and a per-step cosine schedule; log per-epoch CSV rows and save checkpoints.

    ``best.ckpt`` holds the epoch with the best test accuracy (classification) or
    instance mIoU (segmentation); ``last.ckpt`` the final weights.
    """
    model = build_model(cfg, dtype)
    model.set_rng(np.random.default_rng([cfg.seed, 2]))
    opt = nk.Adam(list(model.named_parameters()), weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 3])
    aug_rng = np.random.default_rng([cfg.seed, 4])
    train_kind, _ = protocol_rotations(cfg.protocol)
    steps_per_epoch = len(batches(len(train_set), cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    use_b = need_branch_b(cfg)
    net_cfg = cfg.net_config()
    history, best, step = [], -np.inf, 0
    paths = {}
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_config(cfg, os.path.join(out_dir, "config.txt"))
        paths = {k: os.path.join(out_dir, f"{k}.ckpt") for k in ("best", "last")}
        paths["log"] = os.path.join(out_dir, "log.csv")
        log_fh = open(paths["log"], "w", newline="", encoding="ascii")
        writer = csv.writer(log_fh)
        writer.writerow(CSV_HEADER)
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            run_loss = run_correct = seen = 0
            for idx in batches(len(train_set), cfg.batch_size, order_rng):
                samples = [train_set.samples[i] for i in idx]
                geom, labels, parts = make_batch(samples, net_cfg, aug_rng, train_kind, train=True)
                onehot = _onehot(labels, cfg.num_classes) if cfg.task == "seg" else None
                result = model.forward(geom, rotations=patch_rotations(cfg, geom, aug_rng), branch_b=use_b, onehot=onehot)
                target = parts if cfg.task == "seg" else labels
                task_loss = nk.softmax_cross_entropy(result.logits, target)
                loss = total_loss(task_loss, branch_losses(result, cfg), cfg)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise FloatingPointError(f"epoch {epoch} step {step}: loss is {value}")
                opt.zero_grad()
                nk.backward(loss)
                try:
                    opt.step(cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end))
                except FloatingPointError as err:
                    raise FloatingPointError(f"epoch {epoch} step {step}: {err}") from None
                step += 1
                run_loss += value * len(idx)
                pred = np.argmax(result.logits.data, axis=-1)
                run_correct += float(np.mean(pred == target, axis=-1).sum()) if cfg.task == "seg" else int(np.sum(pred == labels))
                seen += len(idx)
            train_m = Metrics(loss=run_loss / max(seen, 1), accuracy=run_correct / max(seen, 1))
            due = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
            test_m = evaluate(model, test_set, cfg.protocol, seed=cfg.seed, batch_size=cfg.batch_size,
                              patch_rotation=cfg.eval_patch_rotation) if test_set and due else None
            history.append((epoch, train_m, test_m))
            if test_m is not None:
                score = test_m.accuracy if cfg.task == "cls" else test_m.imiou
            else:
                score = -np.inf if test_set else -train_m.loss
            if writer is not None:
                for split, m in (("train", train_m), ("test", test_m)):
                    if m is not None:
                        writer.writerow([epoch, split, cfg.protocol, _fmt(m.loss), _fmt(m.accuracy),
                                         _fmt(m.imiou), _fmt(m.cmiou), _fmt(m.inv_gap)])
                log_fh.flush()
                if score > best:
                    nk.save_checkpoint(model, paths["best"])
                nk.save_checkpoint(model, paths["last"])
            best = max(best, score)
            if log is not None:
                msg = f"epoch {epoch}/{cfg.epochs} loss {train_m.loss:.4f} train_acc {train_m.accuracy:.3f}"
                if test_m is not None:
                    msg += f" test_acc {test_m.accuracy:.3f}"
                    if cfg.task == "seg":
                        msg += f" imiou {test_m.imiou:.3f}"
                    msg += f" inv_gap {test_m.inv_gap:.4f}"
                log(msg)
    finally:
        if writer is not None:
            log_fh.close()
    return TrainResult(model, history, paths.get("best"), paths.get("last"), paths.get("log"))


def load_model(cfg, checkpoint, dtype=np.float32):
    model = build_model(cfg, dtype)
    nk.load_checkpoint(model, checkpoint)
    return model


__all__ = [
    "CSV_HEADER", "Metrics", "PROTOCOLS", "TrainConfig", "TrainResult", "batches", "branch_losses",
    "build_model", "cosine_lr", "evaluate", "feature_invariance", "load_model", "segmentation_defaults",
    "segmentation_scores", "shape_iou", "total_loss", "train",
]
