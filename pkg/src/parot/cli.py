"""Command-line entry point: ``parot <command> [--config FILE] [--key value ...]``.

Every configuration key can be given in a ``key = value`` file or as a
``--key-name value`` flag; flags win over the file, the file wins over the
built-in defaults.
"""

import argparse
import csv
import os
import sys
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numkernel as nk
from .data import (
    PROTOCOLS,
    export_colored_ply,
    gen_classification_set,
    gen_segmentation_set,
    load_dataset,
    save_dataset,
)
from .geom import random_rotation_so3
from .hierarchy import RELATION_WIDTH
from .seghead import PROPAGATION
from .train import TrainConfig, evaluate, load_model, segmentation_defaults, train

COMMANDS = ("gen-data", "train-cls", "train-seg", "eval", "check-invariance", "export-features")
ORACLE_TOLERANCE = 1e-9


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- configuration registry


@dataclass(frozen=True)
class Key:
    kind: type
    low: float = None
    high: float = None
    choices: tuple = None
    help: str = ""

    def parse(self, name, text):
        text = str(text).strip()
        try:
            if self.kind is bool:
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                value = low in ("true", "1", "yes")
            elif self.kind is int:
                value = int(text, 10)
            elif self.kind is float:
                value = float(text)
            else:
                value = text
        except ValueError:
            raise UsageError(f"{name}: cannot read '{text}' as {self.kind.__name__}") from None
        if self.choices is not None and value not in self.choices:
            raise UsageError(f"{name}: '{value}' is not one of {', '.join(self.choices)}")
        if self.low is not None and value < self.low:
            raise UsageError(f"{name}: {value} is below the minimum {self.low}")
        if self.high is not None and value > self.high:
            raise UsageError(f"{name}: {value} is above the maximum {self.high}")
        return value


def _registry():
    reg = {}
    for f in fields(TrainConfig):
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(getattr(f.type, "__name__", f.type), f.type)
        reg[f.name] = Key(kind, low=1 if kind is int else None)
    reg["task"] = Key(str, choices=("cls", "seg"))
    reg["seed"] = Key(int, 0, 2**64 - 1)
    reg["protocol"] = Key(str, choices=tuple(PROTOCOLS))
    reg["relation_mode"] = Key(str, choices=tuple(RELATION_WIDTH) + ("orientation_only", "position_only"))
    reg["neighbor_search"] = Key(str, choices=("knn", "ball"))
    reg["propagation"] = Key(str, choices=tuple(PROPAGATION))
    reg["radius"] = Key(float, low=1e-6)
    reg["dropout"] = Key(float, 0.0, 0.99)
    for name in ("lr_start", "lr_end"):
        reg[name] = Key(float, 1e-12, 1.0)
    for name in ("weight_decay", "alpha_local", "alpha_global", "beta_local", "beta_global"):
        reg[name] = Key(float, low=0.0)
    reg.update(
        out=Key(str, help="output directory"),
        data=Key(str, help="dataset directory holding train/ and test/ (generated in memory when unset)"),
        checkpoint=Key(str, help="checkpoint to evaluate or export from"),
        data_seed=Key(int, 0, 2**64 - 1, help="dataset seed (defaults to seed); the test split uses data_seed + 1"),
        train_count=Key(int, 1, help="training samples (per class for classification)"),
        test_count=Key(int, 1, help="test samples (per class for classification)"),
        n_points=Key(int, 64, help="points per cloud"),
        channels=Key(str, help="three content channels for export-features, e.g. 0,1,2"),
        export_count=Key(int, 1, help="clouds written by export-features"),
        clouds=Key(int, 1, help="clouds used by check-invariance"),
        rotations=Key(int, 1, help="rotations per cloud used by check-invariance"),
    )
    return reg


REGISTRY = _registry()
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
TASK_DATA = {
    "cls": dict(train_count=100, test_count=40, n_points=256),
    "seg": dict(train_count=200, test_count=50, n_points=512),
}


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment, unknown keys are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise UsageError(f"cannot read config '{path}': {err.strerror}") from None
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value', got '{raw.strip()}'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in REGISTRY:
            raise UsageError(f"{path}:{no}: unknown key '{key}'")
        out[key] = REGISTRY[key].parse(f"{path}:{no}: {key}", value)
    return out


def build_parser():
    parser = _Parser(prog="parot", description="Rotation-invariant point-cloud networks on synthetic shapes.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    for name, key in REGISTRY.items():
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar=key.kind.__name__.upper(),
                            help=key.help or None)
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def effective_config(args, task):
    """Defaults, then task defaults, then the config file, then flags."""
    cfg = dict(asdict(segmentation_defaults() if task == "seg" else TrainConfig()))
    cfg.update(TASK_DATA[task])
    cfg.update(out=None, data=None, checkpoint=None, data_seed=None, channels="0,1,2",
               export_count=4, clouds=20, rotations=20)
    if args.config:
        cfg.update(read_config(args.config))
    for name, key in REGISTRY.items():
        text = getattr(args, name)
        if text is not None:
            cfg[name] = key.parse("--" + name.replace("_", "-"), text)
    if cfg["data_seed"] is None:
        cfg["data_seed"] = cfg["seed"]
    if task == "seg" or args.command.startswith("train"):
        cfg["task"] = task
    return cfg


def train_config(cfg):
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    except ValueError as err:
        raise UsageError(str(err)) from None


def echo_config(cfg, stream):
    for k in sorted(cfg):
        v = cfg[k]
        stream.write(f"# {k} = {str(v).lower() if isinstance(v, bool) else v}\n")
    stream.flush()


# ---------------------------------------------------------------- data


def generate(cfg):
    seed = cfg["data_seed"]
    if cfg["task"] == "seg":
        tr = gen_segmentation_set(cfg["train_count"], cfg["n_points"], seed, "train")
        te = gen_segmentation_set(cfg["test_count"], cfg["n_points"], seed + 1, "test")
    else:
        tr = gen_classification_set(cfg["train_count"], cfg["n_points"], seed, "train")
        te = gen_classification_set(cfg["test_count"], cfg["n_points"], seed + 1, "test")
    return tr, te


def datasets(cfg):
    if cfg["data"] is None:
        return generate(cfg)
    return (load_dataset(os.path.join(cfg["data"], "train")), load_dataset(os.path.join(cfg["data"], "test")))


def _require(cfg, *names):
    for n in names:
        if cfg.get(n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for this command")


def _model_config(cfg, stream):
    """Training configuration of a checkpoint: ``config.txt`` beside it, overridden by explicit settings."""
    side = os.path.join(os.path.dirname(os.path.abspath(cfg["checkpoint"])), "config.txt")
    tc = dict(cfg)
    if os.path.exists(side):
        stream.write(f"# model configuration from {side}\n")
        saved = read_config(side)
        tc.update({k: v for k, v in saved.items() if k in TRAIN_KEYS and k not in cfg["_explicit"]})
    return train_config(tc)


def _test_set(cfg, tc):
    """Test split matching the model's task; sizes default per task unless set explicitly."""
    d = dict(cfg, task=tc.task)
    d.update({k: v for k, v in TASK_DATA[tc.task].items() if k not in cfg["_explicit"]})
    return datasets(d)[1]


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, out):
    _require(cfg, "out")
    tr, te = generate(cfg)
    for ds in (tr, te):
        save_dataset(ds, os.path.join(cfg["out"], ds.split))
    out.write(f"wrote {len(tr)} train and {len(te)} test samples to {cfg['out']}\n")


def cmd_train(cfg, out):
    _require(cfg, "out")
    tc = train_config(cfg)
    tr, te = datasets(cfg)
    result = train(tr, te, tc, cfg["out"], log=lambda m: (out.write(m + "\n"), out.flush()))
    out.write(f"checkpoints: {result.best_path} {result.last_path}\nlog: {result.log_path}\n")


def cmd_eval(cfg, out):
    _require(cfg, "checkpoint")
    tc = _model_config(cfg, out)
    model = load_model(tc, cfg["checkpoint"])
    te = _test_set(cfg, tc)
    protocols = [cfg["protocol"]] if "protocol" in cfg["_explicit"] else list(PROTOCOLS)
    rows = []
    for p in protocols:
        m = evaluate(model, te, p, seed=cfg["seed"], batch_size=tc.batch_size,
                     patch_rotation=tc.eval_patch_rotation)
        rows.append([p, m.loss, m.accuracy, m.imiou, m.cmiou, m.inv_gap])
    header = ["protocol", "loss", "accuracy", "imiou", "cmiou", "inv_gap"]
    out.write("".join(f"{h:>10}" for h in header) + "\n")
    for r in rows:
        out.write(f"{r[0]:>10}" + "".join(f"{v:>10.4f}" for v in r[1:]) + "\n")
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        path = os.path.join(cfg["out"], "eval.csv")
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([[r[0]] + [f"{v:.6f}" for v in r[1:]] for r in rows])
        out.write(f"wrote {path}\n")


def cmd_check_invariance(cfg, out):
    from .checks import oracle_pipeline_residual, relation_residual

    rel = relation_residual(1000, seed=cfg["seed"])
    out.write(f"relation residual (1000 trials, 64-bit): {rel:.3e}\n")
    rep = oracle_pipeline_residual(cfg["clouds"], cfg["rotations"], seed=cfg["seed"])
    out.write(f"oracle-conditioned residual, classification logits: {rep.classification:.3e}\n")
    out.write(f"oracle-conditioned residual, propagation outputs: {rep.propagation:.3e}\n")
    ok = rep.worst < ORACLE_TOLERANCE
    out.write(f"oracle-conditioned invariance residual {rep.worst:.3e} "
              f"({'below' if ok else 'ABOVE'} {ORACLE_TOLERANCE:g})\n")
    if cfg["checkpoint"]:
        tc = _model_config(cfg, out)
        model = load_model(tc, cfg["checkpoint"])
        te = _test_set(cfg, tc)
        m = evaluate(model, te, "so3so3", seed=cfg["seed"], batch_size=tc.batch_size,
                     patch_rotation=tc.eval_patch_rotation)
        out.write(f"trained model: content cosine {m.cosine:.4f}, invariance gap {m.inv_gap:.4f}, "
                  f"mean |d1.d2| {m.orth:.4f}\n")
    if not ok:
        raise RuntimeError(f"oracle-conditioned invariance residual {rep.worst:.3e} exceeds {ORACLE_TOLERANCE:g}")


def _channels(text):
    try:
        ch = [int(c) for c in text.split(",")]
    except ValueError:
        raise UsageError(f"--channels: expected three comma-separated integers, got '{text}'") from None
    if len(ch) != 3 or min(ch) < 0:
        raise UsageError(f"--channels: expected three non-negative channel indices, got '{text}'")
    return ch


def point_features(model, points, k):
    """Content feature of every point's k-nearest-neighbour patch (N, C)."""
    from .geom import knn

    pts = np.asarray(points, dtype=np.float64)
    nbr = knn(pts, pts, k)
    with nk.no_grad():
        f, _, _ = model.local_dis.encode(pts[nbr] - pts[:, None, :], content_only=True)
    return f.data.astype(np.float64)


def cmd_export_features(cfg, out):
    _require(cfg, "checkpoint", "out")
    ch = _channels(cfg["channels"])
    tc = _model_config(cfg, out)
    model = load_model(tc, cfg["checkpoint"]).eval()
    width = model.local_dis.content.weight.shape[1]
    if max(ch) >= width:
        raise UsageError(f"--channels: index {max(ch)} out of range for {width} content channels")
    te = _test_set(cfg, tc)
    os.makedirs(cfg["out"], exist_ok=True)
    rng = np.random.default_rng([cfg["seed"], 11])
    k = tc.k_local
    for i, s in enumerate(te.samples[: cfg["export_count"]]):
        R = random_rotation_so3(rng)
        f0 = point_features(model, s.points, k)[:, ch]
        f1 = point_features(model, s.points @ R, k)[:, ch]
        # shared colour scale so the two poses are directly comparable
        lo, hi = f0.min(axis=0), f0.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            export_colored_ply(s.points, (f0 - lo) / span, os.path.join(cfg["out"], f"{i:03d}.ply"))
            export_colored_ply(s.points @ R, (f1 - lo) / span, os.path.join(cfg["out"], f"{i:03d}_rotated.ply"))
    out.write(f"wrote {2 * min(len(te), cfg['export_count'])} PLY files to {cfg['out']}\n")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-cls": cmd_train,
    "train-seg": cmd_train,
    "eval": cmd_eval,
    "check-invariance": cmd_check_invariance,
    "export-features": cmd_export_features,
}


def run(argv, out=None, err=None):
    """Run one command; returns the exit status (0 ok, 1 usage error, 2 runtime failure)."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        task = "seg" if args.command == "train-seg" else "cls"
        cfg = effective_config(args, task)
        explicit = set(read_config(args.config)) if args.config else set()
        explicit |= {n for n in REGISTRY if getattr(args, n) is not None}
        if args.command == "gen-data" and "task" in explicit:
            cfg.update({k: v for k, v in TASK_DATA[cfg["task"]].items() if k not in explicit})
        if args.command.startswith("train"):
            train_config(cfg)
        echo_config(cfg, out)
        cfg["_explicit"] = explicit
        HANDLERS[args.command](cfg, out)
    except UsageError as e:
        err.write(f"parot: usage error: {e}\n")
        return 1
    except KeyboardInterrupt:
        err.write("parot: interrupted\n")
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to status 2
        cmd = argv[0] if argv else "?"
        err.write(f"parot {cmd}: {type(e).__name__}: {e}\n")
        return 2
    return 0


def main(argv=None):
    sys.exit(run(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
