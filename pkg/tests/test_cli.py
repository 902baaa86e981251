import io
import os

import pytest

from parot import cli
from parot.data import load_ply

TINY = ["--n-local", "16", "--k-local", "8", "--n-global", "8", "--k-intra", "4", "--batch-size", "4"]


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_gen_data_is_deterministic(tmp_path):
    args = ["--seed", "7", "--train-count", "2", "--test-count", "1", "--n-points", "64"]
    assert run("gen-data", *args, "--out", str(tmp_path / "a"))[0] == 0
    assert run("gen-data", *args, "--out", str(tmp_path / "b"))[0] == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert fa == fb and "train/index.csv" in fa and "test/00003.txt" in fa


def test_gen_data_segmentation(tmp_path):
    code, out, _ = run("gen-data", "--task", "seg", "--train-count", "2", "--test-count", "2", "--out", str(tmp_path))
    assert code == 0 and "2 train and 2 test" in out


@pytest.mark.parametrize("argv,match", [
    (["frobnicate"], "invalid choice"),
    (["train-cls", "--epochs", "zero"], "cannot read"),
    (["train-cls", "--protocol", "xy"], "not one of"),
    (["train-cls", "--relation-mode", "diagonal"], "not one of"),
    (["train-cls", "--radius", "-1"], "below the minimum"),
    (["train-cls", "--unknown", "1"], "unrecognized"),
    (["train-cls"], "--out is required"),
    (["train-cls", "--n-local", "8", "--out", "x"], "k_intra"),
    (["eval"], "--checkpoint is required"),
    (["train-cls", "--config", "/nonexistent.cfg"], "cannot read config"),
])
def test_usage_errors_exit_1(argv, match):
    code, _, err = run(*argv)
    assert code == 1
    assert match in err


def test_config_file_rules(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 3  # trailing\nprotocol = so3so3\n")
    assert cli.read_config(cfg) == {"epochs": 3, "protocol": "so3so3"}
    cfg.write_text("bogus = 1\n")
    with pytest.raises(cli.UsageError, match=":1: unknown key 'bogus'"):
        cli.read_config(cfg)
    cfg.write_text("epochs 3\n")
    with pytest.raises(cli.UsageError, match="key = value"):
        cli.read_config(cfg)
    cfg.write_text("use_intra = maybe\n")
    with pytest.raises(cli.UsageError, match="bool"):
        cli.read_config(cfg)


def test_every_training_key_has_a_flag():
    parser = cli.build_parser()
    flags = {a.dest for a in parser._actions}
    assert cli.TRAIN_KEYS <= flags
    for name in ("protocol", "relation_mode", "k_prop", "neighbor_search", "radius", "channels", "seed", "out"):
        assert name in flags


def test_train_eval_export_cycle(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 2\ntrain_count = 2\ntest_count = 2\nn_points = 64\nseed = 3\nprotocol = zz\n")
    out_dir = tmp_path / "run"
    code, out, err = run("train-cls", "--config", str(cfg), "--protocol", "zso3", "--out", str(out_dir), *TINY)
    assert code == 0, err
    assert "# protocol = zso3" in out and "# epochs = 2" in out  # flag beats file, echo is verbatim
    assert {"best.ckpt", "last.ckpt", "log.csv", "config.txt"} <= set(os.listdir(out_dir))

    ckpt = str(out_dir / "last.ckpt")
    code, out, err = run("eval", "--checkpoint", ckpt, "--test-count", "2", "--n-points", "64", "--out", str(tmp_path / "ev"))
    assert code == 0, err
    assert "accuracy" in out and "so3so3" in out
    assert (tmp_path / "ev" / "eval.csv").read_text().startswith("protocol,loss,accuracy")

    code, out, err = run("export-features", "--checkpoint", ckpt, "--channels", "3,1,4", "--export-count", "1",
                         "--test-count", "1", "--n-points", "64", "--out", str(tmp_path / "ply"))
    assert code == 0, err
    pts, col = load_ply(tmp_path / "ply" / "000.ply")
    assert pts.shape == (64, 3) and col.shape == (64, 3)
    assert os.path.exists(tmp_path / "ply" / "000_rotated.ply")

    code, _, err = run("export-features", "--checkpoint", ckpt, "--channels", "1,2", "--out", str(tmp_path / "x"))
    assert code == 1 and "three" in err
    code, _, err = run("export-features", "--checkpoint", ckpt, "--channels", "1,2,999", "--out", str(tmp_path / "x"))
    assert code == 1 and "out of range" in err


def test_check_invariance_reports_residual(tmp_path):
    code, out, err = run("check-invariance", "--clouds", "2", "--rotations", "3")
    assert code == 0, err
    assert "below 1e-09" in out


def test_runtime_failures_exit_2(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run("eval", "--checkpoint", str(bad))
    assert code == 2 and "magic" in err
    code, _, err = run("train-cls", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"), *TINY)
    assert code == 2 and "index.csv" in err
