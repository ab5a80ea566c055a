import csv
import json

import numpy as np
import pytest

from birads_mtl import cli
from birads_mtl import synthetic as S
from birads_mtl.grid import write_pgm

from test_features import DISC_C, DISC_R_RAW, disc_mask

SUBCOMMANDS = ("features", "synth", "train", "sweep", "eval", "compare", "gradcheck")
TINY = ["--n-train", "8", "--n-val", "4", "--size", "16", "--max-epochs", "2",
        "--batch-size", "4"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def disc_files(tmp_path):
    mask, image = tmp_path / "mask.pgm", tmp_path / "flat.pgm"
    write_pgm(mask, disc_mask())
    write_pgm(image, np.full((64, 64), 0.4))
    return mask, image


def test_features_on_disc(capsys, disc_files):
    mask, image = disc_files
    code, out, _ = run(capsys, "features", mask, "--image", image)
    assert code == 0
    feats = json.loads(out)
    assert feats["C"] == pytest.approx(DISC_C, rel=1e-12)
    assert feats["R_raw"] == pytest.approx(DISC_R_RAW, rel=1e-12)
    assert feats["T_raw"] == pytest.approx(0.0, abs=1e-12)
    assert not {"R", "T", "phi", "w"} & set(feats)


def test_features_mask_only(capsys, disc_files):
    code, out, _ = run(capsys, "features", disc_files[0])
    feats = json.loads(out)
    assert code == 0 and "T_raw" not in feats and "R" not in feats


def test_features_missing_file(capsys, tmp_path):
    missing = tmp_path / "nope.pgm"
    code, _, err = run(capsys, "features", missing)
    assert code == cli.EXIT_IO
    assert str(missing) in err


def test_features_garbage_file(capsys, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n4 4\n255\nxx")
    code, _, err = run(capsys, "features", bad)
    assert code == cli.EXIT_IO and str(bad) in err


def test_train_twice_identical_then_eval(capsys, tmp_path):
    for name in ("a", "b"):
        code, _, err = run(capsys, "train", "--seed", 3, "--out", tmp_path / name, *TINY)
        assert code == 0, err
    for name in ("history.csv", "epochs.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / cli.MANIFEST_NAME).read_text())
    assert manifest["subcommand"] == "train" and manifest["seed"] == 3

    ckpt = tmp_path / "a" / "checkpoint.bin"
    for name in ("e1", "e2"):
        code, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--out", tmp_path / name,
                           "--n", 6, "--size", 16)
        assert code == 0, err
    assert (tmp_path / "e1" / "per_image.csv").read_bytes() == \
        (tmp_path / "e2" / "per_image.csv").read_bytes()
    with open(tmp_path / "e1" / "per_image.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and tuple(rows[0]) == cli.PER_IMAGE_FIELDS

    code, out, _ = run(capsys, "features", _mask_file(tmp_path), "--checkpoint", ckpt)
    assert code == 0 and {"R", "w"} <= set(json.loads(out))


def _mask_file(tmp_path):
    path = tmp_path / "m16.pgm"
    write_pgm(path, S.make_dataset(1, seed=5, size=16)[0].mask_gt)
    return path


def test_output_root_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    code, _, _ = run(capsys, "synth", "--out", "data", "--seed", 1, "--n", 3, "--size", 16)
    assert code == 0
    assert (tmp_path / "data" / "manifest.csv").exists()
    assert (tmp_path / "data" / cli.MANIFEST_NAME).exists()


def test_train_from_manifest(capsys, tmp_path):
    run(capsys, "synth", "--out", tmp_path / "tr", "--seed", 1, "--n", 6, "--size", 16)
    run(capsys, "synth", "--out", tmp_path / "va", "--seed", 2, "--n", 4, "--size", 16)
    code, out, err = run(capsys, "train", "--seed", 0, "--out", tmp_path / "run",
                         "--train", tmp_path / "tr" / "manifest.csv",
                         "--val", tmp_path / "va" / "manifest.csv", "--max-epochs", 1)
    assert code == 0, err
    assert "best_epoch" in json.loads(out)


def test_compare_identical_columns_is_numerical_error(capsys, tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("name,dice\na,0.5\nb,0.7\n")
    code, _, err = run(capsys, "compare", path, path)
    assert code == cli.EXIT_NUMERIC and "numerical" in err


def test_compare_reports_statistic(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("dice\n" + "\n".join(map(str, [0.9, 0.8, 0.7, 0.95, 0.85])) + "\n")
    b.write_text("dice\n" + "\n".join(map(str, [0.8, 0.75, 0.72, 0.9, 0.6])) + "\n")
    code, out, _ = run(capsys, "compare", a, b, "--out", tmp_path / "cmp")
    res = json.loads(out)
    assert code == 0 and res["w_plus"] == 14 and res["w_minus"] == 1
    assert (tmp_path / "cmp" / "wilcoxon.json").exists()


def test_compare_missing_column(capsys, tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("name,auc\na,0.5\n")
    assert run(capsys, "compare", path, path)[0] == cli.EXIT_INPUT


def test_config_error_exit(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": "lots"}))
    code, _, err = run(capsys, "train", "--seed", 0, "--config", cfg, "--out", tmp_path / "r")
    assert code == cli.EXIT_CONFIG and "alpha" in err


def test_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 0.3, "patience": 4}))
    args = cli.build_parser().parse_args(
        ["train", "--seed", "5", "--out", str(tmp_path), "--config", str(cfg), "--alpha", "0.2"])
    config = cli.build_config(args)
    assert (config.alpha, config.patience, config.seed) == (0.2, 4, 5)


def test_unknown_flag_is_usage_error(capsys):
    code, _, _ = run(capsys, "train", "--seed", 0, "--out", "x", "--bogus")
    assert code == cli.EXIT_USAGE


def test_train_requires_seed(capsys):
    assert run(capsys, "train", "--out", "x")[0] == cli.EXIT_USAGE


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help(capsys, sub):
    code, out, _ = run(capsys, sub, "--help")
    assert code == 0 and "usage: birads-mtl " + sub in out
    assert "(default: None)" not in out


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--instances", 2, "--probes", 4, "--size", 8,
                       "--out", tmp_path)
    res = json.loads(out)
    assert code == 0 and res["passed"]
    assert set(res["targets"]) == set(cli.gc.TARGETS)


@pytest.mark.slow
def test_gradcheck_defaults(capsys):
    code, out, _ = run(capsys, "gradcheck", "--probes", 50, "--seed", 3)
    assert code == 0 and json.loads(out)["passed"]


def test_gradcheck_failure_exit(capsys):
    code, _, err = run(capsys, "gradcheck", "--instances", 1, "--probes", 2, "--size", 8,
                       "--step", "0.5", "--rtol", "1e-12", "--atol", "0")
    assert code == cli.EXIT_NUMERIC and "tolerance" in err
