import csv
import subprocess
import sys

import numpy as np
import pytest

from mvnet.cli import main
from mvnet.tensor import read_tensor, write_tensor

REFERENCE_AUTOENCODER = ("C(96,11,3)-N-C(256,5,2)-N-C(384,3,2)-N-FC(4096)-FC(4096)"
                     "-DC(96,11,3)-N-DC(256,5,2)-N-DC(384,3,2)")

TINY_CONFIG = """\
# small enough for a test run
seed = 4
autoencoder_arch = C(2,3,2)-N-C(4,3,1)-N-FC(8)-FC(8)-DC(4,3,1)-N-DC(2,3,2)
predictor_arch = FC(6)-FC(3)
temporal_plan = (3,2),(2,2)
velocity_factors = 1,1/2
batch_size = 4
epochs_pretrain = 2
epochs_autoencoder = 1
epochs_joint = 2
"""


def _test_labels(data):
    with open(data / "split.csv") as fh:
        parts = dict(csv.reader(fh))
    with open(data / "labels.csv") as fh:
        return [int(c) for i, c in csv.reader(fh) if parts.get(i) == "test"]


def test_spline_weights_command(tmp_path, capsys):
    out = tmp_path / "w.mvt"
    assert main(["spline-weights", "--knots", "0,1,2,3", "--queries", "1/2,3/2,5/2",
                 "--out", str(out), "--csv", str(tmp_path / "w.csv"),
                 "--plot", str(tmp_path / "w.png")]) == 0
    W = read_tensor(out)
    assert W.shape == (3, 4)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "w.csv", delimiter=","), W)
    assert (tmp_path / "w.png").stat().st_size > 0


def test_resample_factor_one_bit_equal(tmp_path):
    clip = np.random.default_rng(0).uniform(size=(9, 1, 6, 6))
    write_tensor(tmp_path / "c.mvt", clip)
    assert main(["resample", "--in", str(tmp_path / "c.mvt"), "--factor", "1",
                 "--out", str(tmp_path / "o.mvt")]) == 0
    assert read_tensor(tmp_path / "o.mvt").tobytes() == clip.tobytes()
    assert main(["resample", "--in", str(tmp_path / "c.mvt"), "--factor", "2/3",
                 "--out", str(tmp_path / "t.mvt")]) == 0
    assert read_tensor(tmp_path / "t.mvt").shape == clip.shape


def test_parse_arch_prints_canonical(capsys):
    assert main(["parse-arch", "--arch", REFERENCE_AUTOENCODER.replace("-", " - ")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == REFERENCE_AUTOENCODER


def test_parse_arch_shape_table(capsys):
    assert main(["parse-arch", "--arch", REFERENCE_AUTOENCODER, "--input", "9x3x145x145",
                 "--temporal", "(3,2),(2,2),(2,1)"]) == 0
    out = capsys.readouterr().out
    assert "9x3x145x145" in out and "total parameters" in out


@pytest.mark.parametrize("argv, code", [
    (["parse-arch", "--arch", "C(96,11)"], 1),
    (["parse-arch", "--arch", "FC(3)", "--bogus"], 1),
    (["frobnicate"], 1),
    ([], 1),
    (["resample", "--in", "/nonexistent.mvt", "--factor", "1", "--out", "/tmp/x.mvt"], 2),
    (["spline-weights", "--knots", "0,0,1", "--queries", "0", "--out", "/tmp/x.mvt"], 2),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_bad_tensor_file_is_data_error(tmp_path):
    (tmp_path / "bad.mvt").write_bytes(b"MVT9")
    assert main(["resample", "--in", str(tmp_path / "bad.mvt"), "--factor", "1",
                 "--out", str(tmp_path / "o.mvt")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_numeric_failure(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--classes", "3", "--per-class", "4", "--dims", "25x9x9",
                 "--out", str(data)]) == 0
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(TINY_CONFIG + "lr_autoencoder = 1e200\nclip_norm = 0\n")
    assert main(["pretrain", "--config", str(cfg), "--data", str(data),
                 "--out", str(tmp_path / "ckpt")]) == 3


def test_full_pipeline(tmp_path, capsys):
    data, ckpt, model, report = (tmp_path / d for d in ("data", "ckpt", "model", "report"))
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(TINY_CONFIG)
    assert main(["gen-data", "--classes", "3", "--per-class", "6", "--dims", "25x9x9",
                 "--strips", "--out", str(data)]) == 0
    assert (data / "strips").is_dir() and (data / "labels.csv").exists()
    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    assert (ckpt / "manifest.txt").exists() and (ckpt / "pretrain_curves.png").exists()
    assert main(["train", "--config", str(cfg), "--data", str(data), "--init", str(ckpt),
                 "--labeled-fraction", "0.5", "--out", str(model)]) == 0
    for name in ("loss_curves.csv", "schedule.csv", "loss_curves.png", "labeled.csv"):
        assert (model / name).exists(), name
    capsys.readouterr()
    assert main(["eval", "--model", str(model), "--data", str(data), "--out", str(report),
                 "--threads", "2"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("accuracy=")
    rows = np.loadtxt(report / "confusion.csv", delimiter=",", skiprows=1,
                      usecols=(1, 2, 3))
    present = set(_test_labels(data))
    expected = [1.0 if k in present else 0.0 for k in range(3)]
    np.testing.assert_allclose(rows.sum(axis=1), expected, atol=1e-9)
    assert (report / "confusion.png").stat().st_size > 0
    # same inputs, same bytes
    assert main(["eval", "--model", str(model), "--data", str(data),
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "confusion.csv").read_bytes() == \
        (report / "confusion.csv").read_bytes()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "mvnet.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "spline-weights" in res.stdout
