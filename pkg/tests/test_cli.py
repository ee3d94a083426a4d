import csv
import json

import numpy as np
import pytest
from PIL import Image

from vaelab.cli import RunManifest, fmt, main, read_manifest
from vaelab.datasets import TileSpec, gen_tiles
from vaelab.model import VaeModel, encode
from vaelab.model_io import load_model, save_model
from vaelab.nn import Rng

TILES = ["--dataset", "tiles", "--n-images", "300", "--data-seed", "4"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", *TILES, "--arch", "784,32,4", "--epochs", "2", "--batch", "64",
               "--seed", "3", "--out", str(out)])
    assert rc == 0
    return out


def test_train_outputs(trained_dir):
    assert (trained_dir / "model.vaes").read_bytes()[:4] == b"VAES"
    rows = read_csv(trained_dir / "train_log.csv")
    assert rows[0][:5] == ["batch", "epoch", "loss", "recon", "kl"]
    assert len(rows) == 1 + 2 * 5  # 300 images in batches of 64
    m = read_manifest(trained_dir / "manifest.json")
    assert m.command == "train" and m.seed == 3
    assert m.config["arch"] == "784,32,4"
    assert m.dataset["count"] == 300 and len(m.dataset["sha256"]) == 64
    assert len(m.artifacts) == 2


def test_train_is_byte_identical(tmp_path, trained_dir):
    assert main(["train", *TILES, "--arch", "784,32,4", "--epochs", "2", "--batch", "64",
                 "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.vaes").read_bytes() == (trained_dir / "model.vaes").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (trained_dir / "train_log.csv").read_bytes()


def test_train_zero_epochs(tmp_path):
    assert main(["train", *TILES, "--arch", "784,16,8,3", "--epochs", "0", "--out", str(tmp_path)]) == 0
    m = load_model(tmp_path / "model.vaes")
    assert m.latent_dim == 3
    assert len(read_csv(tmp_path / "train_log.csv")) == 1


def test_default_arch(tmp_path):
    assert main(["train", *TILES, "--epochs", "0", "--out", str(tmp_path)]) == 0
    m = load_model(tmp_path / "model.vaes")
    assert m.latent_dim == 16 and len(m.encoder_body) == 3


@pytest.mark.parametrize("extra", [
    ["--arch", "784,abc,4"],
    ["--arch", "784"],
    ["--quadratic-penalty"],
    ["--batch", "0"],
    ["--arch", "100,8,4"],
])
def test_train_usage_errors(tmp_path, extra):
    assert main(["train", *TILES, "--epochs", "0", *extra, "--out", str(tmp_path)]) == 2


def test_unknown_dataset_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train", "--dataset", "cifar", "--out", str(tmp_path)])
    assert err.value.code == 2


def test_missing_mnist_is_data_error(tmp_path):
    rc = main(["train", "--dataset", "mnist", "--data-dir", str(tmp_path), "--out", str(tmp_path)])
    assert rc == 3


def test_divergence_exit_code(tmp_path):
    rc = main(["train", *TILES, "--arch", "784,16,4", "--epochs", "3", "--lr", "1e4",
               "--out", str(tmp_path)])
    assert rc == 4


def test_stats_csv(tmp_path, trained_dir):
    out = tmp_path / "stats.csv"
    assert main(["stats", "--model", str(trained_dir / "model.vaes"), *TILES, "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["index", "global_mu_variance", "mean_local_variance",
                       "stationarity_sum", "status"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    for r in rows[1:]:
        assert float(r[3]) == pytest.approx(float(r[1]) + float(r[2]), rel=1e-8)
        assert r[4] in ("active", "inactive")
    assert read_manifest(str(out) + ".manifest.json").command == "stats"


def test_stats_untrained_model_sits_at_init_scale(tmp_path):
    # Glorot init leaves the mean heads with dataset variance around 0.01 and the
    # predicted variance near 1, i.e. right on the classifier boundary
    assert main(["train", *TILES, "--epochs", "0", "--out", str(tmp_path)]) == 0
    out = tmp_path / "s.csv"
    assert main(["stats", "--model", str(tmp_path / "model.vaes"), *TILES, "--out", str(out)]) == 0
    rows = read_csv(out)[1:]
    assert len(rows) == 16
    assert all(0.7 < float(r[2]) < 1.4 for r in rows)
    assert all(float(r[1]) < 0.05 for r in rows)


def test_stats_missing_model(tmp_path):
    rc = main(["stats", "--model", str(tmp_path / "nope.vaes"), *TILES, "--out", str(tmp_path / "s.csv")])
    assert rc == 3


def test_stats_corrupt_model(tmp_path):
    bad = tmp_path / "bad.vaes"
    bad.write_bytes(b"VAES\x01\x00")
    assert main(["stats", "--model", str(bad), *TILES, "--out", str(tmp_path / "s.csv")]) == 3


def test_generate_grid(tmp_path, trained_dir):
    out = tmp_path / "g.pgm"
    assert main(["generate", "--model", str(trained_dir / "model.vaes"), "--n", "25",
                 "--seed", "1", "--out", str(out)]) == 0
    with Image.open(out) as im:
        assert im.size == (148, 148) and im.mode == "L"
    assert out.read_bytes().startswith(b"P5\n148 148\n255\n")
    first = out.read_bytes()
    assert main(["generate", "--model", str(trained_dir / "model.vaes"), "--n", "25",
                 "--seed", "1", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_generate_padding(tmp_path, trained_dir):
    out = tmp_path / "g.pgm"
    assert main(["generate", "--model", str(trained_dir / "model.vaes"), "--n", "10",
                 "--out", str(out)]) == 0
    px = np.asarray(Image.open(out))
    assert px.shape == (3 * 28 + 4, 4 * 28 + 6)
    assert px[60:, 90:].max() == 0  # the two padding cells


def test_generate_zeroed_twin(tmp_path, trained_dir):
    out = tmp_path / "g.pgm"
    assert main(["generate", "--model", str(trained_dir / "model.vaes"), "--n", "9",
                 "--zero-vars", "0,1,2,3", "--out", str(out)]) == 0
    twin = np.asarray(Image.open(tmp_path / "g_zeroed.pgm"))
    # every latent zeroed: all nine cells decode the same point
    assert np.array_equal(twin[:28, :28], twin[60:88, 60:88])
    man = read_manifest(str(out) + ".manifest.json")
    assert man.config["zeroed"] == [0, 1, 2, 3] and man.config["relative_mse"] > 0
    assert len(man.artifacts) == 2


def test_generate_zero_inactive_needs_dataset(tmp_path, trained_dir):
    rc = main(["generate", "--model", str(trained_dir / "model.vaes"), "--zero-inactive",
               "--out", str(tmp_path / "g.pgm")])
    assert rc == 2


def test_generate_bad_index(tmp_path, trained_dir):
    rc = main(["generate", "--model", str(trained_dir / "model.vaes"), "--zero-vars", "7",
               "--out", str(tmp_path / "g.pgm")])
    assert rc == 2


def test_analyze_kl(tmp_path):
    out = tmp_path / "kl.csv"
    assert main(["analyze-kl", "--rho2", "1", "--sigma2-min", "0.001", "--sigma2-max", "1",
                 "--points", "1000", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["sigma2", "kl_rho2=1"]
    assert rows[-1] == ["min_sigma2", "0.5"]
    body = np.array(rows[1:-1], dtype=float)
    step = body[1, 0] - body[0, 0]
    assert abs(body[np.argmin(body[:, 1]), 0] - 0.5) <= step


def test_analyze_kl_three_curves(tmp_path):
    out = tmp_path / "kl.csv"
    assert main(["analyze-kl", "--rho2", "0.5,1,2", "--points", "50", "--out", str(out)]) == 0
    assert all(len(r) == 4 for r in read_csv(out))


@pytest.mark.parametrize("flags", [["--sigma2-min", "0"], ["--sigma2-min", "-1"],
                                   ["--rho2", "-1"], ["--rho2", "x"], ["--points", "1"]])
def test_analyze_kl_usage_errors(tmp_path, flags):
    args = ["analyze-kl"] + (["--rho2", "1"] if "--rho2" not in flags else []) + flags
    assert main(args + ["--out", str(tmp_path / "k.csv")]) == 2


def test_encode_rows(tmp_path):
    ds = gen_tiles(80, TileSpec(), Rng(0))
    model = VaeModel.build([784, 16, 3], Rng(1))
    save_model(model, tmp_path / "m.vaes")
    out = tmp_path / "enc.csv"
    assert main(["encode", "--model", str(tmp_path / "m.vaes"), "--dataset", "tiles",
                 "--n-images", "80", "--limit", "60", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["label", "mu_0", "mu_1", "mu_2", "sigma2_0", "sigma2_1", "sigma2_2"]
    assert len(rows) == 61
    assert all(len(r) == 7 for r in rows)
    enc = encode(model, ds.images[:60])
    assert rows[1][0] == str(ds.labels[0])
    assert [float(v) for v in rows[1][1:4]] == [float(fmt(v)) for v in enc.mu[0]]


def test_experiment_noise_null(tmp_path, trained_dir):
    out = tmp_path / "noise.csv"
    stats = tmp_path / "s.csv"
    main(["stats", "--model", str(trained_dir / "model.vaes"), *TILES, "--out", str(stats)])
    var = next(int(r[0]) for r in read_csv(stats)[1:] if r[4] == "active")
    assert main(["experiment-noise", "--model", str(trained_dir / "model.vaes"), *TILES,
                 "--var", str(var), "--max-amplitude", "0", "--hold-epochs", "1",
                 "--recovery-epochs", "1", "--batch", "64", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0][:6] == ["step", "amplitude", "kl_contribution", "reconstruction_gain",
                           "global_mu_variance", "mean_local_variance"]
    assert all(float(r[1]) == 0.0 for r in rows[1:])
    assert [r[-1] for r in rows[1:]] == ["baseline", "inject", "hold", "recover"]


def test_experiment_noise_inactive_variable(tmp_path):
    # untrained heads zeroed and log-variance 0: every latent looks collapsed
    model = VaeModel.build([784, 8, 2], Rng(0))
    model.mu_head.W[:] = 0.0
    model.logvar_head.W[:] = 0.0
    save_model(model, tmp_path / "m.vaes")
    rc = main(["experiment-noise", "--model", str(tmp_path / "m.vaes"), *TILES, "--var", "1",
               "--out", str(tmp_path / "n.csv")])
    assert rc == 3


def test_manifest_roundtrip():
    m = RunManifest("train", {"a": 1, "b": [1, 2]}, 7, {"count": 3, "sha256": "x"}, ["p"], 1.5)
    assert RunManifest.from_json(m.to_json()) == m
    assert json.loads(m.to_json())["version"] == m.version


def test_fmt_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(np.float64(123456789.123)) == "123456789"
    assert fmt(5) == "5" and fmt(True) == "true"
