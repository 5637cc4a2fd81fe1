import os

import numpy as np
import pytest

from signet import cli, config, flatconf, models, sigsynth, transforms, verify
from signet.exceptions import ConfigError

TINY_DATA = [
    "--data.schemes", "BPSK,16QAM", "--data.symbols_per_sample", "4", "--data.snr_grid_db", "10,20",
    "--data.samples_per_class_per_snr", "10", "--data.seed", "5",
]
TINY_MODEL = ["--model.widths", "4,8", "--model.blocks", "1,1", "--model.stem_kernel", "3",
              "--model.stem_stride", "1", "--train.epochs", "2", "--train.batch_size", "8"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv(config.RUNS_ENV, str(root))
    return root


@pytest.fixture
def tiny_dataset(tmp_path):
    path = str(tmp_path / "tiny.sigd")
    assert cli.main(["generate", "--out", path, *TINY_DATA]) == 0
    return path


# -- config ------------------------------------------------------------------------------


def test_flat_round_trip():
    cfg = config.preset("toy4").update({"model.k": "5", "train.optimizer": "sgd", "eta_fracs": "0.5,1"})
    text = cfg.dumps()
    again = config.RunConfig().update(flatconf.loads(text))
    assert again == cfg
    assert again.model.k == 5 and again.run.eta_fracs == (0.5, 1.0)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config.RunConfig().update({"model.depth": "3"})
    with pytest.raises(ConfigError):
        config.RunConfig().update({"optimiser.lr": "3"})
    with pytest.raises(ConfigError):
        config.RunConfig().update({"epochs": "3"})


def test_config_file_layering(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\npreset=toy4\nmodel.k=5\ntrain.epochs=7\n")
    cfg = config.load_config(path, overrides={"train.epochs": "9"})
    assert cfg.data.schemes == ("BPSK", "4FSK", "16QAM", "4PAM")
    assert (cfg.model.k, cfg.train.epochs) == (5, 9)


def test_presets_geometry():
    rml = config.preset("rml-mini")
    assert len(rml.data.schemes) == 11 and len(rml.data.snr_grid_db) == 20 and rml.data.length == 128
    sig = config.preset("sig2019-mini")
    assert len(sig.data.schemes) == 12 and len(sig.data.snr_grid_db) == 26 and sig.data.length == 512
    toy = config.preset("toy4")
    assert toy.data.samples_per_class_per_snr == 334 and toy.data.snr_grid_db == (10, 14, 18)
    with pytest.raises(ConfigError):
        config.preset("nope")


def test_runs_root_from_env(monkeypatch):
    monkeypatch.setenv(config.RUNS_ENV, "/somewhere")
    assert config.RunConfig().runs_root() == "/somewhere"
    assert config.RunConfig().update({"run_root": "/here"}).runs_root() == "/here"


# -- generate ----------------------------------------------------------------------------


def test_generate_sig2019_mini_preset(tmp_path):
    path = str(tmp_path / "sig.sigd")
    assert cli.main(["generate", "--preset", "sig2019-mini", "--out", path]) == 0
    ds = sigsynth.read_dataset(path)
    assert ds.X.shape == (12 * 26 * 50, 2, 512)
    assert {len(v) for v in ds.cells().values()} == {50}
    # regenerate a few samples in isolation from their stream keys
    cfg = config.preset("sig2019-mini").data
    for pos in (0, 777, 15599):
        label, rest = divmod(pos, 26 * 50)
        snr_i, j = divmod(rest, 50)
        s = sigsynth.generate_sample(cfg, cfg.schemes[label], cfg.snr_grid_db[snr_i], j, label)
        np.testing.assert_array_equal(ds.X[pos], np.stack([s.i, s.q]).astype(np.float32))
    assert "data.seed=0" in open(path + ".config").read()


def test_generate_single_sample(tmp_path):
    path = str(tmp_path / "one.sigd")
    args = ["generate", "--out", path, "--data.schemes", "QPSK", "--data.snr_grid_db", "0",
            "--data.samples_per_class_per_snr", "1", "--data.symbols_per_sample", "4"]
    assert cli.main(args) == 0
    assert len(sigsynth.read_dataset(path)) == 1


def test_generate_invalid_scheme(tmp_path, capsys):
    code = cli.main(["generate", "--out", str(tmp_path / "x"), "--data.schemes", "QPSK,1024QAM"])
    assert code == 1
    assert "1024QAM" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["generate", "--out", str(tmp_path / "x"), "--model.k"]) == 1
    assert cli.main(["generate", "--out", str(tmp_path / "x"), "--nope.key", "1"]) == 1
    assert cli.main(["generate"]) == 1


# -- train / eval ------------------------------------------------------------------------


def test_train_writes_run_directory(runs, tiny_dataset):
    assert cli.main(["train", "--dataset", tiny_dataset, "--run_name", "t", *TINY_MODEL]) == 0
    run = runs / "t"
    for name in ("config.txt", "metrics.csv", "checkpoint.sigc", "test_report.txt", "test_accuracy_vs_snr.csv",
                 "summary.txt"):
        assert (run / name).exists(), name
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,train_acc,val_acc,lr,seconds" and len(rows) == 3
    echo = flatconf.loads((run / "config.txt").read_text())
    assert echo["model.num_classes"] == "2" and echo["model.input_length"] == "32"
    # the echo alone reproduces the run configuration
    assert config.RunConfig().update(echo).validate().model.widths == (4, 8)
    csv_rows = (run / "test_accuracy_vs_snr.csv").read_text().splitlines()
    assert len(csv_rows) - 1 == 2


def test_eval_on_val_split_matches_best_validation(runs, tiny_dataset, tmp_path):
    assert cli.main(["train", "--dataset", tiny_dataset, "--run_name", "e", *TINY_MODEL]) == 0
    ckpt = str(runs / "e" / "checkpoint.sigc")
    out = str(tmp_path / "ev")
    assert cli.main(["eval", "--checkpoint", ckpt, "--dataset", tiny_dataset, "--split", "val",
                     "--out", out, "--features"]) == 0
    report = flatconf.loads(open(os.path.join(out, "report.txt")).read().split("\n\n")[0])
    summary = flatconf.loads((runs / "e" / "summary.txt").read_text())
    assert report["accuracy"] == summary["best_val_acc"]
    rows = open(os.path.join(out, "accuracy_vs_snr.csv")).read().splitlines()
    assert len(rows) - 1 == 2
    assert os.path.exists(os.path.join(out, "features.csv"))


def test_eval_refuses_other_architecture(runs, tiny_dataset, tmp_path, capsys):
    assert cli.main(["train", "--dataset", tiny_dataset, "--run_name", "h", *TINY_MODEL]) == 0
    cfg_path = tmp_path / "other.cfg"
    cfg_path.write_text("model.widths=8,16\nmodel.blocks=1,1\n")
    code = cli.main(["eval", "--checkpoint", str(runs / "h" / "checkpoint.sigc"), "--dataset", tiny_dataset,
                     "--config", str(cfg_path)])
    assert code == 2
    assert "Architecture" in capsys.readouterr().err


def test_eta_sweep_makes_one_dir_per_fraction(runs, tiny_dataset):
    args = ["train", "--dataset", tiny_dataset, "--run_name", "sweep", "--eta_fracs", "0.5,1", *TINY_MODEL]
    assert cli.main(args) == 0
    dirs = sorted(p.name for p in (runs / "sweep").iterdir())
    assert dirs == ["eta_0.5", "eta_1"]
    half = flatconf.loads((runs / "sweep" / "eta_0.5" / "summary.txt").read_text())
    full = flatconf.loads((runs / "sweep" / "eta_1" / "summary.txt").read_text())
    assert 2 * int(half["train_samples"]) == int(full["train_samples"])


def test_train_missing_dataset(runs, tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path / "missing.sigd")]) == 1


def test_corrupt_dataset_is_runtime_error(runs, tmp_path):
    bad = tmp_path / "bad.sigd"
    bad.write_bytes(b"SIGD" + b"\0" * 40)
    assert cli.main(["train", "--dataset", str(bad)]) == 2


# -- transform ---------------------------------------------------------------------------


def test_gram_dump_is_symmetric(tiny_dataset, tmp_path):
    out = str(tmp_path / "g.csv")
    assert cli.main(["transform", "--dataset", tiny_dataset, "--method", "gram", "--index", "3", "--out", out]) == 0
    M = np.loadtxt(out, delimiter=",")
    assert M.shape == (30, 30)
    np.testing.assert_array_equal(M, M.T)
    sample = sigsynth.read_dataset(tiny_dataset).X[3, 0]
    np.testing.assert_allclose(M, transforms.gram(sample), rtol=0, atol=1e-12)


def test_s2m_dump_with_trained_filters_differs_from_init(runs, tiny_dataset, tmp_path):
    assert cli.main(["train", "--dataset", tiny_dataset, "--run_name", "f", *TINY_MODEL,
                     "--train.initial_lr", "0.01"]) == 0
    ckpt = str(runs / "f" / "checkpoint.sigc")
    init_out, trained_out = str(tmp_path / "init.csv"), str(tmp_path / "trained.csv")
    base = ["transform", "--dataset", tiny_dataset, "--method", "s2m", "--index", "0"]
    assert cli.main(base + ["--out", init_out]) == 0
    assert cli.main(base + ["--out", trained_out, "--checkpoint", ckpt]) == 0
    init, trained = np.loadtxt(init_out, delimiter=","), np.loadtxt(trained_out, delimiter=",")
    assert init.shape == trained.shape == (30, 30)
    assert not np.allclose(init, trained)
    # the trained dump is exactly S F S^T with the stored filter
    _, state, _ = models.parse_checkpoint(open(ckpt, "rb").read())
    F = state["param:s2m.F"][0]
    x = sigsynth.read_dataset(tiny_dataset).X[0, 0]
    np.testing.assert_allclose(trained, transforms.s2m_forward(transforms.slice_signal(x, 3), F), atol=1e-12)


def test_transform_unknown_method_and_bad_index(tiny_dataset, tmp_path):
    out = str(tmp_path / "x.csv")
    assert cli.main(["transform", "--dataset", tiny_dataset, "--method", "wavelet", "--out", out]) == 1
    assert cli.main(["transform", "--dataset", tiny_dataset, "--method", "gaf", "--index", "999", "--out", out]) == 1


@pytest.mark.parametrize("method, shape", [("gaf", (32, 32)), ("mtf", (32, 32)), ("constellation", (32, 32)),
                                           ("reshape", (8, 8))])
def test_transform_other_methods(tiny_dataset, tmp_path, method, shape):
    out = str(tmp_path / f"{method}.csv")
    assert cli.main(["transform", "--dataset", tiny_dataset, "--method", method, "--out", out]) == 0
    assert np.loadtxt(out, delimiter=",").shape == shape


# -- verify ------------------------------------------------------------------------------


def test_verify_quick_passes(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "0 failed" in out and "FAIL" not in out


def test_verify_catches_sign_error_in_s2m_backward():
    def flipped(S, F, dM, length, h=1):
        dF, dx = transforms.s2m_backward(S, F, dM, length, h)
        return dF, -dx

    results = {r.name: r for r in verify.run_all(s2m_backward=flipped, include_models=False)}
    assert not results["s2m gradients"].passed
    assert sum(not r.passed for r in results.values()) == 1
