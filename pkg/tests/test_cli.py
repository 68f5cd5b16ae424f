import numpy as np
import pytest

from gaitnet import cli
from gaitnet import dataset as D
from gaitnet.errors import ConfigError

TINY = """
[sampling]
strategy = grid
n = {n}
seed = 7
n_holdout = 10
[fgn]
hidden = [16]
batch_size = 64
learning_rate = {lr}
epochs = 2
[bgn]
encoder_hidden = [8]
decoder_hidden = [8]
batch_size = 16
learning_rate = 1e-3
max_steps = 2
[eval]
n_samples = 30
"""


def write_cfg(path, n=200, lr="1e-3", extra=""):
    path.write_text(TINY.format(n=n, lr=lr) + extra)
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(d / "c.ini")
    assert cli.run(["--deterministic", "generate", "--config", cfg, "--out", str(d / "d.bgnd"),
                    "--holdout", str(d / "h.bgnd")]) == 0
    assert cli.run(["train-forward", "--config", cfg, "--data", str(d / "d.bgnd"), "--out", str(d / "f.bgnw"),
                    "--history", str(d / "f.csv")]) == 0
    assert cli.run(["train-backward", "--config", cfg, "--data", str(d / "d.bgnd"), "--fgn", str(d / "f.bgnw"),
                    "--out", str(d / "b.zip")]) == 0
    return d, cfg


def test_shipped_config_loads():
    cfg = cli.load_config(cli.desk_config_path())
    assert cfg.sampling.strategy == "grid" and cfg.bgn_extra.experts == 3
    assert cli.load_config(None).fgn.hidden == [512, 512, 512]


def test_unknown_key_is_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.ini", extra="[fgn]\nlearnig_rate = 1\n")
    with pytest.raises(ConfigError):
        cli.load_config(cfg)
    (tmp_path / "k.ini").write_text("[fgn]\nlearnig_rate = 1\n")
    assert cli.run(["generate", "--config", str(tmp_path / "k.ini"), "--out", str(tmp_path / "x")]) == 2
    assert "learnig_rate" in capsys.readouterr().err


def test_unknown_section_and_bad_values(tmp_path):
    (tmp_path / "a.ini").write_text("[fgm]\nx = 1\n")
    with pytest.raises(ConfigError, match="fgm"):
        cli.load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[sampling]\nn = lots\n")
    with pytest.raises(ConfigError, match="sampling.n"):
        cli.load_config(tmp_path / "b.ini")
    (tmp_path / "c.ini").write_text("[sampling]\nstrategy = sobol\n")
    with pytest.raises(ConfigError, match="strategy"):
        cli.load_config(tmp_path / "c.ini")
    with pytest.raises(ConfigError, match="not found"):
        cli.load_config(tmp_path / "missing.ini")


def test_generate_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", n=1000)
    for name in ("a", "b"):
        assert cli.run(["--deterministic", "generate", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    ds = D.read(tmp_path / "a")
    assert len(ds) == 1000 and ds.strategy == "grid" and ds.seed == 7
    assert cli.run(["--threads", "2", "generate", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c").read_bytes() == (tmp_path / "a").read_bytes()


def test_generate_empty_warns(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", n=0)
    with pytest.warns(UserWarning):
        assert cli.run(["generate", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    assert len(D.read(tmp_path / "e")) == 0


def test_history_matches_reported_loss(pipeline, capsys):
    d, cfg = pipeline
    assert cli.run(["train-forward", "--config", cfg, "--data", str(d / "d.bgnd"), "--out", str(d / "f2.bgnw"),
                    "--history", str(d / "f2.csv")]) == 0
    out = capsys.readouterr().out
    reported = float(out.split("final loss ")[1].split(",")[0])
    last = float((d / "f2.csv").read_text().splitlines()[-1].split(",")[1])
    assert last == reported
    assert (d / "f2.bgnw").read_bytes() == (d / "f.bgnw").read_bytes()


def test_missing_decoder(pipeline, capsys):
    d, cfg = pipeline
    rc = cli.run(["train-backward", "--config", cfg, "--data", str(d / "d.bgnd"), "--fgn", str(d / "nope.bgnw"),
                  "--out", str(d / "x.zip")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "forward network" in err and "nope.bgnw" in err


def test_divergence_exit_code(pipeline, tmp_path):
    d, _ = pipeline
    cfg = write_cfg(tmp_path / "c.ini", lr="1e30")
    assert cli.run(["train-forward", "--config", cfg, "--data", str(d / "d.bgnd"), "--out", str(tmp_path / "f")]) == 4


def test_predict(pipeline, tmp_path):
    d, cfg = pipeline
    args = ["predict", "--config", cfg, "--bundle", str(d / "b.zip"), "--gait", str(d / "h.bgnd"), "--n-samples", "25"]
    assert cli.run(args + ["--out-dir", str(tmp_path / "p1")]) == 0
    assert cli.run(args + ["--out-dir", str(tmp_path / "p2")]) == 0
    for name in ("posterior_mean.csv", "samples_case0.csv", "report.txt"):
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()
    smp = np.loadtxt(tmp_path / "p1" / "samples_case3.csv", delimiter=",", skiprows=1)
    assert smp.shape == (25, 32)
    assert "re-simulation" in (tmp_path / "p1" / "report.txt").read_text()


def test_predict_malformed_gait(pipeline, tmp_path, capsys):
    d, cfg = pipeline
    data = (d / "h.bgnd").read_bytes()
    (tmp_path / "bad.bgnd").write_bytes(data[:200])
    rc = cli.run(["predict", "--bundle", str(d / "b.zip"), "--gait", str(tmp_path / "bad.bgnd"),
                  "--out-dir", str(tmp_path / "o")])
    assert rc == 3
    assert "byte" in capsys.readouterr().err


def test_evaluate(pipeline, tmp_path):
    d, cfg = pipeline
    out = tmp_path / "ev"
    rc = cli.run(["evaluate", "--config", cfg, "--fgn", str(d / "f.bgnw"), "--bundle", str(d / "b.zip"),
                  "--holdout", str(d / "h.bgnd"), "--out-dir", str(out)])
    assert rc == 0
    summary = (out / "summary.txt").read_text()
    for k in range(1, 11):
        assert f"] {k} " in summary
    assert "analog" in summary
    for name in ("forward_cases.csv", "realizability_cases.csv", "coverage.csv", "embedding_trendelenburg.svg"):
        assert (out / name).exists()


def test_evaluate_missing_artifact(pipeline, tmp_path, capsys):
    d, cfg = pipeline
    rc = cli.run(["evaluate", "--config", cfg, "--fgn", str(d / "f.bgnw"), "--bundle", str(tmp_path / "gone.zip"),
                  "--holdout", str(tmp_path / "gone.bgnd"), "--out-dir", str(tmp_path / "o")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "gone.zip" in err and "gone.bgnd" in err
