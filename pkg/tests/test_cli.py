import numpy as np
import pytest

from tabdiffusion.cli import main
from tabdiffusion.data import load_csv, two_class_blobs, write_csv

SMALL = "arch = mlp\nhidden = 32\ndepth = 2\nT = 30\nsteps = 60\nn = 40\n"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    p = np.linspace(0.1, 0.9, 6)
    write_csv(d / "bin.csv", (rng.random((300, 6)) < p).astype(int).tolist())
    blobs = two_class_blobs(300, dim=3, separation=4.0, seed=0)
    write_csv(d / "blobs.csv", np.column_stack([blobs.features, blobs.labels]).tolist())
    (d / "small.cfg").write_text(SMALL)
    assert run("train", d / "bin.csv", "--kind", "binary", "--config", d / "small.cfg",
               "--out", d / "bin.ckpt") == 0
    assert run("train", d / "blobs.csv", "--labeled", "--config", d / "small.cfg",
               "--out", d / "blobs.ckpt") == 0
    return d


def test_sample_k0_matches_plain_ddim(work):
    assert run("sample", work / "bin.ckpt", "--mode", "ddim", "--k", "0", "--raw",
               "--config", work / "small.cfg", "--out", work / "a.csv") == 0
    cfg = work / "k0.cfg"
    cfg.write_text(SMALL + "k = 0\nmode = ddim\n")
    assert run("sample", work / "bin.ckpt", "--raw", "--config", cfg, "--out", work / "b.csv") == 0
    assert (work / "a.csv").read_bytes() == (work / "b.csv").read_bytes()


def test_binary_sample_is_binary(work):
    for extra in ([], ["--bernoulli"]):
        assert run("sample", work / "bin.ckpt", *extra, "--config", work / "small.cfg",
                   "--out", work / "s.csv") == 0
        ds = load_csv(work / "s.csv", kind="binary")
        assert ds.n == 40 and ds.dim == 6


def test_evaluate_binary_rows(work):
    run("sample", work / "bin.ckpt", "--config", work / "small.cfg", "--out", work / "s.csv")
    assert run("evaluate", work / "bin.csv", work / "s.csv", "--kind", "binary",
               "--out", work / "rep.csv") == 0
    lines = (work / "rep.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["rho", "sae", "rmse"]


def test_evaluate_continuous_kde(work):
    assert run("sample", work / "blobs.ckpt", "--mode", "ddpm", "--config", work / "small.cfg",
               "--out", work / "bs.csv") == 0
    raw = load_csv(work / "blobs.csv", labeled=True, standardize=False).features
    write_csv(work / "real.csv", raw.tolist())
    assert run("evaluate", work / "real.csv", work / "bs.csv", "--out", work / "kde.csv") == 0
    lines = (work / "kde.csv").read_text().splitlines()
    assert lines[0] == "feature,x,density_real,density_synth" and len(lines) == 1 + 3 * 200


@pytest.mark.parametrize("argv", [
    ["sample", "{d}/bin.ckpt", "--seed", "5", "--mode", "ddpm"],
    ["sample", "{d}/bin.ckpt", "--seed", "5", "--k", "3", "--trajectory", "{d}/traj.csv"],
    ["sample", "{d}/blobs.ckpt", "--mode", "ddpm", "--sigma-zero", "--T", "10"],
    ["reconstruct", "{d}/blobs.ckpt", "{d}/blobs.csv", "--labeled", "--sigma-zero"],
    ["classify-train", "{d}/blobs.csv", "--model", "{d}/blobs.ckpt", "--steps", "20"],
])
def test_repeat_runs_byte_identical(work, argv, capsys):
    outs = []
    for i in range(2):
        args = [a.format(d=work) for a in argv] + ["--config", str(work / "small.cfg"),
                                                   "--out", str(work / f"rep{i}")]
        assert main(args) == 0
        outs.append((work / f"rep{i}").read_bytes())
    assert outs[0] == outs[1]


def test_guided_and_augment(work, capsys):
    assert run("classify-train", work / "blobs.csv", "--model", work / "blobs.ckpt",
               "--steps", "50", "--config", work / "small.cfg", "--out", work / "clf.ckpt") == 0
    assert "training accuracy" in capsys.readouterr().out
    for scale in ("0", "1"):
        assert run("sample", work / "blobs.ckpt", "--guided", "1", "--classifier", work / "clf.ckpt",
                   "--scale", scale, "--config", work / "small.cfg", "--out", work / f"g{scale}.csv") == 0
    assert run("sample", work / "blobs.ckpt", "--config", work / "small.cfg",
               "--out", work / "u.csv") == 0
    assert (work / "g0.csv").read_bytes() == (work / "u.csv").read_bytes()
    assert run("augment", work / "blobs.csv", work / "blobs.csv", work / "blobs.csv",
               "--step", "150", "--out", work / "curve.csv") == 0
    lines = (work / "curve.csv").read_text().splitlines()
    assert lines[0] == "n_synthetic,auc" and [ln.split(",")[0] for ln in lines[1:]] == ["0", "150", "300"]


def test_exit_codes(work, capsys):
    assert run("frobnicate", "--out", "x") == 1
    assert run("sample", work / "bin.ckpt", "--bogus", "--out", work / "x.csv") == 1
    assert run("sample", work / "bin.ckpt") == 1  # --out is required
    bad = work / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run("sample", work / "bin.ckpt", "--config", bad, "--out", work / "x.csv") == 1
    assert "unknown key" in capsys.readouterr().err
    cut = work / "cut.ckpt"
    cut.write_bytes((work / "bin.ckpt").read_bytes()[:-1])
    assert run("sample", cut, "--out", work / "x.csv") == 2
    assert not (work / "x.csv").exists()
    (work / "ragged.csv").write_text("1,0\n1\n")
    assert run("train", work / "ragged.csv", "--out", work / "r.ckpt") == 2
    assert run("sample", work / "blobs.ckpt", "--guided", "1", "--out", work / "x.csv") == 1


def test_numerical_failure_exit_code(work, capsys):
    cfg = work / "hot.cfg"
    cfg.write_text(SMALL + "lr = 1e200\n")
    code = run("train", work / "blobs.csv", "--labeled", "--config", cfg, "--out", work / "hot.ckpt")
    assert code == 3
    assert "numerical failure: non-finite loss" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "T=200" in capsys.readouterr().out


def test_two_mode_recovery_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.choice([-1.0, 1.0], size=(2000, 1), p=[0.3, 0.7])
    write_csv(tmp_path / "two.csv", data.tolist())
    (tmp_path / "run.cfg").write_text("arch = mlp\nhidden = 64\nsteps = 1500\nlr = 0.002\n"
                                      "mode = ddpm\nn = 2000\n")
    assert run("train", tmp_path / "two.csv", "--config", tmp_path / "run.cfg",
               "--out", tmp_path / "m.ckpt") == 0
    assert run("sample", tmp_path / "m.ckpt", "--config", tmp_path / "run.cfg",
               "--out", tmp_path / "s.csv") == 0
    x = load_csv(tmp_path / "s.csv", standardize=False).features[:, 0]
    assert abs((x > 0).mean() - 0.7) <= 0.15
    assert np.mean(np.abs(np.abs(x) - 1.0)) < 0.15
