import numpy as np
import pytest

from mapdiff import degrade as D
from mapdiff import kernels as K
from mapdiff import train as TR
from mapdiff.cli import main
from mapdiff.data import load_png, save_png
from mapdiff.metrics import read_report
from mapdiff.sample import SamplerConfig, sample


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "set"), "--n", "3", "--size", "16", "--seed", "4"]) == 0
    assert main(["fit-pca", "--out", str(root / "pca.bdp"), "--n", "500"]) == 0
    assert main(["train", "--out", str(root / "run"), "--iters", "10", "--pca", str(root / "pca.bdp"),
                 "--report"]) == 0
    return root


@pytest.fixture(scope="module")
def ckpt(workdir):
    return str(workdir / "run" / TR.CHECKPOINT_NAME)


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["restore", "--scale", "2"],
    ["restore", "--checkpoint", "c", "--scale", "2", "--out", "o", "--lambda", "-1", "x.png"],
    ["lambda-sweep", "--checkpoint", "c", "--out", "o", "--lambdas", "1,-2"],
    ["lambda-sweep", "--checkpoint", "c", "--out", "o", "--lambdas", "a,b"],
    ["synth", "--out", "o", "--n", "0"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["restore", "--checkpoint", str(tmp_path / "none.bdtn"), "--scale", "2",
                 "--out", str(tmp_path), "x.png"]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.tsv"
    bad.write_text("only\ttwo\n")
    assert main(["degrade", "--manifest", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in (TR.CHECKPOINT_NAME, TR.METRICS_NAME, "config.ini", "training.png"):
        assert (run / name).exists()
    m = TR.read_metrics(run / TR.METRICS_NAME)
    assert list(m["iter"]) == list(range(1, 11))


def test_degrade_outputs_match_library(workdir):
    out = workdir / "deg"
    assert main(["degrade", "--manifest", str(workdir / "set" / "manifest.tsv"), "--out", str(out)]) == 0
    rows = D.read_manifest(out / "lr_manifest.tsv")
    assert len(rows) == 3
    src = D.read_manifest(workdir / "set" / "manifest.tsv")[0]
    y = D.blur_downsample(load_png(src.hr_path), K.load_kernel(src.kernel_path), src.scale)
    assert np.max(np.abs(load_png(rows[0].hr_path) - y)) <= 0.5 / 255 + 1e-12


def test_restore_lambda_zero_is_unguided_sampling(workdir, ckpt):
    lr = D.read_manifest(workdir / "set" / "manifest.tsv")[0]
    y_path = workdir / "lr0.png"
    save_png(y_path, D.blur_downsample(load_png(lr.hr_path), K.load_kernel(lr.kernel_path), 2))
    out = workdir / "restored"
    assert main(["restore", "--checkpoint", ckpt, "--scale", "2", "--lambda", "0", "--seed", "5",
                 "--out", str(out), "--report", str(y_path)]) == 0
    ck = TR.load_checkpoint(ckpt)
    ref = sample(ck.model, ck.sched, load_png(y_path), 2, ck.pca, SamplerConfig(lam=0.0, seed=5))
    got = np.load(out / "lr0_sr.npy")
    assert got.tobytes() == ref.x0_hat.tobytes()
    assert K.load_kernel(out / "lr0_kernel.bdk").weights.tobytes() == ref.kernels[0].weights.tobytes()
    assert (out / "lr0_trace.csv").read_text().splitlines()[0] == "t,residual"
    assert (out / "lr0_trace.png").exists()


def test_eval_aggregates_and_threading(workdir, ckpt, monkeypatch):
    monkeypatch.delenv("BD_DETERMINISTIC", raising=False)
    manifest = str(workdir / "set" / "manifest.tsv")
    a, b = workdir / "ev" / "seq.csv", workdir / "ev" / "par.csv"
    common = ["eval", "--checkpoint", ckpt, "--manifest", manifest, "--lambda", "0.5"]
    assert main(common + ["--out", str(a), "--report"]) == 0
    assert main(common + ["--out", str(b), "--workers", "3"]) == 0
    fp, rows, agg = read_report(a)
    assert len(rows) == 3
    for key in ("psnr", "kernel_l1", "lr_psnr"):
        assert agg[key] == pytest.approx(np.mean([getattr(r, key) for r in rows]), rel=1e-14)
    assert a.read_text() == b.read_text()
    assert a.with_suffix(".png").exists()


def test_lambda_sweep_cli(workdir, ckpt):
    out = workdir / "sweep"
    assert main(["lambda-sweep", "--checkpoint", ckpt, "--out", str(out), "--lambdas", "0,1",
                 "--n", "2", "--size", "16", "--report"]) == 0
    lines = (out / "lambda_sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,residual,psnr,kernel_l1"
    assert [float(r.split(",")[0]) for r in lines[1:]] == [0.0, 1.0]
    assert (out / "lambda_sweep.png").exists()


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    assert "cases passed" in capsys.readouterr().out
