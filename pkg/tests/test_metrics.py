import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapdiff import degrade as D
from mapdiff import kernels as K
from mapdiff.data import textured_image
from mapdiff.metrics import (
    PSNR_CAP,
    ExperimentReport,
    ReportRow,
    kernel_l1,
    lr_consistency_psnr,
    psnr,
    read_report,
)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a, cap=None) == math.inf


def test_psnr_closed_form():
    a = np.zeros((1, 10, 10))
    b = np.full((1, 10, 10), 0.1)  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, b, peak=255.0) == pytest.approx(20.0 + 20 * math.log10(255.0), abs=1e-9)


def test_psnr_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 3, 7, 5))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    mse = total / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1.0 / mse), rel=1e-12)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), peak=0.0)


def test_kernel_l1_cases():
    d = K.delta_kernel(21)
    assert kernel_l1(d, d) == 0.0
    shifted = np.roll(d.weights, 1, axis=1)
    assert kernel_l1(d, shifted) == pytest.approx(2 / 441, abs=1e-15)
    with pytest.raises(ValueError):
        kernel_l1(d, K.delta_kernel(11))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_kernel_l1_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = K.sample_kernel("aniso", rng), K.sample_kernel("aniso", rng)
    assert kernel_l1(a, b) == kernel_l1(b, a)


def test_lr_consistency_gt_is_capped_and_wrong_kernel_lower():
    x = textured_image(np.random.default_rng(3), 32, 32)
    k = K.make_isotropic(21, 1.5)
    y = D.blur_downsample(x, k, 2)
    assert lr_consistency_psnr(k, x, y, 2) == PSNR_CAP
    assert lr_consistency_psnr(K.make_isotropic(21, 2.5), x, y, 2) < PSNR_CAP


@pytest.mark.parametrize("seed", range(5))
def test_lr_consistency_constant_image(seed):
    x = np.full((3, 16, 16), 0.42)
    y = np.full((3, 8, 8), 0.42)
    k = K.sample_kernel("aniso", np.random.default_rng(seed))
    assert lr_consistency_psnr(k, x, y, 2) == PSNR_CAP


def test_report_aggregates_and_round_trip(tmp_path):
    rep = ExperimentReport({"seed": 3, "lam": 1.0})
    rng = np.random.default_rng(4)
    for i in range(5):
        rep.rows.append(ReportRow(f"img{i}", *rng.uniform(10, 40, size=3)))
    rep.write_csv(tmp_path / "r.csv")
    fp, rows, agg = read_report(tmp_path / "r.csv")
    assert fp == rep.fingerprint
    assert [r.id for r in rows] == [f"img{i}" for i in range(5)]
    assert agg["psnr"] == pytest.approx(np.mean([r.psnr for r in rows]), rel=1e-15)
    assert agg == rep.aggregates()


def test_fingerprint_depends_on_config():
    a = ExperimentReport({"seed": 1}).fingerprint
    assert a == ExperimentReport({"seed": 1}).fingerprint
    assert a != ExperimentReport({"seed": 2}).fingerprint
