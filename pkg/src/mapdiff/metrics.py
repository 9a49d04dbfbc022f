"""Image and kernel quality metrics plus the per-experiment report."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import degrade as D
from .kernels import BlurKernel

PSNR_CAP = 100.0
REPORT_HEADER = ["id", "psnr", "kernel_l1", "lr_psnr"]
MEAN_ROW = "MEAN"


def psnr(a, b, peak: float = 1.0, cap: Optional[float] = PSNR_CAP) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; zero MSE gives ``cap`` (``inf`` when ``cap`` is None)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    value = math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
    return value if cap is None else min(value, cap)


def _weights(k) -> np.ndarray:
    return np.asarray(k.weights if isinstance(k, BlurKernel) else k, dtype=np.float64)


def kernel_l1(k_hat, k_gt) -> float:
    """Mean absolute difference between kernel weights."""
    a, b = _weights(k_hat), _weights(k_gt)
    if a.shape != b.shape:
        raise ValueError(f"kernel sizes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def lr_consistency_psnr(k_hat, x_hr: np.ndarray, y_ref: np.ndarray, s: int) -> float:
    """PSNR between the LR image re-synthesized with ``k_hat`` and the reference LR image."""
    y_hat = D.blur_downsample(np.asarray(x_hr, dtype=np.float64), _weights(k_hat), s)
    return psnr(y_hat, y_ref)


def fingerprint(config: dict) -> str:
    """sha256 over a canonical JSON rendering of the config and seeds."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ReportRow:
    id: str
    psnr: float
    kernel_l1: float
    lr_psnr: float


@dataclass
class ExperimentReport:
    config: dict
    rows: list = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def aggregates(self) -> dict[str, float]:
        if not self.rows:
            return {k: math.nan for k in REPORT_HEADER[1:]}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in REPORT_HEADER[1:]}

    def write_csv(self, path) -> None:
        """Rows, then a ``MEAN`` row; leading ``#`` lines carry the fingerprint and conventions."""
        agg = self.aggregates()
        with Path(path).open("w", newline="") as fh:
            fh.write(f"# fingerprint={self.fingerprint}\n")
            fh.write("# psnr on RGB in [0,1] with peak 1, capped at 100 dB\n")
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.id] + [repr(float(getattr(r, k))) for k in REPORT_HEADER[1:]])
            w.writerow([MEAN_ROW] + [repr(float(agg[k])) for k in REPORT_HEADER[1:]])


def read_report(path) -> tuple[str, list[ReportRow], dict[str, float]]:
    """Parse a report CSV into (fingerprint, rows, aggregates)."""
    lines = Path(path).read_text().splitlines()
    fp = ""
    body = []
    for line in lines:
        if line.startswith("# fingerprint="):
            fp = line.split("=", 1)[1]
        elif not line.startswith("#"):
            body.append(line)
    rows, agg = [], {}
    for rec in csv.DictReader(body):
        vals = {k: float(rec[k]) for k in REPORT_HEADER[1:]}
        if rec["id"] == MEAN_ROW:
            agg = vals
        else:
            rows.append(ReportRow(rec["id"], **vals))
    return fp, rows, agg
