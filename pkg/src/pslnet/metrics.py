"""Image quality metrics (PSNR, RMSE, SSIM) and corpus-level evaluation reports.

Conventions:
  - inputs are (H, W, 3) float arrays in [0, 1]; callers clip before scoring
    (evaluate_corpus does this for model outputs),
  - PSNR and RMSE are quoted on the 0-255 scale,
  - identical images give PSNR = +inf, serialized as the JSON string "inf",
  - SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic
    range 1.0, weighted moments without Bessel correction, valid-mode windows,
    averaged over the three channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import degrade
from .model import load_checkpoint, restore_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_255(a, b) -> float:
    """Mean squared difference on the 0-255 scale."""
    a, b = _check_pair(a, b)
    return float(np.mean(((a - b) * 255.0) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    mse = mse_255(a, b)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def rmse(a, b) -> float:
    """Root-mean-square error on the 0-255 scale."""
    return float(np.sqrt(mse_255(a, b)))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _local_mean(img2d: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable Gaussian correlation, cropped to windows fully inside the image
    pad = len(kernel) // 2
    out = ndimage.correlate1d(img2d, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad]


def ssim(a, b) -> float:
    """Mean structural similarity over valid windows and channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = gaussian_kernel()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _local_mean(x, kernel)
        mu_y = _local_mean(y, kernel)
        sxx = _local_mean(x * x, kernel) - mu_x * mu_x
        syy = _local_mean(y * y, kernel) - mu_y * mu_y
        sxy = _local_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# corpus evaluation

def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


@dataclass
class CellReport:
    """Aggregate scores for one (sigma, transparency) cell of the corpus."""

    sigma: float
    alpha: float
    n: int
    psnr_mean: float
    rmse_mean: float
    ssim_mean: float
    psnr_input_mean: float
    psnr_per_image: list = field(default_factory=list)
    rmse_per_image: list = field(default_factory=list)
    ssim_per_image: list = field(default_factory=list)
    psnr_input_per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma, "alpha": self.alpha, "n": self.n,
            "psnr_mean": _json_float(self.psnr_mean),
            "rmse_mean": _json_float(self.rmse_mean),
            "ssim_mean": _json_float(self.ssim_mean),
            "psnr_input_mean": _json_float(self.psnr_input_mean),
            "psnr_per_image": [_json_float(v) for v in self.psnr_per_image],
            "rmse_per_image": [_json_float(v) for v in self.rmse_per_image],
            "ssim_per_image": [_json_float(v) for v in self.ssim_per_image],
            "psnr_input_per_image": [_json_float(v) for v in self.psnr_input_per_image],
        }


@dataclass
class MetricReport:
    cells: list
    checkpoint_digest: str
    manifest_digest: str

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells],
                "checkpoint_digest": self.checkpoint_digest,
                "manifest_digest": self.manifest_digest}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        return path

    def overall(self) -> dict:
        """Sample-weighted means across every cell."""
        n = sum(c.n for c in self.cells)
        if n == 0:
            return {"n": 0}
        return {
            "n": n,
            "psnr_mean": sum(sum(c.psnr_per_image) for c in self.cells) / n,
            "rmse_mean": sum(sum(c.rmse_per_image) for c in self.cells) / n,
            "ssim_mean": sum(sum(c.ssim_per_image) for c in self.cells) / n,
            "psnr_input_mean": sum(sum(c.psnr_input_per_image) for c in self.cells) / n,
        }


def _match(value: float, wanted) -> bool:
    if wanted is None:
        return True
    if isinstance(wanted, (int, float)):
        wanted = [wanted]
    return any(abs(value - w) < 1e-9 for w in wanted)


def evaluate_corpus(checkpoint_path, manifest: degrade.CorpusManifest, *,
                    sigma=None, alpha=None, limit: int | None = None,
                    manifest_path=None) -> MetricReport:
    """Score the fused network output against the true clean image per entry.

    Entries are grouped into (sigma, transparency) cells; each cell reports
    per-image PSNR/RMSE/SSIM plus the degraded-input PSNR baseline.
    Evaluation is the only pipeline stage that reads clean images.
    """
    net, _, _ = load_checkpoint(checkpoint_path)
    net.eval()
    groups: dict = {}
    count = 0
    for entry in manifest.entries:
        if not _match(entry.sigma, sigma) or not _match(entry.transparency_input, alpha):
            continue
        if limit is not None and count >= limit:
            break
        count += 1
        inp = degrade.load_image(manifest.resolve(entry.input))
        clean = degrade.load_image(manifest.resolve(entry.clean))
        restored = np.clip(restore_image(net, inp), 0.0, 1.0)
        key = (float(entry.sigma), round(float(entry.transparency_input), 6))
        cell = groups.setdefault(key, {"psnr": [], "rmse": [], "ssim": [], "inp": []})
        cell["psnr"].append(psnr(restored, clean))
        cell["rmse"].append(rmse(restored, clean))
        cell["ssim"].append(ssim(restored, clean))
        cell["inp"].append(psnr(np.clip(inp, 0.0, 1.0), clean))

    cells = []
    for (sig, al) in sorted(groups):
        g = groups[(sig, al)]
        n = len(g["psnr"])
        cells.append(CellReport(
            sigma=sig, alpha=al, n=n,
            psnr_mean=float(np.mean(g["psnr"])),
            rmse_mean=float(np.mean(g["rmse"])),
            ssim_mean=float(np.mean(g["ssim"])),
            psnr_input_mean=float(np.mean(g["inp"])),
            psnr_per_image=g["psnr"], rmse_per_image=g["rmse"],
            ssim_per_image=g["ssim"], psnr_input_per_image=g["inp"]))

    manifest_file = manifest_path
    if manifest_file is None and manifest.root is not None:
        manifest_file = manifest.root / "manifest.json"
    return MetricReport(
        cells=cells,
        checkpoint_digest=degrade.sha256_file(checkpoint_path),
        manifest_digest=(degrade.sha256_file(manifest_file)
                         if manifest_file and Path(manifest_file).exists() else ""))
