"""PSNR and SSIM on packed RGGB frames, plus the noisy-vs-denoised evaluation report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from rawdn.errors import ShapeMismatchError
from rawdn.noise_model import NoiseParams, level_label
from rawdn.raw_data import Sequence

PSNR_INF = math.inf  # serialized as the string "inf"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# published reference point at the highest ISO; different data, not a target.
REFERENCE_ISO25600 = {"noisy": {"psnr": 26.510, "ssim": 0.670}, "model": {"psnr": 37.796, "ssim": 0.963}}


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(x, ref, peak: float = 1.0) -> float:
    x, ref = _array(x), _array(ref)
    if x.shape != ref.shape:
        raise ShapeMismatchError(f"psnr: shapes differ {x.shape} vs {ref.shape}")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10 * np.log10(peak**2 / mse))


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = correlate1d(img, taps, axis=-1, mode="constant")
    out = correlate1d(out, taps, axis=-2, mode="constant")
    m = len(taps) // 2
    return out[..., m:-m or None, m:-m or None]


def ssim_map(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over full windows only, for a single 2-D plane."""
    taps = _gaussian_taps()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(ref, taps)
    sxx = _filter_valid(x * x, taps) - mu_x**2
    syy = _filter_valid(ref * ref, taps) - mu_y**2
    sxy = _filter_valid(x * ref, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, ref, data_range: float = 1.0) -> float:
    """Mean over channels of Gaussian-windowed SSIM (11x11, sigma 1.5)."""
    x, ref = _array(x), _array(ref)
    if x.shape != ref.shape:
        raise ShapeMismatchError(f"ssim: shapes differ {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ShapeMismatchError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[-2:]}")
    if np.array_equal(x, ref):
        return 1.0
    planes = x.reshape(-1, *x.shape[-2:]), ref.reshape(-1, *ref.shape[-2:])
    return float(np.mean([ssim_map(a, b, data_range).mean() for a, b in zip(*planes)]))


@dataclass
class Scores:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, x, ref) -> None:
        self.psnr.append(psnr(x, ref))
        self.ssim.append(ssim(x, ref))

    def mean(self) -> dict:
        return {"psnr": _mean(self.psnr), "ssim": _mean(self.ssim)}


def _mean(values) -> float:
    if not values:
        return math.nan
    if any(math.isinf(v) for v in values):
        return PSNR_INF
    return float(np.mean(values))


@dataclass
class QualityReport:
    """Per-frame scores keyed by noise level, for the noisy input and the model output."""

    noisy: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def level(self, label: str) -> tuple[Scores, Scores]:
        return self.noisy.setdefault(label, Scores()), self.model.setdefault(label, Scores())

    def to_json(self) -> dict:
        doc = {}
        for label in self.noisy:
            doc[label] = {"noisy": self.noisy[label].mean(), "model": self.model[label].mean()}
        all_noisy, all_model = Scores(), Scores()
        for label in self.noisy:
            all_noisy.psnr += self.noisy[label].psnr
            all_noisy.ssim += self.noisy[label].ssim
            all_model.psnr += self.model[label].psnr
            all_model.ssim += self.model[label].ssim
        doc["mean"] = {"noisy": all_noisy.mean(), "model": all_model.mean()}
        return doc


def _encode(value):
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _decode(value):
    if isinstance(value, dict):
        return {k: _decode(v) for k, v in value.items()}
    if value in ("inf", "-inf"):
        return float(value)
    return value


def dumps_report(doc: dict) -> str:
    return json.dumps(_encode(doc), indent=2)


def save_report(doc: dict, path: str | PathLike) -> None:
    Path(path).write_text(dumps_report(doc) + "\n")


def load_report(path: str | PathLike) -> dict:
    return _decode(json.loads(Path(path).read_text()))


def evaluate(w, examples) -> QualityReport:
    """Score noisy inputs and denoised outputs against clean frames.

    ``examples`` yields ``(noisy, clean, params)`` triples of packed sequences.
    """
    from rawdn.denoise_net import denoise_sequence

    report = QualityReport()
    for noisy, clean, params in examples:
        if noisy.data.shape != clean.data.shape:
            raise ShapeMismatchError(f"noisy {noisy.data.shape} and clean {clean.data.shape} differ")
        params = params if isinstance(params, NoiseParams) else NoiseParams(*params)
        out = denoise_sequence(noisy, params, w)
        noisy_scores, model_scores = report.level(level_label(params))
        for z, y, c in zip(noisy.data, out.data, clean.data):
            noisy_scores.add(z, c)
            model_scores.add(y, c)
    return report


def score_sequence(pred: Sequence, truth: Sequence) -> dict:
    s = Scores()
    for p, t in zip(pred.data, truth.data):
        s.add(p, t)
    return s.mean()
