"""Heteroscedastic shot/read noise: variance maps, synthesis and flat-field calibration.

Noise variance at clean intensity ``y`` is ``a * y + b``. Random draws use numpy's
PCG64 bit generator seeded explicitly, so a seed reproduces a sequence on any
platform numpy supports.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from os import PathLike
from pathlib import Path

import numpy as np
import torch

from rawdn.errors import DegenerateParamsError, RankDeficiencyError
from rawdn.raw_data import Sequence

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseParams:
    a: float
    b: float
    iso: str | None = None

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise DegenerateParamsError(f"noise coefficients must be nonnegative, got a={self.a}, b={self.b}")

    def variance(self, y):
        return self.a * y + self.b


# Synthetic ladder; the largest level is the validation level. These are not sensor values.
ISO_PRESETS = {
    "iso1600": NoiseParams(0.000625, 2.5e-5, "iso1600"),
    "iso3200": NoiseParams(0.00125, 5e-5, "iso3200"),
    "iso6400": NoiseParams(0.0025, 1e-4, "iso6400"),
    "iso12800": NoiseParams(0.005, 2e-4, "iso12800"),
    "iso25600": NoiseParams(0.01, 4e-4, "iso25600"),
}
HIGHEST_PRESET = "iso25600"


def level_label(params: NoiseParams) -> str:
    if params.iso:
        return params.iso
    for name, p in ISO_PRESETS.items():
        if np.isclose(p.a, params.a) and np.isclose(p.b, params.b):
            return name
    return f"a={params.a:g},b={params.b:g}"


def variance_map(frame, params: NoiseParams, floor: float = VAR_FLOOR):
    """Per-sample noise variance ``a * max(x, 0) + b``, floored at ``floor``.

    Accepts numpy arrays, torch tensors (differentiable) or anything with ``.data``.
    """
    x = getattr(frame, "data", frame)
    if isinstance(x, torch.Tensor):
        return torch.clamp(params.a * torch.clamp(x, min=0) + params.b, min=floor)
    x = np.asarray(x)
    return np.maximum(params.a * np.maximum(x, 0) + params.b, floor)


def noise_field(clean: np.ndarray, params: NoiseParams, seed) -> np.ndarray:
    """The additive noise that :func:`add_noise` draws for ``clean`` and ``seed``."""
    if params.a == 0 and params.b == 0:
        raise DegenerateParamsError("noise synthesis needs a > 0 or b > 0")
    rng = np.random.default_rng(seed)
    y = np.asarray(clean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(params.a * y + params.b, 0.0))
    return rng.standard_normal(y.shape) * sigma


def add_noise(clean: Sequence, params: NoiseParams, seed) -> Sequence:
    """Draw ``z = y + n`` with ``n ~ N(0, a*y + b)``; no clipping."""
    y = clean.data.astype(np.float64)
    z = y + noise_field(y, params, seed)
    return Sequence(z, clean.source_pattern, params)


@dataclass(frozen=True)
class Calibration:
    params: NoiseParams
    residual: float
    levels: tuple  # ((mean, variance), ...)

    def to_json(self) -> dict:
        return {"a": self.params.a, "b": self.params.b, "iso": self.params.iso, "residual": self.residual}


def calibrate(flat_stacks, iso: str | None = None, min_frames: int = 16) -> Calibration:
    """Fit ``variance = a * mean + b`` to temporal statistics of flat-field stacks.

    Each stack is a sequence of frames of one constant scene. Its mean is the
    average over all samples and its variance the per-sample temporal variance
    (ddof=1), averaged over samples.
    """
    means, variances, std_errors = [], [], []
    for stack in flat_stacks:
        data = np.asarray(getattr(stack, "data", stack), dtype=np.float64)
        if data.shape[0] < min_frames:
            raise RankDeficiencyError(f"flat stack has {data.shape[0]} frames, need at least {min_frames}")
        means.append(data.mean())
        variances.append(data.var(axis=0, ddof=1).mean())
        std_errors.append(np.sqrt(variances[-1] / data.size))
    means, variances = np.array(means), np.array(variances)
    # levels closer than the sampling error of their means are the same level
    if len(means) < 2 or np.ptp(means) <= max(10 * max(std_errors), 1e-6):
        raise RankDeficiencyError("calibration needs flats at two or more distinct intensity levels")
    design = np.stack([means, np.ones_like(means)], axis=1)
    (a, b), *_ = np.linalg.lstsq(design, variances, rcond=None)
    a, b = max(float(a), 0.0), max(float(b), 0.0)
    residual = float(np.sqrt(np.mean((design @ [a, b] - variances) ** 2)))
    return Calibration(NoiseParams(a, b, iso), residual, tuple(zip(means.tolist(), variances.tolist())))


def save_calibration(cal: Calibration, path: str | PathLike) -> None:
    Path(path).write_text(json.dumps(cal.to_json(), indent=2) + "\n")


def load_noise_params(path: str | PathLike) -> NoiseParams:
    doc = json.loads(Path(path).read_text())
    return NoiseParams(float(doc["a"]), float(doc["b"]), doc.get("iso"))


def params_to_json(params: NoiseParams) -> dict:
    return asdict(params)
