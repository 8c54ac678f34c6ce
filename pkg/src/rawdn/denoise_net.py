"""Recursive three-stage raw video denoiser (fusion, denoising, refinement).

Every frame is mapped to the decorrelated YUVW space, split into an average
pooled pyramid and processed per scale with one shared set of stage weights:

* fusion blends the frame into the running fused estimate with a predicted
  per-pixel weight ``gamma`` and propagates the estimate's noise variance;
* the denoising stage predicts a residual correction of the fused frame;
* coarse scales replace the low frequencies of finer ones;
* at the finest scale the refinement stage blends fused and denoised frames.

Tensors are batched ``(B, 4, h, w)``; unbatched ``(4, h, w)`` inputs are accepted
by :func:`step`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from rawdn.color_transform import ColorKernel, color_forward, color_inverse, inverse_matrix, transform_variance
from rawdn.errors import (
    BadMagicError,
    DataError,
    RangeError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnknownTensorError,
    VersionMismatchError,
)
from rawdn.noise_model import VAR_FLOOR, NoiseParams
from rawdn.raw_data import Sequence

DEFAULT_WIDTHS = (16, 32, 16)
DEFAULT_SCALES = 3


class ConvStage(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3 [-> sigmoid], size preserving."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int, activation: str | None = None):
        super().__init__()
        if activation not in (None, "sigmoid"):
            raise ValueError(f"unsupported output activation {activation!r}")
        self.activation = activation
        self.layer1 = nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="reflect")
        self.layer2 = nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="reflect")
        self.out = nn.Conv2d(hidden, out_channels, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        x = F.relu(self.layer1(x))
        x = F.relu(self.layer2(x))
        x = self.out(x)
        return torch.sigmoid(x) if self.activation == "sigmoid" else x

    def convs(self):
        return (self.layer1, self.layer2, self.out)


class ModelWeights(nn.Module):
    """Color kernel plus the three stage networks, shared by every scale."""

    def __init__(self, widths=DEFAULT_WIDTHS, scales: int = DEFAULT_SCALES, eps_var: float = VAR_FLOOR,
                 seed: int = 0):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        self.scales = int(scales)
        self.eps_var = float(eps_var)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"need three positive hidden widths, got {widths}")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        self.color = ColorKernel()
        self.fusion = ConvStage(8, self.widths[0], 1, "sigmoid")
        self.denoise = ConvStage(12, self.widths[1], 4, None)
        self.refine = ConvStage(12, self.widths[2], 1, "sigmoid")
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0, zero_final: bool = True, final_scale: float = 1.0) -> None:
        """He-uniform hidden layers and zero final layers (gamma = omega = 0.5, zero residual).

        ``zero_final=False`` draws the final layers too, scaled by ``final_scale``.
        """
        gen = torch.Generator().manual_seed(seed)
        for stage in self.stages():
            for conv in stage.convs():
                bound = math.sqrt(6.0 / (conv.in_channels * 9))
                if conv is stage.out:
                    if zero_final:
                        conv.weight.zero_()
                        conv.bias.zero_()
                        continue
                    bound *= final_scale
                w = torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
                conv.weight.copy_(w * bound)
                conv.bias.zero_()

    def stages(self):
        return (self.fusion, self.denoise, self.refine)

    def config(self) -> dict:
        return {"widths": list(self.widths), "scales": self.scales, "eps_var": self.eps_var}

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Parameters under their checkpoint names, e.g. ``fusion.layer1.kernel``."""
        return {_checkpoint_name(n): p for n, p in self.named_parameters()}


def _checkpoint_name(torch_name: str) -> str:
    return torch_name[: -len("weight")] + "kernel" if torch_name.endswith(".weight") else torch_name


def _shapes_agree(*tensors) -> None:
    base = tensors[0].shape[-2:]
    lead = tensors[0].shape[:-3]
    for t in tensors[1:]:
        if t.shape[-2:] != base or t.shape[:-3] != lead:
            raise ShapeMismatchError(f"shape mismatch: {tuple(tensors[0].shape)} vs {tuple(t.shape)}")


def _check_unit_range(weights: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        if weights.numel() and (weights.min() < 0 or weights.max() > 1):
            raise RangeError(f"{name} must lie in [0, 1]")


def fusion_weights(z, prev_fused, sigma_hat_sq, w: ModelWeights):
    _shapes_agree(z, prev_fused, sigma_hat_sq)
    return w.fusion(torch.cat([torch.abs(z - prev_fused), sigma_hat_sq], dim=-3))


def fuse(z, prev_fused, gamma):
    """``prev * (1 - gamma) + z * gamma``; equal operands come back bit-exact."""
    _shapes_agree(z, prev_fused, gamma)
    _check_unit_range(gamma, "gamma")
    return prev_fused + gamma * (z - prev_fused)


def propagate_variance(gamma, var_z, var_prev, floor: float = VAR_FLOOR):
    return torch.clamp(gamma * gamma * var_z + (1 - gamma) ** 2 * var_prev, min=floor)


def denoise_stage(fused, z, var_fused, w: ModelWeights):
    _shapes_agree(fused, z, var_fused)
    return fused + w.denoise(torch.cat([fused, z, var_fused], dim=-3))


def refine_weights(denoised, fused, var_fused, w: ModelWeights):
    _shapes_agree(denoised, fused, var_fused)
    return w.refine(torch.cat([denoised, fused, var_fused], dim=-3))


def refine(fused, denoised, omega):
    _shapes_agree(fused, denoised, omega)
    _check_unit_range(omega, "omega")
    return fused + omega * (denoised - fused)


def downsample(x):
    return F.avg_pool2d(x, 2)


def downsample_variance(v, floor: float = VAR_FLOOR):
    # mean of four independent samples
    return torch.clamp(F.avg_pool2d(v, 2) / 4, min=floor)


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


@dataclass
class StageOverrides:
    """Test hooks replacing stage predictions.

    ``gamma`` and ``omega`` are callables ``(t, scale) -> tensor or float``
    broadcastable to ``(B, 1, h, w)``; ``skip_denoise`` forces a zero residual.
    """

    gamma: Callable | None = None
    omega: Callable | None = None
    skip_denoise: bool = False


@dataclass
class DenoiserState:
    """Per-scale recurrent state. ``gamma``/``omega`` hold the last step's maps."""

    fused: list = field(default_factory=list)
    variance: list = field(default_factory=list)
    t: int = 0
    gamma: list = field(default_factory=list)
    omega: torch.Tensor | None = None

    @property
    def empty(self) -> bool:
        return not self.fused


def _noise_coeffs(params, z: torch.Tensor):
    if isinstance(params, NoiseParams):
        return params.a, params.b
    a, b = params
    a = torch.as_tensor(a, dtype=z.dtype).reshape(-1, 1, 1, 1)
    b = torch.as_tensor(b, dtype=z.dtype).reshape(-1, 1, 1, 1)
    return a, b


def raw_variance(z: torch.Tensor, params, floor: float = VAR_FLOOR) -> torch.Tensor:
    a, b = _noise_coeffs(params, z)
    return torch.clamp(a * torch.clamp(z, min=0) + b, min=floor)


def _as_map(value, ref: torch.Tensor) -> torch.Tensor:
    value = torch.as_tensor(value, dtype=ref.dtype)
    return value.expand(ref.shape[0], 1, *ref.shape[-2:]) if value.dim() < 4 else value


def step(state: DenoiserState, z_raw, params, w: ModelWeights, overrides: StageOverrides | None = None,
         inverse: torch.Tensor | None = None):
    """Denoise one packed RGGB frame; returns ``(output RGGB frame, new state)``.

    ``params`` is a :class:`NoiseParams` or a pair of per-batch ``(a, b)`` tensors.
    ``inverse`` may carry a precomputed inverse color matrix.
    """
    unbatched = z_raw.dim() == 3
    z = z_raw.unsqueeze(0) if unbatched else z_raw
    if z.dim() != 4 or z.shape[1] != 4:
        raise ShapeMismatchError(f"expected (B, 4, h, w) frames, got {tuple(z_raw.shape)}")
    n_scales = w.scales
    h, wd = z.shape[-2:]
    if h % 2 ** (n_scales - 1) or wd % 2 ** (n_scales - 1):
        raise ShapeMismatchError(f"frame {h}x{wd} not divisible by 2^{n_scales - 1} for {n_scales} scales")
    ov = overrides or StageOverrides()
    floor = w.eps_var

    zs = [color_forward(z, w.color.M)]
    vs = [torch.clamp(transform_variance(raw_variance(z, params, floor), w.color.M), min=floor)]
    for _ in range(1, n_scales):
        zs.append(downsample(zs[-1]))
        vs.append(downsample_variance(vs[-1], floor))

    first = state.empty
    if not first:
        if len(state.fused) != n_scales or state.fused[0].shape != zs[0].shape:
            got = tuple(state.fused[0].shape) if state.fused else ()
            raise ShapeMismatchError(f"frame shape {tuple(zs[0].shape)} does not match state {got}")

    fused, variances, denoised, gammas = [], [], [], []
    for s in range(n_scales):
        prev = zs[s] if first else state.fused[s]
        prev_var = vs[s] if first else state.variance[s]
        if ov.gamma is not None:
            gamma = _as_map(ov.gamma(state.t, s), zs[s])
        else:
            gamma = fusion_weights(zs[s], prev, vs[s], w)
        y_bar = fuse(zs[s], prev, gamma)
        # frame 0 is fused with itself: fully correlated, so the independent-mix variance does not apply
        var_bar = vs[s] if first else propagate_variance(gamma, vs[s], prev_var, floor)
        y_tilde = y_bar if ov.skip_denoise else denoise_stage(y_bar, zs[s], var_bar, w)
        fused.append(y_bar)
        variances.append(var_bar)
        denoised.append(y_tilde)
        gammas.append(gamma)

    estimate = denoised[-1]
    for s in range(n_scales - 2, -1, -1):
        estimate = denoised[s] + upsample(estimate - downsample(denoised[s]))

    if ov.omega is not None:
        omega = _as_map(ov.omega(state.t, 0), estimate)
    else:
        omega = refine_weights(estimate, fused[0], variances[0], w)
    y_hat = refine(fused[0], estimate, omega)
    out = color_inverse(y_hat, w.color.M) if inverse is None else color_forward(y_hat, inverse)

    new_state = DenoiserState(fused, variances, state.t + 1, gammas, omega)
    return (out[0] if unbatched else out), new_state


def run_sequence(w: ModelWeights, frames: torch.Tensor, params, overrides: StageOverrides | None = None,
                 keep_states: bool = False):
    """Fold :func:`step` over ``frames`` shaped ``(B, T, 4, h, w)``.

    Returns the ``(B, T, 4, h, w)`` output, plus the list of per-frame states when
    ``keep_states`` is set.
    """
    if frames.dim() != 5 or frames.shape[1] < 1:
        raise ShapeMismatchError(f"expected (B, T, 4, h, w), got {tuple(frames.shape)}")
    inverse = inverse_matrix(w.color.M)
    state = DenoiserState()
    outputs, states = [], []
    for t in range(frames.shape[1]):
        out, state = step(state, frames[:, t], params, w, overrides, inverse)
        outputs.append(out)
        if keep_states:
            states.append(state)
    out = torch.stack(outputs, dim=1)
    return (out, states) if keep_states else out


def denoise_sequence(seq: Sequence, params: NoiseParams, w: ModelWeights,
                     overrides: StageOverrides | None = None) -> Sequence:
    if seq.channels != 4:
        raise ShapeMismatchError("denoise_sequence needs a packed 4-channel sequence")
    dtype = next(w.parameters()).dtype
    frames = torch.from_numpy(np.array(seq.data)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        out = run_sequence(w, frames, params, overrides)
    return Sequence(out[0].numpy(), seq.source_pattern, params)


# Cost accounting ----------------------------------------------------------------

def count_params(w: ModelWeights) -> int:
    return sum(p.numel() for p in w.parameters())


def _conv_macs(conv: nn.Conv2d, pixels: int) -> int:
    kh, kw = conv.kernel_size
    return conv.in_channels * conv.out_channels * kh * kw * pixels


def count_macs(w: ModelWeights, height: int, width: int, frames: int = 1) -> int:
    """Multiply-accumulates to denoise ``frames`` packed frames of ``height x width``.

    Counts the color transforms (image, variance and inverse), the fusion and
    denoising stages at every scale and refinement at the finest scale. Pooling,
    upsampling and elementwise blends are not multiply-accumulates and are left out.
    """
    if height % 2 ** (w.scales - 1) or width % 2 ** (w.scales - 1):
        raise ShapeMismatchError(f"{height}x{width} not divisible by 2^{w.scales - 1}")
    pixels = height * width
    per_frame = 3 * 16 * pixels
    for s in range(w.scales):
        p = pixels // 4 ** s
        per_frame += sum(_conv_macs(c, p) for c in w.fusion.convs())
        per_frame += sum(_conv_macs(c, p) for c in w.denoise.convs())
    per_frame += sum(_conv_macs(c, pixels) for c in w.refine.convs())
    return per_frame * frames


# Checkpoints ----------------------------------------------------------------------

RVDW_MAGIC = b"RVDW"
RVDW_VERSION = 1


def sidecar_path(path: str | PathLike) -> Path:
    return Path(str(path) + ".json")


def save_weights(w: ModelWeights, path: str | PathLike) -> None:
    tensors = w.named_tensors()
    chunks = [RVDW_MAGIC, struct.pack("<II", RVDW_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        data = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        chunks.append(data.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))
    sidecar_path(path).write_text(json.dumps(w.config(), indent=2) + "\n")


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | PathLike) -> dict[str, np.ndarray]:
    """Raw named tensors of an RVDW file, in file order."""
    blob = Path(path).read_bytes()
    if blob[:4] != RVDW_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an RVDW checkpoint")
    r = _Reader(blob, path)
    r.take(4)
    version, count = r.unpack("<II")
    if version != RVDW_VERSION:
        raise VersionMismatchError(f"{path}: RVDW version {version}, expected {RVDW_VERSION}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return tensors


def load_weights(path: str | PathLike, widths=None, scales: int | None = None) -> ModelWeights:
    """Load a checkpoint; ``widths``/``scales`` override the JSON sidecar."""
    config = {}
    if sidecar_path(path).exists():
        config = json.loads(sidecar_path(path).read_text())
    tensors = read_checkpoint(path)
    w = ModelWeights(
        widths=widths or config.get("widths", DEFAULT_WIDTHS),
        scales=scales or config.get("scales", DEFAULT_SCALES),
        eps_var=config.get("eps_var", VAR_FLOOR),
    )
    expected = w.named_tensors()
    for name, data in tensors.items():
        if name not in expected:
            raise UnknownTensorError(f"{path}: unknown tensor {name!r}")
        if tuple(data.shape) != tuple(expected[name].shape):
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} has shape {tuple(data.shape)}, "
                f"configured model expects {tuple(expected[name].shape)}"
            )
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise DataError(f"{path}: checkpoint lacks tensors {missing}")
    with torch.no_grad():
        for name, data in tensors.items():
            expected[name].copy_(torch.from_numpy(data))
    return w
