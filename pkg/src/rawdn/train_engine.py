"""Losses, synthetic data, crop sampling, the Adam training loop and gradient checking."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from rawdn.color_transform import orthonormality_loss, project_orthonormal
from rawdn.denoise_net import DEFAULT_WIDTHS, ModelWeights, denoise_sequence, run_sequence
from rawdn.errors import DivergenceError, NonFiniteLossError, ShapeMismatchError
from rawdn.metrics import psnr, ssim
from rawdn.noise_model import ISO_PRESETS, HIGHEST_PRESET, NoiseParams, add_noise
from rawdn.raw_data import AUGMENT_OPS, BayerPattern, Sequence, augment

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PROJECTION_THRESHOLD = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 3000
    decay_points: tuple = (0.7, 0.9)
    decay_factor: float = 0.1
    crop: int = 128  # raw pixels
    seq_len: int = 25
    crops_per_seq: int = 16
    scales: int = 3
    widths: tuple = DEFAULT_WIDTHS
    seed: int = 0
    val_interval: int = 25
    augment: bool = True
    refresh_noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(self.decay_points))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.crop % (2 * 2 ** (self.scales - 1)):
            raise ValueError(f"crop {self.crop} must be divisible by {2 * 2 ** (self.scales - 1)}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.crops_per_seq < 1:
            raise ValueError("batch_size, epochs and crops_per_seq must be positive")

    def replace(self, **changes) -> "TrainConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        base = PRESETS[doc.get("preset", "paper")]
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)} - {"preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return base.replace(**{k: v for k, v in doc.items() if k != "preset"})


PRESETS = {
    "paper": TrainConfig(),
    "desk": TrainConfig(crop=64, seq_len=8, crops_per_seq=4, epochs=200),
}


def load_config(path: str | PathLike) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text()))


@dataclass
class TrainExample:
    noisy: Sequence
    clean: Sequence
    params: NoiseParams
    noise_seed: int | None = None

    def __post_init__(self):
        if self.noisy.data.shape != self.clean.data.shape:
            raise ShapeMismatchError(f"noisy {self.noisy.data.shape} and clean {self.clean.data.shape} differ")


# Synthetic scenes ---------------------------------------------------------------

def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth random RGB texture in [0.05, 0.95], shape (3, H, W)."""
    luma = gaussian_filter(rng.standard_normal((height, width)), 4.0)
    luma += 0.5 * gaussian_filter(rng.standard_normal((height, width)), 1.5)
    chroma = [gaussian_filter(rng.standard_normal((height, width)), 6.0) for _ in range(3)]
    gains = rng.uniform(0.7, 1.3, size=3)
    rgb = np.stack([g * luma + 0.3 * c for g, c in zip(gains, chroma)])
    lo, hi = rgb.min(), rgb.max()
    return 0.05 + 0.9 * (rgb - lo) / (hi - lo)


def _trajectory(rng: np.random.Generator, frames: int, motion: int) -> np.ndarray:
    pos = np.zeros((frames, 2), dtype=int)
    for t in range(1, frames):
        step = np.zeros(2, dtype=int)
        while motion > 0 and not step.any():
            step = rng.integers(-motion, motion + 1, size=2)
        pos[t] = np.clip(pos[t - 1] + step, -motion * (frames - 1), motion * (frames - 1))
    return pos


def synth_scene(seed, frames: int, height: int, width: int, motion: int = 0) -> Sequence:
    """A translating smooth texture, mosaiced RGGB at ``height x width`` raw pixels and packed.

    Each frame moves by an integer shift of at most ``motion`` raw pixels per axis.
    """
    if height % 2 or width % 2:
        raise ShapeMismatchError(f"raw size must be even, got {height}x{width}")
    rng = np.random.default_rng(seed)
    pad = motion * (frames - 1)
    tex = _texture(rng, height + 2 * pad, width + 2 * pad)
    out = np.empty((frames, 4, height // 2, width // 2))
    for t, (dy, dx) in enumerate(_trajectory(rng, frames, motion)):
        win = tex[:, pad + dy: pad + dy + height, pad + dx: pad + dx + width]
        r, g, b = win
        out[t] = (r[0::2, 0::2], g[0::2, 1::2], g[1::2, 0::2], b[1::2, 1::2])
    return Sequence(out, BayerPattern.RGGB)


def sample_crops(clean: Sequence, config: TrainConfig, seed, params: NoiseParams) -> list[TrainExample]:
    """``crops_per_seq`` random spatio-temporal crops with fresh noise each.

    Offsets are whole packed pixels, i.e. even raw coordinates, so CFA phase is kept.
    """
    half = config.crop // 2
    if half > clean.height or half > clean.width:
        raise ShapeMismatchError(f"crop {config.crop} exceeds raw frame {2 * clean.height}x{2 * clean.width}")
    if config.seq_len > clean.length:
        raise ShapeMismatchError(f"sequence length {config.seq_len} exceeds {clean.length} frames")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(config.crops_per_seq):
        t0 = int(rng.integers(0, clean.length - config.seq_len + 1))
        y0 = int(rng.integers(0, clean.height - half + 1))
        x0 = int(rng.integers(0, clean.width - half + 1))
        noise_seed = int(rng.integers(0, 2**63 - 1))
        crop = Sequence(clean.data[t0:t0 + config.seq_len, :, y0:y0 + half, x0:x0 + half], clean.source_pattern)
        examples.append(TrainExample(add_noise(crop, params, noise_seed), crop, params, noise_seed))
    return examples


# Losses ----------------------------------------------------------------------------

def _tensor(x) -> torch.Tensor:
    if isinstance(x, Sequence):
        return torch.from_numpy(np.array(x.data))
    return torch.as_tensor(x)


def reconstruction_loss(pred, truth) -> torch.Tensor:
    """Mean over frames of the per-frame mean absolute error (packed RGGB domain)."""
    pred, truth = _tensor(pred), _tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    return torch.mean(torch.abs(pred - truth))


def total_loss(pred, truth, kernel) -> torch.Tensor:
    return reconstruction_loss(pred, truth) + orthonormality_loss(kernel)


def learning_rate(config: TrainConfig, iteration: int, total_iterations: int) -> float:
    drops = sum(iteration >= p * total_iterations for p in config.decay_points)
    return config.lr * config.decay_factor**drops


# Gradients ---------------------------------------------------------------------------

def _batch(examples, dtype):
    noisy = torch.stack([_tensor(e.noisy) for e in examples]).to(dtype)
    clean = torch.stack([_tensor(e.clean) for e in examples]).to(dtype)
    a = torch.tensor([e.params.a for e in examples], dtype=dtype)
    b = torch.tensor([e.params.b for e in examples], dtype=dtype)
    return noisy, clean, (a, b)


def forward_loss(w: ModelWeights, examples) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total, reconstruction and orthonormality losses for a batch of examples."""
    dtype = next(w.parameters()).dtype
    noisy, clean, params = _batch(examples, dtype)
    pred = run_sequence(w, noisy, params)
    l_r = reconstruction_loss(pred, clean)
    l_c = orthonormality_loss(w.color.M)
    return l_r + l_c, l_r, l_c


def _first_nonfinite(w: ModelWeights, use_grad: bool) -> str | None:
    for name, p in w.named_tensors().items():
        t = p.grad if use_grad else p
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def backward(example, w: ModelWeights) -> dict[str, torch.Tensor]:
    """Gradients of the total loss for one example (or a list), keyed by checkpoint name.

    Backpropagates through every frame of the recurrence and every scale.
    """
    examples = example if isinstance(example, (list, tuple)) else [example]
    w.zero_grad(set_to_none=True)
    loss, _, _ = forward_loss(w, examples)
    if not torch.isfinite(loss):
        name = _first_nonfinite(w, use_grad=False) or "loss"
        raise NonFiniteLossError(f"non-finite loss {loss.detach().item()} (first offending tensor: {name})", name)
    loss.backward()
    bad = _first_nonfinite(w, use_grad=True)
    if bad:
        raise NonFiniteLossError(f"non-finite gradient in {bad}", bad)
    grads = {}
    for name, p in w.named_tensors().items():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return grads


# Training ------------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def validation(self) -> list[dict]:
        return [r for r in self.records if "psnr" in r]

    def write_jsonl(self, path: str | PathLike) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def read_log(path: str | PathLike) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def validate(w: ModelWeights, examples) -> dict:
    """Mean PSNR/SSIM of denoised validation sequences against their clean frames."""
    p, s = [], []
    for ex in examples:
        out = denoise_sequence(ex.noisy, ex.params, w)
        for y, c in zip(out.data, ex.clean.data):
            p.append(psnr(y, c))
            s.append(ssim(y, c))
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s))}


def _epoch_examples(dataset, config: TrainConfig, epoch: int) -> list[TrainExample]:
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(dataset))
    out = []
    for i in order:
        ex = dataset[i]
        noisy, clean = ex.noisy, ex.clean
        if config.refresh_noise and epoch > 0 and ex.noise_seed is not None:
            noisy = add_noise(clean, ex.params, [ex.noise_seed, epoch])
        if config.augment:
            op = AUGMENT_OPS[int(rng.integers(len(AUGMENT_OPS)))]
            if op == "transpose" and clean.height != clean.width:
                op = "none"
            noisy, clean = augment(noisy, op), augment(clean, op)
        out.append(TrainExample(noisy, clean, ex.params, ex.noise_seed))
    return out


def train(config: TrainConfig, dataset: list[TrainExample], validation: list[TrainExample] | None = None,
          weights: ModelWeights | None = None, callback: Callable[[dict], None] | None = None):
    """Adam with a piecewise-constant learning rate; returns ``(weights, TrainLog)``.

    Each epoch reshuffles the dataset, optionally redraws the noise (seeded by
    the example's noise seed and the epoch) and applies a random Bayer-preserving
    flip or transpose. Validation runs every ``val_interval`` epochs and after the
    last one.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    w = weights or ModelWeights(config.widths, config.scales, seed=config.seed)
    opt = torch.optim.Adam(w.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = per_epoch * config.epochs
    history = TrainLog()
    iteration = 0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        examples = _epoch_examples(dataset, config, epoch)
        for start in range(0, len(examples), config.batch_size):
            lr = learning_rate(config, iteration, total)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss, l_r, l_c = forward_loss(w, examples[start:start + config.batch_size])
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.detach().item()} at iteration {iteration}", iteration)
            loss.backward()
            opt.step()
            if orthonormality_loss(w.color.M).item() > PROJECTION_THRESHOLD:
                project_orthonormal(w.color)
            record = {"iter": iteration, "epoch": epoch, "lr": lr, "loss": loss.item(),
                      "l_r": l_r.item(), "l_c": l_c.item()}
            iteration += 1
            last_of_epoch = start + config.batch_size >= len(examples)
            if validation and last_of_epoch and ((epoch + 1) % config.val_interval == 0
                                                 or epoch + 1 == config.epochs):
                record.update(validate(w, validation))
                log.info("epoch %d iter %d loss %.5f psnr %.3f ssim %.4f (%.0fs)", epoch, iteration,
                         record["loss"], record["psnr"], record["ssim"], time.perf_counter() - started)
            history.append(record)
            if callback:
                callback(record)
    return w, history


# Finite-difference gradient check --------------------------------------------------------

@dataclass
class GradcheckResult:
    """Outcome of a finite-difference check.

    ``max_rel_error`` covers entries where the loss is smooth over the stencil.
    Entries whose stencil straddles a kink (ReLU, absolute value, L1 residual
    crossing zero) are re-checked with a finer stencil; their worst error is
    ``kink_max_rel_error``.
    """

    max_rel_error: float
    kink_max_rel_error: float
    per_tensor: dict
    checked: int
    skipped: int
    kinks: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.kink_max_rel_error < self.tolerance

    def to_json(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "kink_max_rel_error": self.kink_max_rel_error,
                "tolerance": self.tolerance, "passed": self.passed, "checked": self.checked,
                "skipped": self.skipped, "kinks": self.kinks, "per_tensor": self.per_tensor}


def gradcheck_setup(seed: int = 7, size: int = 8, frames: int = 3, scales: int = 2, widths=(4, 6, 4)):
    """Double-precision model at a generic point, plus a noisy example.

    All layers (final ones included) and biases are random, and the color kernel
    is pushed off orthonormality: the Frobenius penalty is cone-shaped around
    orthonormal kernels, narrower there than any useful stencil.
    """
    w = ModelWeights(widths, scales, seed=seed).double()
    w.reset_parameters(seed, zero_final=False, final_scale=0.5)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for stage in w.stages():
            for conv in stage.convs():
                conv.bias.copy_(0.1 * (torch.rand(conv.bias.shape, generator=gen, dtype=torch.float64) - 0.5))
        w.color.M.add_(0.05 * torch.randn(4, 4, generator=gen, dtype=torch.float64))
    params = ISO_PRESETS[HIGHEST_PRESET]
    clean = synth_scene(seed, frames, 2 * size, 2 * size, motion=1)
    noisy = add_noise(clean, params, seed)
    return w, TrainExample(noisy, clean, params, seed)


def _rel(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


def finite_difference_check(w: ModelWeights, example: TrainExample, step: float = 1e-4, tolerance: float = 1e-4,
                            threshold: float = 1e-8, names: Iterable[str] | None = None,
                            max_entries: int | None = None, seed: int = 0, fine_factor: float = 1e-2
                            ) -> GradcheckResult:
    """Compare :func:`backward` with central differences of the total loss, entry by entry.

    Entries where both gradients are at most ``threshold`` are skipped. An entry
    failing at ``step`` counts as a kink only if its one-sided differences disagree
    (the slope changes inside the stencil) and the central difference at
    ``step * fine_factor`` matches; otherwise it is a failure. ``max_entries``
    caps the entries per tensor (randomly chosen) for quick checks.
    """
    analytic = backward(example, w)
    tensors = w.named_tensors()
    rng = np.random.default_rng(seed)
    per_tensor, checked, skipped, kinks = {}, 0, 0, 0
    kink_worst = 0.0

    def loss_value() -> float:
        with torch.no_grad():
            return forward_loss(w, [example])[0].item()

    base = loss_value()

    def probe(flat, i, h):
        orig = flat[i].item()
        flat[i] = orig + h
        up = loss_value()
        flat[i] = orig - h
        down = loss_value()
        flat[i] = orig
        return (up - down) / (2 * h), (up - base) / h, (base - down) / h

    for name in names or tensors:
        param = tensors[name]
        flat = param.data.view(-1)
        g = analytic[name].view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = np.sort(rng.choice(flat.numel(), max_entries, replace=False))
        worst = 0.0
        for i in idx:
            ga = g[i].item()
            central, forward_d, backward_d = probe(flat, i, step)
            if max(abs(ga), abs(central)) <= threshold:
                skipped += 1
                continue
            checked += 1
            err = _rel(ga, central)
            if err >= tolerance and _rel(forward_d, backward_d) >= tolerance:
                fine_err = _rel(ga, probe(flat, i, step * fine_factor)[0])
                if fine_err < tolerance:
                    kinks += 1
                    kink_worst = max(kink_worst, fine_err)
                    continue
            worst = max(worst, err)
        per_tensor[name] = worst
    max_err = max(per_tensor.values()) if per_tensor else 0.0
    return GradcheckResult(max_err, kink_worst, per_tensor, checked, skipped, kinks, tolerance)


def gradcheck(seed: int = 7, **kwargs) -> GradcheckResult:
    setup_keys = {"size", "frames", "scales", "widths"}
    w, example = gradcheck_setup(seed, **{k: v for k, v in kwargs.items() if k in setup_keys})
    return finite_difference_check(w, example, **{k: v for k, v in kwargs.items() if k not in setup_keys})
