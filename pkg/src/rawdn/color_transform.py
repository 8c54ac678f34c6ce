"""Learnable 4x4 channel decorrelation (R,G1,G2,B) -> (Y,U,V,W).

All functions act on torch tensors with the channel axis at position -3, so they
apply equally to a single ``(4, h, w)`` frame and to ``(B, 4, h, w)`` batches.
"""

from __future__ import annotations

import torch
from torch import nn

from rawdn.errors import SingularKernelError

YUVW_INIT = (
    (0.5, 0.5, 0.5, 0.5),
    (-0.5, 0.5, 0.5, -0.5),
    (0.65, 0.2784, -0.2784, -0.65),
    (-0.2784, 0.65, -0.65, 0.2784),
)
MAX_CONDITION = 1e8


class ColorKernel(nn.Module):
    """Point-wise convolution kernel ``M``; rows are the Y, U, V, W filters."""

    def __init__(self, matrix=None, dtype=torch.float32):
        super().__init__()
        if matrix is None:
            matrix = YUVW_INIT
        self.M = nn.Parameter(torch.as_tensor(matrix, dtype=dtype).clone())

    def forward(self, x):
        return color_forward(x, self.M)


def _matrix(k) -> torch.Tensor:
    return k.M if isinstance(k, ColorKernel) else k


def _apply(m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.einsum("ij,...jhw->...ihw", m.to(x.dtype), x)


def color_forward(x: torch.Tensor, k) -> torch.Tensor:
    return _apply(_matrix(k), x)


def inverse_matrix(k) -> torch.Tensor:
    m = _matrix(k)
    with torch.no_grad():
        cond = torch.linalg.cond(m.detach().double())
    if not torch.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularKernelError(f"color kernel is singular (condition number {float(cond):.3g})")
    return torch.linalg.inv(m)


def color_inverse(x: torch.Tensor, k) -> torch.Tensor:
    # A true inverse: M is only approximately orthonormal while training.
    return _apply(inverse_matrix(k), x)


def orthonormality_loss(k) -> torch.Tensor:
    m = _matrix(k)
    eye = torch.eye(m.shape[0], dtype=m.dtype, device=m.device)
    return torch.linalg.matrix_norm(m @ m.T - eye, ord="fro")


def transform_variance(v: torch.Tensor, k) -> torch.Tensor:
    """Channel variances after ``M`` for independent input channel noise."""
    m = _matrix(k)
    return _apply(m * m, v)


@torch.no_grad()
def project_orthonormal(k) -> None:
    """Gram-Schmidt the rows of ``M`` in place, keeping row order and signs."""
    m = _matrix(k)
    q, r = torch.linalg.qr(m.T)
    signs = torch.sign(torch.diagonal(r))
    signs[signs == 0] = 1
    m.copy_((q * signs).T)
