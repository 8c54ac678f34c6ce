"""CFA frames, Bayer pattern unification, 4-channel packing and the RVDS container.

Packed data is stored channel-planar: a packed frame is a ``(4, h, w)`` array in
R, G1, G2, B order and a sequence is a ``(T, C, h, w)`` array. All sample data is
float32 in normalized [0, 1] units (noisy samples may leave that range).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import NamedTuple

import numpy as np

from rawdn.errors import (
    BadMagicError,
    DimensionOverflowError,
    PatternError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)

CHANNELS = ("R", "G1", "G2", "B")


class BayerPattern(enum.Enum):
    """Top-left 2x2 CFA tile read row-major. Values are the RVDS pattern codes."""

    RGGB = 0
    BGGR = 1
    GRBG = 2
    GBRG = 3

    @classmethod
    def parse(cls, value: "BayerPattern | str | int") -> "BayerPattern":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise PatternError(f"unknown Bayer pattern {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise PatternError(f"unknown Bayer pattern code {value!r}") from None


class Flips(NamedTuple):
    vertical: bool
    horizontal: bool


# Reflecting an even-sized mosaic moves every tile by one row and/or column.
_UNIFY_FLIPS = {
    BayerPattern.RGGB: Flips(False, False),
    BayerPattern.GRBG: Flips(False, True),
    BayerPattern.GBRG: Flips(True, False),
    BayerPattern.BGGR: Flips(True, True),
}


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite samples")


@dataclass(frozen=True)
class RawFrame:
    data: np.ndarray
    pattern: BayerPattern = BayerPattern.RGGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeMismatchError(f"raw frame must be 2-D, got shape {data.shape}")
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise ShapeMismatchError(f"raw frame dimensions must be even, got {data.shape}")
        _check_finite(data, "raw frame")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pattern", BayerPattern.parse(self.pattern))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PackedFrame:
    data: np.ndarray  # (4, h, w)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] != 4:
            raise ShapeMismatchError(f"packed frame must have shape (4, h, w), got {data.shape}")
        _check_finite(data, "packed frame")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Sequence:
    """An ordered stack of equally sized frames, ``data`` shaped ``(T, C, h, w)``.

    ``C`` is 4 for packed frames (the normal case) and 1 for raw CFA frames.
    """

    data: np.ndarray
    source_pattern: BayerPattern = BayerPattern.RGGB
    noise: object | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 4 or data.shape[0] < 1 or data.shape[1] not in (1, 4):
            raise ShapeMismatchError(f"sequence must have shape (T>=1, 1|4, h, w), got {data.shape}")
        _check_finite(data, "sequence")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "source_pattern", BayerPattern.parse(self.source_pattern))

    @classmethod
    def from_frames(cls, frames, source_pattern=BayerPattern.RGGB, noise=None) -> "Sequence":
        arrays = [f.data if isinstance(f, PackedFrame) else np.asarray(f) for f in frames]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"frames differ in shape: {sorted(shapes)}")
        return cls(np.stack(arrays), source_pattern, noise)

    @property
    def frames(self) -> list[PackedFrame]:
        if self.channels != 4:
            raise ShapeMismatchError("frames are only defined for packed (4-channel) sequences")
        return [PackedFrame(f) for f in self.data]

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.source_pattern == other.source_pattern
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None


def _reflect(data: np.ndarray, flips: Flips) -> np.ndarray:
    if flips.vertical:
        data = data[::-1, :]
    if flips.horizontal:
        data = data[:, ::-1]
    return np.ascontiguousarray(data)


def unify_pattern(frame: RawFrame) -> tuple[RawFrame, Flips]:
    """Reflect ``frame`` so its mosaic starts with an R,G/G,B tile.

    Returns the RGGB frame and the flips applied; pass both to :func:`undo_unify`
    to get the original back.
    """
    flips = _UNIFY_FLIPS[frame.pattern]
    return RawFrame(_reflect(frame.data, flips), BayerPattern.RGGB), flips


def undo_unify(frame: RawFrame, flips: Flips) -> RawFrame:
    if frame.pattern is not BayerPattern.RGGB:
        raise PatternError(f"undo_unify expects an RGGB frame, got {frame.pattern.name}")
    flips = Flips(*flips)
    original = next(p for p, f in _UNIFY_FLIPS.items() if f == flips)
    return RawFrame(_reflect(frame.data, flips), original)


def pack_cfa(frame: RawFrame) -> PackedFrame:
    if frame.pattern is not BayerPattern.RGGB:
        raise PatternError(f"pack_cfa needs an RGGB mosaic, got {frame.pattern.name}; unify it first")
    d = frame.data
    return PackedFrame(np.stack([d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]]))


def unpack_cfa(frame: PackedFrame) -> RawFrame:
    p = frame.data
    h, w = p.shape[1:]
    out = np.empty((2 * h, 2 * w), dtype=np.float32)
    out[0::2, 0::2] = p[0]
    out[0::2, 1::2] = p[1]
    out[1::2, 0::2] = p[2]
    out[1::2, 1::2] = p[3]
    return RawFrame(out, BayerPattern.RGGB)


def pack_sequence(raw: np.ndarray, pattern: BayerPattern | str = BayerPattern.RGGB) -> Sequence:
    """Unify and pack a ``(T, H, W)`` (or ``(T, 1, H, W)``) stack of CFA frames."""
    raw = np.asarray(raw)
    if raw.ndim == 4:
        raw = raw[:, 0]
    pattern = BayerPattern.parse(pattern)
    packed = [pack_cfa(unify_pattern(RawFrame(f, pattern))[0]).data for f in raw]
    return Sequence(np.stack(packed), pattern)


AUGMENT_OPS = ("none", "hflip", "vflip", "transpose")


def augment(seq: Sequence, op: str) -> Sequence:
    """Bayer-preserving geometric augmentation applied to every packed frame.

    Flips mirror each channel plane: unpacked, the 2x2 tiles come out in mirrored
    order with each tile kept intact, so every site keeps its color. Transposing
    the mosaic maps G1 sites onto G2 sites, hence the channel swap.
    """
    if op not in AUGMENT_OPS:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    if seq.channels != 4:
        raise ShapeMismatchError("augment operates on packed sequences")
    d = seq.data
    if op == "none":
        return seq
    if op == "hflip":
        out = d[..., ::-1]
    elif op == "vflip":
        out = d[..., ::-1, :]
    else:
        out = d[:, [0, 2, 1, 3]].transpose(0, 1, 3, 2)
    return Sequence(np.ascontiguousarray(out), seq.source_pattern, seq.noise)


# RVDS container ---------------------------------------------------------------

RVDS_MAGIC = b"RVDS"
RVDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIBB2s")
_MAX_DIM = 1 << 16
_MAX_PAYLOAD = 1 << 36


def write_sequence(seq: Sequence, path: str | PathLike) -> None:
    t, c, h, w = seq.data.shape
    header = _HEADER.pack(RVDS_MAGIC, RVDS_VERSION, t, h, w, c, seq.source_pattern.value, 0, b"\0\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(seq.data.astype("<f4", copy=False).tobytes(order="C"))


def read_sequence(path: str | PathLike) -> Sequence:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != RVDS_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an RVDS file")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header ({len(blob)} bytes)")
    _, version, t, h, w, c, pattern, dtype, _ = _HEADER.unpack_from(blob)
    if version != RVDS_VERSION:
        raise VersionMismatchError(f"{path}: RVDS version {version}, expected {RVDS_VERSION}")
    if dtype != 0:
        raise VersionMismatchError(f"{path}: unsupported dtype code {dtype}")
    if c not in (1, 4) or min(t, h, w) < 1 or max(h, w) > _MAX_DIM or t > _MAX_DIM:
        raise DimensionOverflowError(f"{path}: implausible dimensions T={t} C={c} H={h} W={w}")
    count = t * c * h * w
    if count * 4 > _MAX_PAYLOAD:
        raise DimensionOverflowError(f"{path}: payload of {count} samples exceeds limit")
    payload = blob[_HEADER.size:]
    if len(payload) < count * 4:
        raise TruncatedPayloadError(f"{path}: header declares {count * 4} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", count=count).reshape(t, c, h, w)
    try:
        source = BayerPattern(pattern)
    except ValueError:
        raise BadMagicError(f"{path}: invalid pattern code {pattern}") from None
    return Sequence(data.astype(np.float32), source)
