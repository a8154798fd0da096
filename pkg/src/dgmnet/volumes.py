"""Volumetric data types and the DGMV on-disk format.

A :class:`Volume` is an immutable 3D scalar grid indexed ``(z, y, x)`` with
physical voxel spacing in millimeters. Volumes carry either image intensities
(``VolumeKind.IMAGE``) or binary labels (``VolumeKind.MASK``, values exactly
0 or 1). The DGMV format stores one volume per file:

    magic "DGMV" | version u8 | kind u8 | W u32 | H u32 | C u32
    | sx f32 | sy f32 | sz f32                       (30-byte header)
    then W*H*C float32 voxels, little-endian, x fastest, then y, then z.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DGMV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBIIIfff")
HEADER_SIZE = _HEADER.size  # 30 bytes


class VolumeKind(enum.Enum):
    IMAGE = 0
    MASK = 1


class Modality(str, enum.Enum):
    HIGH_CONTRAST = "high_contrast"
    LOW_CONTRAST = "low_contrast"


class DGMVError(ValueError):
    """A DGMV file could not be parsed."""


class BadMagicError(DGMVError):
    pass


class BadDimsError(DGMVError):
    pass


class BadSpacingError(DGMVError):
    pass


class TruncatedPayloadError(DGMVError):
    pass


class MaskValueError(ValueError):
    """MASK volume contains values other than 0 and 1."""


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid, shape ``(C, H, W)`` = (depth, height, width), float32.

    Data is made read-only at construction; derive new Volumes instead of
    mutating. MASK volumes are validated to contain only 0 and 1.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: VolumeKind = VolumeKind.IMAGE

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D (z, y, x), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dimensions must all be >= 1, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three finite positive numbers, got {self.spacing!r}")
        if self.kind is VolumeKind.MASK:
            _check_binary(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(W, H, C) in x, y, z order."""
        return (self.width, self.height, self.depth)

    def slice_at(self, index: int) -> np.ndarray:
        """2D (H, W) array of slice ``index`` along z."""
        return self.data[index]

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "Volume":
        return Volume(data=data, spacing=self.spacing, kind=self.kind if kind is None else kind)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return (
            f"Volume(kind={self.kind.name}, dims={self.dims}, "
            f"spacing={tuple(round(s, 6) for s in self.spacing)})"
        )


def _check_binary(data: np.ndarray) -> None:
    bad = (data != 0) & (data != 1)
    if bad.any():
        values = np.unique(data[bad])[:5]
        raise MaskValueError(f"MASK volume has non-binary values, e.g. {values.tolist()}")


@dataclass(frozen=True)
class CaseRecord:
    """One case: an image volume paired with its ground-truth mask."""

    case_id: str
    image: Volume
    mask: Volume
    modality: Modality

    def __post_init__(self):
        if self.image.kind is not VolumeKind.IMAGE:
            raise ValueError(f"{self.case_id}: image volume has kind {self.image.kind.name}")
        if self.mask.kind is not VolumeKind.MASK:
            raise ValueError(f"{self.case_id}: mask volume has kind {self.mask.kind.name}")
        if self.image.data.shape != self.mask.data.shape:
            raise ValueError(
                f"{self.case_id}: image/mask dims differ "
                f"({self.image.data.shape} vs {self.mask.data.shape})"
            )
        if self.image.spacing != self.mask.spacing:
            raise ValueError(
                f"{self.case_id}: image/mask spacing differ "
                f"({self.image.spacing} vs {self.mask.spacing})"
            )


def write_volume(v: Volume, path) -> None:
    """Write a volume to ``path`` in DGMV format (see module docstring)."""
    path = Path(path)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        v.kind.value,
        v.width,
        v.height,
        v.depth,
        *v.spacing,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(v.data.tobytes())  # (z, y, x) C-order: x fastest on disk


def read_volume(path) -> Volume:
    """Read a DGMV file back into a Volume; rejects malformed headers."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, kind_code, w, h, c, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DGMVError(f"{path}: unsupported format version {version}")
    try:
        kind = VolumeKind(kind_code)
    except ValueError:
        raise DGMVError(f"{path}: unknown volume kind code {kind_code}") from None
    if w == 0 or h == 0 or c == 0:
        raise BadDimsError(f"{path}: zero dimension in header (W={w}, H={h}, C={c})")
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise BadSpacingError(f"{path}: non-positive or non-finite spacing ({sx}, {sy}, {sz})")
    expected = w * h * c * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} (W*H*C*4)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return Volume(data=data, spacing=(sx, sy, sz), kind=kind)


def binarize(v: Volume, threshold: float = 0.5) -> Volume:
    """Threshold an IMAGE volume into a MASK: voxel = 1 iff value > threshold."""
    if v.kind is not VolumeKind.IMAGE:
        raise ValueError(f"binarize expects an IMAGE volume, got {v.kind.name}")
    if not (0 < threshold < 1):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    data = (v.data > threshold).astype(np.float32)
    return Volume(data=data, spacing=v.spacing, kind=VolumeKind.MASK)


def as_image(v: Volume) -> Volume:
    """Re-cast a volume's values as an IMAGE (for reuse of image-only ops)."""
    return Volume(data=v.data, spacing=v.spacing, kind=VolumeKind.IMAGE)
