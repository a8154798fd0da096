"""Preprocessing chain: voxel resampling, center crop + resize, normalization.

Geometric operations use a voxel-center convention: output voxel center i sits
at physical position (i + 0.5) * spacing along each axis. Images interpolate
trilinearly/bilinearly, masks use nearest-neighbor and stay binary. Samples
falling outside the grid clamp to the boundary voxel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_volume
from .volumes import CaseRecord, Volume, VolumeKind


class NormalizationScope(str, enum.Enum):
    PER_VOLUME = "per_volume"
    DATASET = "dataset"


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    target_size: tuple[int, int] = (256, 256)  # (width, height)
    normalization_scope: NormalizationScope = NormalizationScope.PER_VOLUME

    def __post_init__(self):
        w, h = self.target_size
        if w < 8 or h < 8 or w % 2 or h % 2:
            raise ValueError(f"target_size components must be >= 8 and even, got {self.target_size}")
        if not all(s > 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be positive, got {self.target_spacing}")


def _sample_coords(out_shape, scale, offset=None):
    # in_index = (out_index + 0.5) * scale - 0.5 (+ crop offset), per axis
    coords = np.meshgrid(
        *[np.arange(n, dtype=np.float64) for n in out_shape], indexing="ij", sparse=True
    )
    mapped = []
    for axis, c in enumerate(coords):
        m = (c + 0.5) * scale[axis] - 0.5
        if offset is not None:
            m = m + offset[axis]
        mapped.append(m)
    return np.broadcast_arrays(*mapped)


def _interpolate(data: np.ndarray, coords, nearest: bool) -> np.ndarray:
    order = 0 if nearest else 1
    out = ndimage.map_coordinates(
        data.astype(np.float64), np.stack(coords), order=order, mode="nearest"
    )
    return out.astype(np.float32)


def resample(v: Volume, target_spacing) -> Volume:
    """Resample to ``target_spacing`` (mm); dims = round(dim * spacing / target)."""
    check_volume(v)
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(np.isfinite(s) and s > 0 for s in target):
        raise ValueError(f"target_spacing must be three positive numbers, got {target_spacing}")
    sx, sy, sz = v.spacing
    tx, ty, tz = target
    out_w = int(round(v.width * sx / tx))
    out_h = int(round(v.height * sy / ty))
    out_c = int(round(v.depth * sz / tz))
    if min(out_w, out_h, out_c) < 1:
        raise ValueError(
            f"resampling {v.dims} at {v.spacing} to {target} yields a zero-sized volume"
        )
    if (out_w, out_h, out_c) == v.dims and target == v.spacing:
        return Volume(data=v.data, spacing=target, kind=v.kind)
    scale = (tz / sz, ty / sy, tx / sx)  # (z, y, x) order
    coords = _sample_coords((out_c, out_h, out_w), scale)
    data = _interpolate(v.data, coords, nearest=v.kind is VolumeKind.MASK)
    return Volume(data=data, spacing=target, kind=v.kind)


def center_crop_resize(v: Volume, target_size) -> Volume:
    """Crop each slice to the centered min(W,H) square, then resize in-plane."""
    check_volume(v)
    tw, th = int(target_size[0]), int(target_size[1])
    if tw < 1 or th < 1:
        raise ValueError(f"target_size must be positive, got {target_size}")
    side = min(v.width, v.height)
    x0 = (v.width - side) // 2
    y0 = (v.height - side) // 2
    cropped = v.data[:, y0 : y0 + side, x0 : x0 + side]
    if (side, side) == (tw, th):
        data = cropped
    else:
        scale = (1.0, side / th, side / tw)
        coords = _sample_coords((v.depth, th, tw), scale)
        data = _interpolate(cropped, coords, nearest=v.kind is VolumeKind.MASK)
    sx, sy, sz = v.spacing
    spacing = (sx * side / tw, sy * side / th, sz)
    return Volume(data=data, spacing=spacing, kind=v.kind)


def normalize(v: Volume, mean: float | None = None, std: float | None = None) -> Volume:
    """Zero-center and scale to unit standard deviation.

    Statistics default to the volume's own; pass ``mean``/``std`` to apply
    dataset-level statistics instead. Constant volumes map to all zeros.
    """
    check_volume(v, kind=VolumeKind.IMAGE, name="normalize input")
    data = v.data.astype(np.float64)
    if mean is None:
        if np.all(v.data == v.data.flat[0]):
            return Volume(data=np.zeros_like(v.data), spacing=v.spacing, kind=VolumeKind.IMAGE)
        mean = float(data.mean())
        std = float(data.std())
    elif std is None:
        raise ValueError("mean and std must be given together")
    out = (data - mean) / (std + 1e-8)
    return Volume(data=out.astype(np.float32), spacing=v.spacing, kind=VolumeKind.IMAGE)


class VolumePreprocessor(BaseEstimator, TransformerMixin):
    """Resample -> center crop/resize -> normalize, as one sklearn transformer.

    Masks go through the geometric steps with nearest-neighbor interpolation
    and skip normalization. With ``normalization_scope="dataset"``, call
    ``fit`` on the training images first; statistics are pooled over all
    voxels of the geometrically transformed volumes.
    """

    def __init__(
        self,
        target_spacing=(1.0, 1.0, 1.0),
        target_size=(256, 256),
        normalization_scope="per_volume",
    ):
        self.target_spacing = target_spacing
        self.target_size = target_size
        self.normalization_scope = normalization_scope

    def to_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            target_spacing=tuple(self.target_spacing),
            target_size=tuple(self.target_size),
            normalization_scope=NormalizationScope(self.normalization_scope),
        )


    def fit(self, X, y=None):
        cfg = self.to_config()
        if cfg.normalization_scope is NormalizationScope.DATASET:
            volumes = [X] if isinstance(X, Volume) else list(X)
            if not volumes:
                raise ValueError("dataset-scope normalization needs at least one volume to fit")
            pooled = np.concatenate(
                [
                    self._geometric(v).data.ravel().astype(np.float64)
                    for v in volumes
                    if v.kind is VolumeKind.IMAGE
                ]
            )
            self.mean_ = float(pooled.mean())
            self.std_ = float(pooled.std())
        return self

    def _geometric(self, v: Volume) -> Volume:
        cfg = self.to_config()
        return center_crop_resize(resample(v, cfg.target_spacing), cfg.target_size)

    def transform(self, X):
        if isinstance(X, Volume):
            return self._transform_one(X)
        return [self._transform_one(v) for v in X]

    def _transform_one(self, v: Volume) -> Volume:
        cfg = self.to_config()
        out = self._geometric(v)
        if v.kind is VolumeKind.MASK:
            return out
        if cfg.normalization_scope is NormalizationScope.DATASET:
            if not hasattr(self, "mean_"):
                raise RuntimeError("dataset-scope normalization requires fit() before transform()")
            return normalize(out, mean=self.mean_, std=self.std_)
        return normalize(out)

    def transform_case(self, case: CaseRecord) -> CaseRecord:
        return CaseRecord(
            case_id=case.case_id,
            image=self._transform_one(case.image),
            mask=self._transform_one(case.mask),
            modality=case.modality,
        )


def preprocessor_from_config(config: PreprocessConfig) -> VolumePreprocessor:
    return VolumePreprocessor(
        target_spacing=config.target_spacing,
        target_size=config.target_size,
        normalization_scope=config.normalization_scope.value,
    )
