"""Per-slice boundary landmarks: extraction from masks and the flat encoding.

Each slice of a mask yields a presence flag plus four extreme boundary points
(left, right, top, bottom) in normalized [0,1] coordinates. The flat encoding
lays slices out as 9 entries each: [present, xl, yl, xr, yr, xt, yt, xb, yb],
zero-padded up to a fixed slice budget. This vector is the shape decoder's
input representation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import check_volume
from .volumes import Volume, VolumeKind

SENTINEL = (-1.0, -1.0)
ENTRIES_PER_SLICE = 9
POINT_NAMES = ("left", "right", "top", "bottom")


@dataclass(frozen=True)
class LandmarkRecord:
    """Landmarks of one slice; ``points`` ordered (left, right, top, bottom)."""

    slice_index: int
    present: int
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.present not in (0, 1):
            raise ValueError(f"present must be 0 or 1, got {self.present}")
        if len(self.points) != 4:
            raise ValueError(f"expected 4 landmark points, got {len(self.points)}")
        points = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", points)
        if self.present == 0:
            if any(p != SENTINEL for p in points):
                raise ValueError("absent slices must carry the (-1, -1) sentinel points")
        else:
            left, right, top, bottom = points
            if left[0] > right[0]:
                raise ValueError(f"left.x must be <= right.x, got {left[0]} > {right[0]}")
            if top[1] > bottom[1]:
                raise ValueError(f"top.y must be <= bottom.y, got {top[1]} > {bottom[1]}")

    @property
    def left(self):
        return self.points[0]

    @property
    def right(self):
        return self.points[1]

    @property
    def top(self):
        return self.points[2]

    @property
    def bottom(self):
        return self.points[3]


def absent_record(slice_index: int) -> LandmarkRecord:
    return LandmarkRecord(slice_index=slice_index, present=0, points=(SENTINEL,) * 4)


@dataclass(frozen=True)
class LandmarkSet:
    """One LandmarkRecord per slice of a source mask of size ``dims`` = (W, H, C)."""

    records: tuple[LandmarkRecord, ...]
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.records) != self.dims[2]:
            raise ValueError(
                f"expected {self.dims[2]} records (one per slice), got {len(self.records)}"
            )
        for u, rec in enumerate(self.records):
            if rec.slice_index != u:
                raise ValueError(f"record {u} has slice_index {rec.slice_index}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def presence(self) -> np.ndarray:
        return np.array([r.present for r in self.records], dtype=np.float64)


def _lower_median(values: np.ndarray) -> int:
    ordered = np.sort(values)
    return int(ordered[(len(ordered) - 1) // 2])


def extract_landmarks(mask: Volume) -> LandmarkSet:
    """Extreme boundary points per slice; ties resolved at the lower median
    of the orthogonal indices. Coordinates are normalized by (W-1, H-1)."""
    check_volume(mask, kind=VolumeKind.MASK, name="mask")
    w, h, c = mask.dims
    nx = max(w - 1, 1)
    ny = max(h - 1, 1)
    records = []
    for u in range(c):
        ys, xs = np.nonzero(mask.data[u])
        if len(xs) == 0:
            records.append(absent_record(u))
            continue
        x_min, x_max = int(xs.min()), int(xs.max())
        y_min, y_max = int(ys.min()), int(ys.max())
        left = (x_min, _lower_median(ys[xs == x_min]))
        right = (x_max, _lower_median(ys[xs == x_max]))
        top = (_lower_median(xs[ys == y_min]), y_min)
        bottom = (_lower_median(xs[ys == y_max]), y_max)
        points = tuple((px / nx, py / ny) for px, py in (left, right, top, bottom))
        records.append(LandmarkRecord(slice_index=u, present=1, points=points))
    return LandmarkSet(records=tuple(records), dims=(w, h, c))


def encode_landmarks(ls: LandmarkSet, max_slices: int) -> np.ndarray:
    """Flat float64 vector of length ``max_slices * 9``; absent and padded
    slices are all-zero (sentinels are replaced by 0)."""
    if len(ls) > max_slices:
        raise ValueError(f"landmark set has {len(ls)} slices, more than max_slices={max_slices}")
    vec = np.zeros(max_slices * ENTRIES_PER_SLICE, dtype=np.float64)
    for rec in ls:
        if rec.present == 0:
            continue
        base = rec.slice_index * ENTRIES_PER_SLICE
        vec[base] = 1.0
        for k, (px, py) in enumerate(rec.points):
            vec[base + 1 + 2 * k] = px
            vec[base + 2 + 2 * k] = py
    return vec


def decode_landmarks(vec, dims) -> LandmarkSet:
    """Inverse of :func:`encode_landmarks`; presence thresholded at 0.5."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    w, h, c = (int(d) for d in dims)
    if vec.size % ENTRIES_PER_SLICE != 0:
        raise ValueError(f"vector length {vec.size} is not a multiple of {ENTRIES_PER_SLICE}")
    max_slices = vec.size // ENTRIES_PER_SLICE
    if max_slices < c:
        raise ValueError(f"vector covers {max_slices} slices but dims declare {c}")
    records = []
    for u in range(c):
        base = u * ENTRIES_PER_SLICE
        if vec[base] > 0.5:
            coords = vec[base + 1 : base + 9]
            points = tuple((coords[2 * k], coords[2 * k + 1]) for k in range(4))
            records.append(LandmarkRecord(slice_index=u, present=1, points=points))
        else:
            records.append(absent_record(u))
    return LandmarkSet(records=tuple(records), dims=(w, h, c))


def landmark_dim(max_slices: int) -> int:
    return max_slices * ENTRIES_PER_SLICE


_CSV_HEADER = ["slice", "z", "xl", "yl", "xr", "yr", "xt", "yt", "xb", "yb"]


def write_landmarks_csv(ls: LandmarkSet, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for rec in ls:
            row = [rec.slice_index, rec.present]
            for px, py in rec.points:
                row.extend([repr(px), repr(py)])
            writer.writerow(row)


def read_landmarks_csv(path, dims) -> LandmarkSet:
    records = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_HEADER:
            raise ValueError(f"unexpected landmark CSV header: {header}")
        for row in reader:
            u, present = int(row[0]), int(row[1])
            values = [float(x) for x in row[2:10]]
            points = tuple((values[2 * k], values[2 * k + 1]) for k in range(4))
            records.append(LandmarkRecord(slice_index=u, present=present, points=points))
    return LandmarkSet(records=tuple(records), dims=dims)
