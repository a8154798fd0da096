"""Segmentation evaluation: overlap metrics and average surface distance.

Overlap metrics (DSC, sensitivity, PPV) come from voxelwise TP/FP/FN counts.
The average surface distance is symmetric: surface voxels are foreground
voxels with at least one six-connected background (or out-of-bounds)
neighbor; each direction averages the minimal Euclidean distances between
voxel centers scaled by the physical spacing, and the two directions are
averaged. ``asd_oracle`` recomputes the same definition by exhaustive
all-pairs search and serves as the reference in the test suite.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .validation import check_same_grid, check_volume
from .volumes import CaseRecord, Volume, VolumeKind, binarize


class EmptyMaskError(ValueError):
    """Surface distance is undefined when either mask is empty."""


def overlap_metrics(pred: Volume, truth: Volume) -> tuple[float, float, float]:
    """(dsc, sen, ppv) from voxel counts. Empty/empty pairs score 1 on all
    three; otherwise zero denominators score 0."""
    check_volume(pred, kind=VolumeKind.MASK, name="pred")
    check_volume(truth, kind=VolumeKind.MASK, name="truth")
    check_same_grid(pred, truth, spacing=False)
    p = pred.data > 0.5
    t = truth.data > 0.5
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    dsc = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    sen = tp / (tp + fn) if (tp + fn) else 0.0
    ppv = tp / (tp + fp) if (tp + fp) else 0.0
    return dsc, sen, ppv


def surface_voxels(mask_data: np.ndarray) -> np.ndarray:
    """(K, 3) int array of (z, y, x) foreground voxels with a six-connected
    background or out-of-bounds neighbor."""
    fg = mask_data > 0.5
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(fg & ~interior)


def _scaled_surface(mask: Volume) -> np.ndarray:
    voxels = surface_voxels(mask.data)
    if len(voxels) == 0:
        raise EmptyMaskError("mask has no foreground voxels; surface distance undefined")
    sx, sy, sz = mask.spacing
    return voxels.astype(np.float64) * np.array([sz, sy, sx])


def average_surface_distance(pred: Volume, truth: Volume) -> float:
    """Symmetric average surface distance in millimeters."""
    check_volume(pred, kind=VolumeKind.MASK, name="pred")
    check_volume(truth, kind=VolumeKind.MASK, name="truth")
    check_same_grid(pred, truth, spacing=True)
    a = _scaled_surface(pred)
    b = _scaled_surface(truth)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float((np.mean(d_ab) + np.mean(d_ba)) / 2)


def asd_oracle(pred: Volume, truth: Volume) -> float:
    """Same definition as :func:`average_surface_distance`, computed by
    exhaustive all-pairs minimization. Reference implementation for tests;
    keep volumes small (<= 32^3 or so)."""
    check_volume(pred, kind=VolumeKind.MASK, name="pred")
    check_volume(truth, kind=VolumeKind.MASK, name="truth")
    check_same_grid(pred, truth, spacing=True)
    a = _oracle_surface(pred)
    b = _oracle_surface(truth)
    d_ab = np.array([min(np.sqrt(((q - p) ** 2).sum()) for q in b) for p in a])
    d_ba = np.array([min(np.sqrt(((q - p) ** 2).sum()) for q in a) for p in b])
    return float((np.mean(d_ab) + np.mean(d_ba)) / 2)


def _oracle_surface(mask: Volume) -> np.ndarray:
    # deliberately naive re-derivation: per-voxel neighbor walk
    fg = mask.data > 0.5
    c, h, w = fg.shape
    sx, sy, sz = mask.spacing
    out = []
    for z, y, x in np.argwhere(fg):
        on_surface = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < c and 0 <= ny < h and 0 <= nx < w) or not fg[nz, ny, nx]:
                on_surface = True
                break
        if on_surface:
            out.append((z * sz, y * sy, x * sx))
    if not out:
        raise EmptyMaskError("mask has no foreground voxels; surface distance undefined")
    return np.array(out, dtype=np.float64)


@dataclass(frozen=True)
class MetricRow:
    case_id: str
    dsc: float
    sen: float
    ppv: float
    asd_mm: float  # NaN when undefined (empty prediction or truth)


_METRIC_NAMES = ("dsc", "sen", "ppv", "asd_mm")


@dataclass(frozen=True)
class MetricReport:
    """Per-case metric rows plus population mean/std aggregates."""

    rows: tuple[MetricRow, ...]
    failures: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "failures", tuple(self.failures))

    def _values(self, name: str) -> np.ndarray:
        vals = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
        if name == "asd_mm":
            vals = vals[~np.isnan(vals)]
        return vals

    def mean(self, name: str) -> float:
        vals = self._values(name)
        return float(vals.mean()) if len(vals) else float("nan")

    def std(self, name: str) -> float:
        vals = self._values(name)
        return float(vals.std()) if len(vals) else float("nan")  # population std

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["case_id", "dsc", "sen", "ppv", "asd_mm"])
        for r in self.rows:
            writer.writerow([r.case_id, repr(r.dsc), repr(r.sen), repr(r.ppv), repr(r.asd_mm)])
        writer.writerow(["mean"] + [repr(self.mean(m)) for m in _METRIC_NAMES])
        writer.writerow(["std"] + [repr(self.std(m)) for m in _METRIC_NAMES])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def format_table(self, label: str = "") -> str:
        lines = [f"{'case':<12} {'DSC':>8} {'Sen':>8} {'PPV':>8} {'ASD(mm)':>9}"]
        for r in self.rows:
            asd = f"{r.asd_mm:9.3f}" if np.isfinite(r.asd_mm) else f"{'--':>9}"
            lines.append(f"{r.case_id:<12} {r.dsc:8.3f} {r.sen:8.3f} {r.ppv:8.3f} {asd}")
        lines.append(
            f"{label or 'aggregate':<12} "
            f"{self.mean('dsc'):.2f} ± {self.std('dsc'):.2f}  "
            f"{self.mean('sen'):.2f} ± {self.std('sen'):.2f}  "
            f"{self.mean('ppv'):.2f} ± {self.std('ppv'):.2f}  "
            f"{self.mean('asd_mm'):.2f} ± {self.std('asd_mm'):.2f}"
        )
        return "\n".join(lines)


def case_metrics(pred: Volume, truth: Volume) -> tuple[float, float, float, float]:
    """All four metrics; ASD is NaN (with a warning) when either mask is empty."""
    dsc, sen, ppv = overlap_metrics(pred, truth)
    try:
        asd = average_surface_distance(pred, truth)
    except EmptyMaskError:
        warnings.warn("empty mask: surface distance undefined, reported as NaN", stacklevel=2)
        asd = float("nan")
    return dsc, sen, ppv, asd


def predict_case(model, case: CaseRecord, preprocess) -> tuple[Volume, Volume, Volume]:
    """Preprocess a case, run the model slice by slice, and stack the
    predicted slices to a volume. Returns (probabilities as an IMAGE volume,
    mask binarized at 0.5, preprocessed ground truth)."""
    prep = _as_preprocessor(preprocess)
    image = prep.transform(case.image)
    truth = prep.transform(case.mask)
    c = image.depth
    x = torch.from_numpy(np.ascontiguousarray(image.data[:, None]))  # (C, 1, H, W)
    u = torch.arange(c, dtype=torch.float32) / max(c - 1, 1)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            probs, _ = model(x, slice_index=u)
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    stacked = probs[:, 0].numpy().astype(np.float32)
    prob_volume = Volume(data=stacked, spacing=image.spacing)
    return prob_volume, binarize(prob_volume, threshold=0.5), truth


def predict_case_mask(model, case: CaseRecord, preprocess) -> tuple[Volume, Volume]:
    """(predicted mask, preprocessed truth) for one case."""
    _, pred, truth = predict_case(model, case, preprocess)
    return pred, truth


def evaluate_cases(model, cases, preprocess) -> MetricReport:
    """Evaluate a trained model over cases in the preprocessed grid.

    Per-case failures are recorded with their case_id and evaluation
    continues with the remaining cases.
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    if not cases:
        raise ValueError("no cases to evaluate")
    rows = []
    failures = []
    for case in cases:
        try:
            pred, truth = predict_case_mask(model, case, preprocess)
            dsc, sen, ppv, asd = case_metrics(pred, truth)
            rows.append(MetricRow(case.case_id, dsc, sen, ppv, asd))
        except Exception as exc:  # keep going; surface the case id
            failures.append((case.case_id, f"{type(exc).__name__}: {exc}"))
            warnings.warn(f"evaluation failed for {case.case_id}: {exc}", stacklevel=2)
    return MetricReport(rows=tuple(rows), failures=tuple(failures))


def _as_preprocessor(preprocess):
    from .preprocess import PreprocessConfig, VolumePreprocessor, preprocessor_from_config

    if isinstance(preprocess, VolumePreprocessor):
        return preprocess
    if isinstance(preprocess, PreprocessConfig):
        return preprocessor_from_config(preprocess)
    raise TypeError(f"expected PreprocessConfig or VolumePreprocessor, got {type(preprocess)!r}")
