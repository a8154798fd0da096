"""Qualitative overlay figures: truth vs predicted contours per slice."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import predict_case


def write_overlays(model, cases, preprocess, out_dir) -> int:
    """One PNG per slice with a nonempty ground-truth mask: grayscale image,
    truth contour in red, predicted contour in green. Returns the count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for case in sorted(cases, key=lambda c: c.case_id):
        _, pred, truth = predict_case(model, case, preprocess)
        image = preprocess.transform(case.image)
        for u in range(truth.depth):
            truth_slice = truth.data[u]
            if not truth_slice.any():
                continue
            fig, ax = plt.subplots(figsize=(3, 3), dpi=100)
            ax.imshow(image.data[u], cmap="gray", interpolation="nearest")
            ax.contour(truth_slice, levels=[0.5], colors="red", linewidths=1.0)
            pred_slice = pred.data[u]
            if pred_slice.any() and not pred_slice.all():
                ax.contour(pred_slice, levels=[0.5], colors="green", linewidths=1.0)
            ax.set_axis_off()
            fig.tight_layout(pad=0)
            fig.savefig(out_dir / f"overlay_{case.case_id}_slice{u:03d}.png")
            plt.close(fig)
            count += 1
    return count
