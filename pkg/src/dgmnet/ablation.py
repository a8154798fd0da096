"""Five-way ablation benchmark over both phantom modalities.

All methods share one seeded case-level train/val/test split. The four
baselines and the generator-guided network train on low-contrast cases; the
shape decoder itself is trained only on high-contrast cases from the
non-test portion of the split, frozen, and reused. A sixth row trains the
generator-guided network on high-contrast data. Every method is evaluated on
the same held-out test cases and reported as ``mean ± std`` per metric.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .architectures import Variant
from .metrics import MetricReport, MetricRow, evaluate_cases
from .phantoms import load_dataset
from .shape_generator import prepare_generator_cases
from .trainer import split_hash, split_three
from .volumes import Modality

METHOD_LABELS = {
    Variant.UNET: "Unet",
    Variant.RESUNET: "ResUnet",
    Variant.SE_RESUNET: "SE-ResUnet",
    Variant.SE_UNET: "SE-Unet",
    Variant.DGMNET: "DGMNet",
}

ABLATION_METHODS = (
    (Modality.LOW_CONTRAST, Variant.UNET),
    (Modality.LOW_CONTRAST, Variant.RESUNET),
    (Modality.LOW_CONTRAST, Variant.SE_RESUNET),
    (Modality.LOW_CONTRAST, Variant.SE_UNET),
    (Modality.LOW_CONTRAST, Variant.DGMNET),
    (Modality.HIGH_CONTRAST, Variant.DGMNET),
)

_DATA_LABELS = {Modality.LOW_CONTRAST: "low_contrast", Modality.HIGH_CONTRAST: "high_contrast"}


def run_name(modality: Modality, variant: Variant) -> str:
    return f"{_DATA_LABELS[modality]}_{variant.value}"


@dataclass
class AblationRow:
    data_label: str
    method: str
    report: MetricReport | None
    error: str | None = None


@dataclass
class AblationTable:
    rows: list[AblationRow]
    split_digest: str
    generator_fold_dsc: list[float]

    def format_text(self) -> str:
        lines = [f"{'Data':<14} {'Method':<12} {'DSC':>13} {'Sen':>13} {'ASD':>13} {'PPV':>13}"]
        for row in self.rows:
            if row.report is None:
                lines.append(f"{row.data_label:<14} {row.method:<12} failed: {row.error}")
                continue
            r = row.report
            cells = [
                f"{r.mean(m):.2f} ± {r.std(m):.2f}" for m in ("dsc", "sen", "asd_mm", "ppv")
            ]
            lines.append(
                f"{row.data_label:<14} {row.method:<12} "
                + " ".join(f"{c:>13}" for c in cells)
            )
        lines.append(f"split {self.split_digest[:12]}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["data", "method", "dsc_mean", "dsc_std", "sen_mean", "sen_std",
             "asd_mean", "asd_std", "ppv_mean", "ppv_std", "error"]
        )
        for row in self.rows:
            if row.report is None:
                writer.writerow([row.data_label, row.method] + [""] * 8 + [row.error])
                continue
            r = row.report
            writer.writerow(
                [row.data_label, row.method]
                + [repr(x) for m in ("dsc", "sen", "asd_mm", "ppv") for x in (r.mean(m), r.std(m))]
                + [""]
            )
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.csv").write_text(self.to_csv())
        (out_dir / "table.txt").write_text(self.format_text() + "\n")
        (out_dir / "ablation.json").write_text(
            json.dumps(
                {
                    "split_hash": self.split_digest,
                    "generator_fold_dsc": self.generator_fold_dsc,
                    "methods": [
                        {"data": r.data_label, "method": r.method, "error": r.error}
                        for r in self.rows
                    ],
                },
                indent=2,
            )
        )

    def mean_dsc(self, method: str, data_label: str = "low_contrast") -> float:
        for row in self.rows:
            if row.method == method and row.data_label == data_label and row.report is not None:
                return row.report.mean("dsc")
        return float("nan")


def _select(cases, roles, wanted):
    return [c for c in cases if roles[c.case_id] == wanted]


def run_ablation(manifest_path, experiment, seed: int | None = None, out_dir=None) -> AblationTable:
    """Train every method on one shared split and tabulate test metrics.

    ``experiment`` is an ExperimentConfig; ``seed`` overrides its training
    seed. Per-method failures are recorded in the table and the remaining
    methods still run.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    seed = experiment.train.rng_seed if seed is None else seed
    low = load_dataset(manifest_path, Modality.LOW_CONTRAST)
    high = load_dataset(manifest_path, Modality.HIGH_CONTRAST)
    roles = split_three(
        [c.case_id for c in low],
        test_fraction=experiment.test_fraction,
        validation_fraction=experiment.train.validation_fraction,
        seed=seed,
    )
    digest = split_hash(roles)

    prep = experiment.preprocessor()
    gen_model = experiment.generator_model(seed=seed)
    gen_cases = prepare_generator_cases(_select(high, roles, "train"), prep)
    gen_model.fit(gen_cases)

    rows = []
    for modality, variant in ABLATION_METHODS:
        cases = low if modality is Modality.LOW_CONTRAST else high
        train_cases = _select(cases, roles, "train")
        val_cases = _select(cases, roles, "val")
        test_cases = _select(cases, roles, "test")
        name = run_name(modality, variant)
        run_dir = out_dir / "runs" / name if out_dir is not None else None
        try:
            segmenter = experiment.segmenter(
                variant=variant,
                generator=gen_model.net_ if variant is Variant.DGMNET else None,
                seed=seed,
                out_dir=run_dir,
            )
            segmenter.fit(train_cases, val_cases=val_cases)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report = segmenter.evaluate(test_cases)
            if run_dir is not None:
                report.write_csv(run_dir / "test_metrics.csv")
            rows.append(AblationRow(_DATA_LABELS[modality], METHOD_LABELS[variant], report))
        except Exception as exc:
            rows.append(
                AblationRow(
                    _DATA_LABELS[modality],
                    METHOD_LABELS[variant],
                    None,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    table = AblationTable(rows=rows, split_digest=digest, generator_fold_dsc=list(gen_model.fold_dsc_))
    if out_dir is not None:
        table.write(out_dir)
    return table


def table_from_runs(out_dir) -> AblationTable:
    """Rebuild the comparative table from stored run directories without
    retraining."""
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "ablation.json").read_text())
    rows = []
    for entry in meta["methods"]:
        variant = next(v for v, label in METHOD_LABELS.items() if label == entry["method"])
        modality = next(m for m, label in _DATA_LABELS.items() if label == entry["data"])
        csv_path = out_dir / "runs" / run_name(modality, variant) / "test_metrics.csv"
        if entry.get("error") or not csv_path.exists():
            rows.append(AblationRow(entry["data"], entry["method"], None, error=entry.get("error") or "missing run"))
            continue
        rows.append(AblationRow(entry["data"], entry["method"], _read_report_csv(csv_path)))
    return AblationTable(
        rows=rows,
        split_digest=meta["split_hash"],
        generator_fold_dsc=meta.get("generator_fold_dsc", []),
    )


def _read_report_csv(path) -> MetricReport:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row[0] in ("mean", "std"):
                continue
            rows.append(
                MetricRow(
                    case_id=row[0],
                    dsc=float(row[1]),
                    sen=float(row[2]),
                    ppv=float(row[3]),
                    asd_mm=float(row[4]),
                )
            )
    return MetricReport(rows=tuple(rows))
