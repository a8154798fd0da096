"""Small input-validation helpers shared across estimators and functions."""

from __future__ import annotations

from .volumes import CaseRecord, Modality, Volume, VolumeKind


def check_volume(v, kind: VolumeKind | None = None, name: str = "volume") -> Volume:
    if not isinstance(v, Volume):
        raise TypeError(f"{name} must be a Volume, got {type(v).__name__}")
    if kind is not None and v.kind is not kind:
        raise ValueError(f"{name} must have kind {kind.name}, got {v.kind.name}")
    return v


def check_same_grid(a: Volume, b: Volume, spacing: bool = True) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"volumes have different dims: {a.data.shape} vs {b.data.shape}")
    if spacing and a.spacing != b.spacing:
        raise ValueError(f"volumes have different spacing: {a.spacing} vs {b.spacing}")


def check_cases(cases, modality: Modality | None = None, name: str = "cases") -> list[CaseRecord]:
    cases = list(cases)
    if not cases:
        raise ValueError(f"{name} is empty")
    for c in cases:
        if not isinstance(c, CaseRecord):
            raise TypeError(f"{name} must contain CaseRecord items, got {type(c).__name__}")
        if modality is not None and c.modality is not modality:
            raise ValueError(f"{name}: case {c.case_id} has modality {c.modality.value}, expected {modality.value}")
    return cases


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() before using this method"
        )
