"""Deterministic synthetic two-modality phantom datasets.

Each case is a smoothly perturbed ellipsoid mask shared by two renderings:
a high-contrast image (strong foreground/background separation, mild noise)
and a low-contrast image (weak separation, heavier noise and blur, plus
bright point artifacts scattered strictly inside the mask). All randomness
is keyed per (dataset seed, case index, stream), so generation is
order-independent and byte-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import CaseRecord, Modality, Volume, VolumeKind, read_volume, write_volume

# stream ids for per-purpose RNG derivation
_STREAM_SHAPE = 0
_STREAM_HIGH = 1
_STREAM_LOW = 2
_STREAM_SEEDS = 3


@dataclass(frozen=True)
class ContrastParams:
    fg_mean: float
    bg_mean: float
    noise_std: float
    blur_sigma: float


@dataclass(frozen=True)
class PhantomConfig:
    n_cases: int = 40
    dims: tuple[int, int, int] = (64, 64, 16)  # (W, H, C)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axis_xy: tuple[float, float] = (0.22, 0.35)  # fraction of in-plane dims
    semi_axis_z: tuple[float, float] = (0.28, 0.42)  # fraction of slice count
    center_jitter: float = 0.05  # fraction of each dim
    perturb_amplitude: float = 0.08
    perturb_orders: tuple[int, ...] = (2, 3)
    high_contrast: ContrastParams = field(
        default_factory=lambda: ContrastParams(fg_mean=0.75, bg_mean=0.25, noise_std=0.04, blur_sigma=0.8)
    )
    low_contrast: ContrastParams = field(
        default_factory=lambda: ContrastParams(fg_mean=0.58, bg_mean=0.42, noise_std=0.10, blur_sigma=1.6)
    )
    seed_count: tuple[int, int] = (4, 10)  # inclusive range, low-contrast only
    seed_intensity: float = 1.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if min(self.dims) < 8:
            raise ValueError(f"dims too small for a phantom: {self.dims}")
        if not (0 < self.semi_axis_xy[0] <= self.semi_axis_xy[1] < 0.5):
            raise ValueError(f"semi_axis_xy range invalid: {self.semi_axis_xy}")
        if not (0 < self.semi_axis_z[0] <= self.semi_axis_z[1] < 0.5):
            raise ValueError(f"semi_axis_z range invalid: {self.semi_axis_z}")


def _rng(config: PhantomConfig, case_index: int, stream: int, attempt: int = 0):
    return np.random.default_rng((config.rng_seed, case_index, stream, attempt))


def _shape_mask(config: PhantomConfig, case_index: int, attempt: int) -> np.ndarray:
    w, h, c = config.dims
    rng = _rng(config, case_index, _STREAM_SHAPE, attempt)
    ax = rng.uniform(*config.semi_axis_xy) * w
    ay = rng.uniform(*config.semi_axis_xy) * h
    az = rng.uniform(*config.semi_axis_z) * c
    cx = w / 2 + rng.uniform(-1, 1) * config.center_jitter * w
    cy = h / 2 + rng.uniform(-1, 1) * config.center_jitter * h
    cz = c / 2 + rng.uniform(-1, 1) * config.center_jitter * c
    amp_total = 1 + config.perturb_amplitude
    # keep the perturbed shape inside the grid with a 2-voxel margin
    ax = min(ax, (min(cx, w - 1 - cx) - 2) / amp_total)
    ay = min(ay, (min(cy, h - 1 - cy) - 2) / amp_total)
    az = min(az, min(cz, c - 1 - cz) - 1.5)
    if min(ax, ay) < 2 or az < 1.5:
        raise ValueError("phantom semi-axes degenerate after margin clamping")
    orders = config.perturb_orders
    amps = rng.uniform(0.3, 1.0, size=len(orders)) * (config.perturb_amplitude / max(len(orders), 1))
    phases = rng.uniform(0, 2 * np.pi, size=len(orders))

    zz, yy, xx = np.meshgrid(
        np.arange(c, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    dx = (xx - cx) / ax
    dy = (yy - cy) / ay
    dz = (zz - cz) / az
    if config.perturb_amplitude > 0:
        theta = np.arctan2(dy, dx)
        scale = np.ones_like(theta)
        for k, a, p in zip(orders, amps, phases):
            scale += a * np.cos(k * theta + p)
    else:
        scale = 1.0
    inside = dx * dx + dy * dy <= (1 - dz * dz) * scale * scale
    inside &= np.abs(dz) < 1
    return inside.astype(np.float32)


def _mask_valid(mask: np.ndarray) -> bool:
    per_slice = mask.sum(axis=(1, 2))
    if per_slice[0] > 0 or per_slice[-1] > 0:
        return False
    nonempty = per_slice > 0
    # require at least 3 consecutive nonempty slices
    run = best = 0
    for flag in nonempty:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best >= 3


def sample_seed_positions(rng, mask: np.ndarray, count: int) -> np.ndarray:
    """Voxel positions strictly inside the mask (6-connected erosion)."""
    interior = ndimage.binary_erosion(mask > 0.5)
    candidates = np.argwhere(interior)
    if len(candidates) == 0:
        candidates = np.argwhere(mask > 0.5)
    take = min(count, len(candidates))
    idx = rng.choice(len(candidates), size=take, replace=False)
    return candidates[idx]


def _render_image(
    mask: np.ndarray,
    params: ContrastParams,
    rng,
    seed_positions: np.ndarray | None = None,
    seed_intensity: float = 0.0,
) -> np.ndarray:
    base = params.bg_mean + (params.fg_mean - params.bg_mean) * mask.astype(np.float64)
    if seed_positions is not None and len(seed_positions):
        base[tuple(seed_positions.T)] = seed_intensity
    # in-plane blur only: slices stay independent, matching 2D training
    blurred = ndimage.gaussian_filter(base, sigma=(0, params.blur_sigma, params.blur_sigma))
    noisy = blurred + rng.normal(0, params.noise_std, size=base.shape)
    return noisy.astype(np.float32)


def generate_phantom(config: PhantomConfig, case_index: int) -> tuple[CaseRecord, CaseRecord]:
    """One deterministic case pair (high-contrast, low-contrast) sharing a mask."""
    mask_data = None
    for attempt in range(10):
        candidate = _shape_mask(config, case_index, attempt)
        if _mask_valid(candidate):
            mask_data = candidate
            break
    if mask_data is None:
        raise ValueError(f"could not generate a valid mask for case {case_index} in 10 attempts")

    mask = Volume(data=mask_data, spacing=config.spacing, kind=VolumeKind.MASK)
    high_img = _render_image(mask_data, config.high_contrast, _rng(config, case_index, _STREAM_HIGH))
    seeds_rng = _rng(config, case_index, _STREAM_SEEDS)
    n_seeds = int(seeds_rng.integers(config.seed_count[0], config.seed_count[1] + 1))
    seed_positions = sample_seed_positions(seeds_rng, mask_data, n_seeds)
    low_img = _render_image(
        mask_data,
        config.low_contrast,
        _rng(config, case_index, _STREAM_LOW),
        seed_positions=seed_positions,
        seed_intensity=config.seed_intensity,
    )
    case_id = f"case{case_index:03d}"
    high = CaseRecord(
        case_id=case_id,
        image=Volume(data=high_img, spacing=config.spacing),
        mask=mask,
        modality=Modality.HIGH_CONTRAST,
    )
    low = CaseRecord(
        case_id=case_id,
        image=Volume(data=low_img, spacing=config.spacing),
        mask=mask,
        modality=Modality.LOW_CONTRAST,
    )
    return high, low


MANIFEST_NAME = "manifest.csv"
_MANIFEST_HEADER = ["case_id", "modality", "image_path", "mask_path", "rng_seed", "case_index"]


def generate_dataset(config: PhantomConfig, out_dir) -> Path:
    """Write all case pairs as DGMV files plus a manifest CSV; returns the
    manifest path. Re-running with the same config reproduces identical bytes."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for case_index in range(config.n_cases):
        high, low = generate_phantom(config, case_index)
        case_dir = root / high.case_id
        case_dir.mkdir(exist_ok=True)
        for case in (high, low):
            image_rel = f"{case.case_id}/{case.modality.value}_image.dgmv"
            mask_rel = f"{case.case_id}/{case.modality.value}_mask.dgmv"
            write_volume(case.image, root / image_rel)
            write_volume(case.mask, root / mask_rel)
            rows.append([case.case_id, case.modality.value, image_rel, mask_rel, config.rng_seed, case_index])
    manifest = root / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


def load_dataset(manifest_path, modality: Modality | None = None) -> list[CaseRecord]:
    """Read CaseRecords listed in a manifest, optionally one modality only."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    cases = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header: {header}")
        for row in reader:
            case_modality = Modality(row[1])
            if modality is not None and case_modality is not modality:
                continue
            cases.append(
                CaseRecord(
                    case_id=row[0],
                    image=read_volume(root / row[2]),
                    mask=read_volume(root / row[3]),
                    modality=case_modality,
                )
            )
    return cases
