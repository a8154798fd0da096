"""Generative shape decoder: landmark vector -> dense 2D shape map per slice.

The decoder consumes a whole-volume landmark vector plus one normalized slice
position and emits that slice's shape map; stacking over slice positions gives
a volume. It is trained standalone on high-contrast cases with pixelwise
binary cross-entropy against the ground-truth mask slices, then frozen. The
frozen decoder is later embedded in the full segmentation network and applied
to low-contrast data without fine-tuning.
"""

from __future__ import annotations

import types
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from sklearn.base import BaseEstimator

from . import landmarks as lm
from .losses import bce_loss
from .metrics import overlap_metrics
from .validation import check_cases, check_fitted
from .volumes import CaseRecord, Volume, VolumeKind


@dataclass(frozen=True)
class GeneratorSpec:
    landmark_dim: int
    projection: tuple[int, int, int] = (96, 8, 8)  # (channels, h, w)
    upconv_stages: int = 3
    output_size: tuple[int, int] = (64, 64)  # (H, W)

    def __post_init__(self):
        ch, h, w = self.projection
        if h < 4 or w < 4 or ch < 1:
            raise ValueError(f"projection must be (channels, h>=4, w>=4), got {self.projection}")
        if self.upconv_stages < 2:
            raise ValueError(f"upconv_stages must be >= 2, got {self.upconv_stages}")
        oh, ow = self.output_size
        if h * 2**self.upconv_stages != oh or w * 2**self.upconv_stages != ow:
            raise ValueError(
                f"projection {h}x{w} with {self.upconv_stages} upconv stages gives "
                f"{h * 2**self.upconv_stages}x{w * 2**self.upconv_stages}, "
                f"but output_size is {self.output_size}"
            )
        if self.landmark_dim < lm.ENTRIES_PER_SLICE:
            raise ValueError(f"landmark_dim too small: {self.landmark_dim}")


class ShapeDecoder(nn.Module):
    """FC projection -> reshape -> repeated [LeakyReLU -> BN -> 2x2 up-conv],
    sigmoid after the final stage. Input is the landmark vector with the
    normalized slice position appended."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch, h, w = spec.projection
        self.project = nn.Linear(spec.landmark_dim + 1, ch * h * w)
        stages = []
        in_ch = ch
        for i in range(spec.upconv_stages):
            last = i == spec.upconv_stages - 1
            out_ch = 1 if last else max(in_ch // 2, 4)
            stages.append(
                nn.Sequential(
                    nn.LeakyReLU(0.2),
                    nn.BatchNorm2d(in_ch),
                    nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2),
                )
            )
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, landmark_vec: torch.Tensor, slice_index: torch.Tensor) -> torch.Tensor:
        if landmark_vec.dim() != 2 or landmark_vec.shape[1] != self.spec.landmark_dim:
            raise ValueError(
                f"expected landmark vectors of shape (N, {self.spec.landmark_dim}), "
                f"got {tuple(landmark_vec.shape)}"
            )
        ch, h, w = self.spec.projection
        z = torch.cat([landmark_vec, slice_index.reshape(-1, 1).to(landmark_vec.dtype)], dim=1)
        y = self.project(z).view(-1, ch, h, w)
        for stage in self.stages:
            y = stage(y)
        return torch.sigmoid(y)


def build_generator(spec: GeneratorSpec, seed: int | None = None) -> ShapeDecoder:
    if seed is not None:
        torch.manual_seed(seed)
    return ShapeDecoder(spec)


def _train_noop(self, mode: bool = True):
    # frozen modules stay in eval mode even when a parent flips to train,
    # so batch-norm running statistics never move
    return self


def freeze(module: nn.Module) -> nn.Module:
    """Exclude all parameters from gradient updates and record their names.

    The module is pinned in eval mode: parameters and buffers stay
    byte-identical through any amount of surrounding training.
    """
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen_names = {name for name, _ in module.named_parameters()}
    module.eval()
    module.train = types.MethodType(_train_noop, module)
    return module


def is_frozen(module: nn.Module) -> bool:
    return all(not p.requires_grad for p in module.parameters())


def generate_shape(g: ShapeDecoder, landmark_vec, slice_index: float) -> np.ndarray:
    """One (H, W) shape map in (0,1) from a frozen decoder; deterministic."""
    if not is_frozen(g):
        raise ValueError("generator must be frozen before use as a shape predictor")
    vec = np.asarray(landmark_vec, dtype=np.float32).ravel()
    if vec.size != g.spec.landmark_dim:
        raise ValueError(f"landmark vector length {vec.size}, expected {g.spec.landmark_dim}")
    g.eval()
    with torch.no_grad():
        out = g(
            torch.from_numpy(vec).unsqueeze(0),
            torch.tensor([float(slice_index)], dtype=torch.float32),
        )
    return out[0, 0].numpy()


def _case_samples(case: CaseRecord, max_slices: int):
    """(input vector, target slice) pairs for every slice of a case."""
    mask = case.mask
    ls = lm.extract_landmarks(mask)
    vec = lm.encode_landmarks(ls, max_slices).astype(np.float32)
    c = mask.depth
    samples = []
    for u in range(c):
        frac = u / max(c - 1, 1)
        samples.append((vec, np.float32(frac), mask.data[u]))
    return samples


def _fit_decoder(net, samples, epochs, learning_rate, batch_size, seed):
    inputs = torch.from_numpy(np.stack([s[0] for s in samples]))
    fracs = torch.from_numpy(np.array([s[1] for s in samples], dtype=np.float32))
    targets = torch.from_numpy(np.stack([s[2] for s in samples])).unsqueeze(1)
    n = len(samples)
    order_rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    # cosine decay stabilizes the late epochs; the decoder needs the long tail
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    net.train()
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = net(inputs[idx], fracs[idx])
            loss = bce_loss(pred, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    net.eval()
    return net


def reconstruction_dsc(net: ShapeDecoder, case: CaseRecord, max_slices: int) -> float:
    """Volume DSC of the decoder's output (from ground-truth landmarks,
    binarized at 0.5) against the case mask."""
    mask = case.mask
    vec = lm.encode_landmarks(lm.extract_landmarks(mask), max_slices).astype(np.float32)
    c = mask.depth
    net.eval()
    with torch.no_grad():
        out = net(
            torch.from_numpy(np.tile(vec, (c, 1))),
            torch.arange(c, dtype=torch.float32) / max(c - 1, 1),
        )
    pred_data = (out[:, 0].numpy() > 0.5).astype(np.float32)
    pred = Volume(data=pred_data, spacing=mask.spacing, kind=VolumeKind.MASK)
    dsc, _, _ = overlap_metrics(pred, mask)
    return dsc


def fold_assignments(n_cases: int, folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic k-fold partition of case indices."""
    rng = np.random.default_rng(seed)
    return [np.sort(part) for part in np.array_split(rng.permutation(n_cases), folds)]


def train_generator(
    cases,
    spec: GeneratorSpec,
    folds: int = 5,
    seed: int = 0,
    *,
    epochs: int = 150,
    learning_rate: float = 3e-3,
    batch_size: int = 32,
) -> tuple[ShapeDecoder, list[float]]:
    """Cross-validate then train the final decoder on all cases and freeze it.

    Cases must already be on the decoder's output grid (mask in-plane dims
    equal ``spec.output_size`` and slice count at most ``landmark_dim / 9``).
    Returns the frozen decoder and the held-out reconstruction DSC per fold.
    """
    cases = check_cases(cases, name="generator training cases")
    if len(cases) < folds:
        raise ValueError(f"need at least {folds} cases for {folds}-fold cross-validation, got {len(cases)}")
    max_slices = spec.landmark_dim // lm.ENTRIES_PER_SLICE
    oh, ow = spec.output_size
    for case in cases:
        if (case.mask.height, case.mask.width) != (oh, ow):
            raise ValueError(
                f"case {case.case_id} mask is {case.mask.height}x{case.mask.width}, "
                f"generator expects {oh}x{ow}; preprocess first"
            )
        if case.mask.depth > max_slices:
            raise ValueError(
                f"case {case.case_id} has {case.mask.depth} slices, more than max_slices={max_slices}"
            )
        if not case.mask.data.any():
            raise ValueError(f"case {case.case_id} mask is empty")

    per_case_samples = [_case_samples(case, max_slices) for case in cases]
    fold_parts = fold_assignments(len(cases), folds, seed)
    fold_dsc = []
    for fold_id, held_out in enumerate(fold_parts):
        held = set(int(i) for i in held_out)
        train_samples = [s for i, ss in enumerate(per_case_samples) if i not in held for s in ss]
        net = build_generator(spec, seed=_derive_seed(seed, fold_id + 1))
        _fit_decoder(net, train_samples, epochs, learning_rate, batch_size, _derive_seed(seed, 100 + fold_id))
        scores = [reconstruction_dsc(net, cases[i], max_slices) for i in sorted(held)]
        fold_dsc.append(float(np.mean(scores)))

    final = build_generator(spec, seed=_derive_seed(seed, 0))
    all_samples = [s for ss in per_case_samples for s in ss]
    _fit_decoder(final, all_samples, epochs, learning_rate, batch_size, _derive_seed(seed, 99))
    freeze(final)
    return final, fold_dsc


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, stream)).generate_state(1)[0])


def prepare_generator_cases(cases, preprocessor) -> list[CaseRecord]:
    """Geometrically preprocess masks for decoder training; the decoder never
    sees images, so the record's image slot just mirrors the mask values."""
    from .volumes import as_image

    out = []
    for case in cases:
        mask = preprocessor.transform(case.mask)
        out.append(
            CaseRecord(case_id=case.case_id, image=as_image(mask), mask=mask, modality=case.modality)
        )
    return out


class ShapeGeneratorModel(BaseEstimator):
    """sklearn-style wrapper around the shape decoder training procedure.

    ``fit`` expects high-contrast cases already preprocessed to the decoder's
    output grid; fitted attributes are ``net_`` (frozen decoder) and
    ``fold_dsc_`` (held-out reconstruction DSC per fold).
    """

    def __init__(
        self,
        projection=(96, 8, 8),
        upconv_stages=3,
        output_size=(64, 64),
        max_slices=16,
        folds=5,
        epochs=150,
        learning_rate=3e-3,
        batch_size=32,
        random_state=0,
    ):
        self.projection = projection
        self.upconv_stages = upconv_stages
        self.output_size = output_size
        self.max_slices = max_slices
        self.folds = folds
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            landmark_dim=lm.landmark_dim(self.max_slices),
            projection=tuple(self.projection),
            upconv_stages=self.upconv_stages,
            output_size=tuple(self.output_size),
        )

    def fit(self, cases, y=None):
        self.net_, self.fold_dsc_ = train_generator(
            cases,
            self.spec(),
            folds=self.folds,
            seed=self.random_state,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
        )
        return self

    def reconstruct(self, landmark_set: lm.LandmarkSet, spacing=(1.0, 1.0, 1.0)) -> Volume:
        """Stack per-slice shape maps for a landmark set into an IMAGE volume."""
        check_fitted(self, "net_")
        vec = lm.encode_landmarks(landmark_set, self.max_slices)
        c = landmark_set.dims[2]
        slices = [generate_shape(self.net_, vec, u / max(c - 1, 1)) for u in range(c)]
        return Volume(data=np.stack(slices), spacing=spacing, kind=VolumeKind.IMAGE)

    def score(self, cases, y=None) -> float:
        """Mean reconstruction DSC over cases."""
        check_fitted(self, "net_")
        scores = [reconstruction_dsc(self.net_, case, self.max_slices) for case in cases]
        return float(np.mean(scores))
