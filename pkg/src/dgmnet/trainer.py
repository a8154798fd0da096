"""Two-stage training protocol, the sklearn-style segmenter estimator, and
the five-way ablation benchmark.

Training is 2D: all slices of all training cases are pooled, shuffled
deterministically per epoch, and fed in fixed-size batches. Validation is
held out at case level, the best checkpoint is the one maximizing validation
DSC, and for the generator-guided variant the embedded shape decoder is
hash-verified to be byte-identical before and after the run.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import landmarks as lm
from .architectures import ModelSpec, Variant, build_model, count_parameters
from .checkpoints import load_parameters, parameter_hash, save_checkpoint
from .losses import LossConfig, total_loss
from .metrics import MetricReport, evaluate_cases, predict_case
from .preprocess import NormalizationScope, VolumePreprocessor
from .shape_generator import ShapeDecoder, is_frozen
from .validation import check_cases, check_fitted
from .volumes import CaseRecord, Modality, Volume, VolumeKind


class NumericError(RuntimeError):
    """Training aborted on a non-finite loss."""


class Stage(str, enum.Enum):
    GENERATOR = "generator"
    FULL = "full"


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.FULL
    variant: Variant = Variant.UNET
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 10
    epochs: int = 60
    validation_fraction: float = 0.25
    rng_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    early_stop_patience: int = 15
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 < self.validation_fraction <= 0.5):
            raise ValueError(f"validation_fraction must be in (0, 0.5], got {self.validation_fraction}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def landmark_targets(case: CaseRecord, max_slices: int) -> np.ndarray:
    """Whole-volume encoded landmark vector of a (preprocessed) case."""
    ls = lm.extract_landmarks(case.mask)
    return lm.encode_landmarks(ls, max_slices).astype(np.float32)


class SliceBatcher:
    """Pools all 2D slices of the training cases and yields deterministic
    shuffled batches; the order depends only on (seed, epoch)."""

    def __init__(self, cases, batch_size: int, seed: int, max_slices: int):
        cases = check_cases(cases, name="training cases")
        images, masks, vecs, fracs, keys = [], [], [], [], []
        for case in cases:
            vec = landmark_targets(case, max_slices)
            c = case.image.depth
            for u in range(c):
                images.append(case.image.data[u])
                masks.append(case.mask.data[u])
                vecs.append(vec)
                fracs.append(u / max(c - 1, 1))
                keys.append((case.case_id, u))
        if not images:
            raise ValueError("no slices available for training")
        self.images = torch.from_numpy(np.stack(images)).unsqueeze(1)
        self.masks = torch.from_numpy(np.stack(masks)).unsqueeze(1)
        self.vecs = torch.from_numpy(np.stack(vecs))
        self.fracs = torch.from_numpy(np.array(fracs, dtype=np.float32))
        self.keys = keys
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self):
        return len(self.keys)

    def batches_per_epoch(self) -> int:
        return (len(self.keys) + self.batch_size - 1) // self.batch_size

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng((self.seed, epoch)).permutation(len(self.keys))

    def iter_epoch(self, epoch: int):
        order = self.epoch_order(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield (
                self.images[idx],
                self.masks[idx],
                self.vecs[idx],
                self.fracs[idx],
                [self.keys[i] for i in idx],
            )


def make_slice_batches(cases, batch_size: int, seed: int, max_slices: int = 16) -> SliceBatcher:
    return SliceBatcher(cases, batch_size, seed, max_slices)


_SPLIT_STREAM = 101
_THREE_WAY_STREAM = 202


def split_cases(cases, validation_fraction: float, seed: int):
    """Seeded case-level split into (train, validation); at least one case
    on each side."""
    cases = sorted(cases, key=lambda c: c.case_id)
    n = len(cases)
    if n < 2:
        raise ValueError("need at least 2 cases to split off a validation set")
    n_val = min(max(1, round(n * validation_fraction)), n - 1)
    order = np.random.default_rng((seed, _SPLIT_STREAM)).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [c for i, c in enumerate(cases) if i not in val_idx]
    val = [c for i, c in enumerate(cases) if i in val_idx]
    return train, val


def split_three(case_ids, test_fraction: float, validation_fraction: float, seed: int) -> dict[str, str]:
    """Seeded case-level assignment to train/val/test roles by case id."""
    ids = sorted(case_ids)
    n = len(ids)
    n_test = min(max(1, round(n * test_fraction)), n - 2)
    n_val = min(max(1, round((n - n_test) * validation_fraction)), n - n_test - 1)
    order = np.random.default_rng((seed, _THREE_WAY_STREAM)).permutation(n)
    roles = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            roles[ids[idx]] = "test"
        elif rank < n_test + n_val:
            roles[ids[idx]] = "val"
        else:
            roles[ids[idx]] = "train"
    return roles


def split_hash(roles: dict[str, str]) -> str:
    import hashlib

    canonical = "\n".join(f"{cid},{role}" for cid, role in sorted(roles.items()))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunRecord:
    """Everything one training run produced, as written to its run directory."""

    config: TrainConfig
    model_spec: ModelSpec
    epoch_losses: list[dict]
    val_dsc: list[float]
    best_epoch: int
    best_checkpoint: Path | None
    wall_clock_seconds: float
    final_report: MetricReport
    split: dict[str, str]
    generator_hash_before: str | None = None
    generator_hash_after: str | None = None
    deterministic: bool = False
    trainable_parameters: int = 0
    model: object | None = None  # trained network with best weights, in memory only

    @property
    def best_val_dsc(self) -> float:
        return self.val_dsc[self.best_epoch] if self.val_dsc else float("nan")


def _maybe_deterministic(flag: bool):
    torch.use_deterministic_algorithms(flag)


def _loss_log_writer(out_dir: Path | None):
    if out_dir is None:
        return None, None
    fh = open(out_dir / "loss_log.csv", "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "total", "mask", "dice", "ce", "cls", "lnd"])
    return fh, writer


def train_full(
    cases,
    generator: ShapeDecoder | None,
    config: TrainConfig,
    model_spec: ModelSpec,
    preprocess: VolumePreprocessor,
    out_dir=None,
    val_cases=None,
    resume_from=None,
) -> RunRecord:
    """Stage-two training: optimize the full network on 2D slice batches.

    ``cases`` are raw CaseRecords; a case-level validation split is taken
    unless ``val_cases`` is passed explicitly (then all ``cases`` train).
    The best checkpoint maximizes validation DSC. For the generator-guided
    variant the frozen decoder's hash must be identical before and after.
    """
    t0 = time.monotonic()
    cases = check_cases(cases)
    if model_spec.variant is Variant.DGMNET:
        if generator is None:
            raise ValueError("the generator-guided variant needs a trained frozen generator")
        if not is_frozen(generator):
            raise ValueError("generator must be frozen before full training")
    elif generator is not None:
        raise ValueError(f"variant {model_spec.variant.value} does not take a generator")

    if val_cases is None:
        train_cases, val_cases = split_cases(cases, config.validation_fraction, config.rng_seed)
    else:
        train_cases = list(cases)
        val_cases = list(val_cases)
    split = {c.case_id: "train" for c in train_cases}
    split.update({c.case_id: "val" for c in val_cases})

    if preprocess.to_config().normalization_scope is NormalizationScope.DATASET:
        preprocess.fit([c.image for c in train_cases])
    prep_train = [preprocess.transform_case(c) for c in train_cases]
    batcher = make_slice_batches(prep_train, config.batch_size, config.rng_seed, model_spec.max_slices)

    _maybe_deterministic(config.deterministic)
    torch.manual_seed(config.rng_seed)
    model = build_model(model_spec, generator)
    generator_hash_before = parameter_hash(model.generator) if model_spec.variant is Variant.DGMNET else None

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh, log_writer = _loss_log_writer(out_dir)

    start_epoch = 0
    best_state = None
    best_epoch = -1
    best_dsc = -np.inf
    epoch_losses: list[dict] = []
    val_curve: list[float] = []
    global_step = 0

    if resume_from is not None:
        state = torch.load(Path(resume_from) / "training_state.pt", weights_only=False)
        load_parameters(model, Path(resume_from) / "last")
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        start_epoch = state["epoch"] + 1
        best_epoch = state["best_epoch"]
        best_dsc = state["best_dsc"]
        best_state = state["best_state"]
        epoch_losses = state["epoch_losses"]
        val_curve = state["val_dsc"]
        global_step = state["global_step"]

    use_landmarks = model_spec.variant is Variant.DGMNET
    try:
        for epoch in range(start_epoch, config.epochs):
            model.train()
            sums = {k: 0.0 for k in ("total", "mask", "dice", "ce", "cls", "lnd")}
            n_batches = 0
            for images, masks, vecs, fracs, _ in batcher.iter_epoch(epoch):
                pred, lvec = model(images, slice_index=fracs)
                breakdown = total_loss(
                    pred,
                    masks,
                    lvec if use_landmarks else None,
                    vecs if use_landmarks else None,
                    config.loss,
                )
                values = breakdown.as_floats()
                if not all(np.isfinite(v) for v in values.values()):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {global_step}: {values}"
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                for k in sums:
                    sums[k] += values[k]
                if log_writer is not None:
                    log_writer.writerow(
                        [global_step] + [repr(values[k]) for k in ("total", "mask", "dice", "ce", "cls", "lnd")]
                    )
                global_step += 1
                n_batches += 1
            epoch_losses.append({k: v / n_batches for k, v in sums.items()})

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report = evaluate_cases(model, val_cases, preprocess)
            dsc = report.mean("dsc")
            val_curve.append(dsc)
            if dsc > best_dsc:
                best_dsc = dsc
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

            if out_dir is not None:
                save_checkpoint(model, out_dir / "last", spec=model_spec)
                torch.save(
                    {
                        "epoch": epoch,
                        "optimizer": optimizer.state_dict(),
                        "torch_rng": torch.get_rng_state(),
                        "best_epoch": best_epoch,
                        "best_dsc": best_dsc,
                        "best_state": best_state,
                        "epoch_losses": epoch_losses,
                        "val_dsc": val_curve,
                        "global_step": global_step,
                    },
                    out_dir / "training_state.pt",
                )
            if epoch - best_epoch >= config.early_stop_patience:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    generator_hash_after = None
    if model_spec.variant is Variant.DGMNET:
        generator_hash_after = parameter_hash(model.generator)
        if generator_hash_after != generator_hash_before:
            raise RuntimeError(
                "frozen generator changed during training: "
                f"{generator_hash_before} -> {generator_hash_after}"
            )

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        final_report = evaluate_cases(model, val_cases, preprocess)

    best_checkpoint = None
    if out_dir is not None:
        best_checkpoint = save_checkpoint(
            model,
            out_dir / "best",
            spec=model_spec,
            extra={"best_epoch": best_epoch, "val_dsc": best_dsc},
        )

    record = RunRecord(
        config=config,
        model_spec=model_spec,
        epoch_losses=epoch_losses,
        val_dsc=val_curve,
        best_epoch=best_epoch,
        best_checkpoint=best_checkpoint,
        wall_clock_seconds=time.monotonic() - t0,
        final_report=final_report,
        split=split,
        generator_hash_before=generator_hash_before,
        generator_hash_after=generator_hash_after,
        deterministic=config.deterministic,
        trainable_parameters=count_parameters(model),
        model=model,
    )
    if out_dir is not None:
        _persist_run(record, model, out_dir)
    return record


def _persist_run(record: RunRecord, model, out_dir: Path) -> None:
    record.final_report.write_csv(out_dir / "metrics.csv")
    with open(out_dir / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "role"])
        for cid, role in sorted(record.split.items()):
            writer.writerow([cid, role])
    payload = {
        "variant": record.model_spec.variant.value,
        "learning_rate": record.config.learning_rate,
        "batch_size": record.config.batch_size,
        "epochs_configured": record.config.epochs,
        "epochs_run": len(record.epoch_losses),
        "best_epoch": record.best_epoch,
        "best_val_dsc": record.best_val_dsc,
        "val_dsc": record.val_dsc,
        "epoch_losses": record.epoch_losses,
        "wall_clock_seconds": record.wall_clock_seconds,
        "deterministic": record.deterministic,
        "generator_hash_before": record.generator_hash_before,
        "generator_hash_after": record.generator_hash_after,
        "trainable_parameters": record.trainable_parameters,
        "split_hash": split_hash(record.split),
    }
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


class Segmenter(BaseEstimator):
    """sklearn-style front door: configure a variant, ``fit`` on cases,
    ``predict`` binary masks for volumes.

    ``generator`` must be a trained frozen ShapeDecoder for the
    generator-guided variant and None otherwise.
    """

    def __init__(
        self,
        variant="unet",
        levels=3,
        base_filters=8,
        se_reduction=4,
        dropout_rate=0.5,
        input_size=(64, 64),
        max_slices=16,
        fc_hidden=256,
        model_path_pool="avg",
        generator=None,
        learning_rate=1e-3,
        batch_size=10,
        epochs=60,
        validation_fraction=0.25,
        lambda_=1.0,
        early_stop_patience=15,
        random_state=0,
        deterministic=False,
        target_spacing=(1.0, 1.0, 1.0),
        normalization_scope="per_volume",
        out_dir=None,
    ):
        self.variant = variant
        self.levels = levels
        self.base_filters = base_filters
        self.se_reduction = se_reduction
        self.dropout_rate = dropout_rate
        self.input_size = input_size
        self.max_slices = max_slices
        self.fc_hidden = fc_hidden
        self.model_path_pool = model_path_pool
        self.generator = generator
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.lambda_ = lambda_
        self.early_stop_patience = early_stop_patience
        self.random_state = random_state
        self.deterministic = deterministic
        self.target_spacing = target_spacing
        self.normalization_scope = normalization_scope
        self.out_dir = out_dir

    def model_spec(self) -> ModelSpec:
        variant = Variant(self.variant)
        return ModelSpec(
            variant=variant,
            levels=self.levels,
            base_filters=self.base_filters,
            se_reduction=self.se_reduction,
            dropout_rate=self.dropout_rate,
            input_size=tuple(self.input_size),
            max_slices=self.max_slices,
            fc_hidden=self.fc_hidden,
            model_path_pool=self.model_path_pool,
            generator=self.generator.spec if variant is Variant.DGMNET and self.generator is not None else None,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage=Stage.FULL,
            variant=Variant(self.variant),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            rng_seed=self.random_state,
            loss=LossConfig(lambda_=self.lambda_),
            early_stop_patience=self.early_stop_patience,
            deterministic=self.deterministic,
        )

    def preprocessor(self) -> VolumePreprocessor:
        h, w = self.input_size
        return VolumePreprocessor(
            target_spacing=tuple(self.target_spacing),
            target_size=(w, h),
            normalization_scope=self.normalization_scope,
        )

    def fit(self, cases, y=None, val_cases=None):
        self.preprocessor_ = self.preprocessor()
        self.run_record_ = train_full(
            cases,
            self.generator,
            self.train_config(),
            self.model_spec(),
            self.preprocessor_,
            out_dir=self.out_dir,
            val_cases=val_cases,
        )
        self.net_ = self.run_record_.model
        self.net_.eval()
        return self

    def _query_case(self, volume: Volume) -> CaseRecord:
        return CaseRecord(
            case_id="query",
            image=volume,
            mask=Volume(np.zeros_like(volume.data), volume.spacing, VolumeKind.MASK),
            modality=Modality.LOW_CONTRAST,
        )

    def predict_proba(self, volume: Volume) -> Volume:
        """Per-voxel foreground probabilities as an IMAGE volume."""
        check_fitted(self, "net_")
        probs, _, _ = predict_case(self.net_, self._query_case(volume), self.preprocessor_)
        return probs

    def predict(self, volume: Volume) -> Volume:
        """Binary mask in the preprocessed grid (threshold 0.5)."""
        check_fitted(self, "net_")
        _, pred, _ = predict_case(self.net_, self._query_case(volume), self.preprocessor_)
        return pred

    def score(self, cases, y=None) -> float:
        check_fitted(self, "net_")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = evaluate_cases(self.net_, cases, self.preprocessor_)
        return report.mean("dsc")

    def evaluate(self, cases) -> MetricReport:
        check_fitted(self, "net_")
        return evaluate_cases(self.net_, cases, self.preprocessor_)
