"""Experiment configuration: one flat ``section.key = value`` text file.

Every knob of the pipeline lives in a single mutable record with explicit
parse/format rules per key, so config files stay diff-friendly and unknown
keys are rejected with the offending name. Builder methods assemble the
typed objects the pipeline modules consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .architectures import ModelSpec, Variant
from .landmarks import landmark_dim
from .losses import LossConfig
from .phantoms import ContrastParams, PhantomConfig
from .preprocess import PreprocessConfig, VolumePreprocessor
from .shape_generator import GeneratorSpec, ShapeGeneratorModel
from .trainer import Segmenter, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str):
    return tuple(int(p.strip()) for p in text.split(","))


def _parse_float_tuple(text: str):
    return tuple(float(p.strip()) for p in text.split(","))


def _fmt_tuple(value) -> str:
    return ",".join(_fmt_scalar(v) for v in value)


def _fmt_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    "int": (int, _fmt_scalar),
    "float": (float, _fmt_scalar),
    "str": (str.strip, _fmt_scalar),
    "bool": (_parse_bool, _fmt_scalar),
    "ints": (_parse_int_tuple, _fmt_tuple),
    "floats": (_parse_float_tuple, _fmt_tuple),
}


@dataclass
class ExperimentConfig:
    """Desk-scale defaults: 40 cases of 64x64x16 phantoms, 3-level networks."""

    # phantom dataset
    phantom_n_cases: int = 40
    phantom_dims: tuple = (64, 64, 16)
    phantom_spacing: tuple = (1.0, 1.0, 1.0)
    phantom_semi_axis_xy: tuple = (0.22, 0.35)
    phantom_semi_axis_z: tuple = (0.28, 0.42)
    phantom_center_jitter: float = 0.05
    phantom_perturb_amplitude: float = 0.08
    phantom_perturb_orders: tuple = (2, 3)
    phantom_high_fg_mean: float = 0.75
    phantom_high_bg_mean: float = 0.25
    phantom_high_noise_std: float = 0.04
    phantom_high_blur_sigma: float = 0.8
    phantom_low_fg_mean: float = 0.58
    phantom_low_bg_mean: float = 0.42
    phantom_low_noise_std: float = 0.10
    phantom_low_blur_sigma: float = 1.6
    phantom_seed_count: tuple = (4, 10)
    phantom_seed_intensity: float = 1.5
    phantom_rng_seed: int = 0
    # preprocessing
    preprocess_target_spacing: tuple = (1.0, 1.0, 1.0)
    preprocess_target_size: tuple = (64, 64)
    preprocess_normalization_scope: str = "per_volume"
    # model architecture
    model_variant: str = "dgmnet"
    model_levels: int = 3
    model_base_filters: int = 8
    model_se_reduction: int = 4
    model_dropout_rate: float = 0.5
    model_max_slices: int = 16
    model_fc_hidden: int = 256
    model_model_path_pool: str = "avg"
    # shape decoder
    generator_projection: tuple = (96, 8, 8)
    generator_upconv_stages: int = 3
    generator_epochs: int = 150
    generator_folds: int = 5
    generator_learning_rate: float = 3e-3
    generator_batch_size: int = 32
    # loss
    loss_lambda: float = 1.0
    loss_dice_epsilon: float = 1e-6
    # training
    train_learning_rate: float = 1e-3
    train_batch_size: int = 10
    train_epochs: int = 60
    train_validation_fraction: float = 0.25
    train_test_fraction: float = 0.25
    train_rng_seed: int = 0
    train_early_stop_patience: int = 15
    train_deterministic: bool = False
    # external paths
    paths_data: str = ""
    paths_generator: str = ""

    # ------------------------------------------------------------------ keys
    @property
    def test_fraction(self) -> float:
        return self.train_test_fraction

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(
            variant=Variant(self.model_variant),
            learning_rate=self.train_learning_rate,
            batch_size=self.train_batch_size,
            epochs=self.train_epochs,
            validation_fraction=self.train_validation_fraction,
            rng_seed=self.train_rng_seed,
            loss=self.loss_config(),
            early_stop_patience=self.train_early_stop_patience,
            deterministic=self.train_deterministic,
        )

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(
            n_cases=self.phantom_n_cases,
            dims=tuple(self.phantom_dims),
            spacing=tuple(self.phantom_spacing),
            semi_axis_xy=tuple(self.phantom_semi_axis_xy),
            semi_axis_z=tuple(self.phantom_semi_axis_z),
            center_jitter=self.phantom_center_jitter,
            perturb_amplitude=self.phantom_perturb_amplitude,
            perturb_orders=tuple(self.phantom_perturb_orders),
            high_contrast=ContrastParams(
                fg_mean=self.phantom_high_fg_mean,
                bg_mean=self.phantom_high_bg_mean,
                noise_std=self.phantom_high_noise_std,
                blur_sigma=self.phantom_high_blur_sigma,
            ),
            low_contrast=ContrastParams(
                fg_mean=self.phantom_low_fg_mean,
                bg_mean=self.phantom_low_bg_mean,
                noise_std=self.phantom_low_noise_std,
                blur_sigma=self.phantom_low_blur_sigma,
            ),
            seed_count=tuple(self.phantom_seed_count),
            seed_intensity=self.phantom_seed_intensity,
            rng_seed=self.phantom_rng_seed,
        )

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            target_spacing=tuple(self.preprocess_target_spacing),
            target_size=tuple(self.preprocess_target_size),
            normalization_scope=self.preprocess_normalization_scope,
        )

    def preprocessor(self) -> VolumePreprocessor:
        return VolumePreprocessor(
            target_spacing=tuple(self.preprocess_target_spacing),
            target_size=tuple(self.preprocess_target_size),
            normalization_scope=self.preprocess_normalization_scope,
        )

    def input_size(self) -> tuple[int, int]:
        w, h = self.preprocess_target_size
        return (h, w)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_=self.loss_lambda, dice_epsilon=self.loss_dice_epsilon)

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            landmark_dim=landmark_dim(self.model_max_slices),
            projection=tuple(self.generator_projection),
            upconv_stages=self.generator_upconv_stages,
            output_size=self.input_size(),
        )

    def generator_model(self, seed: int | None = None) -> ShapeGeneratorModel:
        return ShapeGeneratorModel(
            projection=tuple(self.generator_projection),
            upconv_stages=self.generator_upconv_stages,
            output_size=self.input_size(),
            max_slices=self.model_max_slices,
            folds=self.generator_folds,
            epochs=self.generator_epochs,
            learning_rate=self.generator_learning_rate,
            batch_size=self.generator_batch_size,
            random_state=self.train_rng_seed if seed is None else seed,
        )

    def model_spec(self, generator_spec: GeneratorSpec | None = None) -> ModelSpec:
        variant = Variant(self.model_variant)
        if variant is Variant.DGMNET and generator_spec is None:
            generator_spec = self.generator_spec()
        return ModelSpec(
            variant=variant,
            levels=self.model_levels,
            base_filters=self.model_base_filters,
            se_reduction=self.model_se_reduction,
            dropout_rate=self.model_dropout_rate,
            input_size=self.input_size(),
            max_slices=self.model_max_slices,
            fc_hidden=self.model_fc_hidden,
            model_path_pool=self.model_model_path_pool,
            generator=generator_spec if variant is Variant.DGMNET else None,
        )

    def segmenter(self, variant=None, generator=None, seed=None, out_dir=None) -> Segmenter:
        variant = Variant(self.model_variant if variant is None else variant)
        return Segmenter(
            variant=variant.value,
            levels=self.model_levels,
            base_filters=self.model_base_filters,
            se_reduction=self.model_se_reduction,
            dropout_rate=self.model_dropout_rate,
            input_size=self.input_size(),
            max_slices=self.model_max_slices,
            fc_hidden=self.model_fc_hidden,
            model_path_pool=self.model_model_path_pool,
            generator=generator,
            learning_rate=self.train_learning_rate,
            batch_size=self.train_batch_size,
            epochs=self.train_epochs,
            validation_fraction=self.train_validation_fraction,
            lambda_=self.loss_lambda,
            early_stop_patience=self.train_early_stop_patience,
            random_state=self.train_rng_seed if seed is None else seed,
            deterministic=self.train_deterministic,
            target_spacing=tuple(self.preprocess_target_spacing),
            normalization_scope=self.preprocess_normalization_scope,
            out_dir=out_dir,
        )


# key registry: config-file key -> (attribute, parser kind)
KEYS: dict[str, tuple[str, str]] = {}


def _register_keys():
    kinds = {
        "phantom_n_cases": "int",
        "phantom_dims": "ints",
        "phantom_spacing": "floats",
        "phantom_semi_axis_xy": "floats",
        "phantom_semi_axis_z": "floats",
        "phantom_center_jitter": "float",
        "phantom_perturb_amplitude": "float",
        "phantom_perturb_orders": "ints",
        "phantom_high_fg_mean": "float",
        "phantom_high_bg_mean": "float",
        "phantom_high_noise_std": "float",
        "phantom_high_blur_sigma": "float",
        "phantom_low_fg_mean": "float",
        "phantom_low_bg_mean": "float",
        "phantom_low_noise_std": "float",
        "phantom_low_blur_sigma": "float",
        "phantom_seed_count": "ints",
        "phantom_seed_intensity": "float",
        "phantom_rng_seed": "int",
        "preprocess_target_spacing": "floats",
        "preprocess_target_size": "ints",
        "preprocess_normalization_scope": "str",
        "model_variant": "str",
        "model_levels": "int",
        "model_base_filters": "int",
        "model_se_reduction": "int",
        "model_dropout_rate": "float",
        "model_max_slices": "int",
        "model_fc_hidden": "int",
        "model_model_path_pool": "str",
        "generator_projection": "ints",
        "generator_upconv_stages": "int",
        "generator_epochs": "int",
        "generator_folds": "int",
        "generator_learning_rate": "float",
        "generator_batch_size": "int",
        "loss_lambda": "float",
        "loss_dice_epsilon": "float",
        "train_learning_rate": "float",
        "train_batch_size": "int",
        "train_epochs": "int",
        "train_validation_fraction": "float",
        "train_test_fraction": "float",
        "train_rng_seed": "int",
        "train_early_stop_patience": "int",
        "train_deterministic": "bool",
        "paths_data": "str",
        "paths_generator": "str",
    }
    for f in fields(ExperimentConfig):
        section, _, rest = f.name.partition("_")
        key = f"{section}.{rest}"
        if f.name == "loss_lambda":
            key = "loss.lambda"
        KEYS[key] = (f.name, kinds[f.name])


_register_keys()


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key-value format; unknown keys raise ConfigError."""
    config = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'", key=key)
        attr, kind = KEYS[key]
        parse, _ = _PARSERS[kind]
        try:
            setattr(config, attr, parse(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}", key=key) from exc
    _validate(config)
    return config


def _validate(config: ExperimentConfig) -> None:
    try:
        config.phantom_config()
        config.preprocess_config()
        config.loss_config()
        config.train
        config.generator_spec()
        config.model_spec()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def format_config(config: ExperimentConfig) -> str:
    lines = ["# experiment configuration (flat key = value format)"]
    for key in sorted(KEYS):
        attr, kind = KEYS[key]
        _, fmt = _PARSERS[kind]
        lines.append(f"{key} = {fmt(getattr(config, attr))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(format_config(config))


def config_keys() -> list[str]:
    return sorted(KEYS)
