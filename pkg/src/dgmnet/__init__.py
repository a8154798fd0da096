"""Multimodal phantom segmentation with a frozen generative shape decoder."""

from .architectures import (
    ModelSpec,
    Variant,
    build_decoder_block,
    build_encoder_block,
    build_model,
    count_parameters,
    paper_scale_spec,
)
from .config import ExperimentConfig, load_config, save_config
from .landmarks import (
    LandmarkRecord,
    LandmarkSet,
    decode_landmarks,
    encode_landmarks,
    extract_landmarks,
)
from .losses import LossBreakdown, LossConfig, dice_loss, cls_loss, landmark_loss, smooth_l1, total_loss
from .metrics import (
    MetricReport,
    asd_oracle,
    average_surface_distance,
    evaluate_cases,
    overlap_metrics,
)
from .phantoms import PhantomConfig, generate_dataset, generate_phantom, load_dataset
from .preprocess import (
    PreprocessConfig,
    VolumePreprocessor,
    center_crop_resize,
    normalize,
    resample,
)
from .shape_generator import (
    GeneratorSpec,
    ShapeGeneratorModel,
    build_generator,
    generate_shape,
    train_generator,
)
from .trainer import RunRecord, Segmenter, TrainConfig, make_slice_batches, train_full
from .volumes import (
    CaseRecord,
    Modality,
    Volume,
    VolumeKind,
    binarize,
    read_volume,
    write_volume,
)

__version__ = "0.1.0"
