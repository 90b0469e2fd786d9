"""Training-template curation and evaluation tools for fetal brain MRI segmentation."""

__version__ = "0.1.0"

from ._validation import FetalSampError, InvalidInputError, VolumeIOError  # noqa: E402
from .volume import (  # noqa: E402
    FETA_NOMENCLATURE,
    Affine,
    IntensityVolume,
    LabelVolume,
    load_intensity_volume,
    load_label_volume,
    remap_labels,
    save_intensity_volume,
    save_label_volume,
)
from .features import FeatureConfig, ShapeFeatureExtractor, extract_features  # noqa: E402
from .sampler import (  # noqa: E402
    BoostedMinMaxScaler,
    CovariancePCA,
    DataDrivenSampler,
    FullCovarianceGMM,
    SamplingTable,
    combine_pools,
    eq1_weights,
)

__all__ = [
    "FetalSampError", "InvalidInputError", "VolumeIOError",
    "FETA_NOMENCLATURE", "Affine", "IntensityVolume", "LabelVolume",
    "load_intensity_volume", "load_label_volume", "remap_labels",
    "save_intensity_volume", "save_label_volume",
    "FeatureConfig", "ShapeFeatureExtractor", "extract_features",
    "BoostedMinMaxScaler", "CovariancePCA", "DataDrivenSampler", "FullCovarianceGMM",
    "SamplingTable", "combine_pools", "eq1_weights",
]
