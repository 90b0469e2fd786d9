"""Training-template centring and inference-time crop / pad / resample policy."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import InvalidInputError
from .volume import Affine, IntensityVolume, LabelVolume

DIRECT = "direct"
UPSAMPLE = "upsample-run-downsample"


@dataclass(frozen=True)
class PreprocessConfig:
    inference_margin: int = 5
    training_target_shape: tuple = (192, 192, 192)
    upsample_trigger_mm: float = 1.0
    upsample_target_mm: float = 0.6
    direct_apply_mm: float = 0.5

    def __post_init__(self):
        if self.inference_margin < 0:
            raise InvalidInputError("inference_margin must be >= 0")
        if len(self.training_target_shape) != 3 or min(self.training_target_shape) < 1:
            raise InvalidInputError("training_target_shape must be 3 positive integers")
        if not 0 < self.upsample_target_mm < self.upsample_trigger_mm:
            raise InvalidInputError("need 0 < upsample_target_mm < upsample_trigger_mm")


@dataclass(frozen=True)
class ResamplePlan:
    action: str
    working_spacing: tuple
    original_affine: Affine

    def to_dict(self):
        return {"action": self.action,
                "working_spacing": [float(s) for s in self.working_spacing],
                "original_affine": self.original_affine.matrix.tolist()}


def bounding_box(mask):
    """Inclusive-exclusive (lo, hi) index arrays of the True voxels."""
    coords = np.argwhere(mask)
    return coords.min(axis=0), coords.max(axis=0) + 1


def _extract(array, lo, shape):
    """Copy the window starting at ``lo`` of ``shape``; outside the grid is 0."""
    out = np.zeros(shape, dtype=array.dtype)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(np.asarray(lo) + shape, array.shape)
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    out[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = \
        array[tuple(slice(a, b) for a, b in zip(src_lo, src_hi))]
    return out


def center_training_template(vol, cfg=None):
    """Crop to the brain bounding box and pad evenly to the target shape.

    Odd padding puts the extra voxel on the high-index side.
    """
    cfg = cfg or PreprocessConfig()
    brain = vol.labels != 0
    if not brain.any():
        raise InvalidInputError("template has no non-background voxels")
    lo, hi = bounding_box(brain)
    size = hi - lo
    target = np.asarray(cfg.training_target_shape)
    if np.any(size > target):
        raise InvalidInputError(
            f"brain bounding box {tuple(size)} does not fit target {tuple(target)}")
    start = lo - (target - size) // 2
    labels = _extract(vol.labels, start, tuple(target))
    return LabelVolume(labels, vol.affine.translated(start), dict(vol.nomenclature))


def crop_inference_input(image, cfg=None):
    """Crop to the non-zero bounding box plus a zero margin on every side."""
    cfg = cfg or PreprocessConfig()
    nonzero = image.values != 0
    if not nonzero.any():
        raise InvalidInputError("image has no non-zero voxels")
    lo, hi = bounding_box(nonzero)
    m = cfg.inference_margin
    start = lo - m
    shape = tuple(hi - lo + 2 * m)
    return IntensityVolume(_extract(image.values, start, shape), image.affine.translated(start))


def plan_resample(affine, cfg=None):
    cfg = cfg or PreprocessConfig()
    spacing = affine.voxel_spacing
    # small slack so a nominal 1.0 mm header with rounding noise still triggers
    if spacing.max() >= cfg.upsample_trigger_mm - 1e-6:
        return ResamplePlan(UPSAMPLE, (cfg.upsample_target_mm,) * 3, affine)
    return ResamplePlan(DIRECT, tuple(float(s) for s in spacing), affine)


def _grid_for_spacing(shape, affine, target_spacing):
    spacing = affine.voxel_spacing
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    if np.any(target <= 0):
        raise InvalidInputError("target spacing must be positive")
    ratio = target / spacing
    # sample from the first to at most the last input voxel centre
    new_shape = tuple(int(np.floor((n - 1) / r + 1e-9)) + 1 for n, r in zip(shape, ratio))
    matrix = np.array(affine.matrix)
    matrix[:3, :3] = matrix[:3, :3] * ratio
    return new_shape, Affine(matrix), ratio


def resample_image(image, target_spacing):
    """Trilinear resampling onto a grid with the requested voxel size.

    The new grid keeps the orientation and first voxel centre of the input and
    spans its field of view.
    """
    shape, affine, ratio = _grid_for_spacing(image.shape, image.affine, target_spacing)
    coords = np.indices(shape, dtype=np.float64) * ratio[:, None, None, None]
    values = ndimage.map_coordinates(image.values, coords, order=1, mode="nearest")
    return IntensityVolume(values, affine)


def resample_labels_to(labels, target_affine, target_shape):
    """Nearest-neighbour transfer of labels onto another grid (world coordinates).

    Target voxels falling outside the source grid become background.
    """
    if not isinstance(target_affine, Affine):
        target_affine = Affine(target_affine)
    target_shape = tuple(int(s) for s in target_shape)
    to_src = np.linalg.inv(labels.affine.matrix) @ target_affine.matrix
    idx = np.indices(target_shape, dtype=np.float64).reshape(3, -1)
    src = to_src[:3, :3] @ idx + to_src[:3, 3:4]
    src = np.floor(src + 0.5 + 1e-9).astype(np.int64)
    inside = np.all((src >= 0) & (src < np.array(labels.shape)[:, None]), axis=0)
    out = np.zeros(idx.shape[1], dtype=labels.labels.dtype)
    out[inside] = labels.labels[tuple(src[:, inside])]
    return LabelVolume(out.reshape(target_shape), target_affine, dict(labels.nomenclature))


def resample_labels(labels, target_spacing):
    shape, affine, _ = _grid_for_spacing(labels.shape, labels.affine, target_spacing)
    return resample_labels_to(labels, affine, shape)
