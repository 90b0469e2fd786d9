"""Max-posterior fusion of several networks' soft segmentations."""

import logging
from dataclasses import dataclass

import nibabel as nib
import numpy as np

from ._validation import InvalidInputError, VolumeIOError
from .volume import FETA_NOMENCLATURE, Affine, LabelVolume, _read_nifti

logger = logging.getLogger(__name__)

NORM_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-voxel class posteriors, shape ``(X, Y, Z, C)``.

    Voxels whose posteriors do not sum to 1 within 1e-5 are renormalised
    with a warning.
    """

    posteriors: np.ndarray
    affine: Affine

    def __post_init__(self):
        p = np.asarray(self.posteriors, dtype=np.float64)
        if p.ndim != 4 or p.shape[3] < 2:
            raise InvalidInputError(f"posteriors must be (X, Y, Z, C>=2), got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise InvalidInputError("posteriors must be finite and non-negative")
        sums = p.sum(axis=3, keepdims=True)
        off = np.abs(sums - 1.0) > NORM_TOL
        if off.any():
            if np.any(sums[off] == 0):
                raise InvalidInputError("voxel with all-zero posteriors")
            logger.warning("renormalising %d voxels whose posteriors do not sum to 1",
                           int(off.sum()))
            p = p / sums
        p.flags.writeable = False
        object.__setattr__(self, "posteriors", p)
        if not isinstance(self.affine, Affine):
            object.__setattr__(self, "affine", Affine(self.affine))

    @property
    def shape(self):
        return self.posteriors.shape[:3]

    @property
    def class_count(self):
        return self.posteriors.shape[3]


def load_probability_volume(path):
    img, data = _read_nifti(path)
    if data.ndim != 4:
        raise VolumeIOError(path, f"expected 4-D posteriors, got shape {data.shape}")
    try:
        return ProbabilityVolume(np.asarray(data, dtype=np.float64), Affine(img.affine))
    except InvalidInputError as exc:
        raise VolumeIOError(path, str(exc)) from exc


def save_probability_volume(vol, path):
    nib.save(nib.Nifti1Image(vol.posteriors.astype(np.float32), vol.affine.matrix), str(path))


def merge_max_posterior(volumes, nomenclature=None):
    """Fuse networks voxelwise: on disagreement, the most confident network decides.

    Confidence ties go to the lowest network index; class ties within a
    network go to the lowest class index.
    """
    if len(volumes) < 2:
        raise InvalidInputError("need at least two probability volumes")
    ref = volumes[0]
    for i, v in enumerate(volumes[1:], 1):
        if v.posteriors.shape != ref.posteriors.shape:
            raise InvalidInputError(
                f"volume {i} has shape {v.posteriors.shape}, expected {ref.posteriors.shape}")
        if not np.allclose(v.affine.matrix, ref.affine.matrix, atol=1e-6):
            raise InvalidInputError(f"volume {i} has a different affine")
    stacked = np.stack([v.posteriors for v in volumes])       # (N, X, Y, Z, C)
    classes = np.argmax(stacked, axis=4)                       # (N, X, Y, Z)
    confidence = np.max(stacked, axis=4)
    winner = np.argmax(confidence, axis=0)
    labels = np.take_along_axis(classes, winner[None], axis=0)[0]
    if nomenclature is None:
        nomenclature = dict(FETA_NOMENCLATURE) if ref.class_count <= len(FETA_NOMENCLATURE) \
            else {c: ("background" if c == 0 else f"class_{c}") for c in range(ref.class_count)}
    return LabelVolume(labels, ref.affine, nomenclature)
