"""Per-template morphology descriptor (7 structure groups x 3 shape features)."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import InvalidInputError
from .volume import BRAIN_LABELS, CB, BS, GM, LV, TH, WM

FEATURE_NAMES = ("volume", "surface_area", "elongation")


@dataclass(frozen=True)
class FeatureConfig:
    """Which label sets form the descriptor groups and which groups get boosted.

    The default groups, in order, are whole brain, WM, GM, ventricles,
    cerebellum, deep GM and brainstem. The first four are boosted.
    """

    structure_groups: tuple = (
        ("whole_brain", BRAIN_LABELS),
        ("WM", (WM,)),
        ("GM", (GM,)),
        ("VT", (LV,)),
        ("CB", (CB,)),
        ("TH", (TH,)),
        ("BS", (BS,)),
    )
    boosted_groups: tuple = ("whole_brain", "WM", "GM", "VT")
    boost_factor: float = 2.0

    def __post_init__(self):
        names = [name for name, _ in self.structure_groups]
        if len(names) != len(set(names)):
            raise InvalidInputError("structure group names must be unique")
        unknown = set(self.boosted_groups) - set(names)
        if unknown:
            raise InvalidInputError(f"boosted groups {sorted(unknown)} are not defined")
        if self.boost_factor <= 0:
            raise InvalidInputError("boost_factor must be positive")

    @property
    def n_features(self):
        return len(self.structure_groups) * len(FEATURE_NAMES)

    @property
    def feature_names(self):
        return [f"{g}_{f}" for g, _ in self.structure_groups for f in FEATURE_NAMES]

    @property
    def boost_mask(self):
        return np.repeat([name in self.boosted_groups for name, _ in self.structure_groups],
                         len(FEATURE_NAMES))


@dataclass(frozen=True)
class CharacteristicVector:
    template_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise InvalidInputError("characteristic vector must be a finite 1-D array")
        object.__setattr__(self, "values", values)


def surface_area(mask, spacing):
    """Area of exposed voxel faces of ``mask`` in mm^2.

    A face counts when the neighbour across it (6-connectivity) is outside the
    mask or outside the grid.
    """
    mask = np.asarray(mask, dtype=bool)
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    padded = np.pad(mask, 1)
    total = 0.0
    for axis in range(3):
        # transitions between in/out along this axis = exposed faces
        n_faces = np.count_nonzero(np.diff(padded, axis=axis))
        total += n_faces * face_area[axis]
    return total


def elongation(coords, tol=1e-12):
    """Ratio of largest to smallest eigenvalue of the coordinate covariance.

    Returns 1.0 for fewer than 4 points or a (near-)singular covariance.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < 4:
        return 1.0
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / (coords.shape[0] - 1)
    eig = np.linalg.eigvalsh(cov)
    if eig[-1] <= 0 or eig[0] <= tol * eig[-1]:
        return 1.0
    return float(eig[-1] / eig[0])


def _group_features(mask, affine):
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0, 0.0, 1.0
    spacing = affine.voxel_spacing
    volume = count * affine.voxel_volume
    area = surface_area(mask, spacing)
    world = affine.apply(np.argwhere(mask))
    return volume, area, elongation(world)


def extract_features(vol, cfg=None, template_id=""):
    """Compute the characteristic vector of one FeTA label volume."""
    cfg = cfg or FeatureConfig()
    brain = np.isin(vol.labels, BRAIN_LABELS)
    if not brain.any():
        raise InvalidInputError(f"template {template_id!r} has no brain voxels")
    values = []
    for _, labels in cfg.structure_groups:
        values.extend(_group_features(np.isin(vol.labels, labels), vol.affine))
    return CharacteristicVector(template_id, np.array(values))


def extract_many(volumes, cfg=None, n_jobs=1):
    """Extract vectors for a ``{template_id: LabelVolume}`` mapping.

    Output is sorted by template id regardless of ``n_jobs``.
    """
    items = sorted(volumes.items())
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(lambda kv: extract_features(kv[1], cfg, kv[0]), items))
    return [extract_features(v, cfg, k) for k, v in items]


class ShapeFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer from label volumes to an ``(n, 21)`` feature matrix.

    Parameters
    ----------
    config : FeatureConfig, optional
        Group definitions; defaults to the FeTA groups.
    n_jobs : int, default=1
        Worker threads used over templates.
    """

    def __init__(self, config=None, n_jobs=1):
        self.config = config
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        self.n_features_out_ = (self.config or FeatureConfig()).n_features
        return self

    def transform(self, X):
        volumes = {f"{i:08d}": v for i, v in enumerate(X)}
        vectors = extract_many(volumes, self.config, self.n_jobs)
        return np.vstack([v.values for v in vectors])

    def get_feature_names_out(self, input_features=None):
        return np.array((self.config or FeatureConfig()).feature_names, dtype=object)
