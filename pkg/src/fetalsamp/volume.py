"""Label and intensity volumes, NIfTI-1 I/O and label-nomenclature remapping."""

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType

import nibabel as nib
import numpy as np
import yaml

from ._validation import InvalidInputError, VolumeIOError

FETA_NOMENCLATURE = MappingProxyType({
    0: "background",
    1: "CSF",
    2: "GM",
    3: "WM",
    4: "LV",
    5: "CB",
    6: "TH",
    7: "BS",
})

BACKGROUND, CSF, GM, WM, LV, CB, TH, BS = range(8)
BRAIN_LABELS = (CSF, GM, WM, LV, CB, TH, BS)


@dataclass(frozen=True)
class Affine:
    """Voxel-to-world transform in millimetres."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidInputError(f"affine must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("affine contains non-finite entries")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise InvalidInputError("affine upper 3x3 is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_spacing(cls, spacing, origin=(0.0, 0.0, 0.0)):
        m = np.diag([*map(float, spacing), 1.0])
        m[:3, 3] = origin
        return cls(m)

    @property
    def voxel_spacing(self):
        return np.linalg.norm(self.matrix[:3, :3], axis=0)

    @property
    def voxel_volume(self):
        return float(abs(np.linalg.det(self.matrix[:3, :3])))

    def translated(self, index_offset):
        """Affine of a grid whose voxel 0 sits at ``index_offset`` of this grid."""
        shift = np.eye(4)
        shift[:3, 3] = index_offset
        return Affine(self.matrix @ shift)

    def apply(self, indices):
        """Map an (..., 3) array of voxel indices to world coordinates."""
        idx = np.asarray(indices, dtype=np.float64)
        return idx @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def __eq__(self, other):
        return isinstance(other, Affine) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def _frozen(array):
    array = np.array(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense 3-D grid of non-negative integer labels.

    Every label present in ``labels`` must be a key of ``nomenclature`` and
    label 0 is always background.
    """

    labels: np.ndarray
    affine: Affine
    nomenclature: dict = field(default_factory=lambda: dict(FETA_NOMENCLATURE))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise InvalidInputError(f"label volume must be 3-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvalidInputError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise InvalidInputError("labels must be non-negative")
        nomenclature = {int(k): str(v) for k, v in self.nomenclature.items()}
        if nomenclature.get(0) != "background":
            raise InvalidInputError("nomenclature must map 0 to 'background'")
        unknown = sorted(set(present_labels(labels)) - set(nomenclature))
        if unknown:
            raise InvalidInputError(f"unknown label(s) {unknown} not in nomenclature")
        if not isinstance(self.affine, Affine):
            object.__setattr__(self, "affine", Affine(self.affine))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int32, copy=False)))
        object.__setattr__(self, "nomenclature", MappingProxyType(nomenclature))

    @property
    def shape(self):
        return self.labels.shape

    def with_labels(self, labels, nomenclature=None):
        return LabelVolume(labels, self.affine,
                           dict(self.nomenclature if nomenclature is None else nomenclature))

    def equals(self, other, atol=0.0):
        return (self.shape == other.shape
                and np.array_equal(self.labels, other.labels)
                and np.allclose(self.affine.matrix, other.affine.matrix, atol=atol, rtol=0))


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Dense 3-D grid of finite, non-negative intensities."""

    values: np.ndarray
    affine: Affine

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise InvalidInputError(f"intensity volume must be 3-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("non-finite intensity")
        if not isinstance(self.affine, Affine):
            object.__setattr__(self, "affine", Affine(self.affine))
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self):
        return self.values.shape


def present_labels(labels):
    """Sorted label IDs occurring in an integer array."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    if labels.min() >= 0 and labels.max() < 1 << 16:
        return np.flatnonzero(np.bincount(labels.ravel())).tolist()
    return np.unique(labels).tolist()


def _read_nifti(path):
    path = Path(path)
    if not path.is_file():
        raise VolumeIOError(path, "file does not exist")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a variety of types for bad headers
        raise VolumeIOError(path, f"cannot read NIfTI: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise VolumeIOError(path, "not a NIfTI volume")
    return img, data


def _squeeze3d(data, path):
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeIOError(path, f"expected 3-D data, got shape {data.shape}")
    return data


def load_label_volume(path, nomenclature=None):
    """Read an integer-valued NIfTI file as a :class:`LabelVolume`.

    ``nomenclature`` defaults to the FeTA map; any label absent from it is
    rejected.
    """
    img, data = _read_nifti(path)
    data = _squeeze3d(data, path)
    if not np.issubdtype(data.dtype, np.integer):
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise VolumeIOError(path, "label data is not integer-valued")
        data = data.astype(np.int64)
    try:
        return LabelVolume(data, Affine(img.affine),
                           dict(FETA_NOMENCLATURE if nomenclature is None else nomenclature))
    except InvalidInputError as exc:
        raise VolumeIOError(path, str(exc)) from exc


def load_intensity_volume(path):
    img, data = _read_nifti(path)
    data = _squeeze3d(data, path)
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise VolumeIOError(path, "non-finite intensity")
    return IntensityVolume(data, Affine(img.affine))


def _write(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        nib.save(img, str(path))
    except Exception as exc:
        raise VolumeIOError(path, f"cannot write NIfTI: {exc}") from exc


def _header(affine):
    hdr = nib.Nifti1Header()
    hdr.set_qform(affine.matrix, code=1)
    hdr.set_sform(affine.matrix, code=1)
    hdr.set_xyzt_units("mm")
    return hdr


def save_label_volume(vol, path):
    if vol.labels.size and vol.labels.max() > np.iinfo(np.uint16).max:
        raise InvalidInputError("label IDs exceed the uint16 range")
    img = nib.Nifti1Image(vol.labels.astype(np.uint16), vol.affine.matrix, _header(vol.affine))
    img.set_data_dtype(np.uint16)
    _write(img, path)


def save_intensity_volume(vol, path, dtype=np.float32):
    img = nib.Nifti1Image(vol.values.astype(dtype), vol.affine.matrix, _header(vol.affine))
    img.set_data_dtype(dtype)
    _write(img, path)


def remap_labels(vol, mapping, nomenclature=None):
    """Substitute every voxel label through ``mapping``.

    ``nomenclature`` names the target IDs (FeTA by default). Raises if any
    label in ``vol`` has no entry.
    """
    mapping = {int(k): int(v) for k, v in mapping.items()}
    present = present_labels(vol.labels)
    missing = [lab for lab in present if lab not in mapping]
    if missing:
        raise InvalidInputError(f"unmapped label(s): {missing}")
    lut = np.zeros(max(present) + 1 if present else 1, dtype=np.int64)
    for lab in present:
        lut[lab] = mapping[lab]
    return LabelVolume(lut[vol.labels], vol.affine,
                       dict(FETA_NOMENCLATURE if nomenclature is None else nomenclature))


def load_remap_table(source):
    """Load a remap table from a YAML file path or a shipped table name.

    The file holds ``mapping`` (source ID -> target ID) and optionally
    ``source_labels`` (source ID -> name). Shipped names: ``dhcp_to_feta``,
    ``bounti_to_feta``.

    Returns ``(mapping, source_nomenclature)``.
    """
    path = Path(source)
    if path.suffix in {".yaml", ".yml", ".json"} or path.exists():
        if not path.is_file():
            raise VolumeIOError(path, "remap table not found")
        text = path.read_text()
    else:
        try:
            text = resources.files("fetalsamp.data").joinpath(f"{source}.yaml").read_text()
        except FileNotFoundError:
            raise InvalidInputError(f"no shipped remap table named {source!r}") from None
    doc = yaml.safe_load(text) or {}
    if "mapping" not in doc:
        raise InvalidInputError(f"remap table {source!r} has no 'mapping' section")
    mapping = {int(k): int(v) for k, v in doc["mapping"].items()}
    names = doc.get("source_labels") or {k: f"label_{k}" for k in mapping}
    names = {int(k): str(v) for k, v in names.items()}
    names[0] = "background"
    return mapping, names
