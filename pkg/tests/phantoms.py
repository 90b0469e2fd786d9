"""Synthetic label volumes used across the test-suite."""

import numpy as np

from fetalsamp.volume import Affine, BS, CB, CSF, GM, LV, TH, WM, LabelVolume


def ellipsoid(shape, center, radii):
    idx = np.indices(shape, dtype=float)
    r = sum(((idx[i] - center[i]) / radii[i]) ** 2 for i in range(3))
    return r <= 1.0


def brain_phantom(rng, shape=(44, 36, 36), spacing=(1.0, 1.0, 1.0)):
    """Two ventricle spheres inside a WM ellipsoid, GM shell, CSF rim, satellites.

    Thalamus blobs sit next to the ventricles; cerebellum and brainstem below.
    """
    labels = np.zeros(shape, dtype=np.int32)
    c = np.array(shape) / 2.0 - 0.5
    jitter = rng.uniform(-1.5, 1.5, size=3)
    c = c + jitter
    outer = np.array(shape) / 2.0 - 2.0
    labels[ellipsoid(shape, c, outer)] = CSF
    labels[ellipsoid(shape, c, outer - 1.5)] = GM
    labels[ellipsoid(shape, c, outer - 3.5)] = WM
    vr = rng.uniform(2.5, 4.0)
    off = rng.uniform(5.0, 7.0)
    for sign in (-1, 1):
        vc = c + np.array([sign * off, rng.uniform(-1, 1), rng.uniform(0, 2)])
        labels[ellipsoid(shape, vc, (vr, vr * 1.3, vr))] = LV
        tc = vc + np.array([-sign * 2.5, 0.0, -vr - 3.5])
        labels[ellipsoid(shape, tc, (2.0, 2.0, 1.5))] = TH
    cb = c + np.array([0.0, -outer[1] + 5.0, -outer[2] + 4.0])
    labels[ellipsoid(shape, cb, (5.0, 3.0, 2.5))] = CB
    bs = c + np.array([0.0, -2.0, -outer[2] + 4.5])
    labels[ellipsoid(shape, bs, (1.8, 1.8, 3.0))] = BS
    return LabelVolume(labels, Affine.from_spacing(spacing, origin=(-shape[0] / 2, 0, 0)))


def random_labels(rng, shape, n_labels=8, blobs=6):
    """Blobby random FeTA label volume (labels 0..n_labels-1)."""
    labels = np.zeros(shape, dtype=np.int32)
    for _ in range(blobs):
        lab = int(rng.integers(1, n_labels))
        center = rng.uniform(0, np.array(shape))
        radii = rng.uniform(1.0, max(shape) / 2.5, size=3)
        labels[ellipsoid(shape, center, radii)] = lab
    return labels


def write_template_dir(directory, n, seed, prefix="sub", shape=(30, 26, 26), spacing=(1.0, 1.0, 1.0)):
    """Save ``n`` brain phantoms as ``<prefix>-NNN.nii.gz`` into ``directory``."""
    from fetalsamp.volume import save_label_volume

    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        save_label_volume(brain_phantom(rng, shape, spacing), directory / f"{prefix}-{i:03d}.nii.gz")
    return directory
