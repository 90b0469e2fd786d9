"""Synthetic ventriculomegaly by constrained dilation of the lateral ventricles.

Ventricles grow into white matter one face-connected layer per step, per
hemisphere, never closer than ``min_gap_voxels`` to any structure other than
WM, ventricles or background. A random number of steps strictly below the
coverage-limited maximum is drawn per hemisphere.
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import InvalidInputError
from .volume import LV, WM, LabelVolume

logger = logging.getLogger(__name__)

_FACE = ndimage.generate_binary_structure(3, 1)
SUFFIX = "_synthvm"


@dataclass(frozen=True)
class DilationConfig:
    wm_coverage_cap: float = 0.65
    min_gap_voxels: int = 2
    smoothing_radius: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.wm_coverage_cap <= 1:
            raise InvalidInputError("wm_coverage_cap must lie in (0, 1]")
        if self.min_gap_voxels < 0:
            raise InvalidInputError("min_gap_voxels must be >= 0")
        if self.smoothing_radius < 0:
            raise InvalidInputError("smoothing_radius must be >= 0")


@dataclass(frozen=True)
class DilationOutcome:
    template: LabelVolume
    iterations_left: int
    iterations_right: int
    wm_consumed_fraction: float
    max_left: int = 0
    max_right: int = 0
    warning: str = ""


class _Geometry:
    """Masks shared by the per-hemisphere simulations of one template."""

    def __init__(self, vol, cfg):
        labels = vol.labels
        self.labels = labels
        self.wm = labels == WM
        self.vt = labels == LV
        other = (labels != 0) & ~self.wm & ~self.vt
        if cfg.min_gap_voxels > 0 and other.any():
            dist = ndimage.distance_transform_edt(~other)
            self.allowed = self.wm & (dist >= cfg.min_gap_voxels)
        else:
            self.allowed = self.wm.copy()
        self.left = hemisphere_mask(vol)
        self.cfg = cfg

    def side(self, h):
        return self.left if h == "left" else ~self.left

    def grow(self, h, steps):
        """Run ``steps`` dilation steps in hemisphere ``h``; return converted voxels."""
        candidates = self.allowed & self.side(h)
        vt = self.vt.copy()
        converted = np.zeros_like(vt)
        for _ in range(steps):
            new = ndimage.binary_dilation(vt, _FACE) & candidates & ~converted
            if not new.any():
                break
            converted |= new
            vt |= new
        return converted

    def max_steps(self, h):
        side = self.side(h)
        wm_total = int(np.count_nonzero(self.wm & side))
        if wm_total == 0 or not self.vt.any():
            return 0
        target = self.cfg.wm_coverage_cap * wm_total
        candidates = self.allowed & side
        vt = self.vt.copy()
        count = 0
        steps = 0
        while True:
            new = ndimage.binary_dilation(vt, _FACE) & candidates & ~vt
            n_new = int(np.count_nonzero(new))
            if n_new == 0:
                return steps
            steps += 1
            count += n_new
            vt |= new
            if count >= target:
                return steps


def hemisphere_mask(vol):
    """True for voxels on the left of the world x-plane through the brain centroid."""
    brain = vol.labels != 0
    if not brain.any():
        return np.ones(vol.shape, dtype=bool)
    m = vol.affine.matrix
    idx = np.indices(vol.shape, dtype=np.float64)
    x_world = m[0, 0] * idx[0] + m[0, 1] * idx[1] + m[0, 2] * idx[2] + m[0, 3]
    centroid = float(np.mean(x_world[brain]))
    # RAS convention: left is negative x; the plane itself counts as left
    return x_world <= centroid


def max_dilations(vol, cfg=None):
    """Per-hemisphere step count at which converted WM first reaches the cap.

    If growth stalls before the cap, the number of productive steps is
    returned. Hemispheres without WM or ventricles give 0.
    """
    cfg = cfg or DilationConfig()
    geo = _Geometry(vol, cfg)
    return {"left": geo.max_steps("left"), "right": geo.max_steps("right")}


def _smooth(geo, vt_mask, radius, caps):
    """Majority filter on the ventricle mask, constrained to keep all invariants."""
    size = 2 * radius + 1
    counts = ndimage.convolve(vt_mask.astype(np.int32), np.ones((size,) * 3, np.int32),
                              mode="constant", cval=0)
    majority = 2 * counts > size ** 3
    result = (majority & (geo.allowed | geo.vt)) | geo.vt
    for h, cap in caps.items():
        side = geo.side(h)
        gained = result & ~geo.vt & side
        if np.count_nonzero(gained) > cap:
            # smoothing would exceed the coverage cap: keep the unsmoothed side
            result[side] = vt_mask[side]
    return result


def dilate_ventricles(vol, cfg=None, rng=None, steps=None):
    """Draw per-hemisphere step counts and grow the ventricles.

    ``steps`` may force ``{"left": d, "right": d}`` instead of drawing them.
    """
    cfg = cfg or DilationConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    geo = _Geometry(vol, cfg)
    if not geo.wm.any() or not geo.vt.any():
        msg = "template has no WM or no ventricle voxels; left unchanged"
        logger.warning(msg)
        return DilationOutcome(vol, 0, 0, 0.0, warning=msg)

    dmax = {h: geo.max_steps(h) for h in ("left", "right")}
    if steps is None:
        steps = {h: int(rng.integers(1, dmax[h])) if dmax[h] > 1 else 0 for h in dmax}

    vt = geo.vt.copy()
    for h in ("left", "right"):
        if steps[h] > 0:
            vt |= geo.grow(h, steps[h])

    if cfg.smoothing_radius > 0 and any(steps.values()):
        caps = {}
        for h in ("left", "right"):
            wm_h = np.count_nonzero(geo.wm & geo.side(h))
            caps[h] = np.floor(cfg.wm_coverage_cap * wm_h) if steps[h] > 0 else 0
        vt = _smooth(geo, vt, cfg.smoothing_radius, caps)

    labels = np.array(vol.labels)
    labels[vt & geo.wm] = LV
    converted = np.count_nonzero(vt & geo.wm)
    frac = converted / np.count_nonzero(geo.wm)
    return DilationOutcome(vol.with_labels(labels), steps["left"], steps["right"],
                           float(frac), dmax["left"], dmax["right"])


def template_seed(seed, template_id):
    """Sub-seed that depends only on the run seed and the template id."""
    return np.random.SeedSequence([int(seed), zlib.crc32(template_id.encode("utf-8"))])


def generate_pathological_set(templates, cfg=None, n_jobs=1):
    """One synthetic ventriculomegaly template per input.

    Parameters
    ----------
    templates : dict of str -> LabelVolume
    cfg : DilationConfig
    n_jobs : int
        Worker threads; results do not depend on it.

    Returns
    -------
    outcomes : dict of str -> DilationOutcome
        Keyed by ``<template_id>_synthvm``, sorted by id.
    failures : dict of str -> str
        Templates that raised, with the error message.
    """
    cfg = cfg or DilationConfig()
    if not templates:
        raise InvalidInputError("no templates given")
    items = sorted(templates.items())

    def run(item):
        tid, vol = item
        rng = np.random.default_rng(template_seed(cfg.seed, tid))
        try:
            return tid, dilate_ventricles(vol, cfg, rng), None
        except Exception as exc:  # reported per template, run continues
            return tid, None, f"{type(exc).__name__}: {exc}"

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(i) for i in items]

    outcomes, failures = {}, {}
    for tid, outcome, err in results:
        if err is None:
            outcomes[tid + SUFFIX] = outcome
        else:
            logger.error("synthesis failed for %s: %s", tid, err)
            failures[tid] = err
    return outcomes, failures
