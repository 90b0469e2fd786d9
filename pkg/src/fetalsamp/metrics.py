"""Overlap and surface metrics, per-subject aggregation and paired t-tests.

Undefined metric values (e.g. Dice of two empty masks) are ``nan`` and are
skipped by the aggregations.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import betainc

from ._validation import InvalidInputError, check_mask_pair
from .volume import FETA_NOMENCLATURE

STRUCTURES = tuple(name for lab, name in sorted(FETA_NOMENCLATURE.items()) if lab != 0)
DOMAINS = ("in", "similar", "out", "most-pathological")
_FACE = ndimage.generate_binary_structure(3, 1)


def dice(pred, gt):
    pred, gt = check_mask_pair(pred, gt)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    if total == 0:
        return math.nan
    return 2.0 * np.count_nonzero(pred & gt) / total


def volume_similarity(pred, gt):
    pred, gt = check_mask_pair(pred, gt)
    va, vb = np.count_nonzero(pred), np.count_nonzero(gt)
    if va + vb == 0:
        return math.nan
    return 1.0 - abs(va - vb) / (va + vb)


def boundary(mask):
    """Mask voxels with at least one face neighbour outside the mask or grid."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, _FACE, border_value=0)
    return mask & ~eroded


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Distances (mm) from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dist[ba]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), mode="pooled"):
    """95th percentile Hausdorff distance in mm.

    ``mode="pooled"`` takes the percentile of both directed distance sets
    together; ``mode="max"`` takes the larger of the two directed
    percentiles. Empty masks give ``nan``.
    """
    pred, gt = check_mask_pair(pred, gt)
    if not pred.any() or not gt.any():
        return math.nan
    d_pg = surface_distances(pred, gt, spacing)
    d_gp = surface_distances(gt, pred, spacing)
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))
    if mode == "max":
        return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))
    raise InvalidInputError(f"unknown HD95 mode {mode!r}")


@dataclass
class StructureScores:
    """Per-structure metrics for one subject; each value is a (dice, hd95, vs) tuple."""

    subject_id: str
    scores: dict = field(default_factory=dict)

    def metric(self, name):
        i = ("dice", "hd95", "vs").index(name)
        return {s: v[i] for s, v in self.scores.items()}


def score_subject(subject_id, pred, gt, nomenclature=None, hd95_mode="pooled"):
    """Score every non-background structure of two label volumes on one grid."""
    if pred.shape != gt.shape:
        raise InvalidInputError(f"grid mismatch for {subject_id}: {pred.shape} vs {gt.shape}")
    nomenclature = nomenclature or FETA_NOMENCLATURE
    spacing = gt.affine.voxel_spacing
    out = StructureScores(subject_id)
    for lab, name in sorted(nomenclature.items()):
        if lab == 0:
            continue
        p, g = pred.labels == lab, gt.labels == lab
        out.scores[name] = (dice(p, g), hd95(p, g, spacing, hd95_mode), volume_similarity(p, g))
    return out


def subject_mean(scores, metric="dice"):
    """Mean over structures, skipping undefined values."""
    values = scores.metric(metric).values() if isinstance(scores, StructureScores) else \
        scores.values() if isinstance(scores, dict) else scores
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        raise InvalidInputError("no defined structure score to average")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def paired_t_test(a, b):
    """Two-sided paired t-test on matched per-subject scores."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise InvalidInputError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    df = n - 1
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, mean), df, 0.0)
    t = mean / (sd / math.sqrt(n))
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t, df, min(max(p, 0.0), 1.0))


@dataclass
class DomainReport:
    domain: str
    experiment_stats: dict            # experiment -> {"n", "mean", "sd"}
    comparisons: dict = field(default_factory=dict)   # "A vs B" -> TTestResult
    subject_means: dict = field(default_factory=dict)  # experiment -> {subject: mean}

    def to_dict(self):
        return {
            "domain": self.domain,
            "experiments": self.experiment_stats,
            "comparisons": {k: {"t": v.t, "df": v.df, "p": v.p}
                            for k, v in self.comparisons.items()},
        }


def _mean_sd(values):
    values = np.asarray(values, dtype=np.float64)
    sd = float(np.std(values, ddof=1)) if values.size >= 2 else 0.0
    return {"n": int(values.size), "mean": float(np.mean(values)), "sd": sd}


def build_domain_report(domains, experiments, pairs=()):
    """Aggregate per-subject means by domain and compare experiments.

    Parameters
    ----------
    domains : dict of subject -> domain tag (one of DOMAINS)
    experiments : dict of experiment -> dict of subject -> per-subject mean
    pairs : iterable of (experiment_a, experiment_b)
        Paired t-tests run on subjects common to both, per domain, when at
        least two are shared.

    Returns
    -------
    dict of domain -> DomainReport, in DOMAINS order, for domains with subjects.
    """
    unknown = sorted({d for d in domains.values() if d not in DOMAINS})
    if unknown:
        raise InvalidInputError(f"unknown domain tag(s): {unknown}")
    pairs = list(pairs)
    for a, b in pairs:
        for e in (a, b):
            if e not in experiments:
                raise InvalidInputError(f"unknown experiment {e!r} in comparison")
    reports = {}
    for dom in DOMAINS:
        subjects = sorted(s for s, d in domains.items() if d == dom)
        if not subjects:
            continue
        stats, means = {}, {}
        for exp, per_subject in experiments.items():
            vals = {s: per_subject[s] for s in subjects if s in per_subject}
            means[exp] = vals
            if vals:
                stats[exp] = _mean_sd(list(vals.values()))
        comps = {}
        for a, b in pairs:
            common = sorted(set(means[a]) & set(means[b]))
            if len(common) >= 2:
                comps[f"{a} vs {b}"] = paired_t_test([means[a][s] for s in common],
                                                     [means[b][s] for s in common])
        reports[dom] = DomainReport(dom, stats, comps, means)
    return reports
