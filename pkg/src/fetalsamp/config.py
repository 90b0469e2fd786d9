"""Structured YAML run configuration with defaults and aggregated validation."""

import copy
import hashlib
import json
import math
from pathlib import Path

import yaml

from ._validation import FetalSampError

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "features": {"boost_factor": 2.0},
    "sampler": {"n_pca_components": 3, "reg_covar": 1e-6, "tol": 1e-4, "max_iter": 200},
    "synth_vm": {"wm_coverage_cap": 0.65, "min_gap_voxels": 2, "smoothing_radius": 1},
    "background": {"k_dhcp": 4, "k_feta": 1},
    "preprocess": {
        "inference_margin": 5,
        "training_target_shape": [192, 192, 192],
        "upsample_trigger_mm": 1.0,
        "upsample_target_mm": 0.6,
        "direct_apply_mm": 0.5,
    },
    "pools": {"fractions": {"feta": 0.5, "dhcp": 0.5}},
    "evaluation": {"hd95_mode": "pooled"},
}


class ConfigError(FetalSampError, ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _merge(base, override, path, errors):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            errors.append(f"{where}: unknown key")
        elif isinstance(base[key], dict) and key != "fractions":
            if not isinstance(value, dict):
                errors.append(f"{where}: expected a mapping")
            else:
                _merge(base[key], value, where, errors)
        else:
            base[key] = value


def _number(cfg, path, errors, lo=None, hi=None, integer=False, lo_open=False, hi_open=False):
    section, _, key = path.rpartition(".")
    node = cfg
    for part in filter(None, section.split(".")):
        node = node[part]
    value = node[key]
    if isinstance(value, str) and not integer:
        # PyYAML reads "1e-6" (no dot) as a string
        try:
            value = node[key] = float(value)
        except ValueError:
            pass
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type or (not integer and not math.isfinite(value)):
        errors.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        return
    if lo is not None and (value <= lo if lo_open else value < lo):
        errors.append(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and (value >= hi if hi_open else value > hi):
        errors.append(f"{path}: must be {'<' if hi_open else '<='} {hi}, got {value}")


def normalize_config(raw):
    """Fill defaults into a config mapping and check every constraint."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping"])
    cfg = copy.deepcopy(DEFAULTS)
    errors = []
    _merge(cfg, raw, "", errors)

    _number(cfg, "seed", errors, lo=0, integer=True)
    _number(cfg, "threads", errors, lo=1, integer=True)
    _number(cfg, "features.boost_factor", errors, lo=0, lo_open=True)
    _number(cfg, "sampler.n_pca_components", errors, lo=1, integer=True)
    _number(cfg, "sampler.reg_covar", errors, lo=0)
    _number(cfg, "sampler.tol", errors, lo=0, lo_open=True)
    _number(cfg, "sampler.max_iter", errors, lo=1, integer=True)
    _number(cfg, "synth_vm.wm_coverage_cap", errors, lo=0, hi=1, lo_open=True, hi_open=True)
    _number(cfg, "synth_vm.min_gap_voxels", errors, lo=0, integer=True)
    _number(cfg, "synth_vm.smoothing_radius", errors, lo=0, integer=True)
    _number(cfg, "background.k_dhcp", errors, lo=1, integer=True)
    _number(cfg, "background.k_feta", errors, lo=1, integer=True)
    _number(cfg, "preprocess.inference_margin", errors, lo=0, integer=True)
    for key in ("upsample_trigger_mm", "upsample_target_mm", "direct_apply_mm"):
        _number(cfg, f"preprocess.{key}", errors, lo=0, lo_open=True)
    pp = cfg["preprocess"]
    shape = pp["training_target_shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)):
        errors.append(f"preprocess.training_target_shape: expected 3 positive integers, got {shape!r}")
    if (isinstance(pp["upsample_target_mm"], (int, float))
            and isinstance(pp["upsample_trigger_mm"], (int, float))
            and pp["upsample_target_mm"] >= pp["upsample_trigger_mm"]):
        errors.append("preprocess.upsample_target_mm: must be below preprocess.upsample_trigger_mm")
    if cfg["evaluation"]["hd95_mode"] not in ("pooled", "max"):
        errors.append(f"evaluation.hd95_mode: expected 'pooled' or 'max', "
                      f"got {cfg['evaluation']['hd95_mode']!r}")

    fractions = cfg["pools"]["fractions"]
    if not isinstance(fractions, dict) or not fractions:
        errors.append("pools.fractions: expected a non-empty mapping")
    else:
        numeric = True
        for name, value in fractions.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                errors.append(f"pools.fractions.{name}: must be a number > 0, got {value!r}")
                numeric = False
        if numeric:
            total = math.fsum(fractions.values())
            if abs(total - 1.0) > 1e-9:
                entries = ", ".join(f"pools.fractions.{k}={v}" for k, v in fractions.items())
                errors.append(f"pools.fractions: {entries} sum to {total:g}, expected 1")
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path=None):
    """Read a YAML config file (or none) and return the normalised mapping."""
    if path is None:
        return normalize_config({})
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML: {exc}"]) from exc
    return normalize_config(raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
