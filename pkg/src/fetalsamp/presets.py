"""The eight training-set / sampling experiment presets and their runner."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from ._validation import InvalidInputError
from .config import config_hash, normalize_config
from .features import FeatureConfig, extract_many
from .pathology import DilationConfig, generate_pathological_set
from .sampler import DataDrivenSampler, PoolWeights, combine_pools, eq1_weights
from .tabular import list_volumes, write_csv
from .volume import load_label_volume, save_label_volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoolSpec:
    name: str
    datasets: tuple          # subset of {"feta", "synthetic", "dhcp"}
    k: int = None            # None means uniform sampling within the pool


@dataclass(frozen=True)
class ExperimentPreset:
    id: int
    name: str
    uses_feta: bool
    uses_dhcp: bool
    uses_synthetic: bool
    data_driven: bool
    pools: tuple


def _preset(id_, name, dhcp, synth, samp):
    feta_sets = ("feta", "synthetic") if synth else ("feta",)
    feta_k = (6 if synth else 4) if samp else None
    pools = [PoolSpec("feta", feta_sets, feta_k)]
    if dhcp:
        pools.append(PoolSpec("dhcp", ("dhcp",), 8 if samp else None))
    return ExperimentPreset(id_, name, True, dhcp, synth, samp, tuple(pools))


PRESETS = {p.id: p for p in (
    _preset(1, "baseline", dhcp=False, synth=False, samp=False),
    _preset(2, "samp", dhcp=False, synth=False, samp=True),
    _preset(3, "dhcp", dhcp=True, synth=False, samp=False),
    _preset(4, "dhcp+samp", dhcp=True, synth=False, samp=True),
    _preset(5, "synth", dhcp=False, synth=True, samp=False),
    _preset(6, "synth+samp", dhcp=False, synth=True, samp=True),
    _preset(7, "dhcp+synth", dhcp=True, synth=True, samp=False),
    _preset(8, "dhcp+synth+samp", dhcp=True, synth=True, samp=True),
)}


def pool_fractions(preset, config):
    """Single-pool presets take everything; two-pool presets use the configured split."""
    if len(preset.pools) == 1:
        return {preset.pools[0].name: 1.0}
    configured = config["pools"]["fractions"]
    missing = [p.name for p in preset.pools if p.name not in configured]
    if missing:
        raise InvalidInputError(f"pools.fractions has no entry for {missing}")
    return {p.name: float(configured[p.name]) for p in preset.pools}


@dataclass
class RunManifest:
    preset_id: int
    preset_name: str
    seed: int
    inputs: dict
    outputs: dict
    tool_version: str
    config_hash: str
    failures: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _load_dir(directory, threads):
    paths = list_volumes(directory)
    if not paths:
        raise FileNotFoundError(f"{directory}: no NIfTI templates found")
    return {tid: load_label_volume(p) for tid, p in paths.items()}


def _write_features(path, vectors, cfg):
    write_csv(path, ["template_id"] + [f"f{i:02d}" for i in range(1, cfg.n_features + 1)],
              ([v.template_id, *v.values.tolist()] for v in vectors))


def run_preset(preset, feta_dir, out_dir, dhcp_dir=None, config=None, seed=None, threads=1):
    """Build the sampling table (and synthetic templates if needed) for one preset.

    Returns the RunManifest; every artifact is written below ``out_dir``.
    """
    if isinstance(preset, int):
        if preset not in PRESETS:
            raise InvalidInputError(f"unknown preset {preset}; choose 1-8")
        preset = PRESETS[preset]
    config = normalize_config(config or {})
    seed = config["seed"] if seed is None else int(seed)
    if preset.uses_dhcp and dhcp_dir is None:
        raise InvalidInputError(f"preset {preset.id} ({preset.name}) needs a dHCP directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, failures = {}, {}

    datasets = {"feta": _load_dir(feta_dir, threads)}
    if preset.uses_dhcp:
        datasets["dhcp"] = _load_dir(dhcp_dir, threads)
    if preset.uses_synthetic:
        vm = config["synth_vm"]
        dcfg = DilationConfig(vm["wm_coverage_cap"], vm["min_gap_voxels"],
                              vm["smoothing_radius"], seed)
        outcomes, failures = generate_pathological_set(datasets["feta"], dcfg, threads)
        synth_dir = out_dir / "synth_vm"
        for tid, outcome in outcomes.items():
            save_label_volume(outcome.template, synth_dir / f"{tid}.nii.gz")
        write_csv(out_dir / "synth_vm_log.csv",
                  ["template_id", "d_left", "d_right", "wm_fraction_consumed"],
                  ([tid, o.iterations_left, o.iterations_right, o.wm_consumed_fraction]
                   for tid, o in outcomes.items()))
        outputs["synth_vm_dir"] = "synth_vm"
        outputs["synth_vm_log"] = "synth_vm_log.csv"
        datasets["synthetic"] = {tid: o.template for tid, o in outcomes.items()}

    fcfg = FeatureConfig(boost_factor=config["features"]["boost_factor"])
    fractions = pool_fractions(preset, config)
    pools = []
    for spec in preset.pools:
        volumes = {}
        for ds in spec.datasets:
            volumes.update(datasets[ds])
        if spec.k is not None and spec.k > len(volumes):
            raise InvalidInputError(
                f"pool {spec.name!r}: K={spec.k} exceeds its {len(volumes)} templates")
        ids = sorted(volumes)
        if spec.k is None:
            assignments = {t: 0 for t in ids}
            weights = eq1_weights(assignments, 1)
        else:
            vectors = extract_many(volumes, fcfg, threads)
            _write_features(out_dir / f"features_{spec.name}.csv", vectors, fcfg)
            sc = config["sampler"]
            sampler = DataDrivenSampler(
                spec.k, sc["n_pca_components"], fcfg.boost_mask, fcfg.boost_factor, seed,
                sc["reg_covar"], sc["tol"], sc["max_iter"],
            ).fit([v.values for v in vectors])
            assignments = {v.template_id: int(g) for v, g in zip(vectors, sampler.labels_)}
            weights = eq1_weights(assignments, spec.k)
            write_csv(out_dir / f"assignments_{spec.name}.csv", ["template_id", "subgroup"],
                      ([t, assignments[t]] for t in ids))
            (out_dir / f"model_{spec.name}.json").write_text(
                json.dumps({"template_ids": ids, **sampler.to_dict()}, indent=2) + "\n")
            outputs[f"features_{spec.name}"] = f"features_{spec.name}.csv"
            outputs[f"assignments_{spec.name}"] = f"assignments_{spec.name}.csv"
            outputs[f"model_{spec.name}"] = f"model_{spec.name}.json"
        pools.append(PoolWeights(spec.name, weights, fractions[spec.name], assignments))

    table = combine_pools(pools)
    table.to_csv(out_dir / "sampling_table.csv")
    outputs["sampling_table"] = "sampling_table.csv"

    inputs = {"feta": str(feta_dir)}
    if preset.uses_dhcp:
        inputs["dhcp"] = str(dhcp_dir)
    manifest = RunManifest(preset.id, preset.name, seed, inputs, outputs, __version__,
                           config_hash({"config": config, "preset": preset.id, "seed": seed}),
                           failures)
    manifest.write(out_dir / "manifest.json")
    return manifest
