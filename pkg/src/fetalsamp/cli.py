"""Command-line front end.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._validation import InvalidInputError, VolumeIOError
from .background import subdivide_background
from .config import ConfigError, validate_config
from .ensemble import load_probability_volume, merge_max_posterior
from .features import FeatureConfig, extract_many
from .metrics import (DOMAINS, STRUCTURES, build_domain_report, score_subject,
                      subject_mean, StructureScores)
from .pathology import DilationConfig, generate_pathological_set
from .preprocess import (UPSAMPLE, PreprocessConfig, center_training_template,
                         crop_inference_input, plan_resample, resample_image)
from .presets import PRESETS, run_preset
from .sampler import DataDrivenSampler, PoolWeights, combine_pools, eq1_weights
from .tabular import fmt, list_volumes, parse, read_csv, write_csv
from .volume import (load_intensity_volume, load_label_volume, load_remap_table,
                     remap_labels, save_intensity_volume, save_label_volume)

logger = logging.getLogger("fetalsamp")


def _feature_cfg(cfg):
    return FeatureConfig(boost_factor=cfg["features"]["boost_factor"])


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_features(args, cfg):
    fcfg = _feature_cfg(cfg)
    volumes = {tid: load_label_volume(p) for tid, p in list_volumes(args.input_dir).items()}
    if not volumes:
        raise FileNotFoundError(f"{args.input_dir}: no NIfTI templates found")
    vectors = extract_many(volumes, fcfg, args.threads)
    write_csv(args.output, ["template_id"] + [f"f{i:02d}" for i in range(1, fcfg.n_features + 1)],
              ([v.template_id, *v.values.tolist()] for v in vectors))


def _read_features(path):
    rows = read_csv(path, required=["template_id"])
    cols = [c for c in rows[0] if c != "template_id"] if rows else []
    ids = [r["template_id"] for r in rows]
    X = np.array([[float(r[c]) for c in cols] for r in rows])
    return ids, X


def cmd_cluster(args, cfg):
    ids, X = _read_features(args.features)
    fcfg = _feature_cfg(cfg)
    sc = cfg["sampler"]
    sampler = DataDrivenSampler(args.k, sc["n_pca_components"], fcfg.boost_mask,
                                fcfg.boost_factor, args.seed, sc["reg_covar"], sc["tol"],
                                sc["max_iter"]).fit(X)
    write_csv(args.output, ["template_id", "subgroup"],
              sorted(zip(ids, (int(g) for g in sampler.labels_))))
    _write_json(args.model, {"template_ids": ids, **sampler.to_dict()})


def _parse_pool(spec):
    name, sep, rest = spec.partition("=")
    path, sep2, frac = rest.rpartition(":")
    if not sep or not sep2:
        raise argparse.ArgumentTypeError(f"expected NAME=ASSIGNMENTS_CSV:FRACTION, got {spec!r}")
    return name, path, float(frac)


def cmd_weights(args, cfg):
    pools = []
    for name, path, fraction in args.pool:
        rows = read_csv(path, required=["template_id", "subgroup"])
        assignments = {r["template_id"]: int(r["subgroup"]) for r in rows}
        if not assignments:
            raise InvalidInputError(f"{path}: no assignments")
        k = max(assignments.values()) + 1
        pools.append(PoolWeights(name, eq1_weights(assignments, k), fraction, assignments))
    combine_pools(pools).to_csv(args.output)


def cmd_synth_vm(args, cfg):
    vm = cfg["synth_vm"]
    dcfg = DilationConfig(
        args.cap if args.cap is not None else vm["wm_coverage_cap"],
        args.min_gap if args.min_gap is not None else vm["min_gap_voxels"],
        args.smoothing_radius if args.smoothing_radius is not None else vm["smoothing_radius"],
        args.seed)
    volumes = {tid: load_label_volume(p) for tid, p in list_volumes(args.input_dir).items()}
    outcomes, failures = generate_pathological_set(volumes, dcfg, args.threads)
    out = Path(args.output_dir)
    for tid, o in outcomes.items():
        save_label_volume(o.template, out / f"{tid}.nii.gz")
    write_csv(out / "synth_vm_log.csv", ["template_id", "d_left", "d_right", "wm_fraction_consumed"],
              ([tid, o.iterations_left, o.iterations_right, o.wm_consumed_fraction]
               for tid, o in outcomes.items()))
    if failures:
        for tid, msg in failures.items():
            logger.error("%s: %s", tid, msg)
        return 1
    return 0


def cmd_bg_subdivide(args, cfg):
    template = load_label_volume(args.template)
    image = load_intensity_volume(args.image)
    split = subdivide_background(template, image, args.k, args.seed)
    save_label_volume(split.generation_map, args.output)
    mapping_path = args.mapping or str(args.output).replace(".nii.gz", "").replace(".nii", "") \
        + "_mapping.json"
    _write_json(mapping_path, {
        "k": split.k,
        "gt_mapping": {str(k): v for k, v in split.gt_mapping.items()},
        "cluster_centers": [float(fmt(c)) for c in split.cluster_centers],
        "labels": {str(k): v for k, v in split.generation_map.nomenclature.items()},
    })


def _preprocess_cfg(args, cfg):
    pp = dict(cfg["preprocess"])
    if args.margin is not None:
        pp["inference_margin"] = args.margin
    if args.target_shape is not None:
        pp["training_target_shape"] = list(args.target_shape)
    pp["training_target_shape"] = tuple(pp["training_target_shape"])
    return PreprocessConfig(**pp)


def cmd_preprocess(args, cfg):
    pcfg = _preprocess_cfg(args, cfg)
    if args.mode == "train":
        vol = load_label_volume(args.input)
        if args.plan_only:
            print(json.dumps(plan_resample(vol.affine, pcfg).to_dict(), sort_keys=True))
            return 0
        if not args.output:
            raise InvalidInputError("--output is required unless --plan-only is given")
        save_label_volume(center_training_template(vol, pcfg), args.output)
        return 0
    image = load_intensity_volume(args.input)
    plan = plan_resample(image.affine, pcfg)
    print(json.dumps(plan.to_dict(), sort_keys=True))
    if args.plan_only:
        return 0
    if not args.output:
        raise InvalidInputError("--output is required unless --plan-only is given")
    cropped = crop_inference_input(image, pcfg)
    if plan.action == UPSAMPLE:
        cropped = resample_image(cropped, plan.working_spacing)
    save_intensity_volume(cropped, args.output)
    return 0


def cmd_ensemble(args, cfg):
    vols = [load_probability_volume(p) for p in args.posteriors]
    save_label_volume(merge_max_posterior(vols), args.output)


def _nomenclature(path):
    if path is None:
        return None
    doc = yaml.safe_load(Path(path).read_text()) or {}
    names = {int(k): str(v) for k, v in doc.items()}
    names[0] = "background"
    return names


def cmd_evaluate(args, cfg):
    nomenclature = _nomenclature(args.nomenclature)
    preds = list_volumes(args.pred_dir)
    gts = list_volumes(args.gt_dir)
    subjects = sorted(set(preds) & set(gts))
    for s in sorted(set(gts) - set(preds)):
        logger.warning("no prediction for %s", s)
    if not subjects:
        raise FileNotFoundError("no subjects with both a prediction and a ground truth")
    mode = args.hd95_mode or cfg["evaluation"]["hd95_mode"]

    def run(s):
        return score_subject(s, load_label_volume(preds[s], nomenclature),
                             load_label_volume(gts[s], nomenclature), nomenclature, mode)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(run, subjects))
    rows = []
    for res in results:
        for name, (d, h, v) in res.scores.items():
            rows.append([res.subject_id, name, d, h, v])
    write_csv(args.output, ["subject", "structure", "dice", "hd95", "vs"], rows)


def _read_scores(path):
    rows = read_csv(path, required=["subject", "structure", "dice", "hd95", "vs"])
    subjects = {}
    for r in rows:
        s = subjects.setdefault(r["subject"], StructureScores(r["subject"]))
        s.scores[r["structure"]] = (parse(r["dice"]), parse(r["hd95"]), parse(r["vs"]))
    return subjects


def _parse_kv(spec):
    key, sep, value = spec.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {spec!r}")
    return key, value


def _parse_pair(spec):
    a, sep, b = spec.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected A:B, got {spec!r}")
    return a, b


def cmd_report(args, cfg):
    domains = {r["subject"]: r["domain"]
               for r in read_csv(args.domains, required=["subject", "domain"])}
    scores = {exp: _read_scores(path) for exp, path in args.scores}
    out = Path(args.output_dir)
    result = {}
    for metric in args.metrics:
        per_subject = {}
        for exp, subjects in scores.items():
            vals = {}
            for sid, sc in subjects.items():
                try:
                    vals[sid] = subject_mean(sc, metric)
                except InvalidInputError:
                    logger.warning("%s/%s: no defined %s values", exp, sid, metric)
            per_subject[exp] = vals
        reports = build_domain_report(domains, per_subject, args.pair)
        result[metric] = {d: r.to_dict() for d, r in reports.items()}

        header = ["experiment"] + [d for d in DOMAINS if d in reports]
        rows = []
        for exp in scores:
            row = [exp]
            for d in header[1:]:
                st = reports[d].experiment_stats.get(exp)
                row.append(f"{st['mean']:.2f} ± {st['sd']:.2f}" if st else "n/a")
            rows.append(row)
        write_csv(out / f"table_{metric}.csv", header, rows)

        # per-structure means within each domain
        idx = ("dice", "hd95", "vs").index(metric)
        for d in header[1:]:
            srows = []
            for exp, subjects in scores.items():
                row = [exp]
                for st in STRUCTURES:
                    vals = [sc.scores[st][idx] for sid, sc in subjects.items()
                            if domains.get(sid) == d and st in sc.scores
                            and not np.isnan(sc.scores[st][idx])]
                    row.append(float(np.mean(vals)) if vals else float("nan"))
                srows.append(row)
            write_csv(out / f"structures_{metric}_{d}.csv", ["experiment", *STRUCTURES], srows)
    _write_json(out / "report.json", result)


def cmd_run_preset(args, cfg):
    manifest = run_preset(PRESETS[args.preset], args.feta, args.output_dir, args.dhcp, cfg,
                          args.seed, args.threads)
    return 1 if manifest.failures else 0


def cmd_remap(args, cfg):
    mapping, source_names = load_remap_table(args.table)
    vol = load_label_volume(args.input, source_names)
    save_label_volume(remap_labels(vol, mapping), args.output)


def cmd_config(args, cfg):
    print(yaml.safe_dump(cfg, sort_keys=True), end="")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _global_options(default):
    # subcommand copies use SUPPRESS so they do not clobber options given before the command
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default, help="random seed (default: config)")
    common.add_argument("--threads", type=int, default=default,
                        help="worker threads over templates (default: config)")
    common.add_argument("--config", default=default, help="YAML configuration file")
    common.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)
    return common


def build_parser():
    common = _global_options(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="fetalsamp", parents=[_global_options(None)],
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="extract 21-value shape vectors")
    p.add_argument("input_dir")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("cluster", parents=[common], help="cluster feature vectors into K subgroups")
    p.add_argument("features")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("-o", "--output", required=True, help="assignments CSV")
    p.add_argument("--model", required=True, help="fitted model JSON")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("weights", parents=[common], help="assignments -> sampling table")
    p.add_argument("--pool", type=_parse_pool, action="append", required=True,
                   metavar="NAME=CSV:FRACTION")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("synth-vm", parents=[common], help="synthetic ventriculomegaly templates")
    p.add_argument("input_dir")
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--cap", type=float)
    p.add_argument("--min-gap", type=int)
    p.add_argument("--smoothing-radius", type=int)
    p.set_defaults(func=cmd_synth_vm)

    p = sub.add_parser("bg-subdivide", parents=[common], help="auxiliary background labels")
    p.add_argument("template")
    p.add_argument("image")
    p.add_argument("-k", type=int, default=4)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mapping", help="mapping JSON path (default: next to output)")
    p.set_defaults(func=cmd_bg_subdivide)

    p = sub.add_parser("preprocess", parents=[common], help="centre templates / crop test images")
    p.add_argument("input")
    p.add_argument("--mode", choices=("train", "infer"), required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--margin", type=int)
    p.add_argument("--target-shape", type=int, nargs=3)
    p.add_argument("--plan-only", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("ensemble", parents=[common], help="max-posterior fusion of 4-D posteriors")
    p.add_argument("posteriors", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="Dice / HD95 / VS per subject")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--nomenclature", help="YAML mapping label ID -> name")
    p.add_argument("--hd95-mode", choices=("pooled", "max"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="domain tables and paired t-tests")
    p.add_argument("--scores", type=_parse_kv, action="append", required=True,
                   metavar="EXPERIMENT=CSV")
    p.add_argument("--domains", required=True, help="CSV with columns subject,domain")
    p.add_argument("--pair", type=_parse_pair, action="append", default=[], metavar="A:B")
    p.add_argument("--metrics", nargs="+", default=["dice"], choices=("dice", "hd95", "vs"))
    p.add_argument("-o", "--output-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-preset", parents=[common], help="run one of the 8 experiment presets")
    p.add_argument("preset", type=int, choices=sorted(PRESETS))
    p.add_argument("--feta", required=True)
    p.add_argument("--dhcp")
    p.add_argument("-o", "--output-dir", required=True)
    p.set_defaults(func=cmd_run_preset)

    p = sub.add_parser("remap", parents=[common], help="convert a label map through a remap table")
    p.add_argument("input")
    p.add_argument("-t", "--table", required=True,
                   help="YAML table or shipped name (dhcp_to_feta, bounti_to_feta)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("config", parents=[common], help="print the normalised configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = validate_config(args.config)
        if args.seed is None:
            args.seed = cfg["seed"]
        if args.threads is None:
            args.threads = cfg["threads"]
        return int(args.func(args, cfg) or 0)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 1
    except (VolumeIOError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    except ValueError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
