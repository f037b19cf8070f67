"""Command-line entry points: ``pipofan train|infer|eval|split``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import file_digest, load_checkpoint
from .config import ExperimentConfig
from .datamodel import ClassMap, VolumeSample, validate_sample
from .evaluation import evaluate_cases, make_folds, write_report
from .exceptions import ConfigurationError, PipoFanError
from .fusion import AdaptiveFusion
from .inference import PostprocessRules, ensemble_vote, postprocess_components, segment_volume
from .io import load_label_volume, load_manifest, load_sample, read_nifti, write_nifti
from .network import PipoFanNet
from .preprocess import PreprocessConfig, preprocess_sample
from .trainer import Trainer, TrainingSet, TrainState

logger = logging.getLogger("pipofan")

WORKERS_ENV = "PIPOFAN_NUM_WORKERS"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
NIFTI_SUFFIXES = (".nii.gz", ".nii")


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _set_workers(deterministic: bool):
    workers = 1 if deterministic else int(os.environ.get(WORKERS_ENV, "0") or 0)
    if workers > 0:
        torch.set_num_threads(workers)


def case_id(path) -> str:
    name = Path(path).name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _nifti_files(paths) -> list:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(f for f in p.iterdir() if f.name.endswith(NIFTI_SUFFIXES)))
        else:
            out.append(p)
    return out


def cmd_train(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
        descriptors = [load_manifest(p, cfg.class_map) for p in cfg.dataset_paths()]
    except ConfigurationError as exc:
        return _fail(str(exc))
    _set_workers(args.deterministic or cfg.train.deterministic)

    datasets, problems = [], []
    for desc in descriptors:
        samples = []
        for ref in desc.volume_refs:
            try:
                sample = load_sample(desc, ref, cfg.class_map)
            except (OSError, ConfigurationError) as exc:
                problems.append(str(exc))
                continue
            problems += [f"{desc.name}/{ref['id']}: {m}" for m in validate_sample(sample)]
            samples.append(preprocess_sample(sample, cfg.preprocess))
        if not samples:
            problems.append(f"dataset {desc.name!r} has no readable volumes")
        else:
            datasets.append(TrainingSet(desc, samples))
    if problems:
        return _fail("invalid training data:\n  " + "\n  ".join(problems))

    out_dir = cfg.output_path()
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.resolved.yaml")
    network = PipoFanNet(cfg.network, seed=cfg.init_seed)
    fusion = AdaptiveFusion(cfg.class_map.count, cfg.fusion_kernel, seed=cfg.init_seed + 1)
    extra = {"class_names": list(cfg.class_map.names), "preprocess": asdict(cfg.preprocess),
             "config": cfg.to_dict()}
    trainer = Trainer(network, fusion, datasets, cfg.train, cfg.loss, cfg.preprocess, out_dir,
                      checkpoint_extra=extra)

    if args.resume is not None:
        ckpt = Path(args.resume) if args.resume else out_dir / "last.pt"
        try:
            _, _, payload = load_checkpoint(ckpt)
        except (OSError, ConfigurationError) as exc:
            return _fail(f"cannot resume from {ckpt}: {exc}")
        if payload.get("train_state") is None:
            return _fail(f"{ckpt} holds no training state")
        trainer.load_state_dict(TrainState.from_dict(payload["train_state"]))
        logger.info("resumed from %s at step %d", ckpt, trainer.state.step)

    try:
        trainer.run(args.steps)
    except PipoFanError as exc:
        return _fail(str(exc), EXIT_FAILURE)
    trainer.save(out_dir / "last.pt")
    print(f"trained to step {trainer.state.step}; checkpoint {out_dir / 'last.pt'}")
    return EXIT_OK


def _load_rules(path, class_map: ClassMap) -> PostprocessRules:
    overrides = None
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(data) - {"budgets"}
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
        overrides = {str(k): int(v) for k, v in (data.get("budgets") or {}).items()}
    return PostprocessRules.for_class_map(class_map, overrides)


def cmd_infer(args) -> int:
    _set_workers(args.deterministic)
    if len(args.checkpoint) > 1 and not args.ensemble:
        return _fail("several checkpoints need --ensemble")
    models = []
    for path in args.checkpoint:
        try:
            network, fusion, payload = load_checkpoint(path)
        except (OSError, ConfigurationError) as exc:
            return _fail(str(exc))
        extra = payload.get("extra") or {}
        names = extra.get("class_names") or [f"class_{i}" for i in range(network.config.n_classes)]
        if len(names) != network.config.n_classes:
            return _fail(f"{path}: {len(names)} class names for {network.config.n_classes} outputs")
        preprocess = PreprocessConfig(**extra["preprocess"]) if "preprocess" in extra else PreprocessConfig()
        models.append((network, fusion, preprocess, names, file_digest(path)))
    names = models[0][3]
    if any(m[3] != names for m in models):
        return _fail("ensembled checkpoints disagree on class names")
    class_map = ClassMap(tuple(names))
    try:
        rules = _load_rules(args.rules, class_map)
    except (OSError, ConfigurationError) as exc:
        return _fail(f"rules incompatible with checkpoint classes: {exc}")

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for path in _nifti_files(args.input):
        cid = case_id(path)
        try:
            image, spacing, affine = read_nifti(path)
        except OSError as exc:
            failures.append({"input": str(path), "error": str(exc)})
            print(f"error: {exc}", file=sys.stderr)
            continue
        sample = VolumeSample(image.astype(np.float32), spacing, case_id=cid, affine=affine)
        preds, metas = [], []
        for network, fusion, preprocess, _, _ in models:
            prepared = preprocess_sample(sample, preprocess)
            labels, meta = segment_volume(network, fusion, prepared, native_size=image.shape[-2:],
                                          return_meta=True)
            preds.append(labels)
            metas.append(meta)
        labels = ensemble_vote(preds, class_map.count) if len(preds) > 1 else preds[0]
        if not args.no_postprocess:
            labels = postprocess_components(labels, rules)
        target = out_dir / f"{cid}.nii.gz"
        write_nifti(target, labels, affine)
        sidecar = {
            "input": str(path),
            "checkpoints": [{"path": str(p), "sha256": m[4]} for p, m in zip(args.checkpoint, models)],
            "ensemble": "majority_vote" if len(models) > 1 else None,
            "class_names": names,
            "rules": {names[k]: v for k, v in rules.budgets.items()},
            "postprocess": not args.no_postprocess,
            "crop_pad": metas[0],
        }
        (out_dir / f"{cid}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        print(f"wrote {target}")
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
        return EXIT_FAILURE
    return EXIT_OK


def _parse_classes(value: str) -> list:
    p = Path(value)
    if p.is_file():
        data = yaml.safe_load(p.read_text())
        return list(data["classes"] if isinstance(data, dict) else data)
    return [c.strip() for c in value.split(",") if c.strip()]


def cmd_eval(args) -> int:
    try:
        class_map = ClassMap(tuple(_parse_classes(args.classes)))
    except (ConfigurationError, KeyError, TypeError) as exc:
        return _fail(f"--classes: {exc}")
    preds = {case_id(p): p for p in _nifti_files([args.pred])}
    truths = {case_id(p): p for p in _nifti_files([args.truth])}
    common = sorted(set(preds) & set(truths))
    skipped = sorted(set(preds) ^ set(truths))
    pred_arrays, truth_arrays, spacings = {}, {}, {}
    for cid in common:
        try:
            pred_arrays[cid] = load_label_volume(preds[cid])[0]
            truth_arrays[cid], spacings[cid], _ = load_label_volume(truths[cid])
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            skipped.append(cid)
            pred_arrays.pop(cid, None)
            truth_arrays.pop(cid, None)
    rows = evaluate_cases(pred_arrays, truth_arrays, class_map.names, spacings)
    write_report(rows, args.report)
    if skipped:
        print("skipped unmatched cases: " + ", ".join(sorted(skipped)), file=sys.stderr)
        Path(str(args.report) + ".skipped.json").write_text(json.dumps(sorted(skipped), indent=2) + "\n")
        return EXIT_FAILURE
    return EXIT_OK


def manifest_volume_ids(path) -> list:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict) or not isinstance(data.get("volumes"), list):
        raise ConfigurationError(f"{path}: manifest needs a 'volumes' list")
    return [str(v.get("id", Path(v["image"]).name.split(".")[0])) for v in data["volumes"]]


def cmd_split(args) -> int:
    try:
        ids = manifest_volume_ids(args.manifest)
        plan = make_folds(ids, args.k, args.seed)
    except (OSError, ConfigurationError) as exc:
        return _fail(str(exc))
    plan.save(args.out)
    print(f"fold sizes {plan.sizes()} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipofan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", nargs="?", const="", default=None,
                   help="resume from a checkpoint (default: <output_dir>/last.pt)")
    p.add_argument("--steps", type=int, default=None, help="stop after this many more steps")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment NIfTI volumes")
    p.add_argument("--checkpoint", "--checkpoints", nargs="+", required=True)
    p.add_argument("--input", nargs="+", required=True, help="NIfTI files or directories")
    p.add_argument("--output", required=True)
    p.add_argument("--ensemble", action="store_true", help="majority-vote several checkpoints")
    p.add_argument("--rules", default=None, help="YAML with per-class component budgets")
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--classes", required=True, help="comma-separated names or a YAML file")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", help="write a k-fold plan for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
