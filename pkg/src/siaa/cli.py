"""
Command-line orchestration of the experiments.

    siaa --config exp.yaml --out runs/exp train-head
    siaa --config exp.yaml --out runs/exp train-detector
    siaa --config exp.yaml --out runs/exp attack --attack siaa
    siaa --config exp.yaml --out runs/exp evaluate --attack siaa
    siaa --config exp.yaml --out runs/exp ablate
    siaa --config exp.yaml --out runs/exp transfer
    siaa --config exp.yaml --out runs/exp export-embeddings

Exit status: 0 success, 2 configuration error, 3 missing artifact,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

import siaa
from siaa import checkpoint
from siaa.attacks import (ATTACKS, AttackConfig, attack_set, quantize_adversarial, run_pgd_l,
                          run_pgd_vit, run_pgd_whitebox, run_siaa)
from siaa.backbones import (BackboneSpec, HFTextEncoder, ToyBackbone,
                            ToyTextEncoder, build_backbone, load_registry, weights_hash)
from siaa.config import ConfigError, ExperimentConfig, load_config
from siaa.data import (AugmentationConfig, DatasetManifest, ImageSet, few_shot_subset, load_dataset,
                       load_images, make_splits, save_manifest, write_png)
from siaa.detectors import (DetectorTrainConfig, HeadConfig, load_detector, save_detector,
                            train_detector)
from siaa.errors import SIAAError
from siaa.evaluation import (evaluate_attack, export_embeddings, transfer_matrix, transfer_table,
                             write_embeddings, write_records, write_report, write_table)
from siaa.fphead import Phase1Config, load_fp_head, save_fp_head, train_fp_head

log = logging.getLogger("siaa")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingArtifactError(SIAAError, FileNotFoundError):
    pass


# ---------------------------------------------------------------- model / data plumbing


def toy_spec(name: str) -> BackboneSpec:
    return BackboneSpec(name, vision_dim=64, input_size=(32, 32),
                        norm_mean=(0.5, 0.5, 0.5), norm_std=(0.25, 0.25, 0.25))


def get_backbone(config: ExperimentConfig, name: str | None = None):
    """Resolve a backbone from the registry, or a built-in ``toy`` / ``toy-<seed>`` model."""
    name = name or config.backbone
    if config.backbone_registry is not None:
        registry = load_registry(_require(config.backbone_registry, "backbone_registry"))
        if name in registry:
            return build_backbone(registry[name])
    if name == "toy" or name.startswith("toy-"):
        seed = int(name[4:]) if name.startswith("toy-") else 0
        return ToyBackbone(toy_spec(name), seed=seed)
    raise ConfigError(f"unknown backbone {name!r}")


def get_text_encoder(config: ExperimentConfig):
    if config.text_encoder == "toy":
        return ToyTextEncoder(config.text_dim)
    if config.text_encoder == "clip":
        return HFTextEncoder(_require(config.text_encoder_dir, "text_encoder_dir"))
    raise ConfigError(f"unknown text encoder {config.text_encoder!r}")


def _require(path, key) -> str:
    if path is None:
        raise ConfigError(f"config key {key!r} is required for this command")
    if not Path(path).exists():
        raise ConfigError(f"{key}: path does not exist: {path}")
    return path


def _artifact(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"required artifact not found: {path}")
    return path


def training_data(config: ExperimentConfig, backbone, root: str, few_shot: int | None = None):
    """``(train, val, manifest)`` for one side of the experiment."""
    manifest = load_dataset(root)
    if config.train_per_class is not None:
        manifest = make_splits(manifest, config.train_per_class, config.val_per_class, config.seed)
    else:
        manifest = DatasetManifest(manifest.root, manifest.entries,
                                   {e.path: "train" for e in manifest.entries}, config.seed)
    few_shot = config.few_shot if few_shot is None else few_shot
    if few_shot:
        manifest = few_shot_subset(manifest, few_shot, config.seed)
    size = backbone.spec.input_size
    train = load_images(manifest, "train", size)
    val = load_images(manifest, "val", size) if manifest.split("val") else None
    return train, val, manifest


def load_test_set(config: ExperimentConfig, backbone) -> ImageSet:
    manifest = load_dataset(_require(config.test_data, "test_data"))
    return load_images(manifest, None, backbone.spec.input_size)


def augmentation(config: ExperimentConfig, enabled: bool, backbone):
    return AugmentationConfig(output_size=backbone.spec.input_size) if enabled else None


def phase1_config(config: ExperimentConfig) -> Phase1Config:
    return Phase1Config(epochs=config.epochs, margin=config.margin, learning_rate=config.learning_rate,
                        batch_size=config.batch_size, embed_dim=config.embed_dim, seed=config.seed)


def attack_config(config: ExperimentConfig) -> AttackConfig:
    return AttackConfig(epsilon=config.epsilon, alpha=config.alpha, iterations=config.iterations,
                        seed=config.seed, random_start=config.random_start,
                        normalize=config.normalize_embeddings)


def fit_head(config, backbone, text_encoder, root, few_shot=None, augment=None):
    train, val, manifest = training_data(config, backbone, root, few_shot)
    aug = augmentation(config, config.augment_attacker if augment is None else augment, backbone)
    head, trace = train_fp_head(train, backbone, text_encoder, phase1_config(config), val=val, augmentation=aug)
    return head, trace, manifest


def fit_detector(config, backbone, depth=None):
    root = _require(config.detector_data, "detector_data")
    train, val, manifest = training_data(config, backbone, root, few_shot=0)
    head_config = HeadConfig(backbone.spec.vision_dim, depth or config.head_depth, config.hidden_dim)
    train_config = DetectorTrainConfig(config.detector_epochs, config.detector_learning_rate,
                                       config.batch_size, config.seed)
    det = train_detector(train, backbone, head_config, train_config, val=val,
                         augmentation=augmentation(config, config.augment_detector, backbone),
                         dataset_id=root)
    return det, manifest


def attack_fn(name, backbone, text_encoder=None, head=None, detector=None):
    if name == "siaa":
        return lambda img, y, c: run_siaa(img, y, backbone, text_encoder, head, c)
    if name == "pgd":
        return lambda img, y, c: run_pgd_whitebox(img, y, detector, c)
    if name == "pgd-vit":
        return lambda img, y, c: run_pgd_vit(img, backbone, c)
    if name == "pgd-l":
        return lambda img, y, c: run_pgd_l(img, backbone, head, c)
    raise ConfigError(f"unknown attack {name!r}; expected one of {ATTACKS}")


def craft(config, name, backbone, test: ImageSet, text_encoder=None, head=None, detector=None):
    """Adversarial ImageSet (8-bit quantized, as stored on disk) plus the raw results."""
    results = attack_set(test.images, test.labels, test.ids,
                         attack_fn(name, backbone, text_encoder, head, detector), attack_config(config))
    adv = np.stack([quantize_adversarial(r.adversarial_image)[1] for r in results])
    return ImageSet(adv, test.labels, test.ids), results


def _provenance(config: ExperimentConfig, **extra) -> dict:
    return {"config_hash": config.hash(), "siaa_version": siaa.__version__, "seed": config.seed, **extra}


def _write_sidecar(out: Path, command: str, config: ExperimentConfig, artifacts: list):
    body = _provenance(config, command=command,
                       created_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                       resolved_config=config.to_dict(),
                       artifacts={str(Path(p).relative_to(out)): checkpoint.file_hash(p) for p in artifacts})
    path = out / "provenance" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_train_head(config, out, args):
    backbone = get_backbone(config)
    root = _require(config.attacker_data or config.detector_data, "attacker_data")
    head, trace, manifest = fit_head(config, backbone, get_text_encoder(config), root)
    path = save_fp_head(out / "fphead.safetensors", head, phase1_config(config), trace,
                        **_provenance(config, backbone=backbone.spec.name,
                                      backbone_hash=weights_hash(backbone), dataset=root))
    write_table(out / "fphead_trace.csv", [asdict(r) for r in trace.epochs] or [{"epoch": None}])
    save_manifest(out / "attacker_manifest.csv", manifest)
    _write_sidecar(out, "train-head", config, [path, out / "fphead_trace.csv"])
    log.info("FP-head written to %s (best epoch %s)", path, trace.best_epoch)


def cmd_train_detector(config, out, args):
    backbone = get_backbone(config)
    det, manifest = fit_detector(config, backbone)
    path = save_detector(out / "detector.safetensors", det)
    save_manifest(out / "detector_manifest.csv", manifest)
    _write_sidecar(out, "train-detector", config, [path])
    log.info("detector written to %s (val accuracy %.3f)", path, det.provenance.get("val_accuracy", float("nan")))


def _load_models(config, out, name, backbone):
    head = detector = None
    if name in ("siaa", "pgd-l"):
        head, _ = load_fp_head(_artifact(config.fphead or out / "fphead.safetensors"))
    if name == "pgd":
        detector = load_detector(_artifact(config.detector or out / "detector.safetensors"), backbone)
    return head, detector


def cmd_attack(config, out, args):
    name = args.attack or config.attack
    attack_fn(name, None)  # validates the name
    backbone = get_backbone(config)
    head, detector = _load_models(config, out, name, backbone)
    test = load_test_set(config, backbone)
    adv, results = craft(config, name, backbone, test, get_text_encoder(config), head, detector)
    adv_dir = out / f"attack-{name}"
    written = []
    meta_path = adv_dir / "metadata.jsonl"
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    with open(meta_path, "w") as meta:
        for id_, img, res in zip(test.ids, adv.images, results):
            target = (adv_dir / id_).with_suffix(".png")
            write_png(target, img)
            written.append(target)
            if config.raw_sidecar:
                np.save(target.with_suffix(".npy"), res.adversarial_image)
            meta.write(json.dumps({
                "id": id_, "attack": name, "config": asdict(attack_config(config)),
                "objective_trace": list(res.objective_trace), "final_objective": res.final_objective,
                "linf": float(np.abs(img - test.images[test.ids.index(id_)]).max()),
            }, sort_keys=True) + "\n")
    _write_sidecar(out, f"attack-{name}", config, written + [meta_path])
    log.info("%d adversarial images written to %s", len(written), adv_dir)


def _adversarial_set(path, backbone) -> ImageSet:
    manifest = load_dataset(_artifact(path))
    return load_images(manifest, None, backbone.spec.input_size)


def cmd_evaluate(config, out, args):
    name = args.attack or config.attack
    backbone = get_backbone(config)
    detector = load_detector(_artifact(config.detector or out / "detector.safetensors"), backbone)
    test = load_test_set(config, backbone)
    adv_dir = args.adversarial or config.adversarial_dir or out / f"attack-{name}"
    adv = _adversarial_set(adv_dir, backbone)
    # adversarial files are always PNG; match on the stem
    adv.ids = [str(Path(i).with_suffix("")) for i in adv.ids]
    test.ids = [str(Path(i).with_suffix("")) for i in test.ids]
    report = evaluate_attack(detector, test, adv, attack=name, source_backbone=backbone.spec.name)
    rp = write_report(out / f"report-{name}.json", report,
                      **_provenance(config, attack=name, detector=detector.provenance))
    rc = write_records(out / f"records-{name}.csv", report.records)
    _write_sidecar(out, f"evaluate-{name}", config, [rp, rc])
    print(json.dumps(report.metrics(), sort_keys=True))


def ablation_grid(config: ExperimentConfig):
    return list(itertools.product(config.ablate_depths, config.ablate_few_shot,
                                  config.ablate_aug_off, config.ablate_swap))


def run_ablation(config: ExperimentConfig) -> list[dict]:
    """One row per (head depth, few-shot n, augmentation off, dataset swap) combination."""
    backbone = get_backbone(config)
    text_encoder = get_text_encoder(config)
    test = load_test_set(config, backbone)
    detectors = {d: fit_detector(config, backbone, d)[0] for d in sorted(set(config.ablate_depths))}
    adversarial = {}
    rows = []
    for depth, few, aug_off, swap in ablation_grid(config):
        key = (few, aug_off, swap)
        if key not in adversarial:
            root = config.attacker_data if swap else config.detector_data
            root = _require(root, "attacker_data" if swap else "detector_data")
            head, _, _ = fit_head(config, backbone, text_encoder, root, few_shot=few,
                                  augment=config.augment_attacker and not aug_off)
            adversarial[key] = craft(config, "siaa", backbone, test, text_encoder, head)[0]
        report = evaluate_attack(detectors[depth], test, adversarial[key], "siaa", backbone.spec.name)
        rows.append({"l1_depth": depth, "l2_train": few or "ALL", "l3_aug_unknown": bool(aug_off),
                     "l4_dataset_swap": bool(swap), "pre_auc": report.pre_auc,
                     "post_auc": report.post_auc, "asr": report.asr})
    return rows


def cmd_ablate(config, out, args):
    rows = run_ablation(config)
    path = write_table(out / "ablation.csv", rows)
    _write_sidecar(out, "ablate", config, [path])
    for row in rows:
        print(json.dumps(row))


def run_transfer(config: ExperimentConfig) -> dict:
    names = config.backbones or [config.backbone]
    text_encoder = get_text_encoder(config)
    backbones = {n: get_backbone(config, n) for n in names}
    root = _require(config.attacker_data or config.detector_data, "attacker_data")
    sizes = {b.spec.input_size for b in backbones.values()}
    if len(sizes) != 1:
        raise ConfigError("transfer needs backbones with a common input size")
    test = load_test_set(config, next(iter(backbones.values())))
    detectors, adversarial = {}, {}
    for n, bb in backbones.items():
        detectors[n] = fit_detector(config, bb)[0]
        head, _, _ = fit_head(config, bb, text_encoder, root)
        adversarial[n] = craft(config, "siaa", bb, test, text_encoder, head)[0]
    return transfer_matrix(adversarial, detectors, test, "siaa")


def cmd_transfer(config, out, args):
    table = transfer_table(run_transfer(config))
    path = write_table(out / "transfer.csv", table)
    _write_sidecar(out, "transfer", config, [path])
    for row in table:
        print(json.dumps(row))


def cmd_export_embeddings(config, out, args):
    backbone = get_backbone(config)
    if args.layer == "detector":
        layer = load_detector(_artifact(config.detector or out / "detector.safetensors"), backbone)
    else:
        layer, _ = load_fp_head(_artifact(config.fphead or out / "fphead.safetensors"))
    data = load_test_set(config, backbone)
    path = write_embeddings(out / f"embeddings-{args.layer}.tsv", export_embeddings(backbone, layer, data))
    _write_sidecar(out, "export-embeddings", config, [path])
    log.info("embeddings written to %s", path)


COMMANDS = {
    "train-head": cmd_train_head,
    "train-detector": cmd_train_detector,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siaa", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--config", required=True, help="experiment config (flat YAML)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("attack", "evaluate"):
            p.add_argument("--attack", choices=ATTACKS, default=None)
        if name == "evaluate":
            p.add_argument("--adversarial", default=None, help="directory of adversarial images")
        if name == "export-embeddings":
            p.add_argument("--layer", choices=("fphead", "detector"), default="fphead")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, seed=args.seed)
        out = Path(args.out or "runs")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, out, args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.error("%s failed: %s", args.command, exc, exc_info=args.verbose)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
