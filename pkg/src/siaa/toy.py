"""Seeded desk-scale pipeline: toy backbone, toy text encoder, separable data, trained models."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from siaa.backbones import ToyBackbone, ToyTextEncoder, make_toy_backbone
from siaa.data import ImageSet, make_toy_imageset, write_imageset
from siaa.detectors import Detector, DetectorTrainConfig, HeadConfig, train_detector
from siaa.fphead import FPHead, Phase1Config, TrainingTrace, train_fp_head

IMAGE_SIZE = 32
VISION_DIM = 64
TEXT_DIM = 32
EMBED_DIM = 64
AMPLITUDE = 0.05


@dataclass
class ToyPipeline:
    backbone: ToyBackbone
    text_encoder: ToyTextEncoder
    train: ImageSet
    val: ImageSet
    test: ImageSet
    detector: Detector
    fphead: FPHead
    trace: TrainingTrace


def toy_datasets(seed: int = 0, n_train: int = 200, n_val: int = 50, n_test: int = 100,
                 amplitude: float = AMPLITUDE):
    """Train / val / test sets (per-class counts) with disjoint background seeds."""
    return (
        make_toy_imageset(n_train, IMAGE_SIZE, seed=3 * seed + 1, amplitude=amplitude, prefix="tr"),
        make_toy_imageset(n_val, IMAGE_SIZE, seed=3 * seed + 2, amplitude=amplitude, prefix="va"),
        make_toy_imageset(n_test, IMAGE_SIZE, seed=3 * seed + 3, amplitude=amplitude, prefix="te"),
    )


def build_toy_pipeline(seed: int = 0, backbone_seed: int = 0, head_depth: int = 2, n_train: int = 200,
                       n_val: int = 50, n_test: int = 100, epochs: int = 20) -> ToyPipeline:
    backbone = make_toy_backbone(backbone_seed, VISION_DIM, (IMAGE_SIZE, IMAGE_SIZE))
    text_encoder = ToyTextEncoder(TEXT_DIM)
    train, val, test = toy_datasets(seed, n_train, n_val, n_test)
    detector = train_detector(train, backbone, HeadConfig(VISION_DIM, head_depth),
                              DetectorTrainConfig(epochs=epochs, seed=seed), val=val)
    head, trace = train_fp_head(train, backbone, text_encoder,
                                Phase1Config(epochs=epochs, embed_dim=EMBED_DIM, seed=seed), val=val)
    return ToyPipeline(backbone, text_encoder, train, val, test, detector, head, trace)


def write_toy_experiment(root, seed: int = 0, n_train: int = 60, n_val: int = 10, n_test: int = 30,
                         attacker_seed: int = 100):
    """Write detector-side, attacker-side and test image folders under ``root``.

    The detector-side folder holds ``n_train + n_val`` images per class. The
    attacker-side folder is an independent draw with the same class signal
    (for the dataset-swap ablation).
    """
    root = Path(root)
    det = make_toy_imageset(n_train + n_val, IMAGE_SIZE, seed=seed + 1, amplitude=AMPLITUDE)
    att = make_toy_imageset(n_train + n_val, IMAGE_SIZE, seed=attacker_seed, amplitude=AMPLITUDE)
    test = make_toy_imageset(n_test, IMAGE_SIZE, seed=seed + 3, amplitude=AMPLITUDE)
    write_imageset(root / "detector", det)
    write_imageset(root / "attacker", att)
    write_imageset(root / "test", test)
    return {"detector_data": str(root / "detector"), "attacker_data": str(root / "attacker"),
            "test_data": str(root / "test")}
