"""Synthetic-image detectors: a frozen backbone plus a shallow trainable head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from siaa import checkpoint
from siaa.backbones import DTYPE, FrozenBackbone, encode_image, weights_hash
from siaa.data import AugmentationConfig, ImageSet, augment_batch, require_both_classes


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    depth: int = 2
    hidden_dim: int = 256

    def __post_init__(self):
        if self.depth not in (1, 2, 3):
            raise ValueError(f"head depth must be 1, 2 or 3, got {self.depth}")
        if self.hidden_dim <= 0 or self.input_dim <= 0:
            raise ValueError("input_dim and hidden_dim must be positive")


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 20
    learning_rate: float = 5e-3
    batch_size: int = 64
    seed: int = 0


def build_head(config: HeadConfig, seed: int = 0, dtype=DTYPE) -> nn.Sequential:
    """``depth`` linear layers with ReLUs in between, ending in a single logit."""
    dims = [config.input_dim] + [config.hidden_dim] * (config.depth - 1) + [1]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if i:
            layers.append(nn.ReLU())
        layers.append(nn.Linear(a, b, dtype=dtype))
    head = nn.Sequential(*layers)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in head:
            if isinstance(layer, nn.Linear):
                bound = 1.0 / layer.in_features**0.5
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=g, dtype=dtype) * 2 * bound - bound)
                layer.bias.copy_(torch.rand(layer.bias.shape, generator=g, dtype=dtype) * 2 * bound - bound)
    return head


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Detector(nn.Module):
    """Backbone features -> head -> one real logit per image (positive means fake)."""

    def __init__(self, backbone: FrozenBackbone, head: nn.Sequential, head_config: HeadConfig,
                 provenance: dict | None = None):
        super().__init__()
        if head_config.input_dim != backbone.spec.vision_dim:
            raise ValueError("head input_dim does not match the backbone's vision_dim")
        self.backbone = backbone
        self.head = head
        self.head_config = head_config
        self.provenance = dict(provenance or {})

    def logits_from_features(self, v):
        return self.head(v.to(self.head[0].weight.dtype)).squeeze(-1)

    def forward(self, images):
        return self.logits_from_features(encode_image(self.backbone, images))

    def first_layer(self, v):
        """Output of the first trainable linear layer (before any activation)."""
        return self.head[0](v.to(self.head[0].weight.dtype))


class Prediction(NamedTuple):
    logit: np.ndarray
    probability: np.ndarray
    label: np.ndarray


@torch.no_grad()
def predict(detector: Detector, images, batch_size: int = 256) -> Prediction:
    """Logits, fake-probabilities and hard labels (1 iff probability > 0.5)."""
    images = np.asarray(images) if not torch.is_tensor(images) else images
    single = images.ndim == 3
    if single:
        images = images[None]
    logits = torch.cat([detector(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    logit = logits.double().numpy()
    prob = torch.sigmoid(logits.double()).numpy()
    label = (prob > 0.5).astype(np.int64)
    if single:
        return Prediction(logit[0], prob[0], label[0])
    return Prediction(logit, prob, label)


@torch.no_grad()
def _features(backbone, images, batch_size=256):
    return torch.cat([encode_image(backbone, images[i:i + batch_size])
                      for i in range(0, len(images), batch_size)])


@torch.no_grad()
def _validate(detector, feats, labels):
    logits = detector.logits_from_features(feats)
    pred = (torch.sigmoid(logits) > 0.5).long()
    loss = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    return (pred == labels).double().mean().item(), loss.item()


def train_detector(train: ImageSet, backbone: FrozenBackbone, head_config: HeadConfig,
                   config: DetectorTrainConfig = DetectorTrainConfig(), val: ImageSet | None = None,
                   augmentation: AugmentationConfig | None = None, dataset_id: str = "") -> Detector:
    """Fit the head with binary cross-entropy on the logits; the backbone is never updated.

    Returns the detector from the epoch with the best validation accuracy
    (``val`` defaults to the training set), ties broken by validation loss.
    """
    require_both_classes(train.labels)
    val = train if val is None else val
    head = build_head(head_config, seed=config.seed)
    use_aug = augmentation is not None and augmentation.enabled
    provenance = {
        "dataset": dataset_id,
        "augmentation": asdict(augmentation) if augmentation is not None else None,
        "seed": config.seed,
        "train_config": asdict(config),
        "backbone": backbone.spec.name,
        "backbone_hash": weights_hash(backbone),
    }
    detector = Detector(backbone, head, head_config, provenance)
    if config.epochs == 0:
        return detector

    labels = torch.as_tensor(train.labels, dtype=DTYPE)
    cached = None if use_aug else _features(backbone, train.images)
    val_feats = _features(backbone, val.images)
    val_labels = torch.as_tensor(val.labels)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    best, best_state = (-1.0, 0.0), None
    for e in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            if use_aug:
                v = _features(backbone, augment_batch(train.images[idx], augmentation, config.seed, e, idx))
            else:
                v = cached[idx]
            loss = F.binary_cross_entropy_with_logits(detector.logits_from_features(v), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc, loss = _validate(detector, val_feats, val_labels)
        if (acc, -loss) > best:
            best, best_state = (acc, -loss), copy.deepcopy(head.state_dict())
            detector.provenance["best_epoch"] = e
            detector.provenance["val_accuracy"] = acc
    head.load_state_dict(best_state)
    return detector


def save_detector(path, detector: Detector):
    tensors = {f"head.{k}": v for k, v in detector.head.state_dict().items()}
    return checkpoint.save(path, tensors, "siaa.detector",
                           head_config=asdict(detector.head_config),
                           backbone=detector.backbone.spec.name,
                           provenance=detector.provenance)


def load_detector(path, backbone: FrozenBackbone) -> Detector:
    tensors, meta = checkpoint.load(path, "siaa.detector")
    if meta["backbone"] != backbone.spec.name:
        raise ValueError(f"detector was trained on backbone {meta['backbone']!r}, "
                         f"got {backbone.spec.name!r}")
    config = HeadConfig(**meta["head_config"])
    head = build_head(config)
    head.load_state_dict({k[len("head."):]: v for k, v in tensors.items()})
    return Detector(backbone, head, config, meta["provenance"])
