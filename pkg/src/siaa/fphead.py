"""
Surrogate feature-processing head and its contrastive training.

The head has two branches projecting into a shared ``N``-dimensional space:
a single linear layer for the text embeddings and a linear layer followed by
a ReLU for the visual features. Training pulls each projected image feature
onto the projected prompt of its own class, pushes it at least ``margin``
away from the other prompt, and keeps the two prompts ``2 * margin`` apart.
Backbone and text encoder stay frozen throughout.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from siaa import checkpoint
from siaa.backbones import DTYPE, FrozenBackbone, TextEncoder, encode_image, encode_text
from siaa.data import AugmentationConfig, ImageSet, augment_batch, require_both_classes
from siaa.errors import DegenerateInputError

log = logging.getLogger(__name__)

PROMPTS = ("The image is real", "The image is fake")


def l2_normalize(x, tol: float = 1e-12) -> torch.Tensor:
    """Scale each row (last axis) of ``x`` to unit Euclidean norm.

    Raises :class:`DegenerateInputError` rather than returning NaNs when a
    row's norm is below ``tol``.
    """
    x = torch.as_tensor(x)
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (norm < tol).any():
        raise DegenerateInputError(f"cannot normalize a vector with norm < {tol}")
    return x / norm


def _uniform_(tensor, bound, generator):
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype) * 2 * bound - bound)


class FPHead(nn.Module):
    """Text branch ``t -> t W_t^T + b_t`` and vision branch ``v -> relu(v W_v^T + b_v)``."""

    def __init__(self, text_dim: int, vision_dim: int, embed_dim: int = 1024, seed: int = 0,
                 dtype=DTYPE):
        super().__init__()
        self.text = nn.Linear(text_dim, embed_dim, dtype=dtype)
        self.vision = nn.Linear(vision_dim, embed_dim, dtype=dtype)
        g = torch.Generator().manual_seed(seed)
        # fan-in scaled uniform, same bound for weights and biases
        for layer in (self.text, self.vision):
            bound = 1.0 / layer.in_features**0.5
            _uniform_(layer.weight, bound, g)
            _uniform_(layer.bias, bound, g)

    @property
    def text_dim(self):
        return self.text.in_features

    @property
    def vision_dim(self):
        return self.vision.in_features

    @property
    def embed_dim(self):
        return self.text.out_features

    def forward_text(self, t):
        return fp_forward_text(self, t)

    def forward_vision(self, v):
        return fp_forward_vision(self, v)


def fp_forward_text(head: FPHead, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=head.text.weight.dtype)
    if t.shape[-1] != head.text_dim:
        raise ValueError(f"text features have dimension {t.shape[-1]}, head expects {head.text_dim}")
    return head.text(t)


def fp_forward_vision(head: FPHead, v) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=head.vision.weight.dtype)
    if v.shape[-1] != head.vision_dim:
        raise ValueError(f"visual features have dimension {v.shape[-1]}, head expects {head.vision_dim}")
    return F.relu(head.vision(v))


def beta_schedule(epoch: int, total_epochs: int) -> float:
    """Warm-up weight of the image terms: ``min(1, e / (E / 2))``."""
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return min(1.0, epoch / (total_epochs / 2))


class Phase1Loss(NamedTuple):
    total: torch.Tensor
    pull: torch.Tensor
    push: torch.Tensor
    text: torch.Tensor


def _check_unit(name, x, tol=1e-3):
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    if ((norms - 1).abs() > tol).any():
        raise ValueError(f"{name} must be l2-normalized (norms deviate from 1 by more than {tol})")


def phase1_loss(v, t_y, t_adv, epoch: int, total_epochs: int, margin: float = 1.0) -> Phase1Loss:
    """Contrastive loss terms for projected, normalized embeddings.

    Accepts single rows or batches (leading dimensions broadcast); every
    returned term keeps the batch shape. Hinge gradients at the kink are zero.
    """
    for name, x in (("v", v), ("t_y", t_y), ("t_adv", t_adv)):
        _check_unit(name, x)
    beta = beta_schedule(epoch, total_epochs)
    pull = torch.linalg.vector_norm(v - t_y, dim=-1) ** 2
    push = torch.clamp(margin - torch.linalg.vector_norm(v - t_adv, dim=-1), min=0) ** 2
    text = torch.clamp(2 * margin - torch.linalg.vector_norm(t_y - t_adv, dim=-1), min=0)
    text = text.expand_as(pull) if text.ndim < pull.ndim else text
    return Phase1Loss(beta * (pull + push) + text, pull, push, text)


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 20
    margin: float = 1.0
    learning_rate: float = 5e-3
    batch_size: int = 64
    embed_dim: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.embed_dim <= 0:
            raise ValueError("learning_rate, batch_size and embed_dim must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    beta: float
    pull: float
    push: float
    text: float
    total: float
    val_metric: float


@dataclass
class TrainingTrace:
    epochs: list
    best_epoch: int | None = None

    def __len__(self):
        return len(self.epochs)

    def column(self, name):
        return [getattr(r, name) for r in self.epochs]


def project_prompts(head: FPHead, text_encoder: TextEncoder, prompts=PROMPTS) -> torch.Tensor:
    """Normalized projected prompt embeddings, row ``k`` for class ``k``."""
    return l2_normalize(fp_forward_text(head, encode_text(text_encoder, prompts)))


@torch.no_grad()
def _features(backbone, images, batch_size=256):
    out = [encode_image(backbone, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out).to(DTYPE)


def nearest_prompt_accuracy(v_proj, t_proj, labels) -> float:
    """Fraction of rows of ``v_proj`` closer to their own class prompt than to the other.

    Ties go to class 0.
    """
    labels = torch.as_tensor(np.asarray(labels))
    if len(labels) == 0:
        raise ValueError("empty validation set")
    d = torch.cdist(torch.as_tensor(v_proj), torch.as_tensor(t_proj))
    pred = (d[:, 1] < d[:, 0]).long()
    return (pred == labels).double().mean().item()


@torch.no_grad()
def validate_fp_head(head: FPHead, dataset: ImageSet, backbone: FrozenBackbone,
                     text_encoder: TextEncoder, prompts=PROMPTS) -> float:
    """Nearest-prompt classification accuracy of the head on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty validation set")
    v = l2_normalize(fp_forward_vision(head, _features(backbone, dataset.images)))
    return nearest_prompt_accuracy(v, project_prompts(head, text_encoder, prompts), dataset.labels)


def train_fp_head(train: ImageSet, backbone: FrozenBackbone, text_encoder: TextEncoder,
                  config: Phase1Config = Phase1Config(), val: ImageSet | None = None,
                  augmentation: AugmentationConfig | None = None, prompts=PROMPTS,
                  allow_single_class: bool = False):
    """Train a fresh :class:`FPHead` and return ``(head, trace)``.

    The head from the epoch with the best validation accuracy is returned
    (``val`` defaults to the training set); ties go to the lower validation
    loss with both image terms at full weight. With ``augmentation`` enabled the
    backbone features are recomputed on freshly augmented images every epoch,
    otherwise they are computed once up front.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if not allow_single_class:
        require_both_classes(train.labels)
    val = train if val is None else val

    head = FPHead(text_encoder.spec.text_dim, backbone.spec.vision_dim, config.embed_dim, seed=config.seed)
    trace = TrainingTrace(epochs=[])
    if config.epochs == 0:
        return head, trace

    t = encode_text(text_encoder, prompts)
    labels = torch.as_tensor(np.asarray(train.labels), dtype=torch.long)
    use_aug = augmentation is not None and augmentation.enabled
    cached = None if use_aug else _features(backbone, train.images)
    val_features = _features(backbone, val.images)

    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(train)
    val_labels = torch.as_tensor(np.asarray(val.labels), dtype=torch.long)
    best, best_state = (-1.0, 0.0), None

    for e in range(config.epochs):
        sums = np.zeros(4)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if use_aug:
                imgs = augment_batch(train.images[idx], augmentation, seed=config.seed, epoch=e, indices=idx)
                v = _features(backbone, imgs)
            else:
                v = cached[idx]
            y = labels[idx]
            vp = l2_normalize(fp_forward_vision(head, v))
            tp = l2_normalize(fp_forward_text(head, t))
            terms = phase1_loss(vp, tp[y], tp[1 - y], e, config.epochs, config.margin)
            loss = terms.total.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([terms.pull.mean().item(), terms.push.mean().item(),
                                         terms.text.mean().item(), loss.item()])
        with torch.no_grad():
            vp = l2_normalize(fp_forward_vision(head, val_features))
            tp = l2_normalize(fp_forward_text(head, t))
            metric = nearest_prompt_accuracy(vp, tp, val.labels)
            # full-weight loss breaks ties between epochs with equal accuracy
            val_loss = phase1_loss(vp, tp[val_labels], tp[1 - val_labels], 1, 1, config.margin).total.mean().item()
        pull, push, text, total = (sums / n).tolist()
        trace.epochs.append(EpochRecord(e, beta_schedule(e, config.epochs), pull, push, text, total, metric))
        log.debug("fp-head epoch %d: loss %.4f val %.4f", e, total, metric)
        if (metric, -val_loss) > best:
            best, best_state = (metric, -val_loss), copy.deepcopy(head.state_dict())
            trace.best_epoch = e

    head.load_state_dict(best_state)
    return head, trace


def save_fp_head(path, head: FPHead, config: Phase1Config | None = None, trace: TrainingTrace | None = None,
                 **provenance):
    tensors = {
        "text.weight": head.text.weight, "text.bias": head.text.bias,
        "vision.weight": head.vision.weight, "vision.bias": head.vision.bias,
    }
    meta = {
        "dims": {"text_dim": head.text_dim, "vision_dim": head.vision_dim, "embed_dim": head.embed_dim},
        "config": asdict(config) if config is not None else None,
        "seed": config.seed if config is not None else None,
        "trace": [asdict(r) for r in trace.epochs] if trace is not None else None,
        "best_epoch": trace.best_epoch if trace is not None else None,
        "provenance": provenance,
    }
    return checkpoint.save(path, tensors, "siaa.fphead", **meta)


def load_fp_head(path) -> tuple[FPHead, dict]:
    tensors, meta = checkpoint.load(path, "siaa.fphead")
    dims = meta["dims"]
    head = FPHead(dims["text_dim"], dims["vision_dim"], dims["embed_dim"])
    head.load_state_dict(tensors)
    return head, meta
