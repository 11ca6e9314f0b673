"""
L-infinity PGD engine and the four attack objectives.

All attacks share the same mechanics: a uniform random start inside the
epsilon-ball, ``iterations`` sign-gradient ascent steps of size ``alpha``,
and projection back onto the epsilon-ball around the clean image intersected
with ``[0, 1]``. There is no early stopping. They differ only in the scalar
objective being maximized:

* :func:`run_siaa` - distance to the ground-truth prompt minus distance to the
  adversarial prompt, measured in the surrogate head's space;
* :func:`run_pgd_whitebox` - detector cross-entropy (needs the full detector);
* :func:`run_pgd_vit` - negative cosine similarity to the clean backbone feature;
* :func:`run_pgd_l` - the same cosine objective after the head's vision branch.

The gray-box attacks take no detector argument and never see a classification
head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from siaa.backbones import DTYPE, FrozenBackbone, TextEncoder, encode_image, encode_text
from siaa.errors import NonFiniteError
from siaa.fphead import PROMPTS, FPHead, fp_forward_text, fp_forward_vision, l2_normalize

ATTACKS = ("siaa", "pgd", "pgd-vit", "pgd-l")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 14
    seed: int = 0
    random_start: bool = True
    normalize: bool = True  # l2-normalize head outputs inside the SIAA objective

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


@dataclass(frozen=True)
class AdversarialResult:
    adversarial_image: np.ndarray
    perturbation: np.ndarray
    objective_trace: tuple
    attack_name: str
    final_objective: float


def derive_seed(seed: int, image_id) -> int:
    """Per-image seed from a global seed and an image identifier."""
    digest = hashlib.sha256(f"{seed}\x00{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def random_init(shape, epsilon: float, seed: int) -> torch.Tensor:
    """Uniform noise in ``[-epsilon, epsilon]``, reproducible per seed."""
    g = torch.Generator().manual_seed(int(seed))
    return (torch.rand(tuple(shape), generator=g, dtype=DTYPE) * 2 - 1) * epsilon


def project(candidate, origin, epsilon: float) -> torch.Tensor:
    """Clamp onto the L-inf ``epsilon``-ball around ``origin``, then onto ``[0, 1]``."""
    candidate = torch.as_tensor(candidate)
    origin = torch.as_tensor(origin, dtype=candidate.dtype)
    if candidate.shape != origin.shape:
        raise ValueError(f"shape mismatch: {tuple(candidate.shape)} vs {tuple(origin.shape)}")
    return torch.clamp(torch.minimum(torch.maximum(candidate, origin - epsilon), origin + epsilon), 0.0, 1.0)


def pgd_step(current, gradient, origin, config: AttackConfig) -> torch.Tensor:
    if gradient.shape != current.shape:
        raise ValueError("gradient and image shapes differ")
    if not torch.isfinite(gradient).all():
        raise NonFiniteError("non-finite gradient, aborting attack")
    return project(current + config.alpha * torch.sign(gradient), origin, config.epsilon)


def _safe_norm(x):
    return torch.sqrt((x * x).sum(-1) + NORM_EPS)


def siaa_objective(v, t_y, t_adv) -> torch.Tensor:
    """``||v - t_y|| - ||v - t_adv||``; larger means closer to the adversarial prompt."""
    if not (v.shape[-1] == t_y.shape[-1] == t_adv.shape[-1]):
        raise ValueError("embedding dimensions differ")
    return _safe_norm(v - t_y) - _safe_norm(v - t_adv)


def cosine_divergence(v, reference) -> torch.Tensor:
    """Negative cosine similarity between rows of ``v`` and ``reference``."""
    return -(l2_normalize(v) * l2_normalize(reference)).sum(-1)


def run_pgd(image, objective: Callable[[torch.Tensor], torch.Tensor], config: AttackConfig,
            name: str = "pgd") -> AdversarialResult:
    """Maximize ``objective`` (pixels ``1 x H x W x 3`` -> scalar) over the epsilon-ball."""
    origin = torch.as_tensor(np.asarray(image), dtype=DTYPE)
    if origin.ndim != 3 or origin.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {tuple(origin.shape)}")
    if not torch.isfinite(origin).all() or origin.min() < 0 or origin.max() > 1:
        raise ValueError("image pixels must be finite and lie in [0, 1]")
    x = origin.clone()
    if config.random_start and config.epsilon > 0:
        x = torch.clamp(origin + random_init(origin.shape, config.epsilon, config.seed), 0.0, 1.0)
    trace = []
    for _ in range(config.iterations):
        x = x.detach().requires_grad_(True)
        value = objective(x.unsqueeze(0))
        if not torch.isfinite(value):
            raise NonFiniteError(f"{name}: objective became non-finite")
        (grad,) = torch.autograd.grad(value, x)
        trace.append(value.item())
        x = pgd_step(x.detach(), grad, origin, config)
    with torch.no_grad():
        final = objective(x.unsqueeze(0)).item()
    adv = x.detach().numpy()
    return AdversarialResult(adv, adv - origin.numpy(), tuple(trace), name, final)


def _siaa_loss(backbone, head, t_proj, normalize):
    def objective(x):
        v = fp_forward_vision(head, encode_image(backbone, x))
        if normalize:
            v = l2_normalize(v)
        return siaa_objective(v[0], t_proj[0], t_proj[1])
    return objective


def run_siaa(image, label: int, backbone: FrozenBackbone, text_encoder: TextEncoder,
             fphead: FPHead, config: AttackConfig = AttackConfig(), prompts=PROMPTS) -> AdversarialResult:
    """Surrogate iterative attack: move the head's image embedding onto the other class's prompt."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    with torch.no_grad():
        t = encode_text(text_encoder, (prompts[label], prompts[1 - label]))
        t_proj = fp_forward_text(fphead, t)
        if config.normalize:
            t_proj = l2_normalize(t_proj)
    return run_pgd(image, _siaa_loss(backbone, fphead, t_proj, config.normalize), config, "siaa")


def run_pgd_whitebox(image, label: int, detector, config: AttackConfig = AttackConfig()) -> AdversarialResult:
    """Standard PGD on the detector's binary cross-entropy (white-box upper bound)."""
    target = torch.tensor([float(label)], dtype=DTYPE)

    def objective(x):
        return F.binary_cross_entropy_with_logits(detector(x).to(DTYPE), target)

    return run_pgd(image, objective, config, "pgd")


def _cosine_attack(image, features, config, name):
    with torch.no_grad():
        clean = features(torch.as_tensor(np.asarray(image), dtype=DTYPE).unsqueeze(0))

    def objective(x):
        return cosine_divergence(features(x), clean)[0]

    return run_pgd(image, objective, config, name)


def run_pgd_vit(image, backbone: FrozenBackbone, config: AttackConfig = AttackConfig()) -> AdversarialResult:
    """Push the backbone feature away from the clean feature (cosine divergence)."""
    return _cosine_attack(image, lambda x: encode_image(backbone, x), config, "pgd-vit")


def run_pgd_l(image, backbone: FrozenBackbone, fphead: FPHead,
              config: AttackConfig = AttackConfig()) -> AdversarialResult:
    """Cosine divergence measured after the head's linear+ReLU vision branch."""
    return _cosine_attack(image, lambda x: fp_forward_vision(fphead, encode_image(backbone, x)),
                          config, "pgd-l")


def attack_set(images, labels, ids, attack: Callable, config: AttackConfig) -> list:
    """Run ``attack(image, label, config)`` on each image with its own derived seed."""
    return [attack(img, int(y), replace(config, seed=derive_seed(config.seed, i)))
            for img, y, i in zip(images, labels, ids)]


def quantize_adversarial(image):
    """8-bit round-to-nearest; returns ``(uint8 image, dequantized float image)``."""
    q = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    return q, q.astype(np.float64) / 255.0
