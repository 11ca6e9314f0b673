"""
Frozen feature extractors.

Every backbone takes a batch of images in ``B x H x W x 3`` layout with pixel
values in ``[0, 1]`` and returns a ``B x D_v`` feature matrix. Normalization
to the backbone's expected statistics happens inside the backbone, so attacks
always operate on raw pixels and the gradient flows all the way back to them.

Two families are provided:

* :class:`ToyBackbone` / :class:`ToyTextEncoder`, small deterministic models
  used by the test-suite and the toy experiments;
* :class:`HFVisionBackbone` / :class:`HFTextEncoder`, thin adapters around
  ``transformers`` checkpoints (CLIP, DINOv2, Swin, ...). These are imported
  lazily and are optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    vision_dim: int
    input_size: tuple[int, int]
    norm_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    norm_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(self, "norm_mean", tuple(float(s) for s in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(s) for s in self.norm_std))
        if self.vision_dim <= 0:
            raise ValueError(f"vision_dim must be positive, got {self.vision_dim}")
        if len(self.input_size) != 2 or min(self.input_size) <= 0:
            raise ValueError(f"input_size must be two positive ints, got {self.input_size}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3:
            raise ValueError("norm_mean and norm_std must have three components")
        if min(self.norm_std) <= 0:
            raise ValueError(f"norm_std must be strictly positive, got {self.norm_std}")


@dataclass(frozen=True)
class TextEncoderSpec:
    name: str
    text_dim: int

    def __post_init__(self):
        if self.text_dim <= 0:
            raise ValueError(f"text_dim must be positive, got {self.text_dim}")


def as_image_batch(images, dtype=DTYPE) -> torch.Tensor:
    """Convert an image or batch of images to a ``B x H x W x 3`` tensor.

    Tensors keep their autograd history, numpy arrays are copied.
    """
    x = images if torch.is_tensor(images) else torch.as_tensor(np.asarray(images))
    x = x.to(dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 or B x H x W x 3 images, got shape {tuple(x.shape)}")
    return x


def normalize_input(images, spec: BackboneSpec, resize: bool = True) -> torch.Tensor:
    """Channel-normalize a pixel batch and return it in ``B x 3 x H x W`` layout.

    ``(pixel - mean[c]) / std[c]`` is applied per channel. When ``resize`` is
    true and the spatial size differs from ``spec.input_size`` the batch is
    bilinearly resized first.
    """
    float_tensor = torch.is_tensor(images) and images.is_floating_point()
    x = as_image_batch(images, dtype=images.dtype if float_tensor else DTYPE)
    if not torch.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    x = x.permute(0, 3, 1, 2)
    if tuple(x.shape[-2:]) != spec.input_size:
        if not resize:
            raise ValueError(
                f"image size {tuple(x.shape[-2:])} does not match backbone input size {spec.input_size}"
            )
        x = F.interpolate(x, size=spec.input_size, mode="bilinear", align_corners=False, antialias=True)
    mean = torch.tensor(spec.norm_mean, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(spec.norm_std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


class FrozenBackbone(nn.Module):
    """Base class: subclasses implement :meth:`embed` on normalized NCHW input."""

    spec: BackboneSpec

    def embed(self, x: torch.Tensor) -> torch.Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def forward(self, images) -> torch.Tensor:
        x = as_image_batch(images, dtype=self.dtype)
        if tuple(x.shape[1:3]) != self.spec.input_size:
            raise ValueError(
                f"{self.spec.name}: image size {tuple(x.shape[1:3])} does not match "
                f"input size {self.spec.input_size}"
            )
        return self.embed(normalize_input(x, self.spec, resize=False))

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return DTYPE

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # frozen models never leave eval mode
        return super().train(False)


def encode_image(backbone: FrozenBackbone, images) -> torch.Tensor:
    """Visual features ``B x D_v`` of a pixel batch; differentiable w.r.t. the pixels."""
    return backbone(images)


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over the module's state dict, in key order."""
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(str(tuple(value.shape)).encode())
        h.update(str(value.dtype).encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ToyBackbone(FrozenBackbone):
    """Average-pool, fixed random projection, fixed nonlinearity.

    ``nonlinearity`` is one of ``"tanh"``, ``"softplus"`` or ``"identity"``.
    The identity variant is exactly affine in the pixels, which the tests use
    to check linearity and operator-norm bounds.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0, pool: int = 4,
                 nonlinearity: str = "tanh", gain: float = 1.0):
        super().__init__()
        h, w = spec.input_size
        if h % pool or w % pool:
            raise ValueError(f"input size {spec.input_size} not divisible by pool factor {pool}")
        if nonlinearity not in ("tanh", "softplus", "identity"):
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.spec = spec
        self.seed = seed
        self.pool = pool
        self.nonlinearity = nonlinearity
        fan_in = 3 * (h // pool) * (w // pool)
        g = torch.Generator().manual_seed(seed)
        weight = torch.randn(spec.vision_dim, fan_in, generator=g, dtype=DTYPE) * (gain / fan_in**0.5)
        bias = torch.randn(spec.vision_dim, generator=g, dtype=DTYPE) * 0.1
        self.weight = nn.Parameter(weight, requires_grad=False)
        self.bias = nn.Parameter(bias, requires_grad=False)
        self.freeze()

    def embed(self, x):
        if self.pool > 1:
            x = F.avg_pool2d(x, self.pool)
        z = F.linear(x.flatten(1), self.weight, self.bias)
        if self.nonlinearity == "tanh":
            return torch.tanh(z)
        if self.nonlinearity == "softplus":
            return F.softplus(z)
        return z

    def lipschitz_bound(self) -> float:
        """Upper bound on ``||F(a) - F(b)||_2 / ||a - b||_2`` over pixel batches of size one.

        Average pooling has operator norm ``1/pool``, normalization scales by at most
        ``1/min(std)`` and every supported nonlinearity is 1-Lipschitz.
        """
        sigma = torch.linalg.matrix_norm(self.weight, ord=2).item()
        return sigma / self.pool / min(self.spec.norm_std)


def make_toy_backbone(seed: int = 0, vision_dim: int = 64, input_size=(32, 32), *,
                      name: str | None = None, pool: int = 4, nonlinearity: str = "tanh",
                      norm_mean=(0.5, 0.5, 0.5), norm_std=(0.25, 0.25, 0.25),
                      gain: float = 1.0) -> ToyBackbone:
    spec = BackboneSpec(
        name=name or f"toy-{seed}",
        vision_dim=vision_dim,
        input_size=tuple(input_size),
        norm_mean=norm_mean,
        norm_std=norm_std,
    )
    return ToyBackbone(spec, seed=seed, pool=pool, nonlinearity=nonlinearity, gain=gain)


class TextEncoder:
    spec: TextEncoderSpec

    def encode(self, prompts: list[str]) -> torch.Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def encode_text(text_encoder: TextEncoder, prompts) -> torch.Tensor:
    """Encode an ordered ``(ground_truth, adversarial)`` prompt pair to a ``2 x D_t`` matrix."""
    prompts = list(prompts)
    if len(prompts) != 2:
        raise ValueError(f"expected exactly two prompts, got {len(prompts)}")
    for p in prompts:
        if not isinstance(p, str) or not p.strip():
            raise ValueError("prompts must be non-empty strings")
    out = text_encoder.encode(prompts)
    if out.shape != (2, text_encoder.spec.text_dim):
        raise ValueError(f"text encoder returned shape {tuple(out.shape)}")
    return out


class ToyTextEncoder(TextEncoder):
    """Hash each prompt (with the seed) into an RNG seed and draw a unit Gaussian vector."""

    def __init__(self, text_dim: int = 32, seed: int = 0, name: str = "toy-text"):
        self.spec = TextEncoderSpec(name=name, text_dim=text_dim)
        self.seed = seed

    def _vector(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.spec.text_dim)
        return v / np.linalg.norm(v)

    def encode(self, prompts):
        return torch.as_tensor(np.stack([self._vector(p) for p in prompts]), dtype=DTYPE)


class HFVisionBackbone(FrozenBackbone):
    """Adapter around a ``transformers`` vision model loaded from a local directory.

    ``pooling`` selects the feature: ``"cls"`` (first token of the last hidden
    state), ``"pooler"`` (the model's ``pooler_output``) or ``"mean"`` (mean of
    the last hidden state over tokens). Swin has no class token; use
    ``"pooler"`` there.
    """

    def __init__(self, spec: BackboneSpec, model_dir, pooling: str = "cls"):
        super().__init__()
        from transformers import AutoConfig, AutoModel, CLIPVisionModel

        if pooling not in ("cls", "pooler", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        config = AutoConfig.from_pretrained(model_dir)
        if config.model_type in ("clip", "clip_vision_model"):
            self.model = CLIPVisionModel.from_pretrained(model_dir)
        else:
            self.model = AutoModel.from_pretrained(model_dir)
        self.spec = spec
        self.pooling = pooling
        self.freeze()

    def embed(self, x):
        out = self.model(pixel_values=x.to(self.dtype))
        if self.pooling == "pooler":
            feats = out.pooler_output
        elif self.pooling == "mean":
            feats = out.last_hidden_state.mean(dim=1)
        else:
            feats = out.last_hidden_state[:, 0]
        if feats.shape[-1] != self.spec.vision_dim:
            raise ValueError(f"{self.spec.name}: model emits {feats.shape[-1]} features, "
                             f"registry says {self.spec.vision_dim}")
        return feats


class HFTextEncoder(TextEncoder):
    """CLIP text tower (projected text embeddings) from a local ``transformers`` directory."""

    def __init__(self, model_dir, name: str = "clip-text", dtype=DTYPE):
        from transformers import AutoTokenizer, CLIPTextModelWithProjection

        self.tokenizer = AutoTokenizer.from_pretrained(model_dir)
        self.model = CLIPTextModelWithProjection.from_pretrained(model_dir).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dtype = dtype
        self.spec = TextEncoderSpec(name=name, text_dim=self.model.config.projection_dim)

    @torch.no_grad()
    def encode(self, prompts):
        tokens = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        return self.model(**tokens).text_embeds.to(self.dtype)


@dataclass(frozen=True)
class RegistryEntry:
    spec: BackboneSpec
    kind: str = "toy"
    weights: str | None = None
    options: dict = field(default_factory=dict)


def load_registry(path) -> dict[str, RegistryEntry]:
    """Read a JSON backbone registry.

    The file maps a backbone name to ``{"kind", "weights", "vision_dim",
    "input_size", "mean", "std", ...}``; any other keys are passed to the
    constructor as options (e.g. ``seed`` and ``pool`` for toy backbones,
    ``pooling`` for transformers models). Relative weight paths are resolved
    against the registry file's directory.
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    entries = {}
    for name, item in raw.items():
        if name == "version":
            continue
        item = dict(item)
        spec = BackboneSpec(
            name=name,
            vision_dim=int(item.pop("vision_dim")),
            input_size=tuple(item.pop("input_size")),
            norm_mean=tuple(item.pop("mean", (0.0, 0.0, 0.0))),
            norm_std=tuple(item.pop("std", (1.0, 1.0, 1.0))),
        )
        kind = item.pop("kind", "toy")
        weights = item.pop("weights", None)
        if weights is not None and not Path(weights).is_absolute():
            weights = str(path.parent / weights)
        entries[name] = RegistryEntry(spec=spec, kind=kind, weights=weights, options=item)
    return entries


def build_backbone(entry: RegistryEntry) -> FrozenBackbone:
    if entry.kind == "toy":
        opts = dict(entry.options)
        return ToyBackbone(entry.spec, seed=int(opts.pop("seed", 0)), **opts)
    if entry.kind == "hf":
        if entry.weights is None:
            raise ValueError(f"{entry.spec.name}: transformers backbones need a weights directory")
        return HFVisionBackbone(entry.spec, entry.weights, **entry.options)
    raise ValueError(f"unknown backbone kind {entry.kind!r}")

