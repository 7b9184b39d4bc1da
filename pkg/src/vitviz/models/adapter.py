"""Instrumented model handles and the adapter registry."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from ..errors import (
    LocatorError,
    ModelError,
    ModelIntegrityError,
    SurgeryPlanError,
    UnsupportedArchitectureError,
    UnsupportedOperationError,
)
from . import convert
from .vit import SITES, ViTConfig, VisionTransformer

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HALF = (0.5, 0.5, 0.5)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class ModelSpec:
    patch_size: int
    image_size: int
    num_layers: int
    hidden_dim: int
    ffn_expansion: int
    has_cls_token: bool

    @property
    def grid_dims(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_patches(self) -> int:
        return self.grid_dims[0] * self.grid_dims[1]

    @property
    def ffn_width(self) -> int:
        return self.hidden_dim * self.ffn_expansion

    def site_width(self, site: str) -> int:
        if site in ("ffn_gelu", "ffn_pre_gelu"):
            return self.ffn_width
        if site in ("key", "query", "value", "block_output"):
            return self.hidden_dim
        raise LocatorError(f"unknown readout site {site!r}; expected one of {SITES}")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "ffn_expansion": self.ffn_expansion,
            "has_cls_token": self.has_cls_token,
            "grid_dims": list(self.grid_dims),
        }

    @classmethod
    def from_config(cls, cfg: ViTConfig) -> "ModelSpec":
        return cls(cfg.patch_size, cfg.image_size, cfg.num_layers, cfg.hidden_dim,
                   cfg.ffn_expansion, cfg.has_cls_token)


@dataclass(frozen=True, order=True)
class FeatureLocator:
    layer: int
    channel: int
    site: str = "ffn_gelu"

    def validate(self, spec: ModelSpec) -> "FeatureLocator":
        if not 0 <= self.layer < spec.num_layers:
            raise LocatorError(f"layer {self.layer} out of range [0, {spec.num_layers})")
        width = spec.site_width(self.site)
        if not 0 <= self.channel < width:
            raise LocatorError(f"channel {self.channel} out of range [0, {width}) for site {self.site}")
        return self

    @property
    def key(self) -> str:
        return f"{self.site}:{self.layer}:{self.channel}"

    @classmethod
    def parse(cls, key: str) -> "FeatureLocator":
        site, layer, channel = key.split(":")
        return cls(int(layer), int(channel), site)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "channel": self.channel, "site": self.site}


@dataclass(frozen=True)
class AttentionSurgeryPlan:
    cls_isolated_layers: frozenset = frozenset()
    cls_constant_injection_layer: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "cls_isolated_layers", frozenset(self.cls_isolated_layers))
        if self.cls_constant_injection_layer in self.cls_isolated_layers:
            raise SurgeryPlanError("injection layer cannot also be an isolated layer")

    @property
    def is_empty(self) -> bool:
        return not self.cls_isolated_layers and self.cls_constant_injection_layer is None

    def validate(self, spec: ModelSpec) -> "AttentionSurgeryPlan":
        layers = set(self.cls_isolated_layers)
        if self.cls_constant_injection_layer is not None:
            layers.add(self.cls_constant_injection_layer)
        bad = sorted(l for l in layers if not 0 <= l < spec.num_layers)
        if bad:
            raise SurgeryPlanError(f"plan references layers {bad} outside [0, {spec.num_layers})")
        if not self.is_empty and not spec.has_cls_token:
            raise SurgeryPlanError("model has no CLS token")
        return self

    @classmethod
    def isolate_until_last(cls, num_layers: int) -> "AttentionSurgeryPlan":
        """CLS cut out of every block but the last, where a constant CLS is injected."""
        return cls(frozenset(range(num_layers - 1)), num_layers - 1)


@dataclass
class TokenReadout:
    tokens: torch.Tensor  # (B, T, width)
    site: str
    layer: int
    has_cls: bool

    def patch_tokens(self):
        return self.tokens[:, 1:] if self.has_cls else self.tokens

    def cls_tokens(self):
        return self.tokens[:, 0] if self.has_cls else None


@dataclass
class PatchActivationGrid:
    """Per-patch activations of one channel; ``values`` is (rows, cols), or
    (B, rows, cols) for batched reads."""

    values: torch.Tensor
    cls: Optional[torch.Tensor]
    locator: FeatureLocator

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


class ClassifierHandle:
    """Plain image classifier: pixel tensors in ``input_range`` -> logits."""

    kind = "classifier"

    def __init__(self, model_id: str, module: nn.Module, image_size: int,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD, input_range=(0.0, 1.0)):
        self.model_id = model_id
        self._module = module.eval()
        for p in self._module.parameters():
            p.requires_grad_(False)
        self.image_size = image_size
        self.input_range = tuple(input_range)
        self._mean = torch.tensor(mean).reshape(1, -1, 1, 1)
        self._std = torch.tensor(std).reshape(1, -1, 1, 1)
        self._digest = None

    @property
    def module(self) -> nn.Module:
        return self._module

    @property
    def mean(self):
        return tuple(self._mean.flatten().tolist())

    @property
    def dtype(self):
        return next(self._module.parameters()).dtype

    @property
    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256(self.model_id.encode())
            for name, t in self._module.state_dict().items():
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def normalize(self, images):
        return (images - self._mean.to(images)) / self._std.to(images)

    def _batched(self, image):
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            raise ModelError(f"expected {self.image_size}x{self.image_size} input, got {tuple(image.shape)}")
        return image.to(self.dtype)

    def logits(self, images):
        return self._module(self.normalize(self._batched(images)))

    def to(self, dtype) -> "ClassifierHandle":
        clone = copy.copy(self)
        clone._module = copy.deepcopy(self._module).to(dtype)
        clone._digest = None
        return clone

    def describe(self) -> dict:
        return {"model_id": self.model_id, "kind": self.kind, "image_size": self.image_size}


class ViTHandle(ClassifierHandle):
    """Transformer handle: readouts, CLS surgery, and head access on top of logits."""

    kind = "vit"

    def __init__(self, model_id, module: VisionTransformer, mean=HALF, std=HALF,
                 input_range=(0.0, 1.0)):
        super().__init__(model_id, module, module.cfg.image_size, mean, std, input_range)
        self.spec = ModelSpec.from_config(module.cfg)

    def describe(self) -> dict:
        return {**super().describe(), "spec": self.spec.to_dict()}

    def _tokens(self, images):
        return self._module.embed(self.normalize(self._batched(images)))

    def readout(self, images, layer: int, site: str) -> TokenReadout:
        """Site activations for a batch, computing only blocks ``0..layer``."""
        FeatureLocator(layer, 0, site).validate(self.spec)
        out = self._module.run_blocks(self._tokens(images), capture=(layer, site))
        return TokenReadout(out, site, layer, self.spec.has_cls_token)

    def readouts(self, images, pairs) -> dict:
        """One forward, many sites: {(layer, site): TokenReadout}."""
        for layer, site in pairs:
            FeatureLocator(layer, 0, site).validate(self.spec)
        found = self._module.run_blocks(self._tokens(images), collect=set(pairs))
        return {k: TokenReadout(v, k[1], k[0], self.spec.has_cls_token) for k, v in found.items()}

    def read_feature(self, image, locator: FeatureLocator) -> PatchActivationGrid:
        locator.validate(self.spec)
        batched = image.dim() == 4
        ro = self.readout(image, locator.layer, locator.site)
        rows, cols = self.spec.grid_dims
        values = ro.patch_tokens()[..., locator.channel].reshape(-1, rows, cols)
        cls = ro.cls_tokens()
        cls = cls[..., locator.channel] if cls is not None else None
        if not batched:
            values = values[0]
            cls = cls[0] if cls is not None else None
        return PatchActivationGrid(values, cls, locator)

    def _surgery_kwargs(self, plan: AttentionSurgeryPlan):
        plan.validate(self.spec)
        biases, inject = {}, {}
        if plan.cls_isolated_layers:
            mask = self.cls_isolation_bias()
            biases = {l: mask for l in plan.cls_isolated_layers}
        if plan.cls_constant_injection_layer is not None:
            l = plan.cls_constant_injection_layer
            inject = {l: self.compute_constant_cls(l)}
        return biases, inject

    def cls_isolation_bias(self):
        """Additive attention bias cutting CLS<->patch scores; CLS keeps its self-score."""
        T = self.spec.num_patches + 1
        is_cls = torch.zeros(T, dtype=torch.bool)
        is_cls[0] = True
        blocked = is_cls[:, None] ^ is_cls[None, :]
        bias = torch.zeros(T, T, dtype=self.dtype)
        return bias.masked_fill(blocked, float("-inf"))

    def final_tokens(self, images, plan: AttentionSurgeryPlan | None = None):
        """Final-block sequence (B, T, d), before the final norm."""
        tokens = self._tokens(images)
        if plan is None or plan.is_empty:
            return self._module.run_blocks(tokens)
        biases, inject = self._surgery_kwargs(plan)
        return self._module.run_blocks(tokens, attn_biases=biases, inject=inject)

    def forward_with_surgery(self, images, plan: AttentionSurgeryPlan):
        return self._module.head_features(self._module.pooled(self.final_tokens(images, plan)))

    def compute_constant_cls(self, depth: int):
        if not self.spec.has_cls_token:
            raise UnsupportedOperationError("model has no CLS token")
        if not 0 <= depth <= self.spec.num_layers:
            raise LocatorError(f"depth {depth} out of range [0, {self.spec.num_layers}]")
        with torch.no_grad():
            tok = self._module.run_blocks(self._module.embed_cls_only(), stop=depth)
        return tok[0, 0].detach().clone()

    def classify_tokens(self, tokens):
        """Apply the trained head (with its final norm) to arbitrary final tokens."""
        return self._module.head_features(tokens)

    def classify_from_token(self, token_index: int, images):
        """``token_index`` indexes the final sequence; 0 is CLS when present."""
        T = self.spec.num_patches + int(self.spec.has_cls_token)
        if not 0 <= token_index < T:
            raise LocatorError(f"token index {token_index} out of range [0, {T})")
        return self.classify_tokens(self.final_tokens(images)[:, token_index])


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _vit(image, patch, layers, dim, heads, **kw):
    return ViTConfig(image_size=image, patch_size=patch, num_layers=layers, hidden_dim=dim,
                     num_heads=heads, **kw)


def _clip(image, patch, layers, dim, heads, proj):
    return _vit(image, patch, layers, dim, heads, num_classes=None, pre_norm=True,
                act="quick_gelu", norm_eps=1e-5, patch_bias=False, proj_dim=proj)


@dataclass(frozen=True)
class AdapterEntry:
    kind: str  # "vit" or "cnn"
    vit_config: Optional[ViTConfig] = None
    cnn_builder: Optional[str] = None
    image_size: int = 224
    default_weights: Optional[str] = None
    notes: str = ""


REGISTRY: dict[str, AdapterEntry] = {
    "vit-tiny-test": AdapterEntry(
        "vit", _vit(16, 4, 2, 8, 2, num_classes=10), image_size=16, default_weights="seed:7",
        notes="synthetic fixture"),
    "vit-b16": AdapterEntry("vit", _vit(224, 16, 12, 768, 12)),
    "vit-b16-384": AdapterEntry("vit", _vit(384, 16, 12, 768, 12), image_size=384),
    "vit-b32": AdapterEntry("vit", _vit(224, 32, 12, 768, 12)),
    "vit-l16": AdapterEntry("vit", _vit(224, 16, 24, 1024, 16)),
    "vit-l32": AdapterEntry("vit", _vit(224, 32, 24, 1024, 16)),
    "clip-vit-b32": AdapterEntry("vit", _clip(224, 32, 12, 768, 12, 512)),
    "clip-vit-b16": AdapterEntry("vit", _clip(224, 16, 12, 768, 12, 512)),
    "clip-vit-l14": AdapterEntry("vit", _clip(224, 14, 24, 1024, 16, 768)),
    "resnet50": AdapterEntry("cnn", cnn_builder="resnet50"),
    "resnet152": AdapterEntry("cnn", cnn_builder="resnet152"),
    "mobilenet_v2": AdapterEntry("cnn", cnn_builder="mobilenet_v2"),
    "densenet121": AdapterEntry("cnn", cnn_builder="densenet121"),
}

_NORMALIZATION = {
    "torchvision": (IMAGENET_MEAN, IMAGENET_STD),
    "timm": (HALF, HALF),
    "lukemelas": (HALF, HALF),
    "clip": (CLIP_MEAN, CLIP_STD),
    "native": (HALF, HALF),
    "seed": (HALF, HALF),
}


def describe_model(model_id: str) -> ModelSpec:
    """ModelSpec of a registered transformer without instantiating weights."""
    entry = _entry(model_id)
    if entry.kind != "vit":
        raise UnsupportedOperationError(f"{model_id} is not a transformer")
    return ModelSpec.from_config(entry.vit_config)


def _entry(model_id: str) -> AdapterEntry:
    try:
        return REGISTRY[model_id]
    except KeyError:
        raise UnsupportedArchitectureError(
            f"unknown model id {model_id!r}; registered: {sorted(REGISTRY)}") from None


def _read_checkpoint(path: Path):
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelIntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if isinstance(obj, dict):
        for key in ("state_dict", "model", "model_state_dict"):
            if key in obj and isinstance(obj[key], dict):
                obj = obj[key]
                break
    if not isinstance(obj, dict):
        raise ModelIntegrityError(f"{path} does not hold a state dict")
    return obj


def _load_strict(module: nn.Module, state_dict):
    own = module.state_dict()
    missing = sorted(set(own) - set(state_dict))
    unexpected = sorted(set(state_dict) - set(own))
    if missing or unexpected:
        raise ModelIntegrityError(f"checkpoint keys mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in state_dict.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ModelIntegrityError(f"shape mismatch at {k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state_dict.items()})


def _build_cnn(name: str):
    import torchvision.models as tvm

    return getattr(tvm, name)(weights=None)


def load_model(model_id: str, weights_source: str | None = None, *,
               checkpoint_format: str | None = None, normalization=None,
               zero_shot_head: str | None = None) -> ClassifierHandle:
    """Build a handle for a registered architecture.

    weights_source: ``seed:N`` (deterministic synthetic weights), a checkpoint
    path, or ``torchvision`` for the torchvision model zoo.
    zero_shot_head: for CLIP towers, path to a (classes, proj_dim) tensor of
    text embeddings used as a cosine classifier.
    """
    # module construction draws from the global RNG; keep the caller's stream untouched
    with torch.random.fork_rng(devices=[]):
        return _load(model_id, weights_source, checkpoint_format, normalization, zero_shot_head)


def _load(model_id, weights_source, checkpoint_format, normalization, zero_shot_head):
    entry = _entry(model_id)
    source = weights_source or entry.default_weights
    if source is None:
        raise ModelError(f"{model_id} needs a weights source (path, 'torchvision', or 'seed:N')")

    if entry.kind == "cnn":
        if source.startswith("seed:"):
            torch.manual_seed(int(source[5:]))
            module = _build_cnn(entry.cnn_builder)
        elif source == "torchvision":
            module = _zoo_cnn(entry.cnn_builder)
        else:
            module = _build_cnn(entry.cnn_builder)
            _load_strict(module, convert.strip_prefix(_read_checkpoint(Path(source)), ("module.",)))
        mean, std = normalization or (IMAGENET_MEAN, IMAGENET_STD)
        return ClassifierHandle(model_id, module, entry.image_size, mean, std)

    cfg = entry.vit_config
    if zero_shot_head is not None:
        head = torch.load(zero_shot_head, map_location="cpu", weights_only=True)
        cfg = ViTConfig(**{**cfg.to_dict(), "num_classes": head.shape[0],
                           "normalize_head_input": True, "head_scale": 100.0})
    module = VisionTransformer(cfg)
    if source.startswith("seed:"):
        fmt = "seed"
        module.init_random(int(source[5:]))
    else:
        if source == "torchvision":
            state, fmt = _zoo_vit(model_id), "torchvision"
        else:
            path = Path(source)
            if not path.exists():
                raise ModelError(f"weights not found: {path}")
            state = _read_checkpoint(path)
            fmt = checkpoint_format or convert.detect_format(convert.strip_prefix(state))
        native = convert.to_native(state, fmt)
        if zero_shot_head is not None:
            native["head.weight"] = head
        elif cfg.num_classes is None:
            native = {k: v for k, v in native.items() if not k.startswith("head.")}
        _load_strict(module, native)
    mean, std = normalization or _NORMALIZATION[fmt]
    return ViTHandle(model_id, module, mean, std)


def _zoo_vit(model_id):
    import torchvision.models as tvm

    name = {"vit-b16": "vit_b_16", "vit-b32": "vit_b_32", "vit-l16": "vit_l_16",
            "vit-l32": "vit_l_32"}.get(model_id)
    if name is None:
        raise ModelError(f"no torchvision zoo weights for {model_id}")
    try:
        return getattr(tvm, name)(weights="DEFAULT").state_dict()
    except Exception as exc:
        raise ModelError(f"torchvision zoo download failed for {name}: {exc}") from exc


def _zoo_cnn(name):
    import torchvision.models as tvm

    try:
        return getattr(tvm, name)(weights="DEFAULT")
    except Exception as exc:
        raise ModelError(f"torchvision zoo download failed for {name}: {exc}") from exc


def wrap_vit(model_id: str, module: VisionTransformer, mean=HALF, std=HALF) -> ViTHandle:
    """Handle around an in-memory transformer (e.g. a freshly trained fixture)."""
    return ViTHandle(model_id, module, mean, std)


def wrap_classifier(model_id: str, module: nn.Module, image_size: int, mean=HALF, std=HALF):
    return ClassifierHandle(model_id, module, image_size, mean, std)


def require_vit(handle) -> ViTHandle:
    if not isinstance(handle, ViTHandle):
        raise UnsupportedOperationError(f"{handle.model_id}: operation needs a transformer adapter")
    return handle
