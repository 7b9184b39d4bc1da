"""Checkpoint layout converters into the native ``VisionTransformer`` key space.

Supported layouts: native, torchvision, timm, OpenAI CLIP visual tower
(also what open_clip writes), and lukemelas ``pytorch_pretrained_vit``.
"""

from __future__ import annotations

import re

import torch

from ..errors import ModelIntegrityError

FORMATS = ("native", "torchvision", "timm", "clip", "lukemelas")


def detect_format(state_dict) -> str:
    keys = set(state_dict)
    if any(k.startswith("encoder.layers.") for k in keys):
        return "torchvision"
    if any(k.startswith("transformer.resblocks.") for k in keys):
        return "clip"
    if any(k.startswith("transformer.blocks.") for k in keys):
        return "lukemelas"
    if "patch_embed.proj.weight" in keys:
        return "timm"
    if "patch_embed.weight" in keys:
        return "native"
    raise ModelIntegrityError("unrecognized ViT checkpoint layout")


def strip_prefix(state_dict, prefixes=("module.", "visual.", "model.")):
    """Drop wrapper prefixes; a full CLIP checkpoint keeps only ``visual.*``."""
    if any(k.startswith("visual.") for k in state_dict):
        state_dict = {k[7:]: v for k, v in state_dict.items() if k.startswith("visual.")}
    out = {}
    for k, v in state_dict.items():
        for p in prefixes:
            if k.startswith(p):
                k = k[len(p):]
        out[k] = v
    return out


_TORCHVISION = [
    (r"^class_token$", "cls_token"),
    (r"^conv_proj\.", "patch_embed."),
    (r"^encoder\.pos_embedding$", "pos_embed"),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.ln_1\.", r"blocks.\1.norm1."),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.ln_2\.", r"blocks.\1.norm2."),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.self_attention\.in_proj_weight$", r"blocks.\1.attn.qkv.weight"),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.self_attention\.in_proj_bias$", r"blocks.\1.attn.qkv.bias"),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.self_attention\.out_proj\.", r"blocks.\1.attn.proj."),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.mlp\.0\.", r"blocks.\1.fc1."),
    (r"^encoder\.layers\.encoder_layer_(\d+)\.mlp\.3\.", r"blocks.\1.fc2."),
    (r"^encoder\.ln\.", "norm."),
    (r"^heads\.head\.", "head."),
]

_TIMM = [
    (r"^patch_embed\.proj\.", "patch_embed."),
    (r"^blocks\.(\d+)\.mlp\.fc1\.", r"blocks.\1.fc1."),
    (r"^blocks\.(\d+)\.mlp\.fc2\.", r"blocks.\1.fc2."),
]

_CLIP = [
    (r"^conv1\.", "patch_embed."),
    (r"^transformer\.resblocks\.(\d+)\.ln_1\.", r"blocks.\1.norm1."),
    (r"^transformer\.resblocks\.(\d+)\.ln_2\.", r"blocks.\1.norm2."),
    (r"^transformer\.resblocks\.(\d+)\.attn\.in_proj_weight$", r"blocks.\1.attn.qkv.weight"),
    (r"^transformer\.resblocks\.(\d+)\.attn\.in_proj_bias$", r"blocks.\1.attn.qkv.bias"),
    (r"^transformer\.resblocks\.(\d+)\.attn\.out_proj\.", r"blocks.\1.attn.proj."),
    (r"^transformer\.resblocks\.(\d+)\.mlp\.c_fc\.", r"blocks.\1.fc1."),
    (r"^transformer\.resblocks\.(\d+)\.mlp\.c_proj\.", r"blocks.\1.fc2."),
    (r"^ln_post\.", "norm."),
]

_LUKEMELAS = [
    (r"^patch_embedding\.", "patch_embed."),
    (r"^class_token$", "cls_token"),
    (r"^positional_embedding\.pos_embedding$", "pos_embed"),
    (r"^transformer\.blocks\.(\d+)\.norm1\.", r"blocks.\1.norm1."),
    (r"^transformer\.blocks\.(\d+)\.norm2\.", r"blocks.\1.norm2."),
    (r"^transformer\.blocks\.(\d+)\.proj\.", r"blocks.\1.attn.proj."),
    (r"^transformer\.blocks\.(\d+)\.pwff\.fc1\.", r"blocks.\1.fc1."),
    (r"^transformer\.blocks\.(\d+)\.pwff\.fc2\.", r"blocks.\1.fc2."),
    (r"^fc\.", "head."),
]


def _rename(state_dict, rules):
    out = {}
    for key, value in state_dict.items():
        new = key
        for pattern, repl in rules:
            new, n = re.subn(pattern, repl, new)
            if n:
                break
        out[new] = value
    return out


def _merge_lukemelas_qkv(sd):
    out = {}
    pattern = re.compile(r"^transformer\.blocks\.(\d+)\.attn\.proj_([qkv])\.(weight|bias)$")
    parts = {}
    for key, value in sd.items():
        m = pattern.match(key)
        if m:
            parts[(m.group(1), m.group(3), m.group(2))] = value
        else:
            out[key] = value
    for (layer, kind) in sorted({(l, k) for l, k, _ in parts}):
        try:
            fused = torch.cat([parts[(layer, kind, c)] for c in "qkv"], dim=0)
        except KeyError as exc:
            raise ModelIntegrityError(f"block {layer}: incomplete q/k/v {kind}") from exc
        out[f"blocks.{layer}.attn.qkv.{kind}"] = fused
    return out


def to_native(state_dict, fmt: str | None = None):
    """Return a new state dict keyed for ``VisionTransformer``."""
    sd = strip_prefix(dict(state_dict))
    fmt = fmt or detect_format(sd)
    if fmt == "native":
        return sd
    if fmt == "torchvision":
        return _rename(sd, _TORCHVISION)
    if fmt == "timm":
        return _rename(sd, _TIMM)
    if fmt == "clip":
        sd = _rename(sd, _CLIP)
        if "class_embedding" in sd:
            sd["cls_token"] = sd.pop("class_embedding").reshape(1, 1, -1)
        if "positional_embedding" in sd:
            sd["pos_embed"] = sd.pop("positional_embedding").unsqueeze(0)
        return sd
    if fmt == "lukemelas":
        return _rename(_merge_lukemelas_qkv(sd), _LUKEMELAS)
    raise ModelIntegrityError(f"unknown checkpoint format {fmt!r}")


def native_to_lukemelas(state_dict):
    """Export a native state dict in the lukemelas layout."""
    out = {}
    for key, value in state_dict.items():
        m = re.match(r"^blocks\.(\d+)\.(.+)$", key)
        if m:
            layer, rest = m.groups()
            prefix = f"transformer.blocks.{layer}."
            qkv = re.match(r"^attn\.qkv\.(weight|bias)$", rest)
            if qkv:
                for name, chunk in zip("qkv", value.chunk(3, dim=0)):
                    out[f"{prefix}attn.proj_{name}.{qkv.group(1)}"] = chunk.clone()
            elif rest.startswith("attn.proj."):
                out[prefix + rest[len("attn."):]] = value
            elif rest.startswith(("fc1.", "fc2.")):
                out[prefix + "pwff." + rest] = value
            else:
                out[prefix + rest] = value
        elif key == "cls_token":
            out["class_token"] = value
        elif key == "pos_embed":
            out["positional_embedding.pos_embedding"] = value
        elif key.startswith("patch_embed."):
            out["patch_embedding." + key[len("patch_embed."):]] = value
        elif key.startswith("head."):
            out["fc." + key[len("head."):]] = value
        else:
            out[key] = value
    return out
