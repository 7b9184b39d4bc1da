"""Plain pre-norm vision transformer with readout taps and attention-bias hooks.

The module is deliberately written out by hand (no ``nn.MultiheadAttention``)
so every internal site the toolkit reads from is a named tensor, and so the
attention logits can take an additive bias for CLS surgery.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

SITES = ("ffn_gelu", "ffn_pre_gelu", "key", "query", "value", "block_output")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_expansion: int = 4
    num_classes: Optional[int] = 1000
    in_chans: int = 3
    has_cls_token: bool = True
    pre_norm: bool = False  # CLIP-style LayerNorm on the embedded sequence
    act: str = "gelu"  # or "quick_gelu"
    norm_eps: float = 1e-6
    patch_bias: bool = True
    proj_dim: Optional[int] = None  # CLIP output projection width
    normalize_head_input: bool = False  # cosine-style zero-shot head
    head_scale: float = 1.0

    @property
    def grid_dims(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_dims
        return rows * cols

    @property
    def seq_len(self) -> int:
        return self.num_patches + int(self.has_cls_token)

    def to_dict(self) -> dict:
        return asdict(self)


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"hidden_dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, attn_bias=None, taps=None):
        B, T, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        if taps is not None:
            taps["query"], taps["key"], taps["value"] = q, k, v
        h = self.num_heads

        def heads(t):
            return t.reshape(B, T, h, D // h).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = (q @ k.transpose(-2, -1)) * (D // h) ** -0.5
        if attn_bias is not None:
            scores = scores + attn_bias
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, eps=cfg.norm_eps)
        self.attn = Attention(d, cfg.num_heads)
        self.norm2 = nn.LayerNorm(d, eps=cfg.norm_eps)
        self.fc1 = nn.Linear(d, d * cfg.ffn_expansion)
        self.act = QuickGELU() if cfg.act == "quick_gelu" else nn.GELU()
        self.fc2 = nn.Linear(d * cfg.ffn_expansion, d)

    def forward(self, x, attn_bias=None, taps=None):
        x = x + self.attn(self.norm1(x), attn_bias, taps)
        h = self.fc1(self.norm2(x))
        if taps is not None:
            taps["ffn_pre_gelu"] = h
        h = self.act(h)
        if taps is not None:
            taps["ffn_gelu"] = h
        x = x + self.fc2(h)
        if taps is not None:
            taps["block_output"] = x
        return x


class VisionTransformer(nn.Module):
    """Inputs are already-normalized image tensors ``(B, C, H, W)``."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        if cfg.image_size % cfg.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = nn.Conv2d(
            cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size, bias=cfg.patch_bias
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if cfg.has_cls_token else None
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.seq_len, d))
        self.ln_pre = nn.LayerNorm(d, eps=cfg.norm_eps) if cfg.pre_norm else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(d, eps=cfg.norm_eps)
        out_dim = d
        if cfg.proj_dim is not None:
            self.proj = nn.Parameter(torch.zeros(d, cfg.proj_dim))
            out_dim = cfg.proj_dim
        else:
            self.proj = None
        if cfg.num_classes:
            self.head = nn.Linear(out_dim, cfg.num_classes, bias=not cfg.normalize_head_input)
        else:
            self.head = None

    def init_random(self, seed: int) -> "VisionTransformer":
        """Deterministic synthetic initialization (truncated-normal-ish weights)."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)
                elif "norm" in name or "ln_pre" in name:
                    p.copy_(1.0 + torch.randn(p.shape, generator=g) * 0.05)
                elif name in ("cls_token", "pos_embed"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.5)
                else:
                    fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                    p.copy_(torch.randn(p.shape, generator=g) / fan_in**0.5)
        return self

    def embed(self, x):
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        if self.cls_token is not None:
            tokens = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed
        if self.ln_pre is not None:
            tokens = self.ln_pre(tokens)
        return tokens

    def embed_cls_only(self):
        tok = self.cls_token + self.pos_embed[:, :1]
        if self.ln_pre is not None:
            tok = self.ln_pre(tok)
        return tok

    def run_blocks(self, tokens, start=0, stop=None, attn_biases=None, inject=None,
                   capture=None, collect=None):
        """Run blocks ``start..stop-1``.

        attn_biases: mapping layer -> additive attention bias (T, T).
        inject: mapping layer -> vector written into the CLS slot before that block.
        capture: (layer, site); returns that site's tensor instead of the sequence.
        collect: set of (layer, site); returns a dict of those tensors.
        """
        stop = self.cfg.num_layers if stop is None else stop
        wanted = set(collect or ())
        if capture is not None:
            wanted.add(tuple(capture))
        if wanted:
            stop = min(stop, max(l for l, _ in wanted) + 1)
        found = {}
        for idx in range(start, stop):
            if inject and idx in inject:
                cls = inject[idx].to(tokens).reshape(1, 1, -1).expand(tokens.shape[0], 1, -1)
                tokens = torch.cat([cls, tokens[:, 1:]], dim=1)
            taps = {} if any(l == idx for l, _ in wanted) else None
            bias = attn_biases.get(idx) if attn_biases else None
            tokens = self.blocks[idx](tokens, bias, taps)
            if taps is not None:
                found.update({(idx, site): taps[site] for l, site in wanted if l == idx})
        if capture is not None:
            return found[tuple(capture)]
        if collect is not None:
            return found
        return tokens

    def head_features(self, token):
        """Classification path for a final-layer token of shape (..., d)."""
        z = self.norm(token)
        if self.proj is not None:
            z = z @ self.proj
        if self.head is None:
            return z
        if self.cfg.normalize_head_input:
            z = F.normalize(z, dim=-1)
            return self.cfg.head_scale * self.head(z)
        return self.head(z)

    def pooled(self, tokens):
        if self.cls_token is not None:
            return tokens[:, 0]
        return tokens.mean(dim=1)

    def forward(self, x):
        return self.head_features(self.pooled(self.run_blocks(self.embed(x))))
