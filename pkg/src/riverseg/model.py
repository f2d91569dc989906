"""Four-stage hierarchical transformer encoder with sequence-reduced
attention and an all-MLP decoder, producing one water-logit channel at full
input resolution.

The encoder has no positional-encoding parameters anywhere: positional
information comes from the overlapped patch embeddings and the 3x3 depthwise
convolution inside each Mix-FFN, so the model accepts any input side
divisible by 32.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


@dataclasses.dataclass
class ModelConfig:
    embed_dims: tuple[int, int, int, int] = (16, 32, 64, 128)
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    num_heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    sr_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    # per-stage (kernel, stride, padding); stage 1 downsamples 4x, the rest 2x
    patch_specs: tuple[tuple[int, int, int], ...] = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))
    mlp_ratio: int = 4
    decoder_dim: int = 64
    num_classes: int = 1
    in_channels: int = 3

    def __post_init__(self):
        for field in ("embed_dims", "depths", "num_heads", "sr_ratios"):
            value = tuple(getattr(self, field))
            setattr(self, field, value)
            if len(value) != 4:
                raise ConfigError(f"{field} needs 4 entries, got {len(value)}")
        self.patch_specs = tuple(tuple(s) for s in self.patch_specs)
        for d, h in zip(self.embed_dims, self.num_heads):
            if d % h:
                raise ConfigError(f"embed dim {d} not divisible by {h} heads")
        for k, s, p in self.patch_specs:
            if k <= s:
                raise ConfigError(f"patch spec kernel {k} must exceed stride {s} (patches must overlap)")
        strides = [s for _, s, _ in self.patch_specs]
        if strides[0] != 4 or any(s != 2 for s in strides[1:]):
            raise ConfigError(f"stage strides must be (4,2,2,2), got {tuple(strides)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


_PRESETS = {
    "nano": dict(embed_dims=(16, 32, 64, 128), depths=(1, 1, 1, 1),
                 num_heads=(1, 2, 4, 8), sr_ratios=(8, 4, 2, 1),
                 mlp_ratio=4, decoder_dim=64),
    "b0": dict(embed_dims=(32, 64, 160, 256), depths=(2, 2, 2, 2),
               num_heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1),
               mlp_ratio=4, decoder_dim=256),
}


def named_config(name: str, **overrides) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown model config {name!r}; choose from {sorted(_PRESETS)}")
    kw = dict(_PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


def _tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, h, w)


def _map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


class OverlapPatchEmbed(Module):
    """Strided conv with kernel > stride, flattened to tokens and normalized."""

    def __init__(self, in_channels, dim, spec, rng):
        super().__init__()
        k, s, p = spec
        if k <= s:
            raise ConfigError(f"patch embedding kernel {k} must exceed stride {s}")
        self.proj = Conv2d(in_channels, dim, k, stride=s, padding=p, rng=rng)
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        feat = self.proj(x)
        _, _, h, w = feat.shape
        return self.norm(_map_to_tokens(feat)), h, w


class EfficientSelfAttention(Module):
    """Multi-head attention with keys/values taken from an RxR-strided
    projection of the token grid, cutting cost to O(N^2/R^2)."""

    def __init__(self, dim, heads, sr_ratio, rng):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = Linear(dim, dim, rng=rng)
        self.k = Linear(dim, dim, rng=rng)
        self.v = Linear(dim, dim, rng=rng)
        self.out = Linear(dim, dim, rng=rng)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, stride=sr_ratio, rng=rng)
            self.sr_norm = LayerNorm(dim)
        self.store_attn = False
        self.last_attn: Optional[np.ndarray] = None

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        b, n, d = tokens.shape
        if n != h * w:
            raise T.ShapeError(f"attention got {n} tokens for a {h}x{w} grid")
        r = self.sr_ratio
        if r > 1:
            if h % r or w % r:
                raise T.ShapeError(f"reduction ratio {r} must divide grid {h}x{w}")
            reduced = self.sr(_tokens_to_map(tokens, h, w))
            kv = self.sr_norm(_map_to_tokens(reduced))
        else:
            kv = tokens
        m = kv.shape[1]

        hd = d // self.heads
        q = self.q(tokens).reshape(b, n, self.heads, hd).transpose(0, 2, 1, 3)
        k = self.k(kv).reshape(b, m, self.heads, hd).transpose(0, 2, 1, 3)
        v = self.v(kv).reshape(b, m, self.heads, hd).transpose(0, 2, 1, 3)

        attn = T.softmax(T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), self.scale))
        if self.store_attn:
            self.last_attn = attn.numpy().copy()
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class MixFFN(Module):
    """Expand, mix spatially with a residual 3x3 depthwise conv, GELU, project.

    The depthwise branch is additive, so zeroing its kernel leaves the pure
    MLP path intact.
    """

    def __init__(self, dim, mlp_ratio, rng):
        super().__init__()
        hidden = dim * mlp_ratio
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.dwconv = Conv2d(hidden, hidden, 3, padding=1, groups=hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        b, n, d = tokens.shape
        if n != h * w:
            raise T.ShapeError(f"mix_ffn got {n} tokens for a {h}x{w} grid")
        hid = self.fc1(tokens)
        grid = _tokens_to_map(hid, h, w)
        hid = hid + _map_to_tokens(self.dwconv(grid))
        return self.fc2(T.gelu(hid))


class Block(Module):
    """Pre-norm transformer block: attention and Mix-FFN, each residual."""

    def __init__(self, dim, heads, sr_ratio, mlp_ratio, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(dim, mlp_ratio, rng)

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        tokens = tokens + self.attn(self.norm1(tokens), h, w)
        tokens = tokens + self.ffn(self.norm2(tokens), h, w)
        return tokens


class Stage(Module):
    def __init__(self, in_channels, dim, depth, heads, sr_ratio, mlp_ratio, spec, rng):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_channels, dim, spec, rng)
        self.blocks = ModuleList(
            Block(dim, heads, sr_ratio, mlp_ratio, rng) for _ in range(depth))
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        tokens, h, w = self.embed(x)
        for block in self.blocks:
            tokens = block(tokens, h, w)
        return _tokens_to_map(self.norm(tokens), h, w)


class Encoder(Module):
    """Produces feature maps at 1/4, 1/8, 1/16 and 1/32 of input resolution."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        stages = []
        in_ch = cfg.in_channels
        for i in range(4):
            stages.append(Stage(in_ch, cfg.embed_dims[i], cfg.depths[i],
                                cfg.num_heads[i], cfg.sr_ratios[i],
                                cfg.mlp_ratio, cfg.patch_specs[i], rng))
            in_ch = cfg.embed_dims[i]
        self.stages = ModuleList(stages)

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4:
            raise T.ShapeError(f"encoder expects (B,C,H,W), got {x.shape}")
        _, _, h, w = x.shape
        if h % 32 or w % 32:
            raise T.ShapeError(f"input sides must be divisible by 32, got {h}x{w}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(Module):
    """All-MLP fusion head: per-stage linear projections, bilinear upsampling
    to the 1/4 grid, channel concat, linear fuse + GELU, linear prediction.
    No convolution anywhere."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.decoder_dim = cfg.decoder_dim
        self.embed_dims = cfg.embed_dims
        self.proj = ModuleList(
            Linear(d, cfg.decoder_dim, rng=rng) for d in cfg.embed_dims)
        self.fuse = Linear(4 * cfg.decoder_dim, cfg.decoder_dim, rng=rng)
        self.head = Linear(cfg.decoder_dim, cfg.num_classes, rng=rng)

    def forward(self, feats: list[Tensor]) -> Tensor:
        if len(feats) != 4:
            raise ConfigError(f"decoder expects 4 feature maps, got {len(feats)}")
        for f, d in zip(feats, self.embed_dims):
            if f.shape[1] != d:
                raise ConfigError(f"feature width {f.shape[1]} does not match configured {d}")
        _, _, h, w = feats[0].shape
        lifted = []
        for f, proj in zip(feats, self.proj):
            _, _, fh, fw = f.shape
            tok = proj(_map_to_tokens(f))
            grid = _tokens_to_map(tok, fh, fw)
            if (fh, fw) != (h, w):
                grid = T.bilinear_upsample2d(grid, h, w)
            lifted.append(grid)
        fused = T.concat(lifted, axis=1)
        tok = T.gelu(self.fuse(_map_to_tokens(fused)))
        return _tokens_to_map(self.head(tok), h, w)


class SegFormer(Module):
    """Encoder-decoder returning full-resolution water logits (B,1,H,W)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        logits = self.decoder(self.encoder(x))
        _, _, h, w = x.shape
        return T.bilinear_upsample2d(logits, h, w)

    def forward_quarter(self, x: Tensor) -> Tensor:
        """Logits at the decoder's native 1/4 resolution."""
        return self.decoder(self.encoder(x))


def param_count(model: Module, trainable_only: bool = False) -> int:
    return sum(p.size for p in model.parameters(trainable_only=trainable_only))


def model_summary(model: Module) -> list[dict]:
    """Per-parameter inventory: name, shape, element count, trainability."""
    return [{"name": name, "shape": list(p.shape), "count": int(p.size),
             "trainable": bool(p.requires_grad)}
            for name, p in model.named_parameters()]


def format_summary(model: Module) -> str:
    rows = model_summary(model)
    width = max((len(r["name"]) for r in rows), default=4)
    lines = [f"{'name':<{width}}  {'shape':>16}  {'count':>9}  trainable"]
    for r in rows:
        shape = "x".join(str(s) for s in r["shape"])
        lines.append(f"{r['name']:<{width}}  {shape:>16}  {r['count']:>9}  {r['trainable']}")
    total = param_count(model)
    trainable = param_count(model, trainable_only=True)
    lines.append(f"total {total}  trainable {trainable}")
    return "\n".join(lines)
