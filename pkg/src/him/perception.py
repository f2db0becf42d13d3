"""General perception network: semantic encoder, query decoder and auxiliary heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class NetworkConfig:
    channels: int = 64  # C
    queries: int = 8  # N
    encoder_layers: int = 2
    decoder_layers: int = 6
    heads: int = 4
    ffn_mult: int = 4
    backbone: str = "toy-resnet"
    stem_channels: int = 32
    backbone_channels: tuple[int, int] = (64, 128)  # stride 8, stride 16
    group_norm_groups: int = 8
    guidance_heads: int = 2  # S
    fuse_channels: int = 64
    unet_depth: int = 3
    trimap_channels: int = 32  # C_tri
    alpha_channels: int = 16  # C_alpha

    def validate(self) -> None:
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4 for 2-D sinusoidal encodings")
        if self.queries < 1:
            raise ValueError("need at least one query")
        if self.guidance_heads < 1:
            raise ValueError("united guidance needs at least one head")
        if self.backbone != "toy-resnet":
            raise ValueError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)

    @classmethod
    def paper(cls) -> "NetworkConfig":
        return cls(channels=256, queries=20, heads=8, stem_channels=64, backbone_channels=(256, 512),
                   fuse_channels=128, trimap_channels=32, alpha_channels=16, guidance_heads=2)


def group_norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class ConvGN(nn.Sequential):
    def __init__(self, cin: int, cout: int, groups: int, stride: int = 1, kernel: int = 3):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
            group_norm(cout, groups),
            nn.SiLU(),
        )


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, stride: int = 1):
        super().__init__()
        self.conv1 = ConvGN(cin, cout, groups, stride=stride)
        self.conv2 = nn.Sequential(nn.Conv2d(cout, cout, 3, padding=1, bias=False), group_norm(cout, groups))
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), group_norm(cout, groups))

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        return F.silu(self.conv2(self.conv1(x)) + identity)


class MLP(nn.Module):
    """Two hidden layers of width ``hidden`` with SiLU."""

    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                                 nn.Linear(hidden, cout))

    def forward(self, x):
        return self.net(x)


def sine_position_encoding(channels: int, height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, shape (channels, height, width); y uses the first half of channels."""
    quarter = channels // 4
    scale = 2 * math.pi
    ys = (torch.arange(height, dtype=torch.float64, device=device) + 0.5) / height * scale
    xs = (torch.arange(width, dtype=torch.float64, device=device) + 0.5) / width * scale
    freq = 10000.0 ** (torch.arange(quarter, dtype=torch.float64, device=device) / quarter)
    py = ys[:, None] / freq  # (H, q)
    px = xs[:, None] / freq  # (W, q)
    pos_y = torch.cat([py.sin(), py.cos()], dim=1).T[:, :, None].expand(2 * quarter, height, width)
    pos_x = torch.cat([px.sin(), px.cos()], dim=1).T[:, None, :].expand(2 * quarter, height, width)
    return torch.cat([pos_y, pos_x], dim=0).to(dtype)


def dynamic_conv(features: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-sample 1x1 convolution with generated weights.

    features (B, C, h, w), kernel (B, K, C), bias (B, K) -> (B, K, h, w).
    """
    return torch.einsum("bchw,bkc->bkhw", features, kernel) + bias[:, :, None, None]


class EncoderLayer(nn.Module):
    def __init__(self, c: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(c)
        self.attn = nn.MultiheadAttention(c, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(c)
        self.ffn = nn.Sequential(nn.Linear(c, ffn), nn.GELU(), nn.Linear(ffn, c))

    def forward(self, x, pos):
        h = self.norm1(x)
        x = x + self.attn(h + pos, h + pos, h, need_weights=False)[0]
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, c: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(c)
        self.self_attn = nn.MultiheadAttention(c, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(c)
        self.cross_attn = nn.MultiheadAttention(c, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(c)
        self.ffn = nn.Sequential(nn.Linear(c, ffn), nn.GELU(), nn.Linear(ffn, c))

    def forward(self, tgt, memory, pos):
        h = self.norm1(tgt)
        tgt = tgt + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.norm2(tgt)
        tgt = tgt + self.cross_attn(h, memory + pos, memory, need_weights=False)[0]
        return tgt + self.ffn(self.norm3(tgt))


@dataclass
class EncoderFeatures:
    stem2: torch.Tensor  # (B, C_s/2, H/2, W/2)
    stem: torch.Tensor  # (B, C_s, H/4, W/4)
    backbone8: torch.Tensor  # (B, C_b8, H/8, W/8)
    backbone: torch.Tensor  # (B, C_b16, H/16, W/16)
    context: torch.Tensor  # F_c (B, C, H/16, W/16)


@dataclass
class LatentCodes:
    codes: torch.Tensor  # X (B, N, C)
    queries: torch.Tensor  # Q (N, C)


@dataclass
class AuxOutputs:
    mask_logits: torch.Tensor  # M_pred (B, N, H/8, W/8)
    class_logits: torch.Tensor  # c_pred (B, N, 2); index 1 is "human"
    detail: torch.Tensor  # F_dc (B, C, H/8, W/8)
    seg_kernel: torch.Tensor = field(repr=False, default=None)
    seg_bias: torch.Tensor = field(repr=False, default=None)


class GeneralPerception(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g, c, cs = cfg.group_norm_groups, cfg.channels, cfg.stem_channels
        b8, b16 = cfg.backbone_channels
        # deep stem: stride 2 then stride 4
        self.stem_a = nn.Sequential(ConvGN(3, cs // 2, g, stride=2), ConvGN(cs // 2, cs // 2, g))
        self.stem_b = nn.Sequential(ConvGN(cs // 2, cs, g, stride=2), ConvGN(cs, cs, g))
        self.stage8 = nn.Sequential(ResBlock(cs, b8, g, stride=2), ResBlock(b8, b8, g))
        self.stage16 = nn.Sequential(ResBlock(b8, b16, g, stride=2), ResBlock(b16, b16, g))
        self.input_proj = nn.Conv2d(b16, c, 1)
        ffn = cfg.ffn_mult * c
        self.encoder = nn.ModuleList(EncoderLayer(c, cfg.heads, ffn) for _ in range(cfg.encoder_layers))
        self.encoder_norm = nn.LayerNorm(c)
        self.query_embed = nn.Parameter(torch.randn(cfg.queries, c) * 0.5)
        self.decoder = nn.ModuleList(DecoderLayer(c, cfg.heads, ffn) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(c)
        # feature decoder: F_c (stride 16) upsampled and merged with backbone stride-8 features
        self.lateral8 = nn.Sequential(nn.Conv2d(b8, c, 1, bias=False), group_norm(c, g))
        self.detail = nn.Sequential(ConvGN(c, c, g), nn.Conv2d(c, c, 3, padding=1))
        self.seg_mlp = MLP(c, c, c + 1)
        self.class_mlp = MLP(c, c, 2)

    @staticmethod
    def check_input(image: torch.Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(image.shape)}")
        if image.shape[-2] % 16 or image.shape[-1] % 16:
            raise ValueError(f"image size {tuple(image.shape[-2:])} must be divisible by 16")

    def encode(self, image: torch.Tensor) -> EncoderFeatures:
        self.check_input(image)
        s2 = self.stem_a(image)
        s4 = self.stem_b(s2)
        f8 = self.stage8(s4)
        f16 = self.stage16(f8)
        x = self.input_proj(f16)
        B, C, h, w = x.shape
        pos = self.position(h, w, x)
        tokens = x.flatten(2).transpose(1, 2)
        for layer in self.encoder:
            tokens = layer(tokens, pos)
        context = self.encoder_norm(tokens).transpose(1, 2).reshape(B, C, h, w)
        return EncoderFeatures(stem2=s2, stem=s4, backbone8=f8, backbone=f16, context=context)

    def position(self, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
        """Flattened encoding (1, h*w, C) matching ``like``'s dtype/device."""
        pos = sine_position_encoding(self.cfg.channels, h, w, dtype=like.dtype, device=like.device)
        return pos.flatten(1).T[None]

    def decode_queries(self, context: torch.Tensor, pos: torch.Tensor | None = None) -> LatentCodes:
        """Run the query decoder over F_c (B, C, h, w) or pre-flattened tokens (B, L, C)."""
        if context.ndim == 4:
            B, C, h, w = context.shape
            memory = context.flatten(2).transpose(1, 2)
            if pos is None:
                pos = self.position(h, w, context)
        else:
            memory = context
            if pos is None:
                raise ValueError("flattened memory needs explicit position encodings")
        tgt = self.query_embed[None].expand(memory.shape[0], -1, -1)
        for layer in self.decoder:
            tgt = layer(tgt, memory, pos)
        return LatentCodes(codes=self.decoder_norm(tgt), queries=self.query_embed)

    def feature_decode(self, feats: EncoderFeatures) -> torch.Tensor:
        up = F.interpolate(feats.context, size=feats.backbone8.shape[-2:], mode="bilinear", align_corners=False)
        return self.detail(up + self.lateral8(feats.backbone8))

    def aux_heads(self, codes: torch.Tensor, detail: torch.Tensor) -> AuxOutputs:
        seg = self.seg_mlp(codes)
        kernel, bias = seg[..., :-1], seg[..., -1]
        return AuxOutputs(
            mask_logits=dynamic_conv(detail, kernel, bias),
            class_logits=self.class_mlp(codes),
            detail=detail,
            seg_kernel=kernel,
            seg_bias=bias,
        )

    def forward(self, image: torch.Tensor):
        feats = self.encode(image)
        latent = self.decode_queries(feats.context)
        detail = self.feature_decode(feats)
        return feats, latent, self.aux_heads(latent.codes, detail)
