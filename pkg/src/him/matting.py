"""Instance matting network: guided feature fusion, refinement and dynamic decoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .perception import MLP, ConvGN, dynamic_conv

# trimap channel order used everywhere (losses, fusion, ground truth)
TRIMAP_BG, TRIMAP_UNK, TRIMAP_FG = 0, 1, 2


def _resize(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


class UNet(nn.Module):
    """Small U-Net; downsampling uses strided convs so any spatial size >= 1 works."""

    def __init__(self, channels: int, depth: int, groups: int):
        super().__init__()
        widths = [channels * min(2**i, 4) for i in range(depth + 1)]
        self.inc = nn.Sequential(ConvGN(channels, channels, groups), ConvGN(channels, channels, groups))
        self.down = nn.ModuleList(
            nn.Sequential(ConvGN(widths[i], widths[i + 1], groups, stride=2), ConvGN(widths[i + 1], widths[i + 1], groups))
            for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(ConvGN(widths[i + 1] + widths[i], widths[i], groups), ConvGN(widths[i], widths[i], groups))
            for i in reversed(range(depth))
        )

    def forward(self, x):
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        x = skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = block(torch.cat([_resize(x, skip), skip], dim=1))
        return x


class FeatureFusion(nn.Module):
    """Concatenate image features (resampled to stride 8) with G_All and fuse with a U-Net."""

    def __init__(self, backbone_channels: tuple[int, int], guidance_channels: int, out_channels: int, depth: int,
                 groups: int):
        super().__init__()
        self.guidance_channels = guidance_channels
        cin = backbone_channels[0] + backbone_channels[1] + guidance_channels
        self.proj = ConvGN(cin, out_channels, groups)
        self.unet = UNet(out_channels, depth, groups)

    def forward(self, backbone8: torch.Tensor, backbone16: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if guidance.shape[1] != self.guidance_channels:
            raise ValueError(f"guidance has {guidance.shape[1]} channels, fusion expects {self.guidance_channels}")
        x = torch.cat([backbone8, _resize(backbone16, backbone8), guidance], dim=1)
        return self.unet(self.proj(x))


@dataclass
class MattingFeatures:
    alpha: torch.Tensor  # F_alpha (B, C_alpha, H, W)
    trimap: torch.Tensor  # F_tri (B, C_tri, H/2, W/2)


class Refiner(nn.Module):
    """x2 upsampling steps with skips from the stem (stride 4, 2) and the image (stride 1)."""

    def __init__(self, fused: int, stem: int, trimap_channels: int, alpha_channels: int, groups: int):
        super().__init__()
        mid = max(trimap_channels, alpha_channels)
        self.to4 = nn.Sequential(ConvGN(fused + stem, mid, groups), ConvGN(mid, mid, groups))
        self.to2 = nn.Sequential(ConvGN(mid + stem // 2, mid, groups), ConvGN(mid, mid, groups))
        self.trimap_out = nn.Conv2d(mid, trimap_channels, 3, padding=1)
        self.to1 = nn.Sequential(ConvGN(mid + 3, alpha_channels, groups), ConvGN(alpha_channels, alpha_channels, groups))
        self.alpha_out = nn.Conv2d(alpha_channels, alpha_channels, 3, padding=1)

    def forward(self, fused, stem4, stem2, image) -> MattingFeatures:
        x = self.to4(torch.cat([_resize(fused, stem4), stem4], dim=1))
        x = self.to2(torch.cat([_resize(x, stem2), stem2], dim=1))
        f_tri = self.trimap_out(x)
        x = self.to1(torch.cat([_resize(x, image), image], dim=1))
        return MattingFeatures(alpha=self.alpha_out(x), trimap=f_tri)


class TrimapDecoder(nn.Module):
    def __init__(self, channels: int, trimap_channels: int):
        super().__init__()
        self.trimap_channels = trimap_channels
        self.mlp = MLP(channels, channels, 3 * (trimap_channels + 1))

    def forward(self, codes: torch.Tensor, f_tri: torch.Tensor) -> torch.Tensor:
        """Trimap logits (B, N, 3, H, W) at twice the resolution of ``f_tri``."""
        B, N, _ = codes.shape
        out = self.mlp(codes).reshape(B, N * 3, self.trimap_channels + 1)
        logits = dynamic_conv(f_tri, out[..., :-1], out[..., -1])
        logits = F.interpolate(logits, scale_factor=2, mode="bilinear", align_corners=False)
        return logits.reshape(B, N, 3, *logits.shape[-2:])


class AlphaDecoder(nn.Module):
    def __init__(self, channels: int, alpha_channels: int):
        super().__init__()
        self.mlp = MLP(channels, channels, alpha_channels + 1)

    def forward(self, codes: torch.Tensor, f_alpha: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """Boundary alpha (B, N, 1, H, W), clamped to [0, 1] unless ``clamp=False``."""
        out = self.mlp(codes)
        alpha = dynamic_conv(f_alpha, out[..., :-1], out[..., -1]).unsqueeze(2)
        return alpha.clamp(0.0, 1.0) if clamp else alpha


@dataclass
class InstancePredictions:
    trimap_logits: torch.Tensor  # T_pred (B, N, 3, H, W)
    alpha_pred: torch.Tensor  # (B, N, 1, H, W), clamped
    alpha_fin: torch.Tensor  # (B, N, 1, H, W)
    unknown: torch.Tensor  # U_pred bool (B, N, 1, H, W)
    foreground: torch.Tensor  # F_pred bool (B, N, 1, H, W)


def trimap_regions(trimap_logits: torch.Tensor):
    """(unknown, foreground) boolean maps from the channel argmax; ties go to the lowest channel."""
    label = trimap_logits.argmax(dim=-3, keepdim=True)
    return label == TRIMAP_UNK, label == TRIMAP_FG


def fuse_alpha(alpha_pred: torch.Tensor, trimap_logits: torch.Tensor) -> InstancePredictions:
    """alpha_fin = alpha_pred * U_pred + F_pred, so predicted background is 0."""
    alpha_pred = alpha_pred.clamp(0.0, 1.0)
    unknown, foreground = trimap_regions(trimap_logits)
    alpha_fin = alpha_pred * unknown.to(alpha_pred.dtype) + foreground.to(alpha_pred.dtype)
    return InstancePredictions(trimap_logits=trimap_logits, alpha_pred=alpha_pred, alpha_fin=alpha_fin,
                               unknown=unknown, foreground=foreground)


@dataclass
class SelectedInstances:
    indices: list[int]
    scores: list[float]
    alphas: torch.Tensor  # (K, H, W)


def select_instances(class_logits: torch.Tensor, alpha_fin: torch.Tensor, threshold: float = 0.5) -> SelectedInstances:
    """Keep queries whose human probability is >= ``threshold`` (single image: logits (N, 2), alphas (N, 1, H, W))."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    prob = torch.softmax(class_logits, dim=-1)[..., 1]
    keep = (prob >= threshold).nonzero().flatten()
    alphas = alpha_fin.reshape(alpha_fin.shape[0], *alpha_fin.shape[-2:])
    return SelectedInstances(indices=keep.tolist(), scores=prob[keep].tolist(), alphas=alphas[keep])


class InstanceMattingNetwork(nn.Module):
    def __init__(self, channels: int, guidance_heads: int, backbone_channels: tuple[int, int], stem_channels: int,
                 fuse_channels: int, unet_depth: int, trimap_channels: int, alpha_channels: int, groups: int):
        super().__init__()
        self.fusion = FeatureFusion(backbone_channels, guidance_heads * channels, fuse_channels, unet_depth, groups)
        self.refiner = Refiner(fuse_channels, stem_channels, trimap_channels, alpha_channels, groups)
        self.trimap_decoder = TrimapDecoder(channels, trimap_channels)
        self.alpha_decoder = AlphaDecoder(channels, alpha_channels)

    def fuse(self, backbone8, backbone16, guidance):
        return self.fusion(backbone8, backbone16, guidance)

    def refine(self, fused, stem4, stem2, image) -> MattingFeatures:
        return self.refiner(fused, stem4, stem2, image)

    def decode_trimaps(self, codes, f_tri):
        return self.trimap_decoder(codes, f_tri)

    def decode_boundary_alpha(self, codes, f_alpha, clamp: bool = True):
        return self.alpha_decoder(codes, f_alpha, clamp=clamp)
