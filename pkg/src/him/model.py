"""The end-to-end instance matting model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .guidance import UnitedGuidance, UnitedGuidanceNetwork
from .matting import InstanceMattingNetwork, InstancePredictions, MattingFeatures, fuse_alpha
from .perception import AuxOutputs, EncoderFeatures, GeneralPerception, LatentCodes, NetworkConfig


@dataclass
class ModelOutput:
    features: EncoderFeatures
    latent: LatentCodes
    aux: AuxOutputs
    guidance: UnitedGuidance
    fused: torch.Tensor
    matting_features: MattingFeatures
    predictions: InstancePredictions

    @property
    def class_logits(self):
        return self.aux.class_logits

    @property
    def mask_logits(self):
        return self.aux.mask_logits

    @property
    def alpha_fin(self):
        return self.predictions.alpha_fin


class InstanceMattingModel(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.perception = GeneralPerception(cfg)
        self.guidance = UnitedGuidanceNetwork(cfg.channels, cfg.guidance_heads, cfg.group_norm_groups)
        self.matting = InstanceMattingNetwork(
            cfg.channels, cfg.guidance_heads, cfg.backbone_channels, cfg.stem_channels, cfg.fuse_channels,
            cfg.unet_depth, cfg.trimap_channels, cfg.alpha_channels, cfg.group_norm_groups,
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # boundary alpha starts mid-range so the clamp does not swallow early gradients
        last = self.matting.alpha_decoder.mlp.net[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.zero_()
            last.bias[-1] = 0.5

    def forward(self, image: torch.Tensor) -> ModelOutput:
        feats, latent, aux = self.perception(image)
        guidance = self.guidance(latent.codes, aux.detail)
        fused = self.matting.fuse(feats.backbone8, feats.backbone, guidance.united)
        mfeats = self.matting.refine(fused, feats.stem, feats.stem2, image)
        trimap_logits = self.matting.decode_trimaps(latent.codes, mfeats.trimap)
        alpha_pred = self.matting.decode_boundary_alpha(latent.codes, mfeats.alpha)
        return ModelOutput(
            features=feats, latent=latent, aux=aux, guidance=guidance, fused=fused, matting_features=mfeats,
            predictions=fuse_alpha(alpha_pred, trimap_logits),
        )
