"""United guidance network.

Each guidance head turns the latent codes into per-pixel affinities (one
channel per query plus a context-based background channel), softmaxes them
over the N+1 candidates and uses the resulting convex weights to mix the
per-query semantics vectors with a background feature map. Heads own their
parameters; their outputs are concatenated along channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .perception import MLP, ConvGN, dynamic_conv


def small_cnn(cin: int, cout: int, groups: int) -> nn.Sequential:
    return nn.Sequential(ConvGN(cin, cin, groups), nn.Conv2d(cin, cout, 1))


@dataclass
class UnitedGuidance:
    united: torch.Tensor  # G_All (B, S*C, h, w)
    per_head: list[torch.Tensor]  # G^i (B, C, h, w)
    attention: list[torch.Tensor]  # softmaxed W_sa per head, (B, N+1, 1, h, w)


class GuidanceHead(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        c = channels
        self.affinity_mlp = MLP(c, c, c + 1)  # -> k_a, b_a
        self.spatial_cnn = small_cnn(c, c, groups)  # F_sp
        self.background_weight_cnn = small_cnn(c, 1, groups)  # W_b
        self.semantics_mlp = MLP(c, c, c)  # F_rep
        self.background_feature_cnn = small_cnn(c, c, groups)  # F_bf

    def spatial_attention(self, codes: torch.Tensor, detail: torch.Tensor) -> torch.Tensor:
        """W_sa logits, shape (B, N+1, 1, h, w); channel 0 is the background weight."""
        out = self.affinity_mlp(codes)
        kernel, bias = out[..., :-1], out[..., -1]
        affinity = dynamic_conv(self.spatial_cnn(detail), kernel, bias)
        return torch.cat([self.background_weight_cnn(detail), affinity], dim=1).unsqueeze(2)

    def semantics_embed(self, codes: torch.Tensor, detail: torch.Tensor, attention_logits: torch.Tensor):
        """Return (G, softmax weights)."""
        weights = torch.softmax(attention_logits, dim=1)
        rep = self.semantics_mlp(codes)  # (B, N, C)
        background = self.background_feature_cnn(detail)  # (B, C, h, w)
        return mix_candidates(weights, background, rep), weights

    def forward(self, codes: torch.Tensor, detail: torch.Tensor):
        return self.semantics_embed(codes, detail, self.spatial_attention(codes, detail))


def mix_candidates(weights: torch.Tensor, background: torch.Tensor, rep: torch.Tensor) -> torch.Tensor:
    """Sum over candidates of weight * Concat(F_bf, broadcast F_rep).

    weights (B, N+1, 1, h, w); background (B, C, h, w); rep (B, N, C).
    The query vectors have no spatial extent, so broadcasting them to (h, w)
    is folded into the contraction.
    """
    w = weights[:, :, 0]
    return w[:, :1] * background + torch.einsum("bnhw,bnc->bchw", w[:, 1:], rep)


def united_guidance(codes: torch.Tensor, detail: torch.Tensor, heads) -> UnitedGuidance:
    """Run every head and concatenate the per-head guidance along channels."""
    if len(heads) == 0:
        raise ValueError("united guidance needs at least one head")
    per_head, attention = [], []
    for head in heads:
        g, w = head(codes, detail)
        per_head.append(g)
        attention.append(w)
    return UnitedGuidance(united=torch.cat(per_head, dim=1), per_head=per_head, attention=attention)


class UnitedGuidanceNetwork(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        if heads < 1:
            raise ValueError("united guidance needs at least one head")
        self.heads = nn.ModuleList(GuidanceHead(channels, groups) for _ in range(heads))

    def forward(self, codes: torch.Tensor, detail: torch.Tensor) -> UnitedGuidance:
        return united_guidance(codes, detail, self.heads)
