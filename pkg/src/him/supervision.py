"""Matching-based set supervision: matching costs, assignment and losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .assignment import linear_sum_assignment
from .compositing import Scene
from .matting import TRIMAP_UNK, trimap_regions

HUMAN, BACKGROUND_CLASS = 1, 0


@dataclass
class LossWeights:
    cls: float = 5.0
    seg: float = 1.0
    focal: float = 0.1
    dice: float = 1.0
    trimap: float = 10.0
    alpha: float = 5.0
    pred_unknown: float = 3.0
    gt_unknown: float = 5.0
    perception: float = 1.0
    matting: float = 1.0
    background_class_weight: float = 0.1
    human_class_weight: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


# ---------------------------------------------------------------------------
# Elementary losses
# ---------------------------------------------------------------------------


def focal_bce(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean over elements of (1 - p_t)^gamma * -log(p_t)."""
    target = target.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    p = log_p.exp()
    pos = -((1 - p) ** gamma) * log_p
    neg = -(p**gamma) * log_q
    return (target * pos + (1 - target) * neg).mean()


def pairwise_focal_bce(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """(N, P) logits x (X, P) binary targets -> (N, X) mean focal BCE per pair."""
    targets = targets.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    p = log_p.exp()
    pos = -((1 - p) ** gamma) * log_p
    neg = -(p**gamma) * log_q
    return (pos @ targets.T + neg @ (1 - targets).T) / logits.shape[-1]


def dice_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    prob = prob.flatten()
    target = target.flatten().to(prob.dtype)
    return 1 - (2 * (prob * target).sum() + eps) / (prob.sum() + target.sum() + eps)


def pairwise_dice(prob: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """(N, P) probabilities x (X, P) targets -> (N, X) dice losses."""
    targets = targets.to(prob.dtype)
    inter = prob @ targets.T
    return 1 - (2 * inter + eps) / (prob.sum(-1)[:, None] + targets.sum(-1)[None, :] + eps)


def focal_ce(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Multi-class focal cross entropy; class axis is dim -3 of ``logits`` (..., K, H, W)."""
    log_p = torch.log_softmax(logits, dim=-3)
    log_pt = log_p.gather(-3, labels.long().unsqueeze(-3)).squeeze(-3)
    return (-((1 - log_pt.exp()) ** gamma) * log_pt).mean()


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@dataclass
class CostMatrix:
    values: np.ndarray  # (N, X)
    class_cost: np.ndarray  # (N,)
    focal_cost: np.ndarray  # (N, X)
    dice_cost: np.ndarray  # (N, X)


@dataclass
class Assignment:
    queries: np.ndarray  # matched query index per pair
    targets: np.ndarray  # matched target index per pair
    num_queries: int

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.queries.tolist(), self.targets.tolist()))

    @property
    def matched(self) -> set[int]:
        return set(self.queries.tolist())

    def query_labels(self) -> np.ndarray:
        labels = np.full(self.num_queries, BACKGROUND_CLASS, dtype=np.int64)
        labels[self.queries] = HUMAN
        return labels


@torch.no_grad()
def match_cost(class_logits: torch.Tensor, mask_logits: torch.Tensor, target_masks: torch.Tensor,
               gamma: float = 2.0) -> CostMatrix:
    """Per (query, target) cost: -p(human) + focal BCE + dice on stride-8 masks."""
    N, X = class_logits.shape[0], target_masks.shape[0]
    if X > N:
        raise ValueError(f"{X} targets but only {N} queries")
    class_cost = -torch.softmax(class_logits, dim=-1)[:, HUMAN]
    logits = mask_logits.flatten(1)
    targets = target_masks.flatten(1).to(logits.dtype)
    focal = pairwise_focal_bce(logits, targets, gamma)
    dice = pairwise_dice(logits.sigmoid(), targets)
    values = class_cost[:, None] + focal + dice
    return CostMatrix(values=values.cpu().double().numpy(), class_cost=class_cost.cpu().double().numpy(),
                      focal_cost=focal.cpu().double().numpy(), dice_cost=dice.cpu().double().numpy())


def assign(costs: CostMatrix | np.ndarray) -> Assignment:
    values = costs.values if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    N, X = values.shape
    if X > N:
        raise ValueError(f"{X} targets but only {N} queries")
    rows, cols = linear_sum_assignment(values)
    order = np.argsort(cols, kind="stable")
    return Assignment(queries=rows[order], targets=cols[order], num_queries=N)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    seg: torch.Tensor
    perception: torch.Tensor
    trimap: torch.Tensor
    alpha: torch.Tensor
    matting: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        values = self.stack().detach().tolist()
        return dict(zip(("L_cls", "L_seg", "L_p", "L_tri", "L_alpha", "L_m", "L_total"), values))

    def stack(self) -> torch.Tensor:
        return torch.stack([self.cls, self.seg, self.perception, self.trimap, self.alpha, self.matting, self.total])


def perception_loss(class_logits, mask_logits, assignment: Assignment, target_masks, weights: LossWeights):
    """(L_cls, L_seg, L_p) for one image; masks are (N, h, w) logits vs (X, h, w) targets."""
    N = class_logits.shape[0]
    labels = torch.as_tensor(assignment.query_labels(), device=class_logits.device)
    class_w = torch.full((N,), weights.background_class_weight, dtype=class_logits.dtype, device=class_logits.device)
    class_w[labels == HUMAN] = weights.human_class_weight
    ce = F.cross_entropy(class_logits, labels, reduction="none")
    l_cls = (class_w * ce).sum() / N
    if len(assignment.queries):
        q = torch.as_tensor(assignment.queries, device=mask_logits.device)
        t = torch.as_tensor(assignment.targets, device=mask_logits.device)
        logits = mask_logits[q].flatten(1)
        target = target_masks[t].flatten(1).to(logits.dtype)
        focal = torch.stack([focal_bce(a, b, weights.gamma) for a, b in zip(logits, target)])
        dice = torch.stack([dice_loss(a.sigmoid(), b) for a, b in zip(logits, target)])
        l_seg = (weights.focal * focal + weights.dice * dice).mean()
    else:
        l_seg = mask_logits.sum() * 0
    return l_cls, l_seg, weights.cls * l_cls + weights.seg * l_seg


def _guarded_mean_abs(diff: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    count = region.sum()
    if count == 0:
        return diff.sum() * 0
    return (diff * region.to(diff.dtype)).sum() / count.to(diff.dtype)


def matting_loss(trimap_logits, alpha_pred, assignment: Assignment, target_trimaps, target_alphas,
                 weights: LossWeights, pred_unknown: torch.Tensor | None = None):
    """(L_tri, L_alpha, L_m) for one image.

    trimap_logits (N, 3, H, W); alpha_pred (N, 1, H, W) clamped; targets (X, H, W).
    ``pred_unknown`` (N, 1, H, W) overrides the argmax unknown region, which lets
    callers hold the piecewise-constant region fixed (e.g. finite differences).
    """
    if not len(assignment.queries):
        zero = trimap_logits.sum() * 0 + alpha_pred.sum() * 0
        return zero, zero, zero
    q = torch.as_tensor(assignment.queries, device=trimap_logits.device)
    t = torch.as_tensor(assignment.targets, device=trimap_logits.device)
    tri_logits = trimap_logits[q]
    tri_target = target_trimaps[t].long()
    l_tri = torch.stack([focal_ce(a, b, weights.gamma) for a, b in zip(tri_logits, tri_target)]).mean()

    if pred_unknown is None:
        pred_unknown = trimap_regions(trimap_logits.detach())[0]
    alpha = alpha_pred[q, 0]
    diff = (alpha - target_alphas[t].to(alpha.dtype)).abs()
    l_alpha = (weights.pred_unknown * _guarded_mean_abs(diff, pred_unknown[q, 0])
               + weights.gt_unknown * _guarded_mean_abs(diff, tri_target == TRIMAP_UNK))
    return l_tri, l_alpha, weights.trimap * l_tri + weights.alpha * l_alpha


def total_loss(l_p, l_m, weights: LossWeights):
    return weights.perception * l_p + weights.matting * l_m


# ---------------------------------------------------------------------------
# Batched criterion
# ---------------------------------------------------------------------------


@dataclass
class Targets:
    masks: torch.Tensor  # (X, h, w) bool at the mask-logit stride
    trimaps: torch.Tensor  # (X, H, W) long in {BG, UNK, FG}
    alphas: torch.Tensor  # (X, H, W) visible alphas

    @property
    def count(self) -> int:
        return self.alphas.shape[0]


def downsample_masks(masks: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average binary masks to ``size`` then re-binarise at 0.5."""
    if masks.shape[0] == 0:
        return torch.zeros((0, *size), dtype=torch.bool)
    pooled = F.interpolate(masks[:, None].double(), size=size, mode="area")[:, 0]
    return pooled >= 0.5


def scene_targets(scene: Scene, stride: int = 8, trimap_kwargs: dict | None = None,
                  dtype: torch.dtype = torch.float32) -> Targets:
    masks = torch.from_numpy(scene.target_masks())
    size = (scene.height // stride, scene.width // stride)
    return Targets(
        masks=downsample_masks(masks, size),
        trimaps=torch.from_numpy(scene.target_trimaps(**(trimap_kwargs or {})).astype(np.int64)),
        alphas=torch.from_numpy(scene.effective_alphas).to(dtype),
    )


@dataclass
class Decisions:
    """Non-differentiable per-image choices made during a loss evaluation."""

    assignments: list[Assignment]
    pred_unknown: list[torch.Tensor] = field(default_factory=list)


class SetCriterion:
    def __init__(self, weights: LossWeights | None = None):
        self.weights = weights or LossWeights()

    def __call__(self, output, targets: list[Targets], decisions: Decisions | None = None):
        """Batch-mean loss breakdown and the decisions used to compute it."""
        w = self.weights
        aux, pred = output.aux, output.predictions
        B = aux.class_logits.shape[0]
        if decisions is None:
            assignments = [
                assign(match_cost(aux.class_logits[b].detach(), aux.mask_logits[b].detach(), targets[b].masks, w.gamma))
                for b in range(B)
            ]
            unknown = [trimap_regions(pred.trimap_logits[b].detach())[0] for b in range(B)]
            decisions = Decisions(assignments, unknown)
        parts = []
        for b in range(B):
            a = decisions.assignments[b]
            l_cls, l_seg, l_p = perception_loss(aux.class_logits[b], aux.mask_logits[b], a, targets[b].masks, w)
            l_tri, l_alpha, l_m = matting_loss(pred.trimap_logits[b], pred.alpha_pred[b], a, targets[b].trimaps,
                                               targets[b].alphas, w, pred_unknown=decisions.pred_unknown[b])
            parts.append(torch.stack([l_cls, l_seg, l_p, l_tri, l_alpha, l_m, total_loss(l_p, l_m, w)]))
        mean = torch.stack(parts).mean(0)
        return LossBreakdown(*mean.unbind(0)), decisions
