"""Training loop, inference helpers and dataset evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .compositing import Scene, augment, generate_scene, load_scene, save_scene
from .config import RunConfig
from .matting import select_instances
from .metrics import MetricsReport, build_report, evaluate_image
from .model import InstanceMattingModel
from .perception import NetworkConfig
from .supervision import SetCriterion, scene_targets

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "HIM_DETERMINISTIC"
LOG_KEYS = ("L_cls", "L_seg", "L_tri", "L_alpha", "L_total")


class TrainingDiverged(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def scene_ids(data_dir: str | Path) -> list[str]:
    root = Path(data_dir) / "scenes"
    if not root.is_dir():
        raise FileNotFoundError(f"{data_dir}: no scenes/ directory")
    return sorted(p.name for p in root.iterdir() if (p / "meta.json").exists())


def load_dataset(data_dir: str | Path, trimap_kwargs: dict | None = None) -> tuple[list[str], list[Scene]]:
    ids = scene_ids(data_dir)
    return ids, [load_scene(Path(data_dir) / "scenes" / i, trimap_kwargs) for i in ids]


def write_dataset(config: RunConfig, count: int, out_dir: str | Path, first_seed: int | None = None) -> Path:
    out_dir = Path(out_dir)
    first_seed = config.seed if first_seed is None else first_seed
    manifest = {"count": count, "scene_config": config.to_dict()["data"], "scenes": []}
    for k in range(count):
        seed = first_seed + k
        scene = generate_scene(config.data, seed)
        sid = f"{k:05d}"
        save_scene(scene, out_dir / "scenes" / sid, config.data.trimap_kwargs())
        manifest["scenes"].append({"id": sid, "seed": seed, "instances": scene.num_instances})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _lr_lambda(total: int, warmup: int):
    def fn(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        t = min(step, total) / max(total, 1)
        return 0.5 * (1.0 + math.cos(math.pi * t))
    return fn


@dataclass
class StepResult:
    step: int
    losses: dict[str, float]
    lr: float


class Trainer:
    """Single-writer training loop.

    Batches and augmentations are drawn from generators seeded by
    ``(seed, step)``, so a run resumed from a checkpoint sees exactly the data
    the uninterrupted run would have seen.
    """

    def __init__(self, config: RunConfig, scenes: list[Scene], out_dir: str | Path | None = None,
                 dtype: torch.dtype = torch.float32):
        config.validate()
        if not scenes:
            raise ValueError("training needs at least one scene")
        self.config = config
        self.scenes = scenes
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = dtype
        self.total_steps = config.total_steps(len(scenes))
        torch.manual_seed(config.seed)
        self.model = InstanceMattingModel(config.model).to(dtype)
        o = config.optim
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=o.lr, betas=tuple(o.betas),
                                           weight_decay=o.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _lr_lambda(self.total_steps, o.warmup_steps))
        self.criterion = SetCriterion(config.loss)
        self.step = 0
        self._targets_cache: dict[int, object] = {}

    # -- data ---------------------------------------------------------------

    def batch(self, step: int):
        rng = np.random.default_rng([self.config.seed, step])
        n = len(self.scenes)
        bs = self.config.optim.batch_size
        idx = rng.choice(n, size=bs, replace=bs > n)
        images, targets = [], []
        identity = self.config.augment.is_identity()
        for i in idx:
            scene = self.scenes[int(i)]
            if identity:
                target = self._targets_cache.get(int(i))
                if target is None:
                    target = self._targets_cache[int(i)] = scene_targets(scene, 8, self.config.data.trimap_kwargs(),
                                                                          self.dtype)
            else:
                donor = self.scenes[int(rng.integers(n))]
                scene = augment(scene, int(rng.integers(2**31)), self.config.augment, donor=donor,
                                trimap_kwargs=self.config.data.trimap_kwargs())
                target = scene_targets(scene, 8, self.config.data.trimap_kwargs(), self.dtype)
            images.append(torch.from_numpy(scene.image).to(self.dtype))
            targets.append(target)
        return torch.stack(images), targets, idx

    # -- steps --------------------------------------------------------------

    def train_step(self) -> StepResult:
        self.model.train()
        images, targets, idx = self.batch(self.step)
        output = self.model(images)
        if not (torch.isfinite(output.class_logits).all() and torch.isfinite(output.mask_logits).all()):
            self._dump(images, idx, None)
            raise TrainingDiverged(f"non-finite network output at step {self.step}")
        losses, _ = self.criterion(output, targets)
        if not torch.isfinite(losses.total):
            self._dump(images, idx, losses)
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {losses.as_dict()}")
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if self.config.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.optim.grad_clip)
        lr = self.optimizer.param_groups[0]["lr"]
        self.optimizer.step()
        self.scheduler.step()
        result = StepResult(self.step, losses.as_dict(), lr)
        self.step += 1
        return result

    def _dump(self, images, idx, losses) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"diverged_step{self.step}.npz"
        np.savez(path, images=images.detach().cpu().numpy(), scene_indices=np.asarray(idx),
                 losses=json.dumps(losses.as_dict() if losses is not None else None))
        log.error("non-finite loss; offending batch written to %s", path)

    def run(self, steps: int | None = None, log_file=None, callback=None) -> list[dict]:
        """Train until ``steps`` more steps (default: to the end of the schedule) have run."""
        end = self.total_steps if steps is None else min(self.step + steps, self.total_steps)
        records = []
        while self.step < end:
            res = self.train_step()
            record = {"step": res.step, **{k: res.losses[k] for k in LOG_KEYS}}
            records.append(record)
            if log_file is not None and res.step % self.config.log_every == 0:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if self.out_dir is not None and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoints" / f"step_{self.step:06d}.pt")
            if callback is not None:
                callback(res)
        return records

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, self.config, self.optimizer, self.scheduler, self.step)

    @classmethod
    def resume(cls, path: str | Path, scenes: list[Scene], out_dir=None) -> "Trainer":
        payload = load_checkpoint(path)
        config = RunConfig.from_dict(payload["config_dict"])
        dtype = next(iter(payload["parameters"].values())).dtype
        trainer = cls(config, scenes, out_dir, dtype=dtype)
        restore_model(payload, trainer.model)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.scheduler.load_state_dict(payload["scheduler"])
        trainer.step = payload["step"]
        return trainer


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def load_model(checkpoint: str | Path) -> tuple[InstanceMattingModel, RunConfig]:
    payload = load_checkpoint(checkpoint)
    config = RunConfig.from_dict(payload["config_dict"])
    model = InstanceMattingModel(config.model)
    dtype = next(iter(payload["parameters"].values())).dtype
    model = model.to(dtype)
    restore_model(payload, model)
    model.eval()
    return model, config


@dataclass
class Prediction:
    indices: list[int]
    scores: list[float]
    alphas: np.ndarray  # (K, H, W)
    output: object = None


@torch.no_grad()
def predict(model: InstanceMattingModel, image: np.ndarray, threshold: float = 0.5, keep_output: bool = False) -> Prediction:
    """Predict instance mattes for one (3, H, W) image in [0, 1]; pads to a multiple of 16 by reflection."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype)[None]
    H, W = x.shape[-2:]
    ph, pw = (-H) % 16, (-W) % 16
    if ph or pw:
        mode = "reflect" if ph < H and pw < W else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    out = model(x)
    sel = select_instances(out.class_logits[0], out.alpha_fin[0], threshold)
    alphas = sel.alphas[:, :H, :W].double().numpy()
    return Prediction(sel.indices, sel.scores, alphas, out if keep_output else None)


def evaluate_scenes(model: InstanceMattingModel | None, scenes: list[Scene], names: list[str] | None = None,
                    threshold: float = 0.5, oracle: bool = False) -> MetricsReport:
    """Score predictions against the visible ground-truth mattes; ``oracle`` feeds the ground truth through."""
    results = []
    for scene in scenes:
        gts = list(scene.effective_alphas)
        preds = gts if oracle else list(predict(model, scene.image, threshold).alphas)
        results.append(evaluate_image(preds, gts))
    return build_report(results, names)


def build_model(config: NetworkConfig | dict) -> InstanceMattingModel:
    if isinstance(config, dict):
        config = NetworkConfig.from_dict(config)
    return InstanceMattingModel(config)
