"""Alpha compositing and synthetic multi-instance scenes.

Scenes are built from layers ordered back to front. Each layer carries a raw
alpha matte and a foreground colour image; overlapping layers are resolved with
the over operator so the per-pixel sum of visible ("effective") alphas never
exceeds one, and the image is then formed as

    image = sum_k eff_k * F_k + (1 - sum_k eff_k) * B
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

BG, UNK, FG = 0, 1, 2
TRIMAP_PNG_LEVELS = (0, 128, 255)
MASK_THRESHOLD = 0.5


class ShapeError(ValueError):
    """Raised when array shapes do not agree."""


@dataclass
class InstanceRecord:
    alpha: np.ndarray  # (H, W) raw layer alpha, before occlusion
    foreground: np.ndarray  # (3, H, W)
    binary_mask: np.ndarray  # (H, W) bool
    trimap: np.ndarray  # (H, W) uint8 in {BG, UNK, FG}
    category: str = "human"

    @classmethod
    def from_layer(cls, alpha: np.ndarray, foreground: np.ndarray, **trimap_kwargs) -> "InstanceRecord":
        alpha = np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0)
        return cls(
            alpha=alpha,
            foreground=np.asarray(foreground, dtype=np.float64),
            binary_mask=alpha > MASK_THRESHOLD,
            trimap=alpha_to_trimap(alpha, **trimap_kwargs),
        )


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W)
    background: np.ndarray  # (3, H, W)
    instances: list[InstanceRecord]
    effective_alphas: np.ndarray  # (X, H, W)
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def num_instances(self) -> int:
        return len(self.instances)

    def target_masks(self) -> np.ndarray:
        return self.effective_alphas > MASK_THRESHOLD

    def target_trimaps(self, **kwargs) -> np.ndarray:
        if not len(self.effective_alphas):
            return np.zeros((0, self.height, self.width), dtype=np.uint8)
        return np.stack([alpha_to_trimap(a, **kwargs) for a in self.effective_alphas])

    def boxes(self) -> list[list[int]]:
        """Tight (x0, y0, x1, y1) boxes of the visible part of each instance; x1/y1 exclusive."""
        out = []
        for a in self.effective_alphas:
            ys, xs = np.nonzero(a > 0)
            if len(ys) == 0:
                out.append([0, 0, 0, 0])
            else:
                out.append([int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1])
        return out

    def reconstruct(self) -> np.ndarray:
        return apply_compositing(self.effective_alphas, np.stack([r.foreground for r in self.instances]), self.background)

    def residual(self) -> float:
        """max |image - reconstruction from the stored components|."""
        return float(np.abs(self.image - self.reconstruct()).max())


def occlusion_alphas(raw_alphas: np.ndarray) -> np.ndarray:
    """Back-to-front over-operator attenuation: eff_k = a_k * prod_{j>k} (1 - a_j)."""
    raw_alphas = np.asarray(raw_alphas, dtype=np.float64)
    eff = np.empty_like(raw_alphas)
    transmit = np.ones(raw_alphas.shape[1:], dtype=np.float64)
    for k in range(len(raw_alphas) - 1, -1, -1):
        eff[k] = raw_alphas[k] * transmit
        transmit = transmit * (1.0 - raw_alphas[k])
    return eff


def apply_compositing(alphas: np.ndarray, foregrounds: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Evaluate the compositing equation for already-resolved (effective) alphas."""
    alphas = np.asarray(alphas, dtype=np.float64)
    total = alphas.sum(axis=0)
    image = (1.0 - total)[None] * background
    for a, f in zip(alphas, foregrounds):
        image = image + a[None] * f
    return image


def composite(background: np.ndarray, instances: list[InstanceRecord], seed: int | None = None) -> Scene:
    """Stack ``instances`` (index 0 at the back) over ``background``."""
    if not instances:
        raise ValueError("composite needs at least one instance")
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 3 or background.shape[0] != 3:
        raise ShapeError(f"background must be 3xHxW, got {background.shape}")
    hw = background.shape[1:]
    for k, rec in enumerate(instances):
        if rec.alpha.shape != hw or rec.foreground.shape != background.shape:
            raise ShapeError(
                f"instance {k}: alpha {rec.alpha.shape} / foreground {rec.foreground.shape} "
                f"do not match background {background.shape}"
            )
    raw = np.stack([r.alpha for r in instances])
    eff = occlusion_alphas(raw)
    image = apply_compositing(eff, np.stack([r.foreground for r in instances]), background)
    return Scene(image=image, background=background, instances=list(instances), effective_alphas=eff, seed=seed)


def alpha_to_trimap(alpha: np.ndarray, lo: float = 0.01, hi: float = 0.99, dilate_radius: int = 3) -> np.ndarray:
    """FG where alpha >= hi, BG where alpha <= lo, UNK elsewhere; UNK then grown by a square of radius ``dilate_radius``."""
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    if dilate_radius < 0:
        raise ValueError("dilate_radius must be >= 0")
    alpha = np.asarray(alpha)
    trimap = np.full(alpha.shape, UNK, dtype=np.uint8)
    trimap[alpha >= hi] = FG
    trimap[alpha <= lo] = BG
    if dilate_radius > 0:
        unk = trimap == UNK
        if unk.any():
            size = 2 * dilate_radius + 1
            grown = ndimage.binary_dilation(unk, structure=np.ones((size, size), dtype=bool))
            trimap[grown] = UNK
    return trimap


# ---------------------------------------------------------------------------
# Procedural scenes
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 128
    min_instances: int = 1
    max_instances: int = 4
    # person height as a fraction of the canvas height
    min_size: float = 0.35
    max_size: float = 0.7
    limbs: int = 4
    edge_width: float = 3.0  # px of fractional alpha across each boundary
    min_visible: float = 0.5  # fraction of each instance left visible after occlusion
    placement_tries: int = 40
    trimap_lo: float = 0.01
    trimap_hi: float = 0.99
    trimap_radius: int = 3

    def validate(self) -> None:
        if self.height % 16 or self.width % 16:
            raise ValueError(f"canvas {self.height}x{self.width} must be divisible by 16")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("need 0 < min_size <= max_size")
        if self.max_size > 1.0:
            raise ValueError(f"instances of size {self.max_size} x canvas height do not fit the canvas")
        if self.max_size * self.height * 0.6 > self.width:
            raise ValueError("instances are wider than the canvas")
        if self.edge_width < 2.0:
            raise ValueError("edge_width must be >= 2 px")
        if self.limbs < 0:
            raise ValueError("limbs must be >= 0")

    def trimap_kwargs(self) -> dict:
        return dict(lo=self.trimap_lo, hi=self.trimap_hi, dilate_radius=self.trimap_radius)


def _ellipse_distance(yy, xx, cy, cx, a, b, theta):
    """Approximate signed pixel distance to a rotated ellipse (first-order, accurate near the boundary)."""
    c, s = math.cos(theta), math.sin(theta)
    u = c * (xx - cx) + s * (yy - cy)
    v = -s * (xx - cx) + c * (yy - cy)
    q = (u / a) ** 2 + (v / b) ** 2
    grad = 2.0 * np.sqrt((u / a**2) ** 2 + (v / b**2) ** 2) + 1e-9
    return (q - 1.0) / grad


def _blob_person(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    """Soft alpha of a head + torso + limbs figure at a random place on the canvas."""
    H, W = cfg.height, cfg.width
    size = rng.uniform(cfg.min_size, cfg.max_size) * H
    torso_a = size * rng.uniform(0.11, 0.16)
    torso_b = size * rng.uniform(0.2, 0.26)
    cx = rng.uniform(0.15 * W, 0.85 * W)
    cy = rng.uniform(0.2 * H, 0.8 * H)
    lean = rng.uniform(-0.3, 0.3)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    dists = [_ellipse_distance(yy, xx, cy, cx, torso_a, torso_b, lean)]
    head_r = size * rng.uniform(0.08, 0.11)
    # "up" along the torso's long axis
    ux, uy = math.sin(lean), -math.cos(lean)
    hx = cx + ux * (torso_b + 0.8 * head_r)
    hy = cy + uy * (torso_b + 0.8 * head_r)
    dists.append(_ellipse_distance(yy, xx, hy, hx, head_r, head_r * 1.15, lean))
    for k in range(cfg.limbs):
        upper = k % 2 == 0 if cfg.limbs > 2 else k == 0
        side = -1.0 if k % 4 < 2 else 1.0
        length = size * rng.uniform(0.18, 0.28)
        width = size * rng.uniform(0.035, 0.055)
        # limb anchors on the torso: shoulders for upper limbs, hips for lower
        ay = cy + (-0.6 if upper else 0.75) * torso_b
        ax = cx + side * torso_a * rng.uniform(0.5, 0.9)
        angle = rng.uniform(0.2, 1.2) * side + (0.0 if upper else rng.uniform(-0.2, 0.2))
        # limb hangs downward, rotated by ``angle``
        dx, dy = math.sin(angle), math.cos(angle)
        mx, my = ax + dx * length / 2, ay + dy * length / 2
        dists.append(_ellipse_distance(yy, xx, my, mx, width, length / 2, -angle))
    d = np.minimum.reduce(dists)
    return np.clip(0.5 - d / cfg.edge_width, 0.0, 1.0)


def random_texture(rng: np.random.Generator, H: int, W: int, base: np.ndarray, amp: float, waves: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    out = np.repeat(base[:, None, None], H, axis=1).repeat(W, axis=2).astype(np.float64)
    for _ in range(waves):
        fy, fx = rng.uniform(-0.25, 0.25, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        weights = rng.uniform(-1, 1, size=3)
        wave = np.sin(fx * xx + fy * yy + phase)
        out += amp / waves * weights[:, None, None] * wave[None]
    return np.clip(out, 0.0, 1.0)


def _visible_fraction(raw: list[np.ndarray]) -> np.ndarray:
    eff = occlusion_alphas(np.stack(raw))
    area = np.stack(raw).sum(axis=(1, 2))
    return eff.sum(axis=(1, 2)) / np.maximum(area, 1e-12)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic synthetic scene for ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    H, W = config.height, config.width
    count = int(rng.integers(config.min_instances, config.max_instances + 1))
    background = random_texture(rng, H, W, rng.uniform(0.2, 0.8, size=3), amp=0.5, waves=6)

    raw: list[np.ndarray] = []
    for _ in range(count):
        best, best_vis = None, -1.0
        for _ in range(config.placement_tries):
            cand = _blob_person(rng, config)
            vis = float(_visible_fraction(raw + [cand]).min())
            if vis > best_vis:
                best, best_vis = cand, vis
            if vis >= config.min_visible:
                break
        raw.append(best)

    records = []
    for alpha in raw:
        base = rng.uniform(0.05, 0.95, size=3)
        fg = random_texture(rng, H, W, base, amp=0.3, waves=3)
        records.append(InstanceRecord.from_layer(alpha, fg, **config.trimap_kwargs()))
    scene = composite(background, records, seed=seed)
    scene.meta = {"seed": seed, "instances": count}
    return scene


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    """All switches off by default, i.e. the identity augmentation."""

    flip_prob: float = 0.0
    affine_prob: float = 0.0
    max_rotate: float = 15.0  # degrees
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_translate: float = 0.1  # fraction of canvas
    color_prob: float = 0.0
    contrast_range: tuple[float, float] = (0.75, 1.25)
    gamma_range: tuple[float, float] = (0.75, 1.33)
    saturation_range: tuple[float, float] = (0.6, 1.4)
    crop: tuple[int, int] | None = None
    paste_prob: float = 0.0
    max_instances: int = 8
    min_area: float = 16.0  # instances with less visible alpha mass are dropped

    @classmethod
    def paper(cls, crop: int = 640, max_instances: int = 20) -> "AugmentConfig":
        return cls(flip_prob=0.5, affine_prob=0.5, color_prob=0.5, crop=(crop, crop),
                   paste_prob=0.5, max_instances=max_instances)

    def is_identity(self) -> bool:
        return (self.flip_prob == 0 and self.affine_prob == 0 and self.color_prob == 0
                and self.paste_prob == 0 and self.crop is None)


def _layers(scene: Scene):
    return (scene.background.copy(),
            [r.alpha.copy() for r in scene.instances],
            [r.foreground.copy() for r in scene.instances])


def _recompose(background, alphas, fgs, seed, meta, trimap_kwargs, min_area):
    records = [InstanceRecord.from_layer(a, f, **trimap_kwargs) for a, f in zip(alphas, fgs)]
    eff = occlusion_alphas(np.stack([r.alpha for r in records]))
    keep = [k for k in range(len(records)) if eff[k].sum() >= min_area]
    if not keep:
        keep = [int(np.argmax(eff.sum(axis=(1, 2))))]
    records = [records[k] for k in keep]
    scene = composite(background, records, seed=seed)
    scene.meta = dict(meta, instances=len(records))
    return scene


def flip_scene(scene: Scene) -> Scene:
    """Mirror every layer left-right and recomposite (exact index remap)."""
    bg, alphas, fgs = _layers(scene)
    records = [
        replace(r, alpha=a[:, ::-1].copy(), foreground=f[:, :, ::-1].copy(),
                binary_mask=r.binary_mask[:, ::-1].copy(), trimap=r.trimap[:, ::-1].copy())
        for r, a, f in zip(scene.instances, alphas, fgs)
    ]
    out = composite(bg[:, :, ::-1].copy(), records, seed=scene.seed)
    out.meta = dict(scene.meta)
    return out


def _affine(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray, mode: str) -> np.ndarray:
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset=offset, order=1, mode=mode, cval=0.0)
    return np.stack([ndimage.affine_transform(c, matrix, offset=offset, order=1, mode=mode, cval=0.0) for c in arr])


def _color(x: np.ndarray, contrast: float, gamma: float, saturation: float) -> np.ndarray:
    x = np.clip((x - 0.5) * contrast + 0.5, 0.0, 1.0)
    x = x**gamma
    gray = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None]
    return np.clip(gray + saturation * (x - gray), 0.0, 1.0)


def augment(scene: Scene, seed: int, config: AugmentConfig | None = None, donor: Scene | None = None,
            trimap_kwargs: dict | None = None) -> Scene:
    """Seeded augmentation applied to the layers, followed by recompositing.

    Geometry and colour changes act on the background, foregrounds and raw alphas,
    so the returned scene satisfies the compositing equation exactly; masks and
    trimaps are re-derived from the transformed alphas.
    """
    config = config or AugmentConfig()
    trimap_kwargs = trimap_kwargs or {}
    H, W = scene.height, scene.width
    if config.crop is not None and (config.crop[0] > H or config.crop[1] > W):
        raise ValueError(f"crop {config.crop} larger than canvas {(H, W)}")
    if config.is_identity():
        return scene
    rng = np.random.default_rng(seed)
    bg, alphas, fgs = _layers(scene)

    if donor is not None and rng.random() < config.paste_prob:
        if (donor.height, donor.width) != (H, W):
            raise ShapeError("donor scene must match the canvas size")
        room = config.max_instances - len(alphas)
        if room > 0:
            take = int(rng.integers(1, min(room, donor.num_instances) + 1))
            picks = sorted(rng.choice(donor.num_instances, size=take, replace=False).tolist())
            for k in picks:
                alphas.append(donor.instances[k].alpha.copy())
                fgs.append(donor.instances[k].foreground.copy())

    if rng.random() < config.flip_prob:
        bg = bg[:, :, ::-1].copy()
        alphas = [a[:, ::-1].copy() for a in alphas]
        fgs = [f[:, :, ::-1].copy() for f in fgs]

    if rng.random() < config.affine_prob:
        angle = math.radians(rng.uniform(-config.max_rotate, config.max_rotate))
        scale = rng.uniform(*config.scale_range)
        ty, tx = rng.uniform(-config.max_translate, config.max_translate, size=2) * (H, W)
        c, s = math.cos(angle), math.sin(angle)
        # output->input mapping about the canvas centre
        matrix = np.array([[c, -s], [s, c]]) / scale
        centre = np.array([(H - 1) / 2, (W - 1) / 2])
        offset = centre - matrix @ (centre + np.array([ty, tx]))
        bg = _affine(bg, matrix, offset, "reflect")
        alphas = [np.clip(_affine(a, matrix, offset, "constant"), 0.0, 1.0) for a in alphas]
        fgs = [_affine(f, matrix, offset, "nearest") for f in fgs]

    if rng.random() < config.color_prob:
        contrast = rng.uniform(*config.contrast_range)
        gamma = rng.uniform(*config.gamma_range)
        sat = rng.uniform(*config.saturation_range)
        bg = _color(bg, contrast, gamma, sat)
        fgs = [_color(f, contrast, gamma, sat) for f in fgs]

    if config.crop is not None:
        ch, cw = config.crop
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
        bg = bg[:, y0:y0 + ch, x0:x0 + cw].copy()
        alphas = [a[y0:y0 + ch, x0:x0 + cw].copy() for a in alphas]
        fgs = [f[:, y0:y0 + ch, x0:x0 + cw].copy() for f in fgs]

    return _recompose(bg, alphas, fgs, scene.seed, scene.meta, trimap_kwargs, config.min_area)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _from_u8(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) / 255.0


def quantize_scene(scene: Scene) -> Scene:
    """Snap all layers to 8 bits and recompose so the PNG round trip is self-consistent."""
    bg = _from_u8(_to_u8(scene.background))
    eff = _from_u8(_to_u8(scene.effective_alphas))
    raw = [_from_u8(_to_u8(r.alpha)) for r in scene.instances]
    fgs = [_from_u8(_to_u8(r.foreground)) for r in scene.instances]
    records = [replace(r, alpha=a, foreground=f) for r, a, f in zip(scene.instances, raw, fgs)]
    image = apply_compositing(eff, np.stack(fgs), bg)
    return Scene(image=image, background=bg, instances=records, effective_alphas=eff,
                 seed=scene.seed, meta=dict(scene.meta))


def _write_png(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path)


def _read_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = np.transpose(arr[..., :3], (2, 0, 1))
    return arr


def save_scene(scene: Scene, directory: str | Path, trimap_kwargs: dict | None = None) -> Path:
    """Write ``image.png, bg.png, inst_<k>_{alpha,raw,fg,trimap}.png, meta.json``.

    ``inst_<k>_alpha.png`` holds the visible (occlusion-resolved) matte, the
    ground truth used for training and evaluation; ``inst_<k>_raw.png`` keeps
    the layer alpha so the scene can be re-augmented.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q = quantize_scene(scene)
    _write_png(directory / "image.png", _to_u8(q.image))
    _write_png(directory / "bg.png", _to_u8(q.background))
    levels = np.array(TRIMAP_PNG_LEVELS, dtype=np.uint8)
    for k, (rec, eff) in enumerate(zip(q.instances, q.effective_alphas)):
        _write_png(directory / f"inst_{k}_alpha.png", _to_u8(eff))
        _write_png(directory / f"inst_{k}_raw.png", _to_u8(rec.alpha))
        _write_png(directory / f"inst_{k}_fg.png", _to_u8(rec.foreground))
        _write_png(directory / f"inst_{k}_trimap.png", levels[alpha_to_trimap(eff, **(trimap_kwargs or {}))])
    meta = dict(scene.meta)
    meta.update(seed=scene.seed, instances=scene.num_instances, height=scene.height, width=scene.width,
                boxes=q.boxes())
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_scene(directory: str | Path, trimap_kwargs: dict | None = None) -> Scene:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    image = _from_u8(_read_png(directory / "image.png"))
    bg = _from_u8(_read_png(directory / "bg.png"))
    records, eff = [], []
    for k in range(meta["instances"]):
        raw_path = directory / f"inst_{k}_raw.png"
        alpha = _from_u8(_read_png(directory / f"inst_{k}_alpha.png"))
        raw = _from_u8(_read_png(raw_path)) if raw_path.exists() else alpha
        fg = _from_u8(_read_png(directory / f"inst_{k}_fg.png"))
        records.append(InstanceRecord.from_layer(raw, fg, **(trimap_kwargs or {})))
        eff.append(alpha)
    return Scene(image=image, background=bg, instances=records, effective_alphas=np.stack(eff),
                 seed=meta.get("seed"), meta=meta)


def load_trimap_png(path: str | Path) -> np.ndarray:
    png = _read_png(Path(path))
    out = np.full(png.shape, UNK, dtype=np.uint8)
    out[png < 64] = BG
    out[png > 192] = FG
    return out
