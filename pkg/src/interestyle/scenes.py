"""Synthetic, ground-truth-labeled scenes.

Each scene composites generator-rendered interest content (an elliptical
cutout of a rendered image) onto a procedural background that the generator
cannot produce (value noise plus stripe/checker patterns), optionally
overwritten by an occluder that crosses the interest boundary. The interest
mask marks exactly where generable content is visible: occluded pixels are
removed from it. Every sample is a pure function of its seed.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import imageio
from .container import load_arrays, save_arrays
from .generator import Generator, broadcast
from .regions import dilate_mask
from .util import atomic_write_bytes, sha256_file

OCCLUSION_KINDS = ("none", "bar", "blob")


@dataclass(frozen=True)
class SceneConfig:
    occluder_prob: float = 0.3
    occluder_min_frac: float = 0.08
    occluder_max_frac: float = 0.25
    bar_weight: float = 0.5
    blob_weight: float = 0.5
    ellipse_min_frac: float = 0.26
    ellipse_max_frac: float = 0.42
    center_jitter_frac: float = 0.08
    noise_cell_min: int = 4
    noise_cell_max: int = 16
    stripe_prob: float = 0.35
    checker_prob: float = 0.25
    dilation_radius: int = 3
    eval_every: int = 10

    def __post_init__(self):
        for name in ("occluder_prob", "stripe_prob", "checker_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if self.stripe_prob + self.checker_prob > 1.0:
            raise ValueError("stripe_prob + checker_prob must not exceed 1")
        if self.bar_weight < 0 or self.blob_weight < 0 or self.bar_weight + self.blob_weight == 0:
            raise ValueError("occluder kind weights must be nonnegative and not all zero")
        if self.eval_every < 2:
            raise ValueError("eval_every must be >= 2")


@dataclass
class SceneSample:
    image: torch.Tensor          # (C,H,W) composite in [0,1]
    mask: torch.Tensor           # (H,W) binary interest mask, occluded pixels removed
    dilated_mask: torch.Tensor   # (H,W) binary, dilation of `mask`
    latent_gt: torch.Tensor      # (L,d) latent whose render supplied the interest content
    occlusion_kind: str
    coverage: float              # fraction of interest-support pixels under the occluder
    sample_id: Optional[str] = None


def _value_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    """Bilinear upsample of a coarse random grid -> (H,W,3) in [0,1]."""
    gh = size // cell + 2
    grid = rng.uniform(0.0, 1.0, size=(gh, gh, 3))
    coords = (np.arange(size) + 0.5) / cell
    i0 = np.floor(coords).astype(int)
    frac = coords - i0
    fy, fx = frac[:, None, None], frac[None, :, None]
    iy0, ix0 = i0[:, None], i0[None, :]
    top = grid[iy0, ix0] * (1 - fx) + grid[iy0, ix0 + 1] * fx
    bot = grid[iy0 + 1, ix0] * (1 - fx) + grid[iy0 + 1, ix0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _background(rng: np.random.Generator, size: int, scfg: SceneConfig) -> np.ndarray:
    cell = int(rng.integers(scfg.noise_cell_min, scfg.noise_cell_max + 1))
    bg = _value_noise(rng, size, cell)
    style = rng.uniform()
    if style < scfg.stripe_prob + scfg.checker_prob:
        period = int(rng.integers(3, 11))
        phase = int(rng.integers(0, period))
        c0 = rng.uniform(0.0, 1.0, size=3)
        c1 = rng.uniform(0.0, 1.0, size=3)
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        if style < scfg.stripe_prob:
            orient = int(rng.integers(0, 3))
            s = (xs, ys, xs + ys)[orient]
            band = ((s + phase) // period) % 2
        else:
            band = (((xs + phase) // period) + ((ys + phase) // period)) % 2
        pattern = np.where(band[..., None] == 0, c0, c1)
        bg = 0.5 * bg + 0.5 * pattern
    return bg


def _ellipse_support(rng: np.random.Generator, size: int, scfg: SceneConfig):
    a = rng.uniform(scfg.ellipse_min_frac, scfg.ellipse_max_frac) * size
    b = rng.uniform(scfg.ellipse_min_frac, scfg.ellipse_max_frac) * size
    theta = rng.uniform(0.0, math.pi)
    jitter = scfg.center_jitter_frac * size
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dx, dy = xs - cx, ys - cy
    xr = dx * math.cos(theta) + dy * math.sin(theta)
    yr = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    return inside.astype(np.float64), (cx, cy, a, b, theta)


def _boundary_point(geom, rng: np.random.Generator, size: int):
    cx, cy, a, b, theta = geom
    t = rng.uniform(0.0, 2 * math.pi)
    ex, ey = a * math.cos(t), b * math.sin(t)
    px = cx + ex * math.cos(theta) - ey * math.sin(theta)
    py = cy + ex * math.sin(theta) + ey * math.cos(theta)
    return float(np.clip(px, 0, size - 1)), float(np.clip(py, 0, size - 1))


def _occluder_region(rng: np.random.Generator, size: int, scfg: SceneConfig, geom):
    """Binary occluder footprint crossing the interest boundary, plus its kind."""
    weights = np.array([scfg.bar_weight, scfg.blob_weight])
    kind = ("bar", "blob")[int(rng.uniform() * weights.sum() >= weights[0])]
    bx, by = _boundary_point(geom, rng, size)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    lo, hi = scfg.occluder_min_frac * size, scfg.occluder_max_frac * size
    if kind == "bar":
        phi = rng.uniform(0.0, math.pi)
        half_len = rng.uniform(lo, hi)
        half_w = rng.uniform(max(1.5, lo / 3), max(2.0, hi / 4))
        u = (xs - bx) * math.cos(phi) + (ys - by) * math.sin(phi)
        v = -(xs - bx) * math.sin(phi) + (ys - by) * math.cos(phi)
        region = (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
    else:
        region = np.zeros((size, size), dtype=bool)
        px, py = bx, by
        for _ in range(int(rng.integers(2, 5))):
            radius = rng.uniform(max(2.0, lo / 2), max(3.0, hi / 2))
            region |= (xs - px) ** 2 + (ys - py) ** 2 <= radius ** 2
            px += rng.uniform(-radius, radius)
            py += rng.uniform(-radius, radius)
    return region.astype(np.float64), kind


def sample_scene(seed, scfg: SceneConfig, generator: Generator) -> SceneSample:
    """Draw one labeled scene; identical seeds give identical samples."""
    rng = np.random.default_rng(seed)
    size = generator.cfg.image_size
    z = rng.standard_normal(generator.cfg.z_dim)
    latent_gt = broadcast(generator.map_z(torch.from_numpy(z).to(generator.dtype)),
                          generator.cfg.num_slots)
    # compose in float64: generator-dtype values survive the round trip bitwise
    rendered = generator.synthesize(latent_gt).numpy().astype(np.float64).transpose(1, 2, 0)

    support, geom = _ellipse_support(rng, size, scfg)
    background = _background(rng, size, scfg)
    sup3 = support[..., None]
    image = sup3 * rendered + (1.0 - sup3) * background

    mask = support.copy()
    kind, coverage = "none", 0.0
    if rng.uniform() < scfg.occluder_prob:
        region, kind = _occluder_region(rng, size, scfg, geom)
        color = rng.uniform(0.0, 1.0, size=3)
        texture = np.clip(color[None, None, :] + rng.uniform(-0.08, 0.08, size=(size, size, 3)), 0, 1)
        image = np.where(region[..., None] > 0, texture, image)
        coverage = float((support * region).sum() / max(support.sum(), 1.0))
        mask = support * (1.0 - region)

    mask_t = torch.from_numpy(mask).to(generator.dtype)
    return SceneSample(
        image=torch.from_numpy(image.transpose(2, 0, 1)).to(generator.dtype),
        mask=mask_t,
        dilated_mask=dilate_mask(mask_t, scfg.dilation_radius),
        latent_gt=latent_gt,
        occlusion_kind=kind,
        coverage=coverage,
    )


def make_dataset(n: int, seed: int, scfg: SceneConfig, generator: Generator, out_dir) -> Path:
    """Write n samples (PNGs + one latent container + JSON-lines manifest with checksums)."""
    if n < 0:
        raise ValueError("sample count must be >= 0")
    out_dir = Path(out_dir)
    scene_dir = out_dir / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    latents = {}
    for i in range(n):
        sample = sample_scene((seed, i), scfg, generator)
        sid = f"{i:05d}"
        paths = {
            "image": scene_dir / f"{sid}_image.png",
            "mask": scene_dir / f"{sid}_mask.png",
            "dilated_mask": scene_dir / f"{sid}_mask_dilated.png",
        }
        imageio.save_image_png(paths["image"], sample.image)
        imageio.save_mask_png(paths["mask"], sample.mask)
        imageio.save_mask_png(paths["dilated_mask"], sample.dilated_mask)
        latents[f"w_gt/{sid}"] = sample.latent_gt.numpy()
        rows.append({
            "id": sid,
            "image_path": str(paths["image"].relative_to(out_dir)),
            "mask_path": str(paths["mask"].relative_to(out_dir)),
            "dilated_mask_path": str(paths["dilated_mask"].relative_to(out_dir)),
            "latent_key": f"w_gt/{sid}",
            "occlusion_kind": sample.occlusion_kind,
            "coverage": sample.coverage,
            "split": "eval" if i % scfg.eval_every == scfg.eval_every - 1 else "train",
            "sha256": {name: sha256_file(p) for name, p in paths.items()},
        })
    save_arrays(out_dir / "latents.bin", latents)
    manifest = "".join(json.dumps(row, separators=(",", ":")) + "\n" for row in rows)
    return atomic_write_bytes(out_dir / "manifest.jsonl", manifest.encode("utf-8"))


class SceneDataset:
    """Read side of a generated dataset directory."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.rows = []
        for line in self.manifest_path.read_text().splitlines():
            if line.strip():
                self.rows.append(json.loads(line))
        self._latents = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def latents(self) -> dict:
        if self._latents is None:
            self._latents = load_arrays(self.root / "latents.bin")
        return self._latents

    def split_indices(self, split: str) -> list:
        return [i for i, row in enumerate(self.rows) if row["split"] == split]

    def load_sample(self, index: int, dtype=torch.float32) -> SceneSample:
        row = self.rows[index]
        return SceneSample(
            image=imageio.load_image_png(self.root / row["image_path"], dtype),
            mask=imageio.load_mask_png(self.root / row["mask_path"], dtype),
            dilated_mask=imageio.load_mask_png(self.root / row["dilated_mask_path"], dtype),
            latent_gt=torch.from_numpy(self.latents[row["latent_key"]]).to(dtype),
            occlusion_kind=row["occlusion_kind"],
            coverage=row["coverage"],
            sample_id=row["id"],
        )

    def load_tensors(self, split: str, dtype=torch.float32) -> dict:
        """Stack a whole split into memory for training."""
        idx = self.split_indices(split)
        samples = [self.load_sample(i, dtype) for i in idx]
        if not samples:
            raise ValueError(f"split {split!r} is empty")
        return {
            "ids": [s.sample_id for s in samples],
            "images": torch.stack([s.image for s in samples]),
            "masks": torch.stack([s.mask for s in samples]),
            "dilated_masks": torch.stack([s.dilated_mask for s in samples]),
            "latents": torch.stack([s.latent_gt for s in samples]),
            "occlusion_kinds": [s.occlusion_kind for s in samples],
        }
