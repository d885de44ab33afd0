"""Diagnostics and latent manipulations: masked metrics, per-layer latent
variance, per-iteration refinement curves, linear edits and style mixing."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from . import imageio
from .encoder import RefinementEncoder, RefinementTrace, rollout
from .generator import Generator, slot_range, style_mix
from .losses import ProxyFeatureNet, identity_similarity, l2_loss, perceptual_loss
from .regions import BlurSchedule
from .scenes import SceneDataset

log = logging.getLogger(__name__)


def latent_variance(w: torch.Tensor) -> float:
    """Mean over dimensions of the population variance across layer rows.

    Zero exactly for any broadcast latent (identical rows); grows as rows
    spread apart, which proxies the distance from the single-style space.
    """
    w = torch.as_tensor(w)
    if w.dim() != 2 or w.shape[0] < 1:
        raise ValueError(f"expected a (L,d) latent, got shape {tuple(w.shape)}")
    return float(w.to(torch.float64).var(dim=0, unbiased=False).mean())


@dataclass
class MetricsReport:
    """Aggregated masked evaluation over one dataset split."""

    interest_l2: float
    interest_perceptual: float
    full_l2: float
    full_perceptual: float
    identity: float
    per_iteration_variance: list
    per_iteration_interest_l2: list
    sample_count: int
    skipped_count: int
    rows: list = field(default_factory=list)  # per-sample dicts, CSV-ready

    def to_dict(self) -> dict:
        return {
            "interest_l2": self.interest_l2,
            "interest_perceptual": self.interest_perceptual,
            "full_l2": self.full_l2,
            "full_perceptual": self.full_perceptual,
            "identity": self.identity,
            "per_iteration_variance": self.per_iteration_variance,
            "per_iteration_interest_l2": self.per_iteration_interest_l2,
            "sample_count": self.sample_count,
            "skipped_count": self.skipped_count,
        }


def _mean(values) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def masked_metrics(encoder: RefinementEncoder, generator: Generator, proxy: ProxyFeatureNet,
                   start_latent: torch.Tensor, dataset: SceneDataset, split: str,
                   n_iters: int, *, max_samples: int = 0,
                   invert_fn: Optional[Callable[[torch.Tensor], RefinementTrace]] = None,
                   only_unoccluded: bool = False) -> MetricsReport:
    """Mask-free inversion of every split sample, scored on masked regions.

    Pixel and perceptual distortion use the dilated mask (the training
    mask); identity similarity uses the raw mask. Unreadable samples are
    skipped and counted, the run continues.
    """
    indices = dataset.split_indices(split)
    if max_samples > 0:
        indices = indices[:max_samples]
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    rows = []
    skipped = 0
    with torch.no_grad():
        for index in indices:
            try:
                sample = dataset.load_sample(index, dtype=generator.dtype)
            except (OSError, KeyError) as exc:
                log.warning("skipping sample %d: %s", index, exc)
                skipped += 1
                continue
            if only_unoccluded and sample.occlusion_kind != "none":
                continue
            if invert_fn is not None:
                trace = invert_fn(sample.image)
            else:
                trace = rollout(sample.image, None, sched, encoder, generator, start_latent)
            img, final = sample.image, trace.final_output
            dil, raw = sample.dilated_mask, sample.mask
            rows.append({
                "id": sample.sample_id or str(index),
                "interest_l2": float(l2_loss(img * dil, final * dil)),
                "interest_perceptual": float(perceptual_loss(img * dil, final * dil, proxy)),
                "full_l2": float(l2_loss(img, final)),
                "full_perceptual": float(perceptual_loss(img, final, proxy)),
                "identity": float(identity_similarity(img, final, proxy, raw)),
                "variance": [latent_variance(w) for w in trace.all_latents()],
                "iter_l2": [float(l2_loss(img * dil, y * dil)) for y in trace.all_outputs()],
            })
    if not rows:
        raise ValueError(f"no usable samples in split {split!r}")
    iters = len(rows[0]["variance"])
    return MetricsReport(
        interest_l2=_mean([r["interest_l2"] for r in rows]),
        interest_perceptual=_mean([r["interest_perceptual"] for r in rows]),
        full_l2=_mean([r["full_l2"] for r in rows]),
        full_perceptual=_mean([r["full_perceptual"] for r in rows]),
        identity=_mean([r["identity"] for r in rows]),
        per_iteration_variance=[_mean([r["variance"][i] for r in rows]) for i in range(iters)],
        per_iteration_interest_l2=[_mean([r["iter_l2"][i] for r in rows]) for i in range(iters)],
        sample_count=len(rows),
        skipped_count=skipped,
        rows=rows,
    )


def variance_report(encoder, generator, start_latent, dataset, split, n_iters,
                    max_samples: int = 0) -> list:
    """Mean latent variance per iteration (index 0 = starting latent, always 0)."""
    indices = dataset.split_indices(split)
    if max_samples > 0:
        indices = indices[:max_samples]
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    per_iter = [[] for _ in range(n_iters + 1)]
    with torch.no_grad():
        for index in indices:
            sample = dataset.load_sample(index, dtype=generator.dtype)
            trace = rollout(sample.image, None, sched, encoder, generator, start_latent)
            for i, w in enumerate(trace.all_latents()):
                per_iter[i].append(latent_variance(w))
    return [_mean(vals) for vals in per_iter]


@dataclass(frozen=True)
class EditDirection:
    """Unit-Frobenius-norm latent direction with a human label."""

    direction: torch.Tensor
    label: str = ""

    def __post_init__(self):
        norm = float(self.direction.norm())
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must have unit Frobenius norm, got {norm}")


def compute_direction(pos, neg, label: str = "") -> EditDirection:
    """normalize(mean(pos) - mean(neg)) over two nonempty latent lists."""
    if not pos or not neg:
        raise ValueError("both latent lists must be nonempty")
    mean_pos = torch.stack([torch.as_tensor(w, dtype=torch.float64) for w in pos]).mean(dim=0)
    mean_neg = torch.stack([torch.as_tensor(w, dtype=torch.float64) for w in neg]).mean(dim=0)
    diff = mean_pos - mean_neg
    norm = diff.norm()
    if float(norm) == 0.0:
        raise ValueError("degenerate direction: the two latent groups have equal means")
    return EditDirection(direction=diff / norm, label=label)


def apply_edit(w: torch.Tensor, direction: EditDirection, alpha: float) -> torch.Tensor:
    """Linear latent walk: w + alpha * direction."""
    d = direction.direction.to(w.dtype)
    if d.shape != w.shape:
        raise ValueError(f"direction shape {tuple(d.shape)} does not match latent {tuple(w.shape)}")
    return w + alpha * d


def mix_report(encoder: RefinementEncoder, generator: Generator, start_latent: torch.Tensor,
               image_a: torch.Tensor, image_b: torch.Tensor, range_name: str,
               n_iters: int, out_path) -> dict:
    """Invert two images, mix the named slot range of B into A, save (A, B, mixed) renders."""
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    with torch.no_grad():
        w_a = rollout(image_a, None, sched, encoder, generator, start_latent).final_latent
        w_b = rollout(image_b, None, sched, encoder, generator, start_latent).final_latent
        slots = slot_range(range_name, generator.cfg)
        mixed = style_mix(w_a, w_b, slots)
        renders = [generator.synthesize(w) for w in (w_a, w_b, mixed)]
    imageio.save_image_grid(out_path, renders)
    return {"latent_a": w_a, "latent_b": w_b, "latent_mixed": mixed,
            "renders": renders, "slots": slots, "path": out_path}
