"""Iterative-refinement encoder and the N-step inversion rollout.

The encoder sees the channel-concatenated pair (previous reconstruction,
current target) and emits a per-slot latent residual. Head output layers are
zero-initialized, so an untrained encoder always returns a zero residual and
the rollout stays at the starting latent. Inference never uses a region
mask: the mask only shapes the training-time inputs.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import Generator
from .regions import BlurSchedule, uninterest_filter


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    img_channels: int = 3
    num_slots: int = 10
    latent_dim: int = 64
    base_channels: int = 16
    head_channels: int = 24

    def __post_init__(self):
        if self.num_slots < 1 or self.num_slots % 2 != 0:
            raise ValueError(f"num_slots must be a positive even count, got {self.num_slots}")

    def slot_tap(self, slot: int) -> int:
        """Trunk stage feeding a slot head: coarse slots read the deepest map,
        middle the next, fine the shallowest of the used taps."""
        resolution = 4 * 2 ** (slot // 2)
        if resolution <= 8:
            return 3
        if resolution <= 32:
            return 2
        return 1


class RefinementEncoder(nn.Module):
    """Shared strided trunk + one map-to-style head per slot."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels, cfg.base_channels * 2, cfg.base_channels * 4, cfg.base_channels * 4]
        stages = []
        prev = 2 * cfg.img_channels
        for ch in chans:
            stages.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.head_convs = nn.ModuleList()
        self.head_linears = nn.ModuleList()
        for slot in range(cfg.num_slots):
            tap_ch = chans[cfg.slot_tap(slot)]
            self.head_convs.append(nn.Conv2d(tap_ch, cfg.head_channels, 3, padding=1))
            self.head_linears.append(nn.Linear(cfg.head_channels, cfg.latent_dim))

    @property
    def dtype(self) -> torch.dtype:
        return self.stages[0].weight.dtype

    def forward(self, y_prev: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """(B,C,H,W) pair -> (B,L,d) residual. Concatenation order is fixed: (y_prev, target)."""
        if y_prev.shape != target.shape:
            raise ValueError(
                f"image pair shapes differ: {tuple(y_prev.shape)} vs {tuple(target.shape)}")
        x = torch.cat([y_prev, target], dim=1)
        taps = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), 0.2)
            taps.append(x)
        rows = []
        for slot in range(self.cfg.num_slots):
            t = taps[self.cfg.slot_tap(slot)]
            h = F.leaky_relu(self.head_convs[slot](t), 0.2)
            h = h.mean(dim=(2, 3))
            rows.append(self.head_linears[slot](h))
        return torch.stack(rows, dim=1)


def build_encoder(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> RefinementEncoder:
    """Deterministic construction; head output layers start at exactly zero."""
    enc = RefinementEncoder(cfg).to(dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.startswith("head_linears"):
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * (2.0 / fan_in) ** 0.5)
    return enc


def encode_step(y_prev: torch.Tensor, target: torch.Tensor, encoder: RefinementEncoder) -> torch.Tensor:
    """Single refinement step: residual for one image pair, batched or not."""
    single = y_prev.dim() == 3
    if single:
        y_prev, target = y_prev.unsqueeze(0), target.unsqueeze(0)
    delta = encoder(y_prev, target)
    return delta.squeeze(0) if single else delta


@dataclass
class RefinementTrace:
    """Per-iteration record of an N-step rollout (index 0 holds the start state)."""

    start_latent: torch.Tensor
    start_output: torch.Tensor
    inputs: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    latents: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def final_latent(self) -> torch.Tensor:
        return self.latents[-1] if self.latents else self.start_latent

    @property
    def final_output(self) -> torch.Tensor:
        return self.outputs[-1] if self.outputs else self.start_output

    def all_latents(self) -> list:
        """Latents w_0 .. w_N."""
        return [self.start_latent] + list(self.latents)

    def all_outputs(self) -> list:
        return [self.start_output] + list(self.outputs)


def rollout(
    image: torch.Tensor,
    mask: Optional[torch.Tensor],
    sched: BlurSchedule,
    encoder: RefinementEncoder,
    generator: Generator,
    start_latent: torch.Tensor,
    *,
    detach_between_iters: bool = False,
    input_transform: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
) -> RefinementTrace:
    """Run the N-step refinement loop.

    Training mode (mask given): iteration inputs come from the uninterest
    filter, so the final iteration sees the raw image. Inference mode (mask
    None): every iteration sees the raw image. `input_transform(i, x)` can
    rewrite the iteration-i input (used by gradient-reachability probes).
    """
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
        if mask is not None and mask.dim() == 2:
            mask = mask.unsqueeze(0)
    batch = image.shape[0]
    w = torch.as_tensor(start_latent, dtype=generator.dtype)
    if w.dim() == 2:
        w = w.unsqueeze(0).expand(batch, -1, -1)
    trace = RefinementTrace(start_latent=w.squeeze(0) if single else w,
                            start_output=None)
    y = generator.synthesize(w)
    trace.start_output = y.squeeze(0) if single else y
    with torch.no_grad():
        step_inputs = []
        for i in range(1, sched.n_iters + 1):
            x = uninterest_filter(image, mask, i, sched) if mask is not None else image
            if input_transform is not None:
                x = input_transform(i, x)
            step_inputs.append(x)
    for i in range(1, sched.n_iters + 1):
        x = step_inputs[i - 1]
        y_in = y.detach() if detach_between_iters else y
        delta = encoder(y_in, x)
        w = w + delta
        y = generator.synthesize(w)
        if single:
            trace.inputs.append(x.squeeze(0))
            trace.deltas.append(delta.squeeze(0))
            trace.latents.append(w.squeeze(0))
            trace.outputs.append(y.squeeze(0))
        else:
            trace.inputs.append(x)
            trace.deltas.append(delta)
            trace.latents.append(w)
            trace.outputs.append(y)
    return trace


def invert(image: torch.Tensor, encoder: RefinementEncoder, generator: Generator,
           start_latent: torch.Tensor, n_iters: int) -> torch.Tensor:
    """Mask-free inversion: final latent of an inference-mode rollout."""
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    trace = rollout(image, None, sched, encoder, generator, start_latent)
    return trace.final_latent
