"""Frozen toy style-based generator.

A mapping MLP sends z to a single style vector w; the synthesis network
consumes one style row per slot (two slots per resolution level, 4x4 up to
the output size). Each slot applies upsample (first slot of a level, above
the base) -> 3x3 conv -> per-channel instance norm -> style-driven scale and
shift -> leaky ReLU; a final 1x1 projection and sigmoid squash the output
into [0,1]. The generator is randomly initialized once, then frozen: every
operation here is a pure function of (inputs, params).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    img_channels: int = 3
    latent_dim: int = 64
    z_dim: int = 64
    mapping_layers: int = 3
    fmap_base: int = 8
    fmap_max: int = 32

    def __post_init__(self):
        size = self.image_size
        if size < 4 or size & (size - 1) != 0:
            raise ValueError(f"image_size must be a power of two >= 4, got {size}")
        for field in ("latent_dim", "z_dim", "mapping_layers", "fmap_base", "fmap_max"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.image_size // 4)) + 1

    @property
    def num_slots(self) -> int:
        return 2 * self.num_levels

    def level_channels(self, level: int) -> int:
        return min(self.fmap_max, self.fmap_base * 2 ** (self.num_levels - 1 - level))

    def level_resolution(self, level: int) -> int:
        return 4 * 2 ** level

    def slot_resolution(self, slot: int) -> int:
        return self.level_resolution(slot // 2)


class MappingNetwork(nn.Module):
    """MLP from z to the style vector w (hidden width = latent_dim)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        dims = [cfg.z_dim] + [cfg.latent_dim] * (cfg.mapping_layers + 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


class SynthesisNetwork(nn.Module):
    """Stack of style-modulated conv slots from a learned 4x4 base tensor."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.base = nn.Parameter(torch.zeros(1, cfg.level_channels(0), 4, 4))
        convs, affines = [], []
        prev = cfg.level_channels(0)
        for level in range(cfg.num_levels):
            ch = cfg.level_channels(level)
            for _ in range(2):
                # bias omitted: instance norm removes any constant offset
                convs.append(nn.Conv2d(prev, ch, 3, padding=1, bias=False))
                affines.append(nn.Linear(cfg.latent_dim, 2 * ch))
                prev = ch
        self.convs = nn.ModuleList(convs)
        self.affines = nn.ModuleList(affines)
        self.to_rgb = nn.Conv2d(prev, cfg.img_channels, 1)

    def forward(self, styles: torch.Tensor, return_activations: bool = False):
        """styles: (B, L, d). Returns (B, C, H, W), plus per-slot activations if asked."""
        batch = styles.shape[0]
        x = self.base.expand(batch, -1, -1, -1)
        activations = []
        for slot in range(self.cfg.num_slots):
            if slot > 0 and slot % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.convs[slot](x)
            mean = x.mean(dim=(2, 3), keepdim=True)
            var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
            x = (x - mean) / torch.sqrt(var + 1e-8)
            st = self.affines[slot](styles[:, slot])
            ch = x.shape[1]
            scale = 1.0 + st[:, :ch, None, None]
            shift = st[:, ch:, None, None]
            x = F.leaky_relu(x * scale + shift, 0.2)
            if return_activations:
                activations.append(x)
        img = torch.sigmoid(self.to_rgb(x))
        if return_activations:
            return img, activations
        return img


class Generator(nn.Module):
    """Frozen generator: mapping network + synthesis network."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg)
        self.synthesis = SynthesisNetwork(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.synthesis.base.dtype

    def map_z(self, z: torch.Tensor) -> torch.Tensor:
        """Run the frozen mapping MLP. Accepts (z_dim,) or (B, z_dim)."""
        z = torch.as_tensor(z, dtype=self.dtype)
        if z.shape[-1] != self.cfg.z_dim or z.dim() not in (1, 2):
            raise ValueError(f"expected z of length {self.cfg.z_dim}, got shape {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise ValueError("z must be finite")
        single = z.dim() == 1
        out = self.mapping(z.unsqueeze(0) if single else z)
        return out.squeeze(0) if single else out

    def synthesize(self, styles: torch.Tensor, return_activations: bool = False):
        """Render styles (L,d) -> (C,H,W) or (B,L,d) -> (B,C,H,W), values in [0,1]."""
        styles = torch.as_tensor(styles, dtype=self.dtype)
        expected = (self.cfg.num_slots, self.cfg.latent_dim)
        if styles.dim() not in (2, 3) or tuple(styles.shape[-2:]) != expected:
            raise ValueError(
                f"expected styles shaped (..., {expected[0]}, {expected[1]}), got {tuple(styles.shape)}")
        single = styles.dim() == 2
        out = self.synthesis(styles.unsqueeze(0) if single else styles, return_activations)
        if return_activations:
            img, acts = out
            if single:
                return img.squeeze(0), [a.squeeze(0) for a in acts]
            return img, acts
        return out.squeeze(0) if single else out

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.synthesize(broadcast(self.map_z(z), self.cfg.num_slots))


def _init_parameters(module: nn.Module, seed: int):
    """Deterministic init: every tensor drawn from one seeded CPU generator, in module order."""
    g = torch.Generator().manual_seed(seed)

    def normal(t, std):
        with torch.no_grad():
            t.copy_(torch.randn(t.shape, generator=g, dtype=t.dtype) * std)

    for name, p in module.named_parameters():
        if name.endswith("base"):
            normal(p, 1.0)
        elif "affines" in name and name.endswith("weight"):
            # modest style gain so scale = 1 + a stays mostly positive
            normal(p, 0.4 / math.sqrt(p.shape[1]))
        elif name.endswith("bias"):
            with torch.no_grad():
                p.zero_()
        elif name.endswith("weight"):
            fan_in = p[0].numel()
            normal(p, math.sqrt(2.0 / fan_in))
        else:
            raise AssertionError(f"unhandled parameter {name}")


def build_generator(cfg: GeneratorConfig, seed: int, dtype: torch.dtype = torch.float32) -> Generator:
    """Construct and freeze a generator; same (cfg, seed, dtype) always yields identical params."""
    gen = Generator(cfg).to(dtype)
    _init_parameters(gen, seed)
    gen.requires_grad_(False)
    gen.eval()
    return gen


def broadcast(w: torch.Tensor, num_slots: int) -> torch.Tensor:
    """Repeat a single style vector into one row per slot: (d,) -> (L,d), (B,d) -> (B,L,d)."""
    w = torch.as_tensor(w)
    if w.dim() == 1:
        return w.unsqueeze(0).repeat(num_slots, 1)
    if w.dim() == 2:
        return w.unsqueeze(1).repeat(1, num_slots, 1)
    raise ValueError(f"expected (d,) or (B,d), got shape {tuple(w.shape)}")


def style_mix(w_a: torch.Tensor, w_b: torch.Tensor, slots) -> torch.Tensor:
    """Take rows `slots` from w_b, the rest from w_a. Both (L,d)."""
    if w_a.shape != w_b.shape or w_a.dim() != 2:
        raise ValueError("style_mix expects two (L,d) latents of equal shape")
    num_slots = w_a.shape[0]
    slots = sorted(set(int(s) for s in slots))
    if slots and (slots[0] < 0 or slots[-1] >= num_slots):
        raise ValueError(f"slot index out of range 0..{num_slots - 1}: {slots}")
    mixed = w_a.clone()
    for s in slots:
        mixed[s] = w_b[s]
    return mixed


#: Resolution bands for named mixing ranges, by slot resolution.
RANGE_NAMES = ("coarse", "middle", "fine")


def slot_range(name: str, cfg: GeneratorConfig) -> tuple:
    """Named slot ranges: coarse covers 4-8 px levels, middle 16-32, fine 64 and up."""
    if name not in RANGE_NAMES:
        raise ValueError(f"unknown range {name!r}, expected one of {RANGE_NAMES}")
    lo, hi = {"coarse": (0, 8), "middle": (16, 32), "fine": (64, 1 << 30)}[name]
    return tuple(s for s in range(cfg.num_slots) if lo <= cfg.slot_resolution(s) <= hi)


def average_latent(generator: Generator, num_samples: int, seed: int) -> torch.Tensor:
    """Broadcast of the empirical mean of map_z over standard-normal draws.

    Deterministic given (generator, num_samples, seed); the mean is
    accumulated in float64 regardless of the generator dtype.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    g = torch.Generator().manual_seed(seed)
    total = torch.zeros(generator.cfg.latent_dim, dtype=torch.float64)
    remaining = num_samples
    while remaining > 0:
        n = min(remaining, 4096)
        z = torch.randn(n, generator.cfg.z_dim, generator=g, dtype=generator.dtype)
        total += generator.map_z(z).to(torch.float64).sum(dim=0)
        remaining -= n
    mean = (total / num_samples).to(generator.dtype)
    return broadcast(mean, generator.cfg.num_slots)
