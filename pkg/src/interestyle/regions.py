"""Interest-region machinery: mask dilation, Gaussian low-pass filtering and
the per-iteration uninterest filter.

The uninterest filter builds the encoder input for iteration i: the interest
region is passed through untouched, the rest is blurred with a radius that
decays linearly to zero over the refinement schedule, and the final
iteration sees the raw image.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class BlurSchedule:
    """Linear blur-radius decay: r_max at iteration 1 down to 0 at iteration N."""

    r_max: float = 8.0
    n_iters: int = 3

    def __post_init__(self):
        if self.r_max < 0:
            raise ValueError(f"r_max must be >= 0, got {self.r_max}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")


def blur_radius(i: int, sched: BlurSchedule) -> float:
    """Radius for iteration i in 1..N; non-increasing in i, exactly 0 at i = N."""
    if not 1 <= i <= sched.n_iters:
        raise ValueError(f"iteration {i} outside 1..{sched.n_iters}")
    if sched.n_iters == 1:
        return sched.r_max  # unused: the filter bypasses blur at i = N
    return sched.r_max * (sched.n_iters - i) / (sched.n_iters - 1)


def _is_binary(mask: torch.Tensor) -> bool:
    return bool(((mask == 0) | (mask == 1)).all())


def dilate_mask(mask: torch.Tensor, radius: int) -> torch.Tensor:
    """Morphological dilation of a binary (H,W) mask with a (2r+1)^2 square element.

    Equivalent to a per-pixel max over the Chebyshev ball of the given
    radius, clipped at the borders. radius = 0 returns the mask unchanged.
    """
    if mask.dim() != 2:
        raise ValueError(f"expected a (H,W) mask, got shape {tuple(mask.shape)}")
    if not _is_binary(mask):
        raise ValueError("dilation is defined on binary masks only")
    radius = int(radius)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.clone()
    out = F.max_pool2d(mask[None, None], kernel_size=2 * radius + 1, stride=1, padding=radius)
    return out[0, 0]


@lru_cache(maxsize=64)
def _gaussian_kernel(r: float) -> tuple:
    """1-D kernel for radius r: sigma = r/2, truncated at ceil(3*sigma), sum 1 (float64)."""
    sigma = r / 2.0
    half = math.ceil(3.0 * sigma)
    xs = torch.arange(-half, half + 1, dtype=torch.float64)
    kernel = torch.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    kernel = kernel / kernel.sum()
    return kernel, half


@lru_cache(maxsize=256)
def _reflect_index(n: int, pad: int) -> torch.Tensor:
    """Index map implementing mirror-without-edge-repeat padding of any width."""
    if n == 1:
        return torch.zeros(1 + 2 * pad, dtype=torch.long)
    period = 2 * (n - 1)
    idx = []
    for p in range(-pad, n + pad):
        m = p % period
        idx.append(m if m < n else period - m)
    return torch.tensor(idx, dtype=torch.long)


def gaussian_lpf(img: torch.Tensor, r: float) -> torch.Tensor:
    """Per-channel 2-D Gaussian low-pass with radius r (sigma = r/2), reflect padding.

    r = 0 is an exact identity. Accepts (..., H, W); the kernel is built in
    float64 and cast to the image dtype.
    """
    if r < 0:
        raise ValueError(f"blur radius must be >= 0, got {r}")
    if img.dim() < 2:
        raise ValueError(f"expected (..., H, W), got shape {tuple(img.shape)}")
    if r == 0:
        return img.clone()
    kernel64, half = _gaussian_kernel(float(r))
    if half == 0:
        return img.clone()
    kernel = kernel64.to(img.dtype)
    h, w = img.shape[-2], img.shape[-1]
    lead = img.shape[:-2]
    x = img.reshape(-1, 1, h, w)
    x = x.index_select(2, _reflect_index(h, half))
    x = F.conv2d(x, kernel.view(1, 1, -1, 1))
    x = x.index_select(3, _reflect_index(w, half))
    x = F.conv2d(x, kernel.view(1, 1, 1, -1))
    return x.reshape(*lead, h, w)


def _align_mask(mask: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    """Broadcast a (H,W) / (B,H,W) / (B,1,H,W) mask against an image batch."""
    if mask.shape[-2:] != img.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask.shape)} does not match image {tuple(img.shape)} spatially")
    if mask.dim() == 2:
        return mask
    if mask.dim() == 3:
        return mask.unsqueeze(1)
    if mask.dim() == 4 and mask.shape[1] == 1:
        return mask
    raise ValueError(f"unsupported mask shape {tuple(mask.shape)}")


def uninterest_filter(img: torch.Tensor, mask: torch.Tensor, i: int, sched: BlurSchedule) -> torch.Tensor:
    """Iteration-i encoder input: interest kept sharp, the rest low-passed.

    Returns img * mask + LPF_{r_i}(img * (1 - mask)) for 0 < i < N and the
    raw image exactly at i = N.
    """
    if not 1 <= i <= sched.n_iters:
        raise ValueError(f"iteration {i} outside 1..{sched.n_iters}")
    if i == sched.n_iters:
        if mask.shape[-2:] != img.shape[-2:]:
            raise ValueError("mask/image shape mismatch")
        return img.clone()
    mask = _align_mask(mask, img)
    return img * mask + gaussian_lpf(img * (1 - mask), blur_radius(i, sched))
