"""Reconstruction objectives: pixel, perceptual-proxy and identity-proxy
terms, their weighted sum, the interest-disentanglement loss and the total
training loss.

The perceptual and identity terms run on a fixed, randomly initialized
feature stack rather than pretrained networks: random conv features keep the
properties the training scheme needs (zero iff images match, differentiable,
stable) without external model dependencies.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import RefinementTrace
from .generator import Generator

log = logging.getLogger(__name__)

_EPS = 1e-10


@dataclass(frozen=True)
class LossWeights:
    """Term weights; `ind` scales the disentanglement term in the total loss."""

    l2: float = 1.0
    lpips: float = 0.8
    id: float = 0.1
    ind: float = 1.0

    def __post_init__(self):
        for name in ("l2", "lpips", "id", "ind"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


class ProxyFeatureNet(nn.Module):
    """Frozen 3-stage conv stack shared by the perceptual and identity proxies."""

    def __init__(self, img_channels: int = 3, base_channels: int = 12):
        super().__init__()
        chans = [base_channels, base_channels * 2, base_channels * 2 + base_channels]
        convs = []
        prev = img_channels
        for ch in chans:
            convs.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled deepest features: (B,C,H,W) -> (B,E)."""
        return self.forward(x)[-1].mean(dim=(2, 3))


def build_proxy(img_channels: int, base_channels: int, seed: int,
                dtype: torch.dtype = torch.float32) -> ProxyFeatureNet:
    net = ProxyFeatureNet(img_channels, base_channels).to(dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * (2.0 / fan_in) ** 0.5)
    net.requires_grad_(False)
    net.eval()
    return net


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def l2_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    _check_pair(a, b)
    return ((a - b) ** 2).mean()


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, net: ProxyFeatureNet) -> torch.Tensor:
    """Sum over stages of the MSE between channel-unit-normalized feature maps."""
    _check_pair(a, b)
    fa = net(_batched(a))
    fb = net(_batched(b))
    total = None
    for x, y in zip(fa, fb):
        xn = x / (x.norm(dim=1, keepdim=True) + _EPS)
        yn = y / (y.norm(dim=1, keepdim=True) + _EPS)
        term = ((xn - yn) ** 2).mean()
        total = term if total is None else total + term
    return total


def _masked_cosine(a: torch.Tensor, b: torch.Tensor, net: ProxyFeatureNet,
                   mask: torch.Tensor) -> torch.Tensor:
    """Per-sample cosine similarity of masked embeddings; 0 where an embedding is zero."""
    ea = net.embed(_batched(a * mask))
    eb = net.embed(_batched(b * mask))
    dot = (ea * eb).sum(dim=1)
    norms = ea.norm(dim=1) * eb.norm(dim=1)
    zero = norms == 0
    if bool(zero.any()):
        log.warning("identity proxy: zero embedding encountered, cosine treated as 0")
    return torch.where(zero, torch.zeros_like(dot), dot / torch.where(zero, torch.ones_like(norms), norms))


def identity_similarity(a: torch.Tensor, b: torch.Tensor, net: ProxyFeatureNet,
                        mask: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity of masked embeddings, in [-1, 1]."""
    _check_pair(a, b)
    return _masked_cosine(a, b, net, mask).mean()


def identity_loss(a: torch.Tensor, b: torch.Tensor, net: ProxyFeatureNet,
                  mask: torch.Tensor) -> torch.Tensor:
    """1 - cosine(embed(a*mask), embed(b*mask)); a zero embedding counts as orthogonal."""
    _check_pair(a, b)
    return (1.0 - _masked_cosine(a, b, net, mask)).mean()


def image_loss(a: torch.Tensor, b: torch.Tensor, weights: LossWeights,
               net: ProxyFeatureNet, mask: torch.Tensor) -> torch.Tensor:
    """Weighted sum of the pixel, perceptual and identity terms.

    Callers pass already-masked images for the pixel/perceptual terms; the
    identity term applies the mask itself before embedding.
    """
    _check_pair(a, b)
    total = torch.zeros((), dtype=a.dtype)
    if weights.l2 != 0:
        total = total + weights.l2 * l2_loss(a, b)
    if weights.lpips != 0:
        total = total + weights.lpips * perceptual_loss(a, b, net)
    if weights.id != 0:
        total = total + weights.id * identity_loss(a, b, net, mask)
    return total


def ind_loss(image: torch.Tensor, mask: torch.Tensor, w_final: torch.Tensor,
             delta_b: torch.Tensor, generator: Generator, weights: LossWeights,
             net: ProxyFeatureNet) -> torch.Tensor:
    """Interest-disentanglement loss.

    delta_b is the residual encoded from a pair differing only on the
    uninterest region; adding it to the final latent must leave the interest
    region of the render unchanged, so the masked render of
    (w_final + delta_b) is compared against the masked image.
    """
    if w_final.shape != delta_b.shape:
        raise ValueError(
            f"latent shapes differ: {tuple(w_final.shape)} vs {tuple(delta_b.shape)}")
    shifted = generator.synthesize(w_final + delta_b)
    return image_loss(image * mask, shifted * mask, weights, net, mask)


def total_loss(image: torch.Tensor, mask: torch.Tensor, trace: RefinementTrace,
               delta_b, generator: Generator, weights: LossWeights,
               net: ProxyFeatureNet, return_terms: bool = False):
    """Training objective: masked reconstruction of the final iterate plus the
    weighted disentanglement term. No loss touches intermediate iterations."""
    if len(trace) < 1:
        raise ValueError("refinement trace is empty")
    recon = image_loss(image * mask, trace.final_output * mask, weights, net, mask)
    if weights.ind != 0:
        if delta_b is None:
            raise ValueError("ind weight is nonzero but no delta_b was provided")
        disent = ind_loss(image, mask, trace.final_latent, delta_b, generator, weights, net)
    else:
        disent = torch.zeros((), dtype=recon.dtype)
    total = recon + weights.ind * disent
    if return_terms:
        return total, recon, disent
    return total
