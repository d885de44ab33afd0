"""Encoder training: filtered rollout, disentanglement pair, single backprop
after the final iteration, optimization and checkpointing.

Per batch there is exactly one gradient computation and one optimizer
update, no matter how many refinement iterations run: the loss is terminal
and gradients flow through the whole unrolled computation. The generator and
the proxy feature net stay frozen throughout.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .container import load_arrays, save_arrays
from .encoder import RefinementEncoder, build_encoder, encode_step, rollout
from .generator import Generator, average_latent, build_generator
from .losses import ProxyFeatureNet, build_proxy, total_loss
from .regions import BlurSchedule
from .scenes import SceneDataset

log = logging.getLogger(__name__)

IND_SOURCES = ("image", "recon")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    """Step counter plus instrumentation for the single-backprop contract."""

    step: int = 0
    num_backwards: int = 0
    num_updates: int = 0


def ind_delta(image: torch.Tensor, mask: torch.Tensor, w_final: torch.Tensor,
              encoder: RefinementEncoder, generator: Generator,
              source: str = "image") -> torch.Tensor:
    """Residual encoded from a pair that differs only on the uninterest region.

    source = "image": the pair is (image * mask, image).
    source = "recon": the masked side is the final reconstruction instead,
    (synthesize(w_final) * mask, image).
    """
    if source not in IND_SOURCES:
        raise ValueError(f"ind_source must be one of {IND_SOURCES}, got {source!r}")
    if mask.dim() == 3 and image.dim() == 4:
        mask = mask.unsqueeze(1)
    if mask.shape[-2:] != image.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask.shape)} does not match image {tuple(image.shape)} spatially")
    if source == "recon":
        masked = generator.synthesize(w_final) * mask
    else:
        masked = image * mask
    return encode_step(masked, image, encoder)


def _align_batch_mask(mask: torch.Tensor) -> torch.Tensor:
    return mask.unsqueeze(1) if mask.dim() == 3 else mask


def train_step(images: torch.Tensor, masks: torch.Tensor, encoder: RefinementEncoder,
               optimizer: torch.optim.Optimizer, generator: Generator,
               proxy: ProxyFeatureNet, start_latent: torch.Tensor, cfg: RunConfig,
               state: TrainState, batch_ids=None):
    """One optimizer update from the mean terminal loss over the batch.

    Returns (total, recon, ind) floats. Ablation switches: with
    train.use_unf off every iteration sees the raw image; with train.use_ind
    off the disentanglement term is dropped entirely; with train.mask_losses
    off the losses run on full images.
    """
    masks = _align_batch_mask(masks)
    use_ind = cfg["train.use_ind"]
    weights = cfg.loss_weights(use_ind=use_ind)
    loss_mask = masks if cfg["train.mask_losses"] else torch.ones_like(masks)
    sched = cfg.blur_schedule()

    trace = rollout(
        images,
        masks if cfg["train.use_unf"] else None,
        sched,
        encoder,
        generator,
        start_latent,
        detach_between_iters=cfg["train.detach_between_iters"],
    )
    delta_b = None
    if use_ind:
        delta_b = ind_delta(images, loss_mask, trace.final_latent, encoder, generator,
                            source=cfg["train.ind_source"])
    total, recon, disent = total_loss(
        images, loss_mask, trace, delta_b, generator, weights, proxy, return_terms=True)
    if not torch.isfinite(total):
        ids = batch_ids if batch_ids is not None else "<unknown>"
        raise TrainingError(f"non-finite loss at step {state.step} (batch {ids})")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.num_backwards += 1
    optimizer.step()
    state.num_updates += 1
    return float(total.detach()), float(recon.detach()), float(disent.detach())


def batch_indices(num_samples: int, batch_size: int, shuffle_seed: int, step: int) -> np.ndarray:
    """Stateless per-step batch selection; resuming at step k reproduces the same batches."""
    rng = np.random.default_rng((shuffle_seed, step))
    return rng.choice(num_samples, size=min(batch_size, num_samples), replace=False)


def save_checkpoint(path, encoder, generator, proxy, start_latent, optimizer,
                    step: int, cfg: RunConfig) -> Path:
    arrays = {}
    for prefix, module in (("encoder", encoder), ("generator", generator), ("proxy", proxy)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    arrays["w0"] = start_latent.detach().cpu().numpy()
    arrays["train/step"] = np.array([step], dtype=np.int64)
    if optimizer is not None:
        opt_state = optimizer.state_dict()["state"]
        lookup = {id(p): i for i, p in enumerate(optimizer.param_groups[0]["params"])}
        for name, p in sorted(dict(encoder.named_parameters()).items()):
            st = opt_state.get(lookup[id(p)])
            if st:
                arrays[f"optim/{name}/exp_avg"] = st["exp_avg"].cpu().numpy()
                arrays[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
                arrays[f"optim/{name}/step"] = np.array([float(st["step"])])
    arrays["config_utf8"] = np.frombuffer(cfg.text().encode("utf-8"), dtype=np.uint8).copy()
    return save_arrays(path, arrays)


@dataclass
class LoadedCheckpoint:
    encoder: RefinementEncoder
    generator: Generator
    proxy: ProxyFeatureNet
    start_latent: torch.Tensor
    step: int
    config: RunConfig
    optimizer_arrays: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild the frozen modules and encoder exactly as saved."""
    arrays = load_arrays(path)
    cfg = RunConfig.from_text(bytes(arrays["config_utf8"]).decode("utf-8"))
    dtype = torch.from_numpy(arrays["w0"]).dtype
    generator = build_generator(cfg.generator_config(), seed=cfg["model.seed"], dtype=dtype)
    proxy = build_proxy(cfg["model.img_channels"], cfg["model.proxy_base"],
                        seed=cfg["model.seed"] + 1, dtype=dtype)
    encoder = build_encoder(cfg.encoder_config(), seed=cfg["train.model_seed"], dtype=dtype)
    for prefix, module in (("encoder", encoder), ("generator", generator), ("proxy", proxy)):
        state = {}
        for name, arr in arrays.items():
            if name.startswith(prefix + "/"):
                state[name[len(prefix) + 1:]] = torch.from_numpy(arr)
        module.load_state_dict(state)
    optim_arrays = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return LoadedCheckpoint(
        encoder=encoder,
        generator=generator,
        proxy=proxy,
        start_latent=torch.from_numpy(arrays["w0"]),
        step=int(arrays["train/step"][0]),
        config=cfg,
        optimizer_arrays=optim_arrays,
    )


def _restore_optimizer(optimizer, encoder, optim_arrays):
    if not optim_arrays:
        return
    lookup = {id(p): i for i, p in enumerate(optimizer.param_groups[0]["params"])}
    state = optimizer.state_dict()
    for name, p in sorted(dict(encoder.named_parameters()).items()):
        key = f"optim/{name}"
        if f"{key}/exp_avg" in optim_arrays:
            state["state"][lookup[id(p)]] = {
                "step": torch.tensor(float(optim_arrays[f"{key}/step"][0])),
                "exp_avg": torch.from_numpy(optim_arrays[f"{key}/exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(optim_arrays[f"{key}/exp_avg_sq"]).clone(),
            }
    optimizer.load_state_dict(state)


def train(cfg: RunConfig, dataset: SceneDataset, out_dir,
          resume_from: Optional[str] = None,
          dtype: torch.dtype = torch.float32) -> Path:
    """Run max_steps of encoder training; returns the final checkpoint path.

    Writes periodic checkpoints plus a CSV log with one row per step:
    step,total_loss,recon_loss,ind_loss,wallclock_s. The average starting
    latent is computed once up front and stored in every checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = dataset.load_tensors("train", dtype=dtype)
    images, masks = data["images"], data["dilated_masks"]
    ids = data["ids"]

    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        generator, proxy, encoder = loaded.generator, loaded.proxy, loaded.encoder
        start_latent = loaded.start_latent
        first_step = loaded.step
    else:
        generator = build_generator(cfg.generator_config(), seed=cfg["model.seed"], dtype=dtype)
        proxy = build_proxy(cfg["model.img_channels"], cfg["model.proxy_base"],
                            seed=cfg["model.seed"] + 1, dtype=dtype)
        encoder = build_encoder(cfg.encoder_config(), seed=cfg["train.model_seed"], dtype=dtype)
        start_latent = average_latent(generator, cfg["train.w0_samples"],
                                      seed=cfg["model.seed"] + 2)
        first_step = 0

    optimizer = torch.optim.Adam(encoder.parameters(), lr=cfg["train.lr"])
    if resume_from is not None:
        _restore_optimizer(optimizer, encoder, loaded.optimizer_arrays)

    state = TrainState(step=first_step)
    log_path = out_dir / "training_log.csv"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    max_steps = cfg["train.max_steps"]
    every = cfg["train.checkpoint_every"]
    t0 = time.time()
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "total_loss", "recon_loss", "ind_loss", "wallclock_s"])
        for step in range(first_step, max_steps):
            state.step = step
            idx = batch_indices(len(ids), cfg["train.batch_size"], cfg["train.shuffle_seed"], step)
            batch_ids = [ids[i] for i in idx]
            total, recon, disent = train_step(
                images[idx], masks[idx], encoder, optimizer, generator, proxy,
                start_latent, cfg, state, batch_ids=batch_ids)
            writer.writerow([step, f"{total:.10g}", f"{recon:.10g}", f"{disent:.10g}",
                             f"{time.time() - t0:.3f}"])
            if every > 0 and (step + 1) % every == 0 and step + 1 < max_steps:
                save_checkpoint(out_dir / f"checkpoint_step{step + 1:06d}.bin",
                                encoder, generator, proxy, start_latent, optimizer,
                                step + 1, cfg)
    final = out_dir / "checkpoint_final.bin"
    save_checkpoint(final, encoder, generator, proxy, start_latent, optimizer,
                    max_steps, cfg)
    return final
