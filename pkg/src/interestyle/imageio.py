"""PNG persistence for images and region masks.

Images are 8-bit RGB, masks 8-bit single-channel (0 = uninterest, 255 =
interest). In memory both live as float tensors in [0,1]; round-trip
quantization error is at most 1/255 for images and exact for binary masks.
"""

import io

import numpy as np
import torch
from PIL import Image

from .util import atomic_write_bytes


def image_to_uint8(img: torch.Tensor) -> np.ndarray:
    """Float (C,H,W) in [0,1] -> uint8 (H,W,C)."""
    arr = img.detach().cpu().numpy()
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))


def save_image_png(path, img: torch.Tensor):
    """Save a (C,H,W) float image in [0,1] as an 8-bit RGB PNG (atomic write)."""
    arr = image_to_uint8(img)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())


def load_image_png(path, dtype=torch.float32) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(np.transpose(arr, (2, 0, 1))).to(dtype)


def save_mask_png(path, mask: torch.Tensor):
    """Save a (H,W) float mask in [0,1] as an 8-bit grayscale PNG (atomic write)."""
    arr = mask.detach().cpu().numpy()
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())


def load_mask_png(path, dtype=torch.float32) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)


def save_image_grid(path, images, pad: int = 2):
    """Save a list of equally sized (C,H,W) images as one horizontal strip."""
    if not images:
        raise ValueError("empty image list")
    c, h, w = images[0].shape
    canvas = torch.ones(c, h, len(images) * (w + pad) - pad, dtype=images[0].dtype)
    for k, img in enumerate(images):
        if img.shape != (c, h, w):
            raise ValueError("all grid images must share one shape")
        canvas[:, :, k * (w + pad): k * (w + pad) + w] = img
    return save_image_png(path, canvas)
