"""High-resolution reconstruction of generator output.

The generator runs at a low working resolution. For a high-resolution crop,
the detail lost by downsampling is the interpolation deviation
`orig - upsample(low)`; adding it back onto the upsampled output restores
the high-frequency content. Plain bilinear interpolation with the same
pixel-center convention as the warping code, so the identity case cancels
exactly before clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError, bilinear_sample
from .tps import identity_grid

__all__ = ["HighResPair", "bilinear_resize", "crop_and_resize", "paste_crop", "pyramid_reconstruct"]


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample (C,H,W) to (C,out_h,out_w) at pixel centers, border-clamped."""
    return bilinear_sample(np.asarray(image, dtype=np.float64), identity_grid(out_h, out_w))


@dataclass(frozen=True)
class HighResPair:
    """A face crop at full resolution, its working-size resize, and where it
    came from in the frame."""

    orig: np.ndarray  # (C,bh,bw) crop at frame resolution
    low: np.ndarray  # (C,s,s) resized crop fed to the generator
    box: tuple  # (x, y, w, h) in frame pixels


def crop_and_resize(frame: np.ndarray, box, low_size: int) -> HighResPair:
    """Cut a box out of the frame and produce its working-size resize."""
    frame = np.asarray(frame, dtype=np.float64)
    x, y, w, h = (int(v) for v in box)
    if w < 1 or h < 1:
        raise ParameterError(f"box extents must be positive, got {w}x{h}")
    if x < 0 or y < 0 or y + h > frame.shape[1] or x + w > frame.shape[2]:
        raise ParameterError(f"box {box} exceeds frame {frame.shape[1:]}")
    orig = frame[:, y : y + h, x : x + w].copy()
    low = orig if (h, w) == (low_size, low_size) else bilinear_resize(orig, low_size, low_size)
    return HighResPair(orig=orig, low=low, box=(x, y, w, h))


def paste_crop(frame: np.ndarray, pair: HighResPair, content: np.ndarray) -> np.ndarray:
    """Return a copy of the frame with `content` placed at the pair's box."""
    x, y, w, h = pair.box
    if content.shape != pair.orig.shape:
        raise ParameterError(f"content {content.shape} does not fit box {pair.orig.shape}")
    out = np.array(frame, dtype=np.float64, copy=True)
    out[:, y : y + h, x : x + w] = content
    return out


def pyramid_reconstruct(pair: HighResPair, z: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Attach the crop's high-frequency detail to a low-resolution output.

    deviation = orig - upsample(low); result = deviation + upsample(z).
    With z equal to the low input the interpolation terms cancel and the
    original crop comes back exactly (before the [0,1] clamp).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != pair.low.shape:
        raise ParameterError(f"output {z.shape} does not match low-res input {pair.low.shape}")
    _, bh, bw = pair.orig.shape
    deviation = pair.orig - bilinear_resize(pair.low, bh, bw)
    out = deviation + bilinear_resize(z, bh, bw)
    return np.clip(out, 0.0, 1.0) if clamp else out
