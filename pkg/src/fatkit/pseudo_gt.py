"""Pseudo ground truth for supervising attribute transfer.

The preferred generator warps the reference photo onto the source geometry
(coarse full-face TPS from landmark correspondence, then per-part refinement
for lips, eyebrows and eyes pasted back through the source parsing mask), so
the supervision keeps the reference's exact colors. A second stage can move
a part's shape: the reference contour is translated by the mean offset onto
the source location and the part region is warped from the source contour to
that target.

Histogram matching and alpha blending are included as the baseline
generators. All functions are pure numpy over FaceSample inputs and record
their provenance (mode, refined parts) on the result.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .data import PART_LANDMARKS, FaceSample, write_ppm
from .tensor import ParameterError
from .tps import DegenerateGeometryError, min_shift, tps_grid, tps_solve, warp_image

__all__ = [
    "PseudoGT",
    "color_pgt",
    "spatial_pgt",
    "histogram_pgt",
    "blend_pgt",
    "HISTOGRAM_REGIONS",
    "write_pgt",
]

# anchor points stabilizing the small part-subset solves
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

# label groups matched by the histogram baseline
HISTOGRAM_REGIONS = {
    "skin": (1,),
    "eyebrows": (2, 3),
    "eyes": (4, 5),
    "lips": (6,),
}

_FACE_LABELS = (1, 2, 3, 4, 5, 6)


@dataclass
class PseudoGT:
    """A generated supervision image plus how it was produced."""

    image: np.ndarray  # same shape as the source image, values in [0,1]
    mode: str  # tps-color | tps-spatial | histogram | blend
    parts_refined: tuple = ()


def _unit(landmarks: np.ndarray) -> np.ndarray:
    """[0,1] image coordinates -> [-1,1] warp coordinates."""
    return np.asarray(landmarks, dtype=np.float64) * 2.0 - 1.0


def _sampling_grid(content_src: np.ndarray, content_dst: np.ndarray, h: int, w: int):
    """Grid moving image content at `content_src` onto `content_dst`.

    Bilinear sampling pulls, so the solved transform runs dst -> src.
    """
    transform = tps_solve(content_dst, content_src)
    return tps_grid(transform, h, w)


def _box_blur(mask: np.ndarray) -> np.ndarray:
    """3x3 box mean: a 1-pixel linear ramp at region edges."""
    padded = np.pad(mask.astype(np.float64), 1, mode="edge")
    acc = np.zeros_like(mask, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return acc / 9.0


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = mask.astype(bool)
    for _ in range(iterations):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def _paste(base: np.ndarray, insert: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Feathered paste of `insert` over `base` inside a boolean region."""
    weight = _box_blur(region)[None, :, :]
    return weight * insert + (1.0 - weight) * base


def _coarse_warp(source: FaceSample, reference: FaceSample) -> np.ndarray:
    grid = _sampling_grid(
        _unit(reference.landmarks), _unit(source.landmarks),
        source.image.shape[1], source.image.shape[2],
    )
    return warp_image(reference.image, grid)


def color_pgt(source: FaceSample, reference: FaceSample) -> PseudoGT:
    """Reference colors on source geometry, coarse to fine.

    The whole reference image is warped so its landmarks meet the source's;
    then lips, eyebrows and eyes are re-warped from their own landmark
    subsets (plus corner anchors) and pasted back through the source parsing
    mask. Parts whose subset solve degenerates are skipped and left out of
    `parts_refined`.
    """
    if source.landmarks.shape != reference.landmarks.shape:
        raise ParameterError("source and reference landmark schemas differ")
    h, w = source.image.shape[1], source.image.shape[2]
    out = _coarse_warp(source, reference)
    refined = []
    for label, indices in PART_LANDMARKS.items():
        region = source.mask == label
        if not region.any():
            continue
        src_pts = np.concatenate([_unit(source.landmarks[list(indices)]), _CORNERS])
        ref_pts = np.concatenate([_unit(reference.landmarks[list(indices)]), _CORNERS])
        try:
            grid = _sampling_grid(ref_pts, src_pts, h, w)
        except DegenerateGeometryError:
            continue
        part = warp_image(reference.image, grid)
        out = _paste(out, part, region)
        refined.append(label)
    return PseudoGT(image=np.clip(out, 0.0, 1.0), mode="tps-color", parts_refined=tuple(refined))


def _densify_open_contour(points: np.ndarray, count: int = 9) -> np.ndarray:
    """Resample an ordered open contour through a quadratic fit.

    Sparse pin points leave the warp under-constrained between them; fitting
    x(t), y(t) over the cumulative chord parameter and resampling adds
    interior correspondences that follow the part's arc.
    """
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    if chord[-1] <= 0.0:
        return points
    t = chord / chord[-1]
    dense_t = np.linspace(0.0, 1.0, count)
    fit_x = np.polyfit(t, points[:, 0], 2)
    fit_y = np.polyfit(t, points[:, 1], 2)
    return np.stack([np.polyval(fit_x, dense_t), np.polyval(fit_y, dense_t)], axis=1)


def spatial_pgt(
    color_gt: PseudoGT, source: FaceSample, reference: FaceSample, part_label: int
) -> PseudoGT:
    """Give one part the reference's shape while keeping the source's place.

    The reference contour is shifted by the mean source-reference offset so
    it sits at the source location; the color-GT part region is warped from
    the source contour onto that target and pasted through the part mask
    (source plus landing region, dilated by 2 pixels). Eyebrow contours are
    densified along their arc before solving so mid-segments follow too.
    """
    if part_label not in PART_LANDMARKS:
        raise ParameterError(f"part label {part_label} has no landmark subset")
    region = source.mask == part_label
    if not region.any() or not (reference.mask == part_label).any():
        warnings.warn(f"part {part_label} absent from a parsing mask; spatial stage skipped")
        return PseudoGT(image=color_gt.image.copy(), mode="tps-spatial", parts_refined=())
    indices = list(PART_LANDMARKS[part_label])
    src_contour = _unit(source.landmarks[indices])
    ref_contour = _unit(reference.landmarks[indices])
    if part_label in (2, 3):  # brows: open arcs with a meaningful interior
        src_contour = _densify_open_contour(src_contour)
        ref_contour = _densify_open_contour(ref_contour)
    shift = min_shift(src_contour, ref_contour)
    target = ref_contour - shift  # reference shape at the source location
    h, w = color_gt.image.shape[1], color_gt.image.shape[2]
    try:
        grid = _sampling_grid(
            np.concatenate([src_contour, _CORNERS]),
            np.concatenate([target, _CORNERS]),
            h, w,
        )
    except DegenerateGeometryError:
        warnings.warn(f"degenerate contour for part {part_label}; spatial stage skipped")
        return PseudoGT(image=color_gt.image.copy(), mode="tps-spatial", parts_refined=())
    warped = warp_image(color_gt.image, grid)
    landed = warp_image(region[None].astype(np.float64), grid)[0] >= 0.5
    paste_region = _dilate(region | landed, 2)
    out = _paste(color_gt.image, warped, paste_region)
    return PseudoGT(
        image=np.clip(out, 0.0, 1.0),
        mode="tps-spatial",
        parts_refined=tuple(sorted(set(color_gt.parts_refined) | {part_label})),
    )


def _match_channel(src_vals: np.ndarray, ref_vals: np.ndarray, bins: int = 256) -> np.ndarray:
    """Monotone map of one channel's region values onto a reference CDF.

    Values quantize to 256 bins; each source bin's CDF height is pushed
    through the reference's inverse CDF (linear interpolation over the bins
    that actually carry mass, so CDF plateaus cannot smear the lookup).
    """
    centers = (np.arange(bins) + 0.5) / bins
    src_idx = np.clip((src_vals * bins).astype(np.int64), 0, bins - 1)
    ref_idx = np.clip((ref_vals * bins).astype(np.int64), 0, bins - 1)
    src_cdf = np.cumsum(np.bincount(src_idx, minlength=bins)) / src_vals.size
    ref_hist = np.bincount(ref_idx, minlength=bins)
    ref_cdf = np.cumsum(ref_hist) / ref_vals.size
    occupied = ref_hist > 0
    lut = np.interp(src_cdf, ref_cdf[occupied], centers[occupied])
    return lut[src_idx]


def histogram_pgt(source: FaceSample, reference: FaceSample) -> PseudoGT:
    """Per-region, per-channel monotone histogram matching onto the reference.

    Skin, lips, eyes and eyebrows are matched independently; regions empty on
    either side are skipped. Background and hair pass through untouched.
    """
    out = source.image.copy()
    matched = []
    for labels in HISTOGRAM_REGIONS.values():
        src_sel = np.isin(source.mask, labels)
        ref_sel = np.isin(reference.mask, labels)
        if not src_sel.any() or not ref_sel.any():
            continue
        for c in range(3):
            out[c][src_sel] = _match_channel(source.image[c][src_sel], reference.image[c][ref_sel])
        matched.extend(labels)
    return PseudoGT(
        image=np.clip(out, 0.0, 1.0), mode="histogram", parts_refined=tuple(sorted(matched))
    )


def blend_pgt(source: FaceSample, reference: FaceSample, alpha: float = 0.8) -> PseudoGT:
    """Coarse-warped reference alpha-blended over the source's face region."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0,1], got {alpha}")
    warped = _coarse_warp(source, reference)
    face = np.isin(source.mask, _FACE_LABELS)[None, :, :]
    out = np.where(face, alpha * warped + (1.0 - alpha) * source.image, source.image)
    return PseudoGT(image=np.clip(out, 0.0, 1.0), mode="blend", parts_refined=())


def write_pgt(path, pgt: PseudoGT):
    """Write the image as PPM plus a one-line sidecar with the provenance.

    The sidecar sits next to the image with a .meta extension and holds
    `mode=<mode>` and, when parts were refined, ` parts=<comma ids>`.
    """
    write_ppm(path, pgt.image)
    line = f"mode={pgt.mode}"
    if pgt.parts_refined:
        line += " parts=" + ",".join(str(p) for p in pgt.parts_refined)
    sidecar = os.path.splitext(str(path))[0] + ".meta"
    with open(sidecar, "w", encoding="ascii") as fh:
        fh.write(line + "\n")
