"""Thin-plate-spline solving, dense sampling grids, and image warps.

A TPS is fixed by K control-point pairs (C -> C') in normalized [-1,1]^2
coordinates. Its 2x(K+3) coefficient matrix has a closed form: assemble the
square system from the r^2*log(r) kernel, a ones column and the raw
coordinates, then solve with partially pivoted LU. The solved transform
interpolates its control points exactly and degenerates to the affine map
whenever one explains the data, leaving the kernel weights at zero.

Everything here is pure numpy and side-effect free; the differentiable TPS
path used inside the generator lives in `fatkit.spatial`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError, ShapeError, Tensor, bilinear_sample, grid_sample

__all__ = [
    "DegenerateGeometryError",
    "TpsTransform",
    "radial_kernel",
    "tps_solve",
    "tps_apply",
    "tps_grid",
    "identity_grid",
    "pixel_lattice",
    "warp_image",
    "min_shift",
    "read_points",
    "write_points",
    "CONDITION_LIMIT",
]

CONDITION_LIMIT = 1e12


class DegenerateGeometryError(ArithmeticError):
    """Control-point geometry leaves the TPS system (near-)singular."""


def radial_kernel(r):
    """phi(r) = r^2 * log(r), extended continuously with phi(0) = 0."""
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr < 0):
        raise ParameterError("radial kernel argument must be nonnegative")
    safe = np.where(arr > 0, arr, 1.0)
    out = np.where(arr > 0, safe * safe * np.log(safe), 0.0)
    return float(out) if np.isscalar(r) else out


def _kernel_matrix(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2))
    return radial_kernel(d)


@dataclass(frozen=True)
class TpsTransform:
    """Solved TPS coefficients together with their source control points.

    matrix rows are (x', y') coefficients over the basis
    [1, x, y, phi(|p-c_1|), ..., phi(|p-c_K|)].
    """

    matrix: np.ndarray  # 2 x (K+3)
    control: np.ndarray  # K x 2 source points

    @property
    def affine(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def kernel_weights(self) -> np.ndarray:
        return self.matrix[:, 3:]


def _system_matrix(control: np.ndarray) -> np.ndarray:
    k = control.shape[0]
    delta = np.zeros((k + 3, k + 3))
    delta[0, :k] = 1.0
    delta[1, :k] = control[:, 0]
    delta[2, :k] = control[:, 1]
    delta[3:, :k] = _kernel_matrix(control, control)
    delta[3:, k] = 1.0
    delta[3:, k + 1] = control[:, 0]
    delta[3:, k + 2] = control[:, 1]
    return delta


def tps_solve(src: np.ndarray, dst: np.ndarray) -> TpsTransform:
    """Closed-form TPS interpolating src -> dst.

    Solves T * Delta = [dst, 0] by LU instead of forming the inverse; the
    boundary conditions (kernel weights orthogonal to 1 and to the source
    coordinates) are rows of the system, so they hold to solver precision.
    Raises DegenerateGeometryError when the system is ill conditioned,
    e.g. duplicate or collinear source points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ShapeError(f"control points must be matching (K,2) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 4:
        raise ParameterError(f"need at least 4 control points, got {src.shape[0]}")
    delta = _system_matrix(src)
    cond = np.linalg.cond(delta)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegenerateGeometryError(
            f"TPS system condition {cond:.3e} exceeds {CONDITION_LIMIT:.0e}; "
            f"source points are duplicated or collinear: {np.array2string(src, precision=4)}"
        )
    rhs = np.concatenate([dst, np.zeros((3, 2))], axis=0)  # (K+3) x 2
    matrix = np.linalg.solve(delta.T, rhs).T
    return TpsTransform(matrix=matrix, control=src.copy())


def tps_apply(transform: TpsTransform, points: np.ndarray) -> np.ndarray:
    """Map points through the transform; results clamp into [-1,1]^2."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    basis = np.concatenate(
        [np.ones((pts.shape[0], 1)), pts, _kernel_matrix(pts, transform.control)], axis=1
    )
    mapped = basis @ transform.matrix.T
    mapped = np.clip(mapped, -1.0, 1.0)
    return mapped[0] if np.asarray(points).ndim == 1 else mapped


def pixel_lattice(h: int, w: int) -> np.ndarray:
    """Pixel-center coordinates in [-1,1]^2, row-major, as an (h*w, 2) array."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h * w, 2))
    out[:, 0] = (2.0 * xs.ravel() + 1.0) / w - 1.0
    out[:, 1] = (2.0 * ys.ravel() + 1.0) / h - 1.0
    return out


def identity_grid(h: int, w: int) -> np.ndarray:
    """The sampling grid that reproduces an image exactly."""
    return pixel_lattice(h, w).reshape(h, w, 2)


def tps_grid(transform: TpsTransform, h: int, w: int) -> np.ndarray:
    """Dense h x w sampling grid: every output pixel mapped through the TPS."""
    if h < 2 or w < 2:
        raise ParameterError(f"grid extents must be >= 2, got {h}x{w}")
    return tps_apply(transform, pixel_lattice(h, w)).reshape(h, w, 2)


def warp_image(image, grid):
    """Resample an image (C,H,W) at a sampling grid, clamping at the border.

    Accepts a plain array or a Tensor; Tensor input keeps the operation
    differentiable by routing through the tensor-engine sampler, and both
    paths share one bilinear kernel.
    """
    if isinstance(image, Tensor):
        g = grid if isinstance(grid, Tensor) else Tensor(grid)
        return grid_sample(image, g)
    return bilinear_sample(np.asarray(image, dtype=np.float64), np.asarray(grid, dtype=np.float64))


def min_shift(src_points: np.ndarray, ref_points: np.ndarray) -> np.ndarray:
    """Translation minimizing sum |P_i - (Q_i - shift)|^2: the mean of Q - P.

    src_points and ref_points must be matched by index.
    """
    p = np.asarray(src_points, dtype=np.float64)
    q = np.asarray(ref_points, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ParameterError(f"point sets must be matching (N,2) arrays, got {p.shape} and {q.shape}")
    if p.shape[0] == 0:
        raise ParameterError("point sets must be nonempty")
    return (q - p).mean(axis=0)


# -- point-set file format ------------------------------------------------------

_POINTS_MAGIC = "FATPTS"
_POINTS_VERSION = 1


def write_points(path, points: np.ndarray):
    """Write a control-point set: header 'FATPTS 1 <K>' then K 'x y' lines."""
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{_POINTS_MAGIC} {_POINTS_VERSION} {pts.shape[0]}\n")
        for x, y in pts:
            fh.write(f"{x:.9f} {y:.9f}\n")


def read_points(path) -> np.ndarray:
    from .tensor import FormatError

    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != _POINTS_MAGIC or header[1] != str(_POINTS_VERSION):
            raise FormatError(f"{path}: expected 'FATPTS 1 <K>' header, got {' '.join(header)!r}")
        try:
            count = int(header[2])
            pts = np.array([[float(v) for v in fh.readline().split()] for _ in range(count)])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed point line: {exc}") from exc
    if pts.shape != (count, 2):
        raise FormatError(f"{path}: expected {count} 'x y' lines, got shape {pts.shape}")
    if np.any(np.abs(pts) > 1.0):
        raise FormatError(f"{path}: coordinates must lie in [-1,1]")
    return pts
