"""Attention-predicted thin-plate-spline warping gated by parsing masks.

Extends the color-only attribute transfer with a spatial stage: a reversed
attention pass aligns the reference features to the query layout, a small
head predicts TPS target control points over a coarse lattice, and the
color-transformed features are warped through the resulting sampling grid.
Grid entries outside the active part labels are pinned to the identity, so
unselected regions pass through bit-exactly and receive no warp gradients.

The TPS solve here runs on tensors end to end (kernel matrix, linear solve,
basis projection), so gradients reach the control-point predictor through
the sampling grid. Geometry where the predicted targets are duplicated or
collinear makes the solve singular; the warp then falls back to the
identity grid and reports it instead of failing.
"""

from __future__ import annotations

import numpy as np

from .attention import FatParams, fat_forward
from .tensor import (
    ParameterError,
    ShapeError,
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    grid_sample,
    linear_solve,
    matmul,
    pairwise_sqdist,
    reshape,
    tanh,
    transpose,
    xlogx,
)
from .tps import CONDITION_LIMIT, identity_grid, pixel_lattice, _system_matrix

__all__ = [
    "ControlGrid",
    "SpatialFatParams",
    "control_lattice",
    "predict_control_points",
    "tps_grid_from_targets",
    "masked_tps_warp",
    "align_reference",
    "spatial_fat_forward",
    "parse_active_labels",
    "ACTIVE_LABEL_SETS",
]

ACTIVE_LABEL_SETS = {
    "eyebrows": (2, 3),
    "eyes": (4, 5),
    "lips": (6,),
    "all": (1, 2, 3, 4, 5, 6, 7),
}


def parse_active_labels(spec: str):
    """Map a configuration string like 'eyebrows' to its label tuple."""
    try:
        return ACTIVE_LABEL_SETS[spec]
    except KeyError:
        raise ParameterError(
            f"unknown label set {spec!r}; choose from {sorted(ACTIVE_LABEL_SETS)}"
        ) from None


def control_lattice(hs: int, ws: int) -> np.ndarray:
    """Regular pixel-center lattice over the coarse grid, (hs*ws, 2) in [-1,1]."""
    return pixel_lattice(hs, ws)


class ControlGrid:
    """Source lattice plus predicted targets of the spatial transform."""

    def __init__(self, source: np.ndarray, targets):
        self.source = np.asarray(source, dtype=np.float64)
        self.targets = targets if isinstance(targets, Tensor) else Tensor(targets)
        if self.targets.shape != self.source.shape:
            raise ShapeError(
                f"targets {self.targets.shape} do not match lattice {self.source.shape}"
            )


class SpatialFatParams:
    """Color-transfer block, alignment block, and the control-point head.

    With `ctrl_init='identity'` the head starts at zero weights and an
    atanh-of-lattice positional bias, which makes the predicted targets equal
    the lattice: the warp is the identity and the whole module reduces to the
    plain color transfer until training moves the head.
    """

    def __init__(
        self,
        d: int,
        heads: int,
        n_landmarks: int,
        rng,
        grid_size: int = 8,
        active_labels=(2, 3),
        estimator: str = "identity",
        ctrl_init: str = "identity",
        color_block: FatParams = None,
    ):
        if ctrl_init not in ("identity", "random"):
            raise ParameterError(f"ctrl_init must be 'identity' or 'random', got {ctrl_init!r}")
        # the color block may be shared with a surrounding model; only the
        # alignment block and control head are owned here in that case
        self.owns_color = color_block is None
        self.fat = color_block if color_block is not None else FatParams(
            d, heads, n_landmarks, rng, estimator=estimator
        )
        self.align = FatParams(d, heads, n_landmarks, rng, estimator=estimator)
        self.grid_size = grid_size
        self.active_labels = tuple(active_labels)
        lattice_map = (
            control_lattice(grid_size, grid_size).reshape(grid_size, grid_size, 2).transpose(2, 0, 1)
        )
        if ctrl_init == "identity":
            self.ctrl_w = Tensor(np.zeros((2, d, 3, 3)), requires_grad=True)
        else:
            self.ctrl_w = Tensor(rng.normal(0.0, 0.05 / d, size=(2, d, 3, 3)), requires_grad=True)
        self.ctrl_b = Tensor(np.zeros(2), requires_grad=True)
        self.ctrl_pos = Tensor(np.arctanh(lattice_map), requires_grad=True)

    def tensors(self) -> dict:
        named = {}
        if self.owns_color:
            named.update({f"fat.{k}": v for k, v in self.fat.tensors().items()})
        named.update({f"align.{k}": v for k, v in self.align.tensors().items()})
        named.update({"ctrl_w": self.ctrl_w, "ctrl_b": self.ctrl_b, "ctrl_pos": self.ctrl_pos})
        return named

    def parameters(self) -> list:
        return list(self.tensors().values())


def align_reference(y_map: Tensor, x_map: Tensor, le_y, le_x, params: FatParams) -> Tensor:
    """Reference features corresponded to the query layout.

    The same transfer pass run with the roles swapped: the reference plays
    the query and the query supplies the attributes.
    """
    return fat_forward(y_map, x_map, le_y, le_x, params)


def predict_control_points(aligned: Tensor, params: SpatialFatParams) -> ControlGrid:
    """Predict tanh-bounded target control points over the coarse lattice.

    The aligned features are stride-pooled down to the lattice resolution,
    a 3x3 convolution maps them to 2 coordinate channels, and a per-position
    bias (the atanh of the lattice at identity initialization) recenters the
    tanh output.
    """
    d, h, w = aligned.shape
    hs = min(params.grid_size, h, w)
    if h % hs or w % hs:
        raise ShapeError(f"feature extent {h}x{w} not divisible by control grid {hs}")
    pooled = aligned if h == hs and w == hs else avg_pool2d(aligned, h // hs)
    pre = conv2d(pooled, params.ctrl_w, params.ctrl_b, stride=1) + params.ctrl_pos
    targets = transpose(reshape(tanh(pre), (2, hs * hs)))
    return ControlGrid(source=control_lattice(hs, hs), targets=targets)


def tps_grid_from_targets(control: ControlGrid, h: int, w: int):
    """Dense sampling grid carrying lattice content onto the targets.

    Solves the TPS that maps targets back to the lattice (the sampling
    direction) with tensor operations throughout, so the grid is
    differentiable in the targets. Returns (grid, solved); when the target
    geometry is degenerate the identity grid is returned with solved=False.
    """
    targets = control.targets
    k = targets.shape[0]
    delta_np = _system_matrix(targets.data)
    cond = np.linalg.cond(delta_np)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        return Tensor(identity_grid(h, w)), False

    ones_row = Tensor(np.ones((1, k)))
    coords = transpose(targets)  # (2, K)
    top = concat([concat([ones_row, coords], axis=0), Tensor(np.zeros((3, 3)))], axis=1)
    phi = xlogx(pairwise_sqdist(targets, targets)) * 0.5
    right = concat([Tensor(np.ones((k, 1))), targets], axis=1)
    delta = concat([top, concat([phi, right], axis=1)], axis=0)

    rhs = Tensor(np.concatenate([control.source, np.zeros((3, 2))], axis=0))
    t_transposed = linear_solve(transpose(delta), rhs)  # (K+3, 2)

    pix = pixel_lattice(h, w)
    basis = concat(
        [
            Tensor(np.ones((h * w, 1))),
            Tensor(pix),
            xlogx(pairwise_sqdist(Tensor(pix), targets)) * 0.5,
        ],
        axis=1,
    )
    grid = reshape(matmul(basis, t_transposed), (h, w, 2))
    return grid, True


def _nearest_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Down-sample a label grid by taking the cell-center label."""
    mh, mw = mask.shape
    if (mh, mw) == (h, w):
        return mask
    if mh % h or mw % w:
        raise ShapeError(f"mask {mask.shape} not reducible to {h}x{w}")
    sy, sx = mh // h, mw // w
    return mask[sy // 2 :: sy, sx // 2 :: sx]


def masked_tps_warp(x, control: ControlGrid, mask: np.ndarray, active_labels):
    """Warp only the regions whose parsing label is active.

    The sampling grid equals the TPS grid inside active labels and the
    identity grid elsewhere, then one bilinear pass resamples the input.
    Returns (warped, solved); a degenerate TPS solve keeps the identity grid
    everywhere and reports solved=False.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    _, h, w = x.shape
    grid, solved = tps_grid_from_targets(control, h, w)
    ident = identity_grid(h, w)
    if solved:
        local = _nearest_mask(np.asarray(mask), h, w)
        gate = np.isin(local, np.asarray(list(active_labels))).astype(np.float64)
        gate3 = np.repeat(gate[:, :, None], 2, axis=2)
        grid = grid * Tensor(gate3) + Tensor(ident * (1.0 - gate3))
    return grid_sample(x, grid), solved


def spatial_fat_forward(
    x_map: Tensor, y_map: Tensor, le_x, le_y, mask: np.ndarray, params: SpatialFatParams
):
    """Color transfer followed by the mask-gated predicted warp.

    Returns (features, solved) where solved=False flags the identity-grid
    fallback after a degenerate control-point prediction.
    """
    colored = fat_forward(x_map, y_map, le_x, le_y, params.fat)
    aligned = align_reference(y_map, x_map, le_y, le_x, params.align)
    control = predict_control_points(aligned, params)
    return masked_tps_warp(colored, control, mask, params.active_labels)
