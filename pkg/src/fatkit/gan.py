"""Generator and discriminators, the loss stack, and the training loop.

The generator is an encoder-decoder: three encoder convolutions (strides
1, 2, 2), bottleneck blocks on each branch, the cross-face attribute
transfer at the bottleneck (optionally with the predicted spatial warp),
two more bottleneck blocks and a mirrored decoder, with a tanh output
rescaled to [0,1]. Every conv block is convolution + instance norm + ReLU.
Two patch discriminators tell real from generated in each domain.

Training follows the unpaired two-generator-pass scheme: one discriminator
update on detached fakes, then one generator update whose loss sums the
adversarial, cycle-consistency, perceptual and pseudo-ground-truth terms of
both transfer directions before a single backward. All randomness flows
from one seed through per-component child streams, so runs replay
bit-identically and enabling the spatial branch never perturbs the shared
parameter draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import FatParams, fat_forward, landmark_embedding
from .data import FaceSample
from .pseudo_gt import color_pgt, spatial_pgt
from .spatial import SpatialFatParams, spatial_fat_forward
from .tensor import (
    AdamState,
    FormatError,
    ParameterError,
    Tensor,
    adam_step,
    conv2d,
    deconv2d,
    instance_norm,
    l1_loss,
    mse_loss,
    relu,
    softplus,
    tanh,
    tensor_mean,
    save_tensors,
    zero_grads,
)

__all__ = [
    "GeneratorConfig",
    "LossWeights",
    "TrainPair",
    "TrainState",
    "NonFiniteLossError",
    "GeneratorParams",
    "DiscriminatorParams",
    "PerceptualParams",
    "generator_forward",
    "discriminator_forward",
    "perceptual_forward",
    "bce_with_logits",
    "loss_discriminators",
    "loss_generator",
    "init_train_state",
    "prepare_pair",
    "train_step",
    "fit",
    "history_csv",
    "state_tensors",
    "load_generator",
    "parse_config_text",
    "config_text",
]

LOG_COLUMNS = ("iter", "J_D", "J_G", "adv", "cyc", "per", "make")


class NonFiniteLossError(ArithmeticError):
    """A loss component left the finite range during training."""


@dataclass
class GeneratorConfig:
    size: int = 64
    base_width: int = 16
    heads: int = 2
    spatial: bool = False
    warp_labels: tuple = (2, 3)
    n_landmarks: int = 30
    control_grid: int = 8

    def __post_init__(self):
        if self.size % 4 != 0:
            raise ParameterError(f"image size must be divisible by 4, got {self.size}")
        if self.base_width < 1 or self.heads < 1:
            raise ParameterError("base width and head count must be positive")

    @property
    def bottleneck(self) -> int:
        return self.size // 4

    @property
    def feature_dim(self) -> int:
        return 4 * self.base_width


@dataclass
class LossWeights:
    adv: float = 1.0
    cyc: float = 10.0
    per: float = 0.05
    make: float = 1.0

    def __post_init__(self):
        vals = (self.adv, self.cyc, self.per, self.make)
        if min(vals) < 0.0:
            raise ParameterError(f"loss weights must be nonnegative, got {vals}")
        if max(vals) == 0.0:
            raise ParameterError("at least one loss weight must be positive")


class ConvBlock:
    """Convolution (or transposed convolution) + optional norm + activation."""

    def __init__(self, rng, c_in, c_out, stride=1, k=3, norm=True, act="relu", transposed=False):
        scale = 1.0 / np.sqrt(c_in * k * k)
        if transposed:
            shape = (c_in, c_out, k, k)
        else:
            shape = (c_out, c_in, k, k)
        self.w = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.norm = norm
        self.act = act
        self.transposed = transposed

    def __call__(self, x: Tensor) -> Tensor:
        op = deconv2d if self.transposed else conv2d
        y = op(x, self.w, self.b, stride=self.stride)
        if self.norm:
            y = instance_norm(y)
        if self.act == "relu":
            y = relu(y)
        elif self.act == "tanh":
            y = tanh(y)
        return y

    def tensors(self):
        return {"w": self.w, "b": self.b}


class GeneratorParams:
    """All learnable state of the generator.

    Construction draws the shared blocks from `rng` in a fixed order and the
    spatial-only blocks from `rng_spatial`, so a spatial and a non-spatial
    generator started from the same seed share every common parameter.
    """

    def __init__(self, config: GeneratorConfig, rng, rng_spatial=None):
        w = config.base_width
        d = config.feature_dim
        self.config = config
        self.enc = [
            ConvBlock(rng, 3, w, stride=1),
            ConvBlock(rng, w, 2 * w, stride=2),
            ConvBlock(rng, 2 * w, d, stride=2),
        ]
        self.pre = [ConvBlock(rng, d, d) for _ in range(3)]
        self.fat = FatParams(d, config.heads, config.n_landmarks, rng, estimator="random")
        self.post = [ConvBlock(rng, d, d) for _ in range(2)]
        # the transposed-conv stages run without instance norm: normalizing
        # here strips the channel means that carry the transferred colors
        self.dec = [
            ConvBlock(rng, d, 2 * w, stride=2, transposed=True, norm=False),
            ConvBlock(rng, 2 * w, w, stride=2, transposed=True, norm=False),
            ConvBlock(rng, w, 3, stride=1, norm=False, act="none"),
        ]
        self.spatial = None
        if config.spatial:
            if rng_spatial is None:
                raise ParameterError("spatial generator needs its own parameter stream")
            self.spatial = SpatialFatParams(
                d,
                config.heads,
                config.n_landmarks,
                rng_spatial,
                grid_size=min(config.control_grid, config.bottleneck),
                active_labels=config.warp_labels,
                color_block=self.fat,
            )

    def named(self, prefix="gen"):
        out = {}
        for i, block in enumerate(self.enc):
            out.update({f"{prefix}.enc{i}.{k}": v for k, v in block.tensors().items()})
        for i, block in enumerate(self.pre):
            out.update({f"{prefix}.pre{i}.{k}": v for k, v in block.tensors().items()})
        out.update({f"{prefix}.fat.{k}": v for k, v in self.fat.tensors().items()})
        for i, block in enumerate(self.post):
            out.update({f"{prefix}.post{i}.{k}": v for k, v in block.tensors().items()})
        for i, block in enumerate(self.dec):
            out.update({f"{prefix}.dec{i}.{k}": v for k, v in block.tensors().items()})
        if self.spatial is not None:
            out.update({f"{prefix}.spatial.{k}": v for k, v in self.spatial.tensors().items()})
        return out

    def parameters(self):
        return list(self.named().values())


class DiscriminatorParams:
    """Four stride-2 convolutions down to a logit patch grid (size/16)."""

    def __init__(self, config: GeneratorConfig, rng):
        w = config.base_width
        self.blocks = [
            ConvBlock(rng, 3, w, stride=2, norm=False),
            ConvBlock(rng, w, 2 * w, stride=2),
            ConvBlock(rng, 2 * w, 4 * w, stride=2),
            ConvBlock(rng, 4 * w, 1, stride=2, norm=False, act="none"),
        ]

    def named(self, prefix="disc"):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"{prefix}.b{i}.{k}": v for k, v in block.tensors().items()})
        return out

    def parameters(self):
        return list(self.named().values())


class PerceptualParams:
    """A fixed random three-layer feature stack standing in for a pretrained
    perceptual network; frozen, but gradients flow through it to the input."""

    def __init__(self, rng):
        self.blocks = [
            ConvBlock(rng, 3, 8, stride=2, norm=False),
            ConvBlock(rng, 8, 16, stride=2, norm=False),
            ConvBlock(rng, 16, 16, stride=1, norm=False, act="none"),
        ]
        for block in self.blocks:
            block.w.requires_grad = False
            block.b.requires_grad = False

    def named(self, prefix="percep"):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"{prefix}.b{i}.{k}": v for k, v in block.tensors().items()})
        return out


# -- forward passes ------------------------------------------------------------


def _embeddings(config: GeneratorConfig, landmarks) -> np.ndarray:
    hb = config.bottleneck
    return landmark_embedding(hb, hb, landmarks)


def generator_forward(x_img, y_img, lm_x, lm_y, mask_x, params: GeneratorParams,
                      config: GeneratorConfig) -> Tensor:
    """Transfer the reference's attributes onto the source image.

    x_img supplies identity, y_img supplies attributes; landmarks feed the
    positional embeddings and mask_x gates the spatial warp. Returns an
    image tensor in [0,1] of the configured size.
    """
    x = x_img if isinstance(x_img, Tensor) else Tensor(x_img)
    y = y_img if isinstance(y_img, Tensor) else Tensor(y_img)
    expected = (3, config.size, config.size)
    if x.shape != expected or y.shape != expected:
        raise ParameterError(f"images must be {expected}, got {x.shape} and {y.shape}")

    def encode(t):
        for block in params.enc:
            t = block(t)
        for block in params.pre:
            t = block(t)
        return t

    xb = encode(x)
    yb = encode(y)
    le_x = _embeddings(config, lm_x)
    le_y = _embeddings(config, lm_y)
    if params.spatial is not None:
        feat, _ = spatial_fat_forward(xb, yb, le_x, le_y, np.asarray(mask_x), params.spatial)
    else:
        feat = fat_forward(xb, yb, le_x, le_y, params.fat)
    for block in params.post:
        feat = block(feat)
    for block in params.dec:
        feat = block(feat)
    return (tanh(feat) + 1.0) * 0.5


def discriminator_forward(img, params: DiscriminatorParams) -> Tensor:
    t = img if isinstance(img, Tensor) else Tensor(img)
    for block in params.blocks:
        t = block(t)
    return t


def perceptual_forward(img, params: PerceptualParams) -> Tensor:
    t = img if isinstance(img, Tensor) else Tensor(img)
    for block in params.blocks:
        t = block(t)
    return t


# -- losses ---------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross entropy against a constant label, overflow-safe."""
    per_patch = softplus(logits) - logits * float(target)
    return tensor_mean(per_patch)


def loss_discriminators(x, y, z_xy, z_yx, disc_x, disc_y) -> Tensor:
    """Four-term patch BCE: real source/reference against the two fakes.

    Generated images must be detached by the caller; each discriminator sees
    the generated face that lives in its own domain.
    """
    return (
        bce_with_logits(discriminator_forward(x, disc_x), 1.0)
        + bce_with_logits(discriminator_forward(y, disc_y), 1.0)
        + bce_with_logits(discriminator_forward(z_yx, disc_x), 0.0)
        + bce_with_logits(discriminator_forward(z_xy, disc_y), 0.0)
    )


@dataclass
class TrainPair:
    """One source/reference pair with its precomputed supervision."""

    x: FaceSample
    y: FaceSample
    pgt_xy: np.ndarray = None  # supervision for G(x, y)
    pgt_yx: np.ndarray = None  # supervision for G(y, x)
    feat_x: np.ndarray = None  # cached frozen features of x
    feat_y: np.ndarray = None


def prepare_pair(x: FaceSample, y: FaceSample, percep: PerceptualParams,
                 spatial_labels=()) -> TrainPair:
    """Build the cached pseudo ground truth and frozen features for a pair."""
    gt_xy = color_pgt(x, y)
    gt_yx = color_pgt(y, x)
    for label in spatial_labels:
        gt_xy = spatial_pgt(gt_xy, x, y, label)
        gt_yx = spatial_pgt(gt_yx, y, x, label)
    return TrainPair(
        x=x,
        y=y,
        pgt_xy=gt_xy.image,
        pgt_yx=gt_yx.image,
        feat_x=perceptual_forward(x.image, percep).data,
        feat_y=perceptual_forward(y.image, percep).data,
    )


def loss_generator(pair: TrainPair, z_xy: Tensor, z_yx: Tensor, gen: GeneratorParams,
                   disc_x, disc_y, percep, weights: LossWeights, config: GeneratorConfig):
    """Weighted sum of both transfer directions' generator losses.

    Components: adversarial patch BCE toward "real", L1 cycle consistency of
    the double transfer, squared error between frozen features, and squared
    error against the pseudo ground truth.
    """
    x, y = pair.x, pair.y
    adv = bce_with_logits(discriminator_forward(z_yx, disc_x), 1.0) + bce_with_logits(
        discriminator_forward(z_xy, disc_y), 1.0
    )
    back_x = generator_forward(z_xy, Tensor(x.image), x.landmarks, x.landmarks, x.mask, gen, config)
    back_y = generator_forward(z_yx, Tensor(y.image), y.landmarks, y.landmarks, y.mask, gen, config)
    cyc = l1_loss(back_x, Tensor(x.image)) + l1_loss(back_y, Tensor(y.image))
    per = mse_loss(perceptual_forward(z_xy, percep), Tensor(pair.feat_x)) + mse_loss(
        perceptual_forward(z_yx, percep), Tensor(pair.feat_y)
    )
    if weights.make > 0.0 and (pair.pgt_xy is None or pair.pgt_yx is None):
        raise ParameterError("makeup weight is positive but the pair carries no pseudo ground truth")
    if pair.pgt_xy is not None and pair.pgt_yx is not None:
        make = mse_loss(z_xy, Tensor(pair.pgt_xy)) + mse_loss(z_yx, Tensor(pair.pgt_yx))
    else:
        make = Tensor(0.0)
    total = weights.adv * adv + weights.cyc * cyc + weights.per * per + weights.make * make
    parts = {"adv": adv.item(), "cyc": cyc.item(), "per": per.item(), "make": make.item()}
    return total, parts


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainState:
    config: GeneratorConfig
    gen: GeneratorParams
    disc_x: DiscriminatorParams
    disc_y: DiscriminatorParams
    percep: PerceptualParams
    adam_g: AdamState
    adam_d: AdamState
    seed: int
    iteration: int = 0
    history: list = field(default_factory=list)


def init_train_state(config: GeneratorConfig, seed: int, beta1=0.5, beta2=0.999) -> TrainState:
    """Deterministic fresh state; every component gets its own child stream."""
    children = np.random.SeedSequence(seed).spawn(5)
    rngs = [np.random.default_rng(c) for c in children]
    gen = GeneratorParams(config, rngs[0], rng_spatial=rngs[1])
    disc_x = DiscriminatorParams(config, rngs[2])
    disc_y = DiscriminatorParams(config, rngs[3])
    percep = PerceptualParams(rngs[4])
    adam_g = AdamState(gen.parameters(), beta1=beta1, beta2=beta2)
    adam_d = AdamState(disc_x.parameters() + disc_y.parameters(), beta1=beta1, beta2=beta2)
    return TrainState(config, gen, disc_x, disc_y, percep, adam_g, adam_d, seed=seed)


def _all_params(state: TrainState):
    return (
        state.gen.parameters()
        + state.disc_x.parameters()
        + state.disc_y.parameters()
    )


def train_step(state: TrainState, pair: TrainPair, weights: LossWeights, lr: float) -> dict:
    """One discriminator update followed by one generator update.

    The symmetric losses of both directions are summed before each backward;
    gradients are reset between the two updates. Raises NonFiniteLossError
    naming the first component that left the finite range.
    """
    cfg = state.config
    x, y = pair.x, pair.y
    z_xy = generator_forward(x.image, y.image, x.landmarks, y.landmarks, x.mask, state.gen, cfg)
    z_yx = generator_forward(y.image, x.image, y.landmarks, x.landmarks, y.mask, state.gen, cfg)

    zero_grads(_all_params(state))
    j_d = loss_discriminators(
        Tensor(x.image), Tensor(y.image), z_xy.detach(), z_yx.detach(), state.disc_x, state.disc_y
    )
    j_d.backward()
    adam_step(state.adam_d, lr)

    zero_grads(_all_params(state))
    j_g, parts = loss_generator(
        pair, z_xy, z_yx, state.gen, state.disc_x, state.disc_y, state.percep, weights, cfg
    )
    j_g.backward()
    adam_step(state.adam_g, lr)
    zero_grads(_all_params(state))

    state.iteration += 1
    row = {"iter": state.iteration, "J_D": j_d.item(), "J_G": j_g.item(), **parts}
    for name in ("J_D", "J_G", "adv", "cyc", "per", "make"):
        if not np.isfinite(row[name]):
            raise NonFiniteLossError(f"loss component {name} became non-finite at iteration {row['iter']}")
    state.history.append(row)
    return row


def fit(state: TrainState, pairs, weights: LossWeights, lr: float, steps: int) -> list:
    """Run `steps` updates, drawing pairs without replacement per epoch.

    The shuffle order comes from the state seed, so identical seeds and data
    replay the exact loss history.
    """
    if not pairs:
        raise ParameterError("training needs a nonempty pair list")
    order_rng = np.random.default_rng(np.random.SeedSequence([state.seed, 0x5EED]))
    done = 0
    while done < steps:
        for idx in order_rng.permutation(len(pairs)):
            train_step(state, pairs[idx], weights, lr)
            done += 1
            if done >= steps:
                break
    return state.history


def history_csv(history) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if c != "iter" else str(row[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


# -- persistence ----------------------------------------------------------------------


def state_tensors(state: TrainState) -> dict:
    named = {}
    named.update(state.gen.named("gen"))
    named.update(state.disc_x.named("disc_x"))
    named.update(state.disc_y.named("disc_y"))
    named.update(state.percep.named("percep"))
    return named


def save_state(path, state: TrainState):
    save_tensors(path, state_tensors(state))


def load_generator(path, config: GeneratorConfig) -> GeneratorParams:
    """Rebuild a generator and load its weights from a checkpoint."""
    from .tensor import load_tensors

    children = np.random.SeedSequence(0).spawn(2)
    gen = GeneratorParams(config, np.random.default_rng(children[0]),
                          rng_spatial=np.random.default_rng(children[1]))
    stored = load_tensors(path)
    for name, tensor in gen.named("gen").items():
        if name not in stored:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = stored[name]
        if tuple(arr.shape) != tensor.shape:
            raise FormatError(f"checkpoint tensor {name!r} has shape {arr.shape}, expected {tensor.shape}")
        tensor.data[...] = arr.astype(np.float64)
    return gen


# -- configuration file ------------------------------------------------------------------


_CONFIG_KEYS = {
    "size": int,
    "base_width": int,
    "heads": int,
    "spatial": None,  # bool, parsed below
    "warp_labels": str,
    "control_grid": int,
    "steps": int,
    "lr": float,
    "seed": int,
    "lambda_adv": float,
    "lambda_cyc": float,
    "lambda_per": float,
    "lambda_make": float,
}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; unknown keys are errors, not warnings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_KEYS:
            raise FormatError(f"line {lineno}: unknown configuration key {key!r}")
        if key == "spatial":
            if value not in ("true", "false"):
                raise FormatError(f"line {lineno}: spatial must be true or false, got {value!r}")
            out[key] = value == "true"
        else:
            caster = _CONFIG_KEYS[key]
            try:
                out[key] = caster(value)
            except ValueError as exc:
                raise FormatError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return out


def config_text(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if key not in _CONFIG_KEYS:
            raise ParameterError(f"unknown configuration key {key!r}")
        if key == "spatial":
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
