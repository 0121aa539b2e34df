"""Synthetic face corpus and bit-exact file formats.

Faces are parametric cartoons: every part is an analytic shape, so the
landmark coordinates are computed from the same curves that get rasterized
and are exact by construction. The parsing mask uses the fixed label set

    0 background, 1 skin, 2 left eyebrow, 3 right eyebrow,
    4 left eye, 5 right eye, 6 lips, 7 hair

and the landmark schema pins 30 named points in a fixed order:
8 face-oval, 4 per eyebrow, 4 per eye, 6 lips.

Images are stored as binary PPM (P6, maxval 255), masks as binary PGM (P5,
values are labels), landmarks as 'FATLM 1 30' text. Generation is fully
deterministic under a seed: per-sample RNG streams are spawned from the
corpus seed, so regeneration is byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .tensor import FormatError, ParameterError

__all__ = [
    "LABELS",
    "LABEL_NAMES",
    "LANDMARK_COUNT",
    "PART_LANDMARKS",
    "OVAL_LANDMARKS",
    "FaceSample",
    "SynthFaceParams",
    "synth_face",
    "random_face_params",
    "make_corpus",
    "read_manifest",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "write_landmarks",
    "read_landmarks",
    "save_sample",
    "load_sample",
]

LABELS = {
    "background": 0,
    "skin": 1,
    "left_brow": 2,
    "right_brow": 3,
    "left_eye": 4,
    "right_eye": 5,
    "lips": 6,
    "hair": 7,
}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
MAX_LABEL = 7

LANDMARK_COUNT = 30
OVAL_LANDMARKS = tuple(range(0, 8))
PART_LANDMARKS = {
    2: tuple(range(8, 12)),
    3: tuple(range(12, 16)),
    4: tuple(range(16, 20)),
    5: tuple(range(20, 24)),
    6: tuple(range(24, 30)),
}


@dataclass
class FaceSample:
    """Image + landmarks + parsing mask triple, the unit of every pipeline."""

    image: np.ndarray  # (3,H,W) float64 in [0,1]
    landmarks: np.ndarray  # (30,2) in [0,1]^2, x right, y down
    mask: np.ndarray  # (H,W) uint8 labels

    @property
    def size(self) -> int:
        return self.image.shape[1]


@dataclass
class SynthFaceParams:
    """Knobs of one synthetic face; identical params and seed render
    bit-identically."""

    skin_color: tuple = (0.84, 0.68, 0.58)
    lip_color: tuple = (0.78, 0.45, 0.45)
    shadow_color: tuple = (0.45, 0.35, 0.65)
    shadow_radius: float = 0.0  # 0 disables, else ~[0.06, 0.11]
    shadow_strength: float = 0.0  # blend weight in [0,1]
    brow_curvature: float = 0.0  # kappa in [-0.5, 0.5]
    brow_thickness: float = 0.03  # in [0.02, 0.05]
    rotation_deg: float = 0.0  # in [-15, 15]
    shift: tuple = (0.0, 0.0)  # each in [-0.03, 0.03]
    shade_strength: float = 0.0  # lighting gradient in [0, 0.3]
    seed: int = 0

    def validate(self):
        checks = [
            (-0.5 <= self.brow_curvature <= 0.5, "brow curvature outside [-0.5, 0.5]"),
            (0.02 <= self.brow_thickness <= 0.05, "brow thickness outside [0.02, 0.05]"),
            (abs(self.rotation_deg) <= 15.0, "rotation outside +-15 degrees"),
            (max(abs(self.shift[0]), abs(self.shift[1])) <= 0.03, "shift outside +-0.03"),
            (0.0 <= self.shade_strength <= 0.3, "shade strength outside [0, 0.3]"),
            (0.0 <= self.shadow_strength <= 1.0, "shadow strength outside [0, 1]"),
            (0.0 <= self.shadow_radius <= 0.12, "shadow radius outside [0, 0.12]"),
        ]
        for color in (self.skin_color, self.lip_color, self.shadow_color):
            checks.append((min(color) >= 0.0 and max(color) <= 1.0, f"color {color} outside [0,1]"))
        for ok, msg in checks:
            if not ok:
                raise ParameterError(msg)


# -- canonical geometry -------------------------------------------------------

_FACE_C = np.array([0.5, 0.54])
_FACE_R = np.array([0.33, 0.40])
_HAIR_C = np.array([0.5, 0.44])
_HAIR_R = np.array([0.37, 0.42])
_EYE_C = {"left": np.array([0.365, 0.46]), "right": np.array([0.635, 0.46])}
_EYE_R = np.array([0.055, 0.032])
_IRIS_R = 0.022
_BROW_Y = 0.375
_BROW_HALF = 0.095
_BROW_SAG = 0.12  # peak offset at |kappa| = 0.5 is 0.06
_LIP_C = np.array([0.5, 0.74])
_LIP_R = np.array([0.105, 0.048])
_INSET = 0.88  # landmark inset inside part boundaries


def _pose(params: SynthFaceParams):
    th = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return rot, np.asarray(params.shift, dtype=np.float64)


def _to_world(points: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return (points - _FACE_C) @ rot.T + _FACE_C + shift


def _to_canonical(points: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return (points - _FACE_C - shift) @ rot + _FACE_C


def _brow_centerline(side: str, kappa: float, t: np.ndarray) -> np.ndarray:
    cx = _EYE_C[side][0]
    xs = cx - _BROW_HALF + 2.0 * _BROW_HALF * t
    ys = _BROW_Y - kappa * _BROW_SAG * 4.0 * t * (1.0 - t)
    return np.stack([xs, ys], axis=-1)


def _canonical_landmarks(params: SynthFaceParams) -> np.ndarray:
    pts = np.zeros((LANDMARK_COUNT, 2))
    angles = np.deg2rad(np.arange(0, 360, 45))
    pts[0:8] = _FACE_C + 0.97 * _FACE_R * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ts = np.array([0.04, 1.0 / 3.0, 2.0 / 3.0, 0.96])
    pts[8:12] = _brow_centerline("left", params.brow_curvature, ts)
    pts[12:16] = _brow_centerline("right", params.brow_curvature, ts)
    eye_angles = np.deg2rad([180.0, 270.0, 0.0, 90.0])  # left, top, right, bottom (y down)
    ring = np.stack([np.cos(eye_angles), np.sin(eye_angles)], axis=1)
    pts[16:20] = _EYE_C["left"] + _INSET * _EYE_R * ring
    pts[20:24] = _EYE_C["right"] + _INSET * _EYE_R * ring
    lip_angles = np.deg2rad([180.0, 240.0, 300.0, 0.0, 60.0, 120.0])  # closed contour
    lip_ring = np.stack([np.cos(lip_angles), np.sin(lip_angles)], axis=1)
    pts[24:30] = _LIP_C + _INSET * _LIP_R * lip_ring
    return pts


def _inside_ellipse(pts: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    rel = (pts - center) / radii
    return (rel * rel).sum(axis=-1) <= 1.0


def _paint(points: np.ndarray, params: SynthFaceParams, aux: dict):
    """Labels and colors of the painter stack at arbitrary world points."""
    rot, shift = aux["pose"]
    pc = _to_canonical(points, rot, shift)
    n = pc.shape[0]
    labels = np.zeros(n, dtype=np.uint8)
    colors = np.tile(np.array([0.36, 0.40, 0.46]), (n, 1))

    hair = _inside_ellipse(pc, _HAIR_C, _HAIR_R)
    labels[hair] = LABELS["hair"]
    colors[hair] = aux["hair_color"]

    face = _inside_ellipse(pc, _FACE_C, _FACE_R)
    labels[face] = LABELS["skin"]
    colors[face] = params.skin_color

    if params.shadow_strength > 0.0 and params.shadow_radius > 0.0:
        for side in ("left", "right"):
            d = np.linalg.norm(pc - _EYE_C[side], axis=1)
            inside = face & (d < params.shadow_radius)
            fall = params.shadow_strength * (1.0 - (d[inside] / params.shadow_radius) ** 2)
            colors[inside] = (1.0 - fall[:, None]) * colors[inside] + fall[:, None] * np.asarray(
                params.shadow_color
            )

    for side, label in (("left", LABELS["left_brow"]), ("right", LABELS["right_brow"])):
        cx = _EYE_C[side][0]
        t = (pc[:, 0] - (cx - _BROW_HALF)) / (2.0 * _BROW_HALF)
        on_span = (t >= 0.0) & (t <= 1.0)
        tt = np.clip(t, 0.0, 1.0)
        center_y = _BROW_Y - params.brow_curvature * _BROW_SAG * 4.0 * tt * (1.0 - tt)
        band = np.abs(pc[:, 1] - center_y) <= params.brow_thickness / 2.0
        brow = on_span & band & face
        labels[brow] = label
        colors[brow] = aux["brow_color"]

    for side, label in (("left", LABELS["left_eye"]), ("right", LABELS["right_eye"])):
        eye = _inside_ellipse(pc, _EYE_C[side], _EYE_R)
        labels[eye] = label
        colors[eye] = np.array([0.93, 0.93, 0.95])
        iris = eye & (np.linalg.norm(pc - _EYE_C[side], axis=1) < _IRIS_R)
        colors[iris] = aux["iris_color"]

    lips = _inside_ellipse(pc, _LIP_C, _LIP_R)
    labels[lips] = LABELS["lips"]
    colors[lips] = params.lip_color

    if params.shade_strength > 0.0:
        along = points @ aux["shade_dir"]
        factor = 1.0 + params.shade_strength * (along - along.mean())
        colors = colors * factor[:, None]

    return labels, np.clip(colors, 0.0, 1.0)


def synth_face(params: SynthFaceParams, size: int, supersample: int = 4) -> FaceSample:
    """Render one anti-aliased face; landmarks come from the same curves.

    The image averages `supersample`^2 evaluations per pixel; the categorical
    mask is evaluated once at pixel centers.
    """
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0xFACE, int(params.seed)]))
    theta = rng.uniform(0.0, 2.0 * math.pi)
    aux = {
        "pose": _pose(params),
        "hair_color": np.array([0.22, 0.16, 0.12]) + rng.uniform(-0.05, 0.05, size=3),
        "brow_color": np.array([0.16, 0.11, 0.08]),
        "iris_color": np.array([0.2, 0.3, 0.45]) + rng.uniform(-0.1, 0.1, size=3),
        "shade_dir": np.array([math.cos(theta), math.sin(theta)]),
    }

    ss = supersample
    sub = (np.arange(size * ss) + 0.5) / (size * ss)
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    _, colors = _paint(pts, params, aux)
    image = colors.reshape(size, ss, size, ss, 3).mean(axis=(1, 3)).transpose(2, 0, 1)

    centers = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    labels, _ = _paint(np.stack([xx.ravel(), yy.ravel()], axis=1), params, aux)
    mask = labels.reshape(size, size)

    rot, shift = aux["pose"]
    landmarks = _to_world(_canonical_landmarks(params), rot, shift)
    return FaceSample(image=np.ascontiguousarray(image), landmarks=landmarks, mask=mask)


def random_face_params(rng, group: str, seed: int) -> SynthFaceParams:
    """Draw face parameters for the 'plain' or 'makeup' group."""
    skin = np.array([rng.uniform(0.72, 0.9), rng.uniform(0.56, 0.74), rng.uniform(0.46, 0.62)])
    skin = np.sort(skin)[::-1]  # keep a skin-like warm ordering
    if group == "makeup":
        palettes = np.array(
            [[0.75, 0.08, 0.18], [0.62, 0.10, 0.40], [0.80, 0.25, 0.10], [0.55, 0.05, 0.55]]
        )
        lip = palettes[rng.integers(len(palettes))] + rng.uniform(-0.05, 0.05, size=3)
        shadow_strength = rng.uniform(0.5, 0.85)
        shadow_radius = rng.uniform(0.07, 0.11)
        shadow = np.array([rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.4, 0.8)])
    elif group == "plain":
        lip = skin * 0.9 + np.array([0.08, -0.02, -0.02]) * rng.uniform(0.5, 1.5)
        shadow_strength = rng.uniform(0.0, 0.12)
        shadow_radius = rng.uniform(0.0, 0.08)
        shadow = skin * 0.9
    else:
        raise ParameterError(f"unknown group {group!r}")
    return SynthFaceParams(
        skin_color=tuple(np.clip(skin, 0.0, 1.0)),
        lip_color=tuple(np.clip(lip, 0.0, 1.0)),
        shadow_color=tuple(np.clip(shadow, 0.0, 1.0)),
        shadow_radius=float(shadow_radius),
        shadow_strength=float(shadow_strength),
        brow_curvature=float(rng.uniform(-0.5, 0.5)),
        brow_thickness=float(rng.uniform(0.026, 0.042)),
        rotation_deg=float(rng.uniform(-15.0, 15.0)),
        shift=(float(rng.uniform(-0.03, 0.03)), float(rng.uniform(-0.03, 0.03))),
        shade_strength=float(rng.uniform(0.0, 0.25)),
        seed=seed,
    )


# -- corpus ---------------------------------------------------------------------


def make_corpus(out_dir, count: int, size: int, seed: int):
    """Generate `count` samples split into alternating plain/makeup groups.

    Writes <id>.ppm/.lm/.pgm triples plus manifest.txt with one line per
    sample: `id group image landmarks mask`. Returns the manifest path.
    """
    if count < 2:
        raise ParameterError(f"corpus needs at least 2 samples, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(count)
    lines = []
    for i, child in enumerate(children):
        group = "plain" if i % 2 == 0 else "makeup"
        rng = np.random.default_rng(child)
        sample_seed = int(rng.integers(0, 2**31 - 1))
        params = random_face_params(rng, group, seed=sample_seed)
        sample = synth_face(params, size)
        stem = f"{i:04d}"
        save_sample(out_dir, stem, sample)
        lines.append(f"{stem} {group} {stem}.ppm {stem}.lm {stem}.pgm")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    """Manifest rows as (id, group, image, landmarks, mask) tuples."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            rows.append(tuple(parts))
    return rows


# -- file formats ------------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    """Binary P6, maxval 255. Input is (3,H,W) float in [0,1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ParameterError(f"image must be (3,H,W), got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != magic:
        raise FormatError(f"{path}: bad magic at byte 0, expected {magic!r} got {blob[:2]!r}")
    fields, offset = [], 2
    while len(fields) < 3:
        while offset < len(blob) and blob[offset : offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(blob) and not blob[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(f"{path}: truncated header at byte {offset}")
        fields.append(blob[start:offset])
    offset += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field at byte {offset}: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    return blob, offset, w, h


def read_ppm(path) -> np.ndarray:
    """(3,H,W) float64 in [0,1]; values quantized to the stored 8 bits."""
    blob, offset, w, h = _read_netpbm(path, b"P6")
    expected = 3 * w * h
    payload = blob[offset : offset + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: pixel payload truncated at byte {offset + len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray):
    """Binary P5 parsing mask, pixel values are labels."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ParameterError(f"mask must be (H,W), got {m.shape}")
    if m.min() < 0 or m.max() > MAX_LABEL:
        raise ParameterError(f"mask labels must lie in [0,{MAX_LABEL}], got [{m.min()},{m.max()}]")
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(m.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob, offset, w, h = _read_netpbm(path, b"P5")
    payload = blob[offset : offset + w * h]
    if len(payload) != w * h:
        raise FormatError(f"{path}: mask payload truncated at byte {offset + len(payload)}")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    if mask.max() > MAX_LABEL:
        bad = int(np.argmax(mask > MAX_LABEL))
        raise FormatError(
            f"{path}: label {mask.max()} outside [0,{MAX_LABEL}] at byte {offset + bad}"
        )
    return mask


def write_landmarks(path, landmarks: np.ndarray):
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (LANDMARK_COUNT, 2):
        raise ParameterError(f"landmarks must be ({LANDMARK_COUNT},2), got {lm.shape}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"FATLM 1 {LANDMARK_COUNT}\n")
        for x, y in lm:
            fh.write(f"{x:.9f} {y:.9f}\n")


def read_landmarks(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "FATLM" or header[1] != "1":
            raise FormatError(f"{path}: expected 'FATLM 1 {LANDMARK_COUNT}' header")
        if header[2] != str(LANDMARK_COUNT):
            raise FormatError(
                f"{path}: schema requires {LANDMARK_COUNT} landmarks, header says {header[2]}"
            )
        try:
            pts = np.array(
                [[float(v) for v in fh.readline().split()] for _ in range(LANDMARK_COUNT)]
            )
        except ValueError as exc:
            raise FormatError(f"{path}: malformed landmark line: {exc}") from exc
    if pts.shape != (LANDMARK_COUNT, 2):
        raise FormatError(f"{path}: expected {LANDMARK_COUNT} 'x y' lines")
    if np.any((pts < 0.0) | (pts > 1.0)):
        raise FormatError(f"{path}: coordinates must lie in [0,1]")
    return pts


def save_sample(directory, stem: str, sample: FaceSample):
    write_ppm(os.path.join(directory, stem + ".ppm"), sample.image)
    write_landmarks(os.path.join(directory, stem + ".lm"), sample.landmarks)
    write_pgm(os.path.join(directory, stem + ".pgm"), sample.mask)


def load_sample(image_path) -> FaceSample:
    """Load a triple via the naming convention: X.ppm implies X.lm and X.pgm."""
    base, ext = os.path.splitext(str(image_path))
    if ext != ".ppm":
        raise ParameterError(f"samples are addressed by their .ppm path, got {image_path}")
    image = read_ppm(image_path)
    landmarks = read_landmarks(base + ".lm")
    mask = read_pgm(base + ".pgm")
    if mask.shape != image.shape[1:]:
        raise FormatError(f"{base}: mask {mask.shape} does not match image {image.shape[1:]}")
    return FaceSample(image=image, landmarks=landmarks, mask=mask)
