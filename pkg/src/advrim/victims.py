"""Surrogate ALPR victim: a small convolutional detector (box + confidence)
and a per-position character classifier, plus the synthetic plate renderer
and the supervised training loop that makes the repo self-contained.

Only the interface shape matters to the attack: detector D maps an image to
a differentiable box and confidence, OCR O maps a fixed-size crop to an
L x V probability grid.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Box, Quad, homography_from_corners, patch_corners, warp_perspective
from .optim import AdamW
from .tensor import Tensor

DEFAULT_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
DETECTION_THRESHOLD = 0.5

WEIGHTS_MAGIC = b"SPVW"
WEIGHTS_VERSION = 1


class ShapeMismatchError(ValueError):
    """Input dimensions disagree with the victim metadata."""


class DegenerateBoxError(ValueError):
    """Crop box has zero area after clipping."""


class VictimTrainingError(RuntimeError):
    """Training finished below the clean-accuracy floor."""


class WeightsFormatError(ValueError):
    """Weights file is malformed or truncated."""


@dataclass(frozen=True)
class VictimMeta:
    image_h: int = 128
    image_w: int = 128
    ocr_h: int = 32
    ocr_w: int = 96
    buffer_len: int = 7
    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self):
        if self.image_h % 16 or self.image_w % 16:
            raise ValueError("detector input dims must be divisible by 16")
        if self.ocr_h % 8 or self.ocr_w % 8:
            raise ValueError("OCR input dims must be divisible by 8")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet symbols must be unique")

    @property
    def vocab(self) -> int:
        # trailing pad symbol
        return len(self.alphabet) + 1

    @property
    def pad_index(self) -> int:
        return len(self.alphabet)


@dataclass
class Detection:
    box: Box
    confidence: float
    found: bool


@dataclass
class CharProbs:
    """L x V per-position character probabilities; rows sum to 1."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        sums = self.probs.sum(axis=-1)
        if self.probs.min() < -1e-6 or self.probs.max() > 1.0 + 1e-6:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-position rows must sum to 1")


@dataclass
class VictimWeights:
    meta: VictimMeta
    tensors: dict[str, Tensor]

    def parameters(self, prefix: str | None = None) -> list[Tensor]:
        return [
            t for name, t in self.tensors.items()
            if prefix is None or name.startswith(prefix)
        ]


# --------------------------------------------------------------------
# network definition
# --------------------------------------------------------------------

_DET_CHANNELS = (16, 32, 48, 48)
_DET_FC = 96
_OCR_CHANNELS = (16, 32, 48)
_OCR_FC = 160


def _xavier(rng: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def init_victim_weights(meta: VictimMeta, seed: int) -> VictimWeights:
    """Xavier-initialized weights for both heads, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    tensors: dict[str, Tensor] = {}

    def add_conv(name, c_in, c_out):
        w = _xavier(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
        tensors[f"{name}.w"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def add_fc(name, n_in, n_out):
        w = _xavier(rng, (n_in, n_out), n_in, n_out)
        tensors[f"{name}.w"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)

    c = 3
    for i, ch in enumerate(_DET_CHANNELS):
        add_conv(f"det.conv{i}", c, ch)
        c = ch
    det_flat = _DET_CHANNELS[-1] * (meta.image_h // 16) * (meta.image_w // 16)
    add_fc("det.fc0", det_flat, _DET_FC)
    add_fc("det.fc1", _DET_FC, 5)

    c = 3
    for i, ch in enumerate(_OCR_CHANNELS):
        add_conv(f"ocr.conv{i}", c, ch)
        c = ch
    ocr_flat = _OCR_CHANNELS[-1] * (meta.ocr_h // 8) * (meta.ocr_w // 8)
    add_fc("ocr.fc0", ocr_flat, _OCR_FC)
    add_fc("ocr.fc1", _OCR_FC, meta.buffer_len * meta.vocab)

    return VictimWeights(meta=meta, tensors=tensors)


def _encoder(x: Tensor, weights: VictimWeights, prefix: str, n_convs: int) -> Tensor:
    h = x
    for i in range(n_convs):
        h = T.conv2d(
            h,
            weights.tensors[f"{prefix}.conv{i}.w"],
            weights.tensors[f"{prefix}.conv{i}.b"],
            stride=2,
            padding=1,
        )
        h = T.relu(h)
    return h


def _det_logits(weights: VictimWeights, images: Tensor) -> Tensor:
    n = images.shape[0]
    h = _encoder(images, weights, "det", len(_DET_CHANNELS))
    h = h.reshape((n, -1))
    h = T.relu(T.matmul(h, weights.tensors["det.fc0.w"]) + weights.tensors["det.fc0.b"])
    return T.matmul(h, weights.tensors["det.fc1.w"]) + weights.tensors["det.fc1.b"]


def detect_batch(weights: VictimWeights, images: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable detection on a (N,3,H,W) batch.

    Returns (boxes, confidences): boxes (N,4) as x_min, y_min, x_max, y_max
    in continuous pixel coordinates squashed into image bounds, confidence
    (N,) through a logistic.
    """
    meta = weights.meta
    if images.ndim != 4 or images.shape[1:] != (3, meta.image_h, meta.image_w):
        raise ShapeMismatchError(
            f"expected (N,3,{meta.image_h},{meta.image_w}), got {images.shape}"
        )
    out = _det_logits(weights, images)
    w, h = float(meta.image_w), float(meta.image_h)
    x_min = T.sigmoid(out[:, 0]) * w - 0.5
    y_min = T.sigmoid(out[:, 1]) * h - 0.5
    x_max = x_min + T.sigmoid(out[:, 2]) * ((w - 0.5) - x_min)
    y_max = y_min + T.sigmoid(out[:, 3]) * ((h - 0.5) - y_min)
    conf = T.sigmoid(out[:, 4])
    boxes = T.stack([x_min, y_min, x_max, y_max], axis=1)
    return boxes, conf


def detect(weights: VictimWeights, image: Tensor | np.ndarray, threshold: float = DETECTION_THRESHOLD) -> Detection:
    """Single-image Detection; found is confidence >= threshold."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    boxes, conf = detect_batch(weights, image.reshape((1,) + tuple(image.shape)))
    b = boxes.data[0]
    c = float(conf.data[0])
    return Detection(
        box=Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
        confidence=c,
        found=c >= threshold,
    )


def read_batch(weights: VictimWeights, crops: Tensor) -> Tensor:
    """Per-position character probabilities, (N, L, V), softmax per row."""
    meta = weights.meta
    if crops.ndim != 4 or crops.shape[1:] != (3, meta.ocr_h, meta.ocr_w):
        raise ShapeMismatchError(
            f"expected (N,3,{meta.ocr_h},{meta.ocr_w}), got {crops.shape}"
        )
    n = crops.shape[0]
    h = _encoder(crops, weights, "ocr", len(_OCR_CHANNELS))
    h = h.reshape((n, -1))
    h = T.relu(T.matmul(h, weights.tensors["ocr.fc0.w"]) + weights.tensors["ocr.fc0.b"])
    logits = T.matmul(h, weights.tensors["ocr.fc1.w"]) + weights.tensors["ocr.fc1.b"]
    return T.softmax(logits.reshape((n, meta.buffer_len, meta.vocab)), axis=-1)


def read_plate(weights: VictimWeights, crop: Tensor | np.ndarray) -> CharProbs:
    crop = crop if isinstance(crop, Tensor) else Tensor(crop)
    probs = read_batch(weights, crop.reshape((1,) + tuple(crop.shape)))
    return CharProbs(probs.data[0])


def crop_and_resize(image: Tensor, box: Box, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the boxed region to out_h x out_w.

    The box is clipped to image bounds first; the sampling grid maps output
    pixel (i, j) to box-relative position ((j+0.5)/out_w, (i+0.5)/out_h), so
    a full-image box at equal dims is the identity.
    """
    h, w = image.shape[-2], image.shape[-1]
    x0 = max(box.x_min, -0.5)
    y0 = max(box.y_min, -0.5)
    x1 = min(box.x_max, w - 0.5)
    y1 = min(box.y_max, h - 0.5)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBoxError(f"box {box} has no area inside the image")
    jj = x0 + (x1 - x0) * (np.arange(out_w, dtype=np.float64) + 0.5) / out_w - 0.0
    ii = y0 + (y1 - y0) * (np.arange(out_h, dtype=np.float64) + 0.5) / out_h - 0.0
    gx = np.broadcast_to(jj[None, :], (out_h, out_w)).astype(np.float32).copy()
    gy = np.broadcast_to(ii[:, None], (out_h, out_w)).astype(np.float32).copy()
    return T.grid_sample(image, Tensor(gx), Tensor(gy))


def crop_batch(images: Tensor, boxes: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable batched crop: boxes (N,4) feed the sampling grid, so
    gradients flow to both pixels and box coordinates."""
    n = images.shape[0]
    uu = ((np.arange(out_w, dtype=np.float32) + 0.5) / out_w)[None, None, :]
    vv = ((np.arange(out_h, dtype=np.float32) + 0.5) / out_h)[None, :, None]
    u = Tensor(np.broadcast_to(uu, (1, out_h, out_w)).copy())
    v = Tensor(np.broadcast_to(vv, (1, out_h, out_w)).copy())
    x0 = boxes[:, 0].reshape((n, 1, 1))
    y0 = boxes[:, 1].reshape((n, 1, 1))
    x1 = boxes[:, 2].reshape((n, 1, 1))
    y1 = boxes[:, 3].reshape((n, 1, 1))
    gx = x0 + (x1 - x0) * u
    gy = y0 + (y1 - y0) * v
    return T.grid_sample(images, gx, gy)


def decode(probs: CharProbs | np.ndarray | Tensor, alphabet: str = DEFAULT_ALPHABET) -> str:
    """Per-position argmax decode; pad symbols are stripped, ties resolve to
    the lowest vocabulary index (numpy argmax behavior)."""
    if isinstance(probs, CharProbs):
        grid = probs.probs
    elif isinstance(probs, Tensor):
        grid = probs.data
    else:
        grid = np.asarray(probs)
    if grid.shape[-1] != len(alphabet) + 1:
        raise ValueError("alphabet size does not match the probability grid")
    idx = grid.argmax(axis=-1)
    pad = len(alphabet)
    return "".join(alphabet[i] for i in idx if i != pad)


def text_to_indices(text: str, meta: VictimMeta) -> np.ndarray:
    if len(text) > meta.buffer_len:
        raise ValueError(f"text longer than buffer length {meta.buffer_len}")
    idx = np.full(meta.buffer_len, meta.pad_index, dtype=np.int64)
    for i, ch in enumerate(text):
        pos = meta.alphabet.find(ch)
        if pos < 0:
            raise ValueError(f"symbol {ch!r} not in alphabet")
        idx[i] = pos
    return idx


def one_hot_target(text: str, meta: VictimMeta) -> np.ndarray:
    """L x V one-hot rows for a plate string, pad rows past its length."""
    idx = text_to_indices(text, meta)
    t = np.zeros((meta.buffer_len, meta.vocab), dtype=np.float32)
    t[np.arange(meta.buffer_len), idx] = 1.0
    return t


# --------------------------------------------------------------------
# synthetic plate renderer
# --------------------------------------------------------------------

_FONT_5X7 = {
    "A": "01110 10001 10001 11111 10001 10001 10001",
    "B": "11110 10001 10001 11110 10001 10001 11110",
    "C": "01111 10000 10000 10000 10000 10000 01111",
    "D": "11110 10001 10001 10001 10001 10001 11110",
    "E": "11111 10000 10000 11110 10000 10000 11111",
    "F": "11111 10000 10000 11110 10000 10000 10000",
    "G": "01111 10000 10000 10111 10001 10001 01110",
    "H": "10001 10001 10001 11111 10001 10001 10001",
    "I": "01110 00100 00100 00100 00100 00100 01110",
    "J": "00111 00010 00010 00010 00010 10010 01100",
    "K": "10001 10010 10100 11000 10100 10010 10001",
    "L": "10000 10000 10000 10000 10000 10000 11111",
    "M": "10001 11011 10101 10101 10001 10001 10001",
    "N": "10001 11001 11001 10101 10011 10011 10001",
    "O": "01110 10001 10001 10001 10001 10001 01110",
    "P": "11110 10001 10001 11110 10000 10000 10000",
    "Q": "01110 10001 10001 10001 10101 10010 01101",
    "R": "11110 10001 10001 11110 10100 10010 10001",
    "S": "01111 10000 10000 01110 00001 00001 11110",
    "T": "11111 00100 00100 00100 00100 00100 00100",
    "U": "10001 10001 10001 10001 10001 10001 01110",
    "V": "10001 10001 10001 10001 10001 01010 00100",
    "W": "10001 10001 10001 10101 10101 11011 10001",
    "X": "10001 01010 00100 00100 00100 01010 10001",
    "Y": "10001 01010 00100 00100 00100 00100 00100",
    "Z": "11111 00001 00010 00100 01000 10000 11111",
    "0": "01110 10001 10011 10101 11001 10001 01110",
    "1": "00100 01100 00100 00100 00100 00100 01110",
    "2": "01110 10001 00001 00010 00100 01000 11111",
    "3": "11110 00001 00001 01110 00001 00001 11110",
    "4": "00010 00110 01010 10010 11111 00010 00010",
    "5": "11111 10000 11110 00001 00001 10001 01110",
    "6": "00110 01000 10000 11110 10001 10001 01110",
    "7": "11111 00001 00010 00100 01000 01000 01000",
    "8": "01110 10001 10001 01110 10001 10001 01110",
    "9": "01110 10001 10001 01111 00001 00010 01100",
}

_GLYPHS = {
    ch: np.array(
        [[c == "1" for c in row] for row in spec.split()], dtype=np.float32
    )
    for ch, spec in _FONT_5X7.items()
}

# canonical plate canvas kept small so projection mostly upsamples
_PLATE_CANVAS_H = 24
_PLATE_CANVAS_W = 60
_PLATE_WIDTH_M = 0.305
_PLATE_HEIGHT_M = 0.152
_PLATE_CENTER_HEIGHT_M = 0.5


@dataclass(frozen=True)
class CameraPose:
    distance_m: float
    angle_deg: float = 0.0
    height_m: float | None = None  # camera height; None means plate height


def plate_canvas(text: str, meta: VictimMeta) -> np.ndarray:
    """Canonical 3 x H x W plate image: dark glyphs on a light body."""
    h, w = _PLATE_CANVAS_H, _PLATE_CANVAS_W
    canvas = np.full((h, w), 0.88, dtype=np.float32)
    canvas[0, :] = canvas[-1, :] = 0.25
    canvas[:, 0] = canvas[:, -1] = 0.25
    n = meta.buffer_len
    cell_w = (w - 4) // n
    gw, gh = 5, 7
    scale = max(1, min((cell_w - 1) // gw, (h - 6) // gh))
    y0 = (h - gh * scale) // 2
    for i, ch in enumerate(text):
        glyph = _GLYPHS.get(ch)
        if glyph is None:
            raise ValueError(f"no glyph for symbol {ch!r}")
        big = np.kron(glyph, np.ones((scale, scale), dtype=np.float32))
        x0 = 2 + i * cell_w + (cell_w - gw * scale) // 2
        region = canvas[y0 : y0 + gh * scale, x0 : x0 + gw * scale]
        region[:] = np.where(big > 0, 0.08, region)
    return np.repeat(canvas[None, :, :], 3, axis=0)


def plate_quad_for_pose(
    pose: CameraPose,
    image_hw: tuple[int, int],
    center_shift: tuple[float, float] = (0.0, 0.0),
) -> Quad:
    """Pinhole projection of the plate rectangle for a camera pose.

    The camera sits at the given distance, laterally rotated plate by
    angle_deg about its vertical axis, and always looks at the plate
    center, so angle 0 at plate height projects to an axis-aligned
    rectangle.
    """
    ih, iw = image_hw
    f = 2.5 * iw
    d = float(pose.distance_m)
    if d <= 0:
        raise ValueError("distance must be positive")
    theta = math.radians(pose.angle_deg)
    cam_h = _PLATE_CENTER_HEIGHT_M if pose.height_m is None else float(pose.height_m)
    e = cam_h - _PLATE_CENTER_HEIGHT_M

    # world: x right, y up, z toward camera; plate center at origin
    hw_, hh_ = _PLATE_WIDTH_M / 2, _PLATE_HEIGHT_M / 2
    world = [(-hw_, hh_), (hw_, hh_), (hw_, -hh_), (-hw_, -hh_)]  # TL TR BR BL
    cam = np.array([0.0, e, d])
    fwd = -cam / np.linalg.norm(cam)
    right = np.array([1.0, 0.0, 0.0])
    up = np.cross(right, fwd)
    up = up / np.linalg.norm(up)

    pts = []
    for x, y in world:
        p = np.array([x * math.cos(theta), y, -x * math.sin(theta)])
        q = p - cam
        z_c = float(q @ fwd)
        if z_c <= 1e-6:
            raise ValueError("plate behind the camera")
        u = (iw - 1) / 2 + center_shift[0] + f * float(q @ right) / z_c
        v = (ih - 1) / 2 + center_shift[1] - f * float(q @ up) / z_c
        pts.append((u, v))
    return Quad(pts)


def render_background(image_hw: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth seeded noise background, (3,H,W) in [0,1]."""
    ih, iw = image_hw
    base = rng.uniform(0.15, 0.75, size=(3, 6, 6)).astype(np.float32)
    bg = T.resize_bilinear(Tensor(base), ih, iw).data
    bg += rng.normal(0.0, 0.02, size=bg.shape).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def render_synthetic_plate(
    text: str,
    pose: CameraPose,
    seed: int,
    meta: VictimMeta | None = None,
) -> tuple[np.ndarray, Quad]:
    """Deterministic synthetic scene: plate with the given text projected
    per pose onto a noise background. Returns (3,H,W) image in [0,1] and
    the ground-truth plate quad."""
    meta = meta or VictimMeta()
    if len(text) > meta.buffer_len:
        raise ValueError(f"text longer than buffer length {meta.buffer_len}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x91A7]))
    ih, iw = meta.image_h, meta.image_w
    bg = render_background((ih, iw), rng)

    shift = (
        float(rng.uniform(-0.1, 0.1) * iw),
        float(rng.uniform(-0.1, 0.1) * ih),
    )
    quad = plate_quad_for_pose(pose, (ih, iw), center_shift=shift)

    canvas = plate_canvas(text, meta)
    brightness = float(rng.uniform(0.8, 1.05))
    src_q = patch_corners(canvas.shape[1], canvas.shape[2])
    hmat = homography_from_corners(src_q, quad)
    warped = warp_perspective(Tensor(canvas * brightness), hmat, ih, iw).data
    mask = warp_perspective(
        Tensor(np.ones((1,) + canvas.shape[1:], dtype=np.float32)), hmat, ih, iw
    ).data

    img = bg * (1.0 - mask) + warped
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), quad


# --------------------------------------------------------------------
# supervised victim training
# --------------------------------------------------------------------

@dataclass
class PlateSample:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    quad: Quad
    text: str


@dataclass
class VictimTrainConfig:
    det_epochs: int = 30
    ocr_epochs: int = 40
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    negative_fraction: float = 0.25
    box_jitter: float = 0.06
    holdout_fraction: float = 0.1
    accuracy_floor: float = 0.95
    seed: int = 0


@dataclass
class VictimTrainReport:
    clean_exact_match: float
    detection_rate: float
    mean_iou: float
    det_losses: list = field(default_factory=list)
    ocr_losses: list = field(default_factory=list)


def _quad_box(quad: Quad) -> Box:
    xs, ys = quad.corners[:, 0], quad.corners[:, 1]
    return Box(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(target.astype(np.float32))
    eps = 1e-7
    return -(t * T.log(pred + eps) + (1.0 - t) * T.log(1.0 - pred + eps)).mean()


def _normalized_box_targets(samples, meta) -> np.ndarray:
    out = np.zeros((len(samples), 4), dtype=np.float32)
    for i, s in enumerate(samples):
        b = _quad_box(s.quad)
        out[i] = [
            (b.x_min + 0.5) / meta.image_w,
            (b.y_min + 0.5) / meta.image_h,
            (b.x_max + 0.5) / meta.image_w,
            (b.y_max + 0.5) / meta.image_h,
        ]
    return out


def train_victims(
    dataset: list[PlateSample],
    config: VictimTrainConfig | None = None,
    seed: int | None = None,
) -> tuple[VictimWeights, VictimTrainReport]:
    """Supervised training of both victim heads on (image, quad, text)
    triples. Deterministic per seed; raises VictimTrainingError when the
    clean exact-match floor is not reached on the held-out split."""
    config = config or VictimTrainConfig()
    if seed is not None:
        config = VictimTrainConfig(**{**config.__dict__, "seed": seed})
    if not dataset:
        raise ValueError("dataset is empty")
    meta = VictimMeta(
        image_h=dataset[0].image.shape[1], image_w=dataset[0].image.shape[2]
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7E57]))

    n_hold = max(1, int(round(len(dataset) * config.holdout_fraction)))
    order = rng.permutation(len(dataset))
    hold = [dataset[i] for i in order[:n_hold]]
    train = [dataset[i] for i in order[n_hold:]]
    if not train:
        raise ValueError("dataset too small for a holdout split")

    weights = init_victim_weights(meta, config.seed)
    report = VictimTrainReport(0.0, 0.0, 0.0)

    # ---- detector: box regression + confidence, with pure-background negatives
    det_params = weights.parameters("det")
    opt = AdamW(det_params, lr=config.lr, weight_decay=config.weight_decay)
    box_targets = _normalized_box_targets(train, meta)
    n_neg = int(len(train) * config.negative_fraction)
    negatives = np.stack(
        [render_background((meta.image_h, meta.image_w), rng) for _ in range(n_neg)]
    ) if n_neg else np.zeros((0, 3, meta.image_h, meta.image_w), np.float32)

    for _ in range(config.det_epochs):
        idx = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(idx), config.batch):
            batch_idx = idx[start : start + config.batch]
            imgs = np.stack([train[i].image for i in batch_idx])
            targets = box_targets[batch_idx]
            k_neg = max(1, int(len(batch_idx) * config.negative_fraction)) if len(negatives) else 0
            if k_neg:
                neg_pick = rng.integers(0, len(negatives), size=k_neg)
                imgs = np.concatenate([imgs, negatives[neg_pick]])
            labels = np.concatenate([np.ones(len(batch_idx)), np.zeros(k_neg)])

            boxes, conf = detect_batch(weights, Tensor(imgs))
            norm = Tensor(
                np.array(
                    [1.0 / meta.image_w, 1.0 / meta.image_h] * 2, dtype=np.float32
                )[None, :]
            )
            pred_norm = (boxes + 0.5) * norm
            pos = pred_norm[: len(batch_idx), :]
            box_loss = ((pos - Tensor(targets)) ** 2).mean()
            conf_loss = _bce(conf, labels)
            loss = box_loss + conf_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data) * len(batch_idx)
        report.det_losses.append(epoch_loss / len(train))

    # ---- OCR: cross-entropy on jittered ground-truth crops
    ocr_params = weights.parameters("ocr")
    opt = AdamW(ocr_params, lr=config.lr, weight_decay=config.weight_decay)
    char_targets = np.stack([one_hot_target(s.text, meta) for s in train])

    for _ in range(config.ocr_epochs):
        idx = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(idx), config.batch):
            batch_idx = idx[start : start + config.batch]
            crops = np.stack(
                [_crop_with_jitter(train[i], meta, rng, config.box_jitter) for i in batch_idx]
            )
            probs = read_batch(weights, Tensor(crops))
            t = Tensor(char_targets[batch_idx])
            loss = -(t * T.log(probs + 1e-7)).sum(axis=(1, 2)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data) * len(batch_idx)
        report.ocr_losses.append(epoch_loss / len(train))

    # ---- clean evaluation on the holdout
    hits = 0
    detections = 0
    ious = []
    for s in hold:
        det = detect(weights, Tensor(s.image))
        ious.append(box_iou(det.box, _quad_box(s.quad)))
        if not det.found:
            continue
        detections += 1
        crop = crop_and_resize(Tensor(s.image), det.box, meta.ocr_h, meta.ocr_w)
        if decode(read_plate(weights, crop), meta.alphabet) == s.text:
            hits += 1
    report.clean_exact_match = hits / len(hold)
    report.detection_rate = detections / len(hold)
    report.mean_iou = float(np.mean(ious))

    if report.clean_exact_match < config.accuracy_floor:
        raise VictimTrainingError(
            f"clean exact-match {report.clean_exact_match:.3f} below floor "
            f"{config.accuracy_floor:.3f} (detection rate "
            f"{report.detection_rate:.3f}, mean IoU {report.mean_iou:.3f})"
        )
    return weights, report


def _crop_with_jitter(sample, meta, rng, jitter) -> np.ndarray:
    b = _quad_box(sample.quad)
    j = rng.uniform(-jitter, jitter, size=4)
    box = Box(
        b.x_min + j[0] * b.width,
        b.y_min + j[1] * b.height,
        b.x_max + j[2] * b.width,
        b.y_max + j[3] * b.height,
    )
    return crop_and_resize(Tensor(sample.image), box, meta.ocr_h, meta.ocr_w).data


# --------------------------------------------------------------------
# weights file format
# --------------------------------------------------------------------

def save_weights(path, weights: VictimWeights) -> None:
    """SPVW container: metadata block then named little-endian f32 tensors."""
    meta = weights.meta
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", WEIGHTS_VERSION))
    buf.write(
        struct.pack(
            "<6I",
            meta.image_h,
            meta.image_w,
            meta.ocr_h,
            meta.ocr_w,
            meta.buffer_len,
            meta.vocab,
        )
    )
    alpha = meta.alphabet.encode("utf-8")
    buf.write(struct.pack("<I", len(alpha)))
    buf.write(alpha)
    buf.write(struct.pack("<I", len(weights.tensors)))
    for name in sorted(weights.tensors):
        t = weights.tensors[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_weights(path) -> VictimWeights:
    with open(path, "rb") as f:
        raw = f.read()
    view = io.BytesIO(raw)

    def take(n):
        b = view.read(n)
        if len(b) != n:
            raise WeightsFormatError("truncated weights file")
        return b

    if take(4) != WEIGHTS_MAGIC:
        raise WeightsFormatError("bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    ih, iw, oh, ow, lbuf, vocab = struct.unpack("<6I", take(24))
    (alen,) = struct.unpack("<I", take(4))
    alphabet = take(alen).decode("utf-8")
    if len(alphabet) + 1 != vocab:
        raise WeightsFormatError("alphabet inconsistent with vocabulary size")
    meta = VictimMeta(
        image_h=ih, image_w=iw, ocr_h=oh, ocr_w=ow, buffer_len=lbuf, alphabet=alphabet
    )
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_items = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(dims)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    if view.read(1):
        raise WeightsFormatError("trailing bytes after last tensor")
    return VictimWeights(meta=meta, tensors=tensors)
