"""Projective geometry for rim compositing.

Conventions used throughout: x is the column coordinate, y the row
coordinate, and integer coordinates are pixel centers. Quad corners are
ordered top-left, top-right, bottom-right, bottom-left. The canonical
corners of a C x h x w patch are the centers of its four corner pixels:
(0,0), (w-1,0), (w-1,h-1), (0,h-1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

RIM_SCALE_DEFAULT = 1.6


class InvalidQuadError(ValueError):
    """Corners do not form a simple polygon with positive area."""


class SingularHomographyError(ValueError):
    """The corner correspondence does not define an invertible homography."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


class Quad:
    """Four ordered corners (TL, TR, BR, BL) forming a simple polygon."""

    __slots__ = ("corners",)

    def __init__(self, corners):
        pts = np.asarray(corners, dtype=np.float64)
        if pts.shape != (4, 2):
            raise InvalidQuadError(f"expected 4 (x, y) corners, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidQuadError("corners must be finite")
        if abs(_shoelace(pts)) < 1e-9:
            raise InvalidQuadError("quad has (near) zero area")
        # opposite edges of a simple quad never cross
        if _segments_cross(pts[0], pts[1], pts[2], pts[3]) or _segments_cross(
            pts[1], pts[2], pts[3], pts[0]
        ):
            raise InvalidQuadError("quad is self-intersecting")
        self.corners = pts

    @property
    def centroid(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def area(self) -> float:
        return 0.5 * abs(_shoelace(self.corners))

    def contains(self, x: float, y: float) -> bool:
        """Point-in-polygon by crossing number (boundary counts as inside)."""
        inside = False
        pts = self.corners
        for i in range(4):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % 4]
            if (y1 > y) != (y2 > y):
                xx = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
                if x <= xx:
                    inside = not inside
        return inside

    def __eq__(self, other):
        return isinstance(other, Quad) and np.array_equal(self.corners, other.corners)

    def __repr__(self):
        return f"Quad({self.corners.tolist()})"


def _shoelace(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class Homography:
    """3x3 projective map, normalized so the bottom-right entry is 1."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise SingularHomographyError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-12:
            raise SingularHomographyError("cannot normalize: H[2,2] ~ 0")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise SingularHomographyError("homography is not invertible")
        self.matrix = m

    def apply(self, pts) -> np.ndarray:
        """Map (N,2) points through the homography."""
        pts = np.asarray(pts, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        h = (self.matrix @ np.concatenate([pts, ones], axis=1).T).T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))


def scale_quad(quad: Quad, factor: float) -> Quad:
    """Scale a quad about its centroid (mean of the four corners)."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    c = quad.centroid
    return Quad(c + factor * (quad.corners - c))


def patch_corners(h: int, w: int) -> Quad:
    """Canonical corner quad of an h x w patch (pixel centers)."""
    return Quad([(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)])


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Translate points to their centroid and scale mean radius to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def homography_from_corners(src: Quad, dst: Quad) -> Homography:
    """DLT solution of the 8-DOF corner correspondence src -> dst."""
    ts = _hartley_normalization(src.corners)
    td = _hartley_normalization(dst.corners)
    s = (ts @ np.concatenate([src.corners, np.ones((4, 1))], axis=1).T).T
    d = (td @ np.concatenate([dst.corners, np.ones((4, 1))], axis=1).T).T

    rows = []
    for (sx, sy, _), (dx_, dy_, _) in zip(s, d):
        rows.append([sx, sy, 1, 0, 0, 0, -dx_ * sx, -dx_ * sy, -dx_])
        rows.append([0, 0, 0, sx, sy, 1, -dy_ * sx, -dy_ * sy, -dy_])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-10:
        raise SingularHomographyError("degenerate corner correspondence")
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(td) @ hn @ ts)


def warp_grid(h_mat: Homography, out_h: int, out_w: int):
    """Per-output-pixel source coordinates under the inverse map.

    Returns float32 (gx, gy) arrays of shape (out_h, out_w); entries whose
    homogeneous denominator vanishes are pushed far out of bounds so the
    sampler returns zero there.
    """
    inv = np.linalg.inv(h_mat.matrix)
    xs, ys = np.meshgrid(
        np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64)
    )
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    bad = np.abs(denom) < 1e-12
    denom = np.where(bad, 1.0, denom)
    gx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    gy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    gx = np.where(bad, -1e9, gx)
    gy = np.where(bad, -1e9, gy)
    return gx.astype(np.float32), gy.astype(np.float32)


def warp_perspective(patch: Tensor, h_mat: Homography, out_h: int, out_w: int) -> Tensor:
    """Warp a C x h x w patch into an out_h x out_w frame.

    Output pixels whose preimage falls outside the patch are zero. The
    result is differentiable w.r.t. the patch values.
    """
    gx, gy = warp_grid(h_mat, out_h, out_w)
    return T.grid_sample(patch, Tensor(gx), Tensor(gy))


def rim_mask(
    plate: Quad,
    rim: Quad,
    out_h: int,
    out_w: int,
    src_hw: tuple[int, int] = (256, 512),
) -> Tensor:
    """Ring mask: ~1 between plate and rim quads, ~0 elsewhere.

    Built as clamp(warp(ones, M_rim) - warp(ones, M_plate), 0, 1); the
    bilinear rolloff at quad edges spans about one source pixel.
    """
    sh, sw = src_hw
    cp = patch_corners(sh, sw)
    ones = Tensor(np.ones((1, sh, sw), dtype=np.float32))
    m_rim = warp_perspective(ones, homography_from_corners(cp, rim), out_h, out_w)
    m_plate = warp_perspective(ones, homography_from_corners(cp, plate), out_h, out_w)
    return T.clamp(m_rim - m_plate, 0.0, 1.0)


def rim_bounding_box(rim: Quad) -> Box:
    """Smallest axis-aligned box covering the quad corners."""
    xs, ys = rim.corners[:, 0], rim.corners[:, 1]
    return Box(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


@dataclass
class CompositePlan:
    """Patch-independent part of a composite: sampling grid and ring mask.

    Caching a plan per image avoids recomputing homographies and masks on
    every training step.
    """

    gx: np.ndarray
    gy: np.ndarray
    mask: np.ndarray  # (H, W) float32 in [0, 1]
    rim: Quad
    plate: Quad


@dataclass
class CompositeResult:
    image: Tensor  # C x H x W, values in [0, 1]
    mask: Tensor  # 1 x H x W, values in [0, 1]
    rim: Quad


def build_composite_plan(
    plate: Quad,
    rim_scale: float,
    patch_hw: tuple[int, int],
    image_hw: tuple[int, int],
) -> CompositePlan:
    ph, pw = patch_hw
    ih, iw = image_hw
    rim = scale_quad(plate, rim_scale)
    cp = patch_corners(ph, pw)
    m_rim = homography_from_corners(cp, rim)
    gx, gy = warp_grid(m_rim, ih, iw)
    mask = rim_mask(plate, rim, ih, iw, src_hw=(ph, pw)).data[0]
    return CompositePlan(gx=gx, gy=gy, mask=mask, rim=rim, plate=plate)


def build_rect_plan(
    plate: Quad,
    rim_scale: float,
    patch_hw: tuple[int, int],
    image_hw: tuple[int, int],
) -> CompositePlan:
    """Rectangular (homography-free) plan: the patch is scaled to the rim
    quad's bounding box and the plate's bounding box is cut out."""
    ph, pw = patch_hw
    ih, iw = image_hw
    rim = scale_quad(plate, rim_scale)
    rb = rim_bounding_box(rim)
    pb = rim_bounding_box(plate)

    xs, ys = np.meshgrid(np.arange(iw, dtype=np.float64), np.arange(ih, dtype=np.float64))
    # affine map from the rim box back into patch pixel coordinates
    gx = (xs - rb.x_min) / max(rb.width, 1e-9) * (pw - 1.0)
    gy = (ys - rb.y_min) / max(rb.height, 1e-9) * (ph - 1.0)

    in_rim = (xs >= rb.x_min) & (xs <= rb.x_max) & (ys >= rb.y_min) & (ys <= rb.y_max)
    in_plate = (xs >= pb.x_min) & (xs <= pb.x_max) & (ys >= pb.y_min) & (ys <= pb.y_max)
    mask = (in_rim & ~in_plate).astype(np.float32)
    gx = np.where(in_rim, gx, -1e9).astype(np.float32)
    gy = np.where(in_rim, gy, -1e9).astype(np.float32)
    return CompositePlan(gx=gx, gy=gy, mask=mask, rim=rim, plate=plate)


def apply_composite(
    image: Tensor,
    patch: Tensor,
    plan: CompositePlan,
    rho: float,
    literal_darkening: bool = False,
) -> CompositeResult:
    """Blend the warped patch into the image over the ring mask.

    The darkening draw rho in [0, 0.2] is applied as a brightness factor
    1 - rho; literal_darkening=True multiplies by rho itself instead.
    """
    if not 0.0 <= rho <= 0.2:
        raise ValueError(f"rho must lie in [0, 0.2], got {rho}")
    warped = T.grid_sample(patch, Tensor(plan.gx), Tensor(plan.gy))
    mask = Tensor(plan.mask[None, :, :])
    beta = rho if literal_darkening else 1.0 - rho
    out = image * (1.0 - mask) + (beta * warped) * mask
    return CompositeResult(image=T.clamp(out, 0.0, 1.0), mask=mask, rim=plan.rim)


def composite(
    image: Tensor,
    patch: Tensor,
    plate: Quad,
    rim_scale: float = RIM_SCALE_DEFAULT,
    rho: float = 0.0,
    literal_darkening: bool = False,
) -> CompositeResult:
    """One-shot composite: plan construction plus application."""
    ph, pw = patch.shape[-2], patch.shape[-1]
    ih, iw = image.shape[-2], image.shape[-1]
    plan = build_composite_plan(plate, rim_scale, (ph, pw), (ih, iw))
    return apply_composite(image, patch, plan, rho, literal_darkening)
