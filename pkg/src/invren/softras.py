"""Soft silhouette rasterizer with analytic vertex gradients.

Geometry-phase renderer: each triangle covers a pixel with probability
D = sigmoid(sign * d^2 / sigma), where d is the 2D distance in NDC from the
pixel center to the projected triangle's boundary and sign is +1 inside,
-1 outside. Per-pixel coverages aggregate as I = 1 - prod(1 - D_j), so the
image is a smooth union of silhouettes and occlusion never matters.

Distances are computed in NDC offsets relative to the principal point with
the integer pixel part grouped before any scaling. That makes the rendered
silhouette exactly translation-equivariant: moving the principal point by a
whole number of pixels shifts the image bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError
from .geomcore import TriMesh
from .scene import Camera

# Camera-space points with -z at or below this are treated as behind the lens
# and cull their faces.
_W_EPS = 1e-9


@dataclass
class SoftRasterConfig:
    """Target size plus the silhouette softness sigma (NDC^2 units).

    cutoff bounds the sigmoid argument: beyond it the blend factor 1 - D
    rounds to exactly 1.0 in float64 (e^-40 is far below half an ulp at 1),
    so skipping those pixel-face pairs changes nothing.
    """

    width: int
    height: int
    sigma: float = 1e-4
    cutoff: float = 40.0

    def validate(self, camera: Camera | None = None) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"invalid raster size {self.width}x{self.height}")
        if not math.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.cutoff <= 0.0:
            raise ConfigError(f"cutoff must be positive, got {self.cutoff}")
        if camera is not None and (camera.width, camera.height) != (self.width, self.height):
            raise ConfigError(
                f"raster size {self.width}x{self.height} does not match camera "
                f"{camera.width}x{camera.height}"
            )


def _planar_setup(vertices: np.ndarray, camera: Camera):
    """Project vertices to principal-point-relative NDC and build pixel grids.

    Returns (p_cam, w, a2d, pcx, pcy). A pixel at (row r, col c) sits at
    (pcx[c], pcy[r]) and a vertex at a2d in the same coordinates, so their
    difference is the plain NDC offset.
    """
    p_cam = vertices @ camera.rotation.T + camera.translation
    w = -p_cam[:, 2]
    safe_w = np.where(w > _W_EPS, w, 1.0)
    sx = 2.0 / camera.width
    sy = 2.0 / camera.height
    a2d = np.empty((vertices.shape[0], 2))
    a2d[:, 0] = sx * (camera.fx * p_cam[:, 0] / safe_w)
    a2d[:, 1] = sy * (camera.fy * p_cam[:, 1] / safe_w)
    # integer pixel index + 0.5 minus the principal point, grouped first so an
    # integer shift of (index, principal point) cancels exactly
    pcx = sx * ((np.arange(camera.width) + 0.5) - camera.cx)
    pcy = sy * ((np.arange(camera.height) + 0.5) - camera.cy)
    return p_cam, w, a2d, pcx, pcy


def _kept_faces(faces: np.ndarray, w: np.ndarray, a2d: np.ndarray) -> np.ndarray:
    """Front-facing faces fully in front of the camera.

    Projected signed area is positive for a counter-clockwise outline, which
    is what an outward-wound face shows when its normal points at the camera.
    """
    ahead = (w[faces] > _W_EPS).all(axis=1)
    p0 = a2d[faces[:, 0]]
    p1 = a2d[faces[:, 1]]
    p2 = a2d[faces[:, 2]]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
        p2[:, 0] - p0[:, 0]
    )
    return ahead & (area2 > 0.0)


@njit(cache=True)
def _point_segment(px, py, ax, ay, bx, by):
    """Squared distance from p to segment ab, with the foot parameter and p - q."""
    ex = bx - ax
    ey = by - ay
    len2 = ex * ex + ey * ey
    t = 0.0
    if len2 > 0.0:
        t = ((px - ax) * ex + (py - ay) * ey) / len2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return dx * dx + dy * dy, t, dx, dy


@njit(cache=True)
def _pixel_face_terms(px, py, ax, ay, bx, by, cx, cy, sigma, cutoff):
    """Coverage terms for one pixel-face pair.

    Returns (code, cov, factor, sgn, edge, t, dx, dy). code 0: pair beyond
    the cutoff outside, factor is exactly 1 and the pair can be ignored.
    code 2: deep inside, factor is exactly 0. code 1: the generic case; edge,
    t and (dx, dy) = p - q describe the closest boundary point for the
    backward pass. Both passes call this so the branch decisions agree
    bit for bit.
    """
    e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    inside = e0 >= 0.0 and e1 >= 0.0 and e2 >= 0.0

    d2, t, dx, dy = _point_segment(px, py, ax, ay, bx, by)
    edge = 0
    d2b, tb, dxb, dyb = _point_segment(px, py, bx, by, cx, cy)
    if d2b < d2:
        d2, t, dx, dy, edge = d2b, tb, dxb, dyb, 1
    d2c, tc, dxc, dyc = _point_segment(px, py, cx, cy, ax, ay)
    if d2c < d2:
        d2, t, dx, dy, edge = d2c, tc, dxc, dyc, 2

    s = d2 / sigma
    if s >= cutoff:
        if inside:
            return 2, 1.0, 0.0, 1.0, edge, t, dx, dy
        return 0, 0.0, 1.0, -1.0, edge, t, dx, dy
    sgn = 1.0 if inside else -1.0
    x = sgn * s
    cov = 1.0 / (1.0 + np.exp(-x))
    factor = 1.0 / (1.0 + np.exp(x))
    return 1, cov, factor, sgn, edge, t, dx, dy


@njit(cache=True)
def _forward_kernel(a2d, faces, keep, pcx, pcy, sigma, cutoff, radius, prod, zcount):
    for f in range(faces.shape[0]):
        if not keep[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax, ay = a2d[i0, 0], a2d[i0, 1]
        bx, by = a2d[i1, 0], a2d[i1, 1]
        cx, cy = a2d[i2, 0], a2d[i2, 1]
        lox = min(ax, min(bx, cx)) - radius
        hix = max(ax, max(bx, cx)) + radius
        loy = min(ay, min(by, cy)) - radius
        hiy = max(ay, max(by, cy)) + radius
        c0 = np.searchsorted(pcx, lox)
        c1 = np.searchsorted(pcx, hix, side="right")
        r0 = np.searchsorted(pcy, loy)
        r1 = np.searchsorted(pcy, hiy, side="right")
        for r in range(r0, r1):
            py = pcy[r]
            for c in range(c0, c1):
                code, cov, factor, sgn, edge, t, dx, dy = _pixel_face_terms(
                    pcx[c], py, ax, ay, bx, by, cx, cy, sigma, cutoff
                )
                if code == 0:
                    continue
                if factor == 0.0:
                    zcount[r, c] += 1
                else:
                    prod[r, c] *= factor


@njit(cache=True)
def _backward_kernel(
    a2d, faces, keep, pcx, pcy, sigma, cutoff, radius, prod, zcount, upstream, grad_a
):
    for f in range(faces.shape[0]):
        if not keep[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax, ay = a2d[i0, 0], a2d[i0, 1]
        bx, by = a2d[i1, 0], a2d[i1, 1]
        cx, cy = a2d[i2, 0], a2d[i2, 1]
        lox = min(ax, min(bx, cx)) - radius
        hix = max(ax, max(bx, cx)) + radius
        loy = min(ay, min(by, cy)) - radius
        hiy = max(ay, max(by, cy)) + radius
        c0 = np.searchsorted(pcx, lox)
        c1 = np.searchsorted(pcx, hix, side="right")
        r0 = np.searchsorted(pcy, loy)
        r1 = np.searchsorted(pcy, hiy, side="right")
        for r in range(r0, r1):
            py = pcy[r]
            for c in range(c0, c1):
                g = upstream[r, c]
                if g == 0.0 or zcount[r, c] != 0:
                    # a factor that underflowed to exactly zero pins the pixel
                    # at full coverage; every other face's gradient vanishes
                    # and the zero face's own cov*(1-cov) is zero too
                    continue
                code, cov, factor, sgn, edge, t, dx, dy = _pixel_face_terms(
                    pcx[c], py, ax, ay, bx, by, cx, cy, sigma, cutoff
                )
                if code != 1:
                    continue
                others = prod[r, c] / factor
                # dI/dcov = prod of the other factors; dcov/dd2 = cov*(1-cov)*sgn/sigma
                gd2 = g * others * cov * factor * sgn / sigma
                if gd2 == 0.0:
                    continue
                if edge == 0:
                    ia, ib = i0, i1
                elif edge == 1:
                    ia, ib = i1, i2
                else:
                    ia, ib = i2, i0
                # envelope theorem at the closest boundary point q = a + t(b-a):
                # dd2/da = -2 (p-q)(1-t), dd2/db = -2 (p-q) t
                scale = -2.0 * gd2
                grad_a[ia, 0] += scale * dx * (1.0 - t)
                grad_a[ia, 1] += scale * dy * (1.0 - t)
                grad_a[ib, 0] += scale * dx * t
                grad_a[ib, 1] += scale * dy * t


@njit(cache=True)
def _hard_kernel(a2d, faces, keep, pcx, pcy, mask):
    for f in range(faces.shape[0]):
        if not keep[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax, ay = a2d[i0, 0], a2d[i0, 1]
        bx, by = a2d[i1, 0], a2d[i1, 1]
        cx, cy = a2d[i2, 0], a2d[i2, 1]
        c0 = np.searchsorted(pcx, min(ax, min(bx, cx)))
        c1 = np.searchsorted(pcx, max(ax, max(bx, cx)), side="right")
        r0 = np.searchsorted(pcy, min(ay, min(by, cy)))
        r1 = np.searchsorted(pcy, max(ay, max(by, cy)), side="right")
        for r in range(r0, r1):
            py = pcy[r]
            for c in range(c0, c1):
                px = pcx[c]
                e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                if e0 >= 0.0 and e1 >= 0.0 and e2 >= 0.0:
                    mask[r, c] = 1.0


def _forward_state(mesh: TriMesh, camera: Camera, cfg: SoftRasterConfig):
    cfg.validate(camera)
    p_cam, w, a2d, pcx, pcy = _planar_setup(mesh.vertices, camera)
    keep = _kept_faces(mesh.faces, w, a2d)
    prod = np.ones((cfg.height, cfg.width))
    zcount = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    radius = math.sqrt(cfg.cutoff * cfg.sigma) * (1.0 + 1e-9)
    _forward_kernel(
        a2d, mesh.faces, keep, pcx, pcy, cfg.sigma, cfg.cutoff, radius, prod, zcount
    )
    image = np.where(zcount == 0, 1.0 - prod, 1.0)
    return image, (p_cam, w, a2d, pcx, pcy, keep, prod, zcount, radius)


def soft_silhouette(mesh: TriMesh, camera: Camera, cfg: SoftRasterConfig) -> np.ndarray:
    """Soft silhouette image, shape (height, width), values in [0, 1]."""
    image, _ = _forward_state(mesh, camera, cfg)
    return image


def soft_silhouette_backward(
    mesh: TriMesh,
    camera: Camera,
    cfg: SoftRasterConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Pull per-pixel dL/dI back to per-vertex 3D position gradients.

    Reruns the forward accumulation internally, then walks the same
    pixel-face pairs a second time for the leave-one-out products. Culled
    faces never touch their vertices, so vertices used only by culled faces
    get exactly zero.
    """
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cfg.height, cfg.width):
        raise ConfigError(
            f"upstream shape {upstream.shape} does not match {(cfg.height, cfg.width)}"
        )
    _, state = _forward_state(mesh, camera, cfg)
    p_cam, w, a2d, pcx, pcy, keep, prod, zcount, radius = state
    grad_a = np.zeros_like(a2d)
    _backward_kernel(
        a2d,
        mesh.faces,
        keep,
        pcx,
        pcy,
        cfg.sigma,
        cfg.cutoff,
        radius,
        prod,
        zcount,
        upstream,
        grad_a,
    )
    # chain a2d = (s * f * coord / w) back to camera space, then to world;
    # d(x/w)/dz = x/w^2 because w = -z
    sx = 2.0 / camera.width
    sy = 2.0 / camera.height
    safe_w = np.where(w > _W_EPS, w, 1.0)
    gx = grad_a[:, 0] * sx * camera.fx / safe_w
    gy = grad_a[:, 1] * sy * camera.fy / safe_w
    gz = (
        grad_a[:, 0] * sx * camera.fx * p_cam[:, 0]
        + grad_a[:, 1] * sy * camera.fy * p_cam[:, 1]
    ) / (safe_w * safe_w)
    grad_cam = np.stack([gx, gy, gz], axis=1)
    return grad_cam @ camera.rotation


def rasterize_hard_mask(mesh: TriMesh, camera: Camera) -> np.ndarray:
    """Binary coverage at pixel centers, shape (camera.height, camera.width)."""
    p_cam, w, a2d, pcx, pcy = _planar_setup(mesh.vertices, camera)
    keep = _kept_faces(mesh.faces, w, a2d)
    mask = np.zeros((camera.height, camera.width))
    _hard_kernel(a2d, mesh.faces, keep, pcx, pcy, mask)
    return mask
