"""Training objectives for the two optimization phases.

Geometry fits a soft-IoU silhouette term plus three mesh regularizers
(Laplacian smoothness, normal consistency, edge length). Reflectance fits a
photometric L1 term plus a bilateral smoothness prior that ties specular
albedo to diffuse-albedo structure: texels whose diffuse values agree are
encouraged to share specular values, while albedo edges sever the coupling.

All losses return analytic gradients alongside the scalar so the optimizer
never falls back to finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import ConfigError, SceneError
from .geomcore import TriMesh, edge_length_loss, laplacian_loss, normal_consistency_loss


@dataclass
class GeoLossWeights:
    """Geometry-phase term weights."""

    silhouette: float = 1.0
    laplacian: float = 1.0
    edge: float = 1.0
    normal: float = 0.01

    def validate(self) -> None:
        for name in ("silhouette", "laplacian", "edge", "normal"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"geometry weight {name} must be >= 0")


@dataclass
class RefLossWeights:
    """Reflectance-phase term weights and bilateral kernel shape.

    sigma_spatial is in texels, sigma_albedo in albedo units; the window is
    (2 * radius + 1)^2 texels around each center, clipped at texture borders.
    """

    rgb: float = 0.1
    reg: float = 1.0
    sigma_spatial: float = 2.0
    sigma_albedo: float = 0.1
    radius: int = 3

    def validate(self) -> None:
        if self.rgb < 0.0 or self.reg < 0.0:
            raise ConfigError("reflectance weights must be >= 0")
        if self.sigma_spatial <= 0.0 or self.sigma_albedo <= 0.0:
            raise ConfigError("bilateral bandwidths must be > 0")
        if self.radius < 0:
            raise ConfigError(f"window radius must be >= 0, got {self.radius}")


def _image(arr, name: str) -> np.ndarray:
    data = getattr(arr, "data", arr)
    return np.ascontiguousarray(data, dtype=np.float64)


def silhouette_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Soft IoU complement 1 - |pred*gt| / |pred + gt - pred*gt|.

    Gradient flows through both the intersection and the union. A target
    without any foreground leaves the union degenerate at pred = 0, so it is
    rejected instead of silently returning 0/0.
    """
    p = _image(pred, "pred")
    g = _image(gt, "gt")
    if p.shape != g.shape:
        raise ConfigError(f"silhouette shapes differ: {p.shape} vs {g.shape}")
    if not g.any():
        raise SceneError("silhouette target has no foreground; IoU is undefined")
    inter = float((p * g).sum())
    union = float((p + g).sum()) - inter
    loss = 1.0 - inter / union
    grad = -(g * union - inter * (1.0 - g)) / (union * union)
    return loss, grad


def rgb_l1_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean absolute difference over all pixel-channels; sign(0) = 0."""
    p = _image(pred, "pred")
    g = _image(gt, "gt")
    if p.shape != g.shape:
        raise ConfigError(f"image shapes differ: {p.shape} vs {g.shape}")
    diff = p - g
    loss = float(np.abs(diff).mean())
    return loss, np.sign(diff) / diff.size


def geometry_loss(
    mesh: TriMesh,
    laplacian: sp.csr_matrix,
    sil_preds,
    sil_gts,
    weights: GeoLossWeights | None = None,
) -> tuple[float, np.ndarray, list[np.ndarray], dict[str, float]]:
    """Weighted geometry objective.

    Returns (total, per-vertex gradient of the regularizers, per-view
    per-pixel gradients of the silhouette term, weighted per-term values
    summing to total). The silhouette term is averaged over views so its
    weight does not depend on batch size; the pixel gradients already
    include weight and view averaging.
    """
    w = weights if weights is not None else GeoLossWeights()
    w.validate()
    if len(sil_preds) != len(sil_gts):
        raise ConfigError(
            f"got {len(sil_preds)} predictions for {len(sil_gts)} targets"
        )
    if not sil_preds:
        raise ConfigError("geometry loss needs at least one view")

    n_views = len(sil_preds)
    terms = {"silhouette": 0.0, "laplacian": 0.0, "edge": 0.0, "normal": 0.0}
    pixel_grads = []
    for p, g in zip(sil_preds, sil_gts):
        value, grad = silhouette_loss(p, g)
        terms["silhouette"] += w.silhouette * value / n_views
        pixel_grads.append(w.silhouette * grad / n_views)

    vertex_grad = np.zeros_like(mesh.vertices)
    if w.laplacian > 0.0:
        value, grad = laplacian_loss(mesh.vertices, laplacian)
        terms["laplacian"] = w.laplacian * value
        vertex_grad += w.laplacian * grad
    if w.edge > 0.0:
        value, grad = edge_length_loss(mesh)
        terms["edge"] = w.edge * value
        vertex_grad += w.edge * grad
    if w.normal > 0.0:
        value, grad = normal_consistency_loss(mesh)
        terms["normal"] = w.normal * value
        vertex_grad += w.normal * grad
    total = terms["silhouette"] + terms["laplacian"] + terms["edge"] + terms["normal"]
    return total, vertex_grad, pixel_grads, terms


@njit(cache=True)
def _bilateral_means(guide, theta_s, radius, inv_two_s1, inv_two_s2, mean, ksum):
    h, w, c = theta_s.shape
    for py in range(h):
        for px in range(w):
            k_total = 0.0
            for ch in range(c):
                mean[py, px, ch] = 0.0
            for qy in range(max(0, py - radius), min(h, py + radius + 1)):
                for qx in range(max(0, px - radius), min(w, px + radius + 1)):
                    dg = guide[py, px] - guide[qy, qx]
                    d2 = float((py - qy) ** 2 + (px - qx) ** 2)
                    k = math.exp(-d2 * inv_two_s1 - dg * dg * inv_two_s2)
                    k_total += k
                    for ch in range(c):
                        mean[py, px, ch] += k * theta_s[qy, qx, ch]
            ksum[py, px] = k_total
            for ch in range(c):
                mean[py, px, ch] /= k_total


@njit(cache=True)
def _bilateral_backward(
    guide, theta_s, mean, ksum, radius, inv_two_s1, inv_two_s2, g_spec, g_guide
):
    # Serial on purpose: gradients scatter into overlapping windows, and a
    # deterministic accumulation order keeps runs bit-identical.
    h, w, c = theta_s.shape
    loss = 0.0
    for py in range(h):
        for px in range(w):
            for ch in range(c):
                d = theta_s[py, px, ch] - mean[py, px, ch]
                loss += abs(d)
                # residuals at roundoff level are ties: without the dead band
                # a constant texture would get O(1) sign-noise gradients
                if d > 1e-12:
                    g_spec[py, px, ch] += 1.0
                elif d < -1e-12:
                    g_spec[py, px, ch] -= 1.0
            for qy in range(max(0, py - radius), min(h, py + radius + 1)):
                for qx in range(max(0, px - radius), min(w, px + radius + 1)):
                    dg = guide[py, px] - guide[qy, qx]
                    d2 = float((py - qy) ** 2 + (px - qx) ** 2)
                    k = math.exp(-d2 * inv_two_s1 - dg * dg * inv_two_s2)
                    # dloss/dk through the weighted mean at p
                    dl_dk = 0.0
                    for ch in range(c):
                        d = theta_s[py, px, ch] - mean[py, px, ch]
                        s = 1.0 if d > 1e-12 else (-1.0 if d < -1e-12 else 0.0)
                        g_spec[qy, qx, ch] -= s * k / ksum[py, px]
                        dl_dk -= s * (theta_s[qy, qx, ch] - mean[py, px, ch]) / ksum[py, px]
                    t = dl_dk * k * dg * 2.0 * inv_two_s2
                    g_guide[py, px] -= t
                    g_guide[qy, qx] += t
    return loss


def bilateral_specular_reg(
    theta_d, theta_s, weights: RefLossWeights | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Bilateral specular smoothness prior.

    For each texel p the kernel-weighted specular mean over the window is
    subtracted and the residual's L1 norm summed: texels with similar
    diffuse albedo (channel mean) pull each other's specular values
    together. Returns (loss, d/d theta_s, d/d theta_d).
    """
    w = weights if weights is not None else RefLossWeights()
    w.validate()
    td = _image(theta_d, "theta_d")
    ts = _image(theta_s, "theta_s")
    if td.ndim != 3 or ts.ndim != 3:
        raise ConfigError("bilateral regularizer expects (h, w, c) textures")
    if td.shape[:2] != ts.shape[:2]:
        raise ConfigError(
            f"texture resolutions differ: {td.shape[:2]} vs {ts.shape[:2]}"
        )
    guide = td.mean(axis=2)
    inv_two_s1 = 1.0 / (2.0 * w.sigma_spatial * w.sigma_spatial)
    inv_two_s2 = 1.0 / (2.0 * w.sigma_albedo * w.sigma_albedo)

    mean = np.empty_like(ts)
    ksum = np.empty(ts.shape[:2])
    _bilateral_means(guide, ts, w.radius, inv_two_s1, inv_two_s2, mean, ksum)
    g_spec = np.zeros_like(ts)
    g_guide = np.zeros(ts.shape[:2])
    loss = _bilateral_backward(
        guide, ts, mean, ksum, w.radius, inv_two_s1, inv_two_s2, g_spec, g_guide
    )
    # guide = channel mean of theta_d
    g_diff = np.repeat(g_guide[:, :, None], td.shape[2], axis=2) / td.shape[2]
    return float(loss), g_spec, g_diff


def reflectance_loss(
    pred, gt, theta_d, theta_s, weights: RefLossWeights | None = None
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Weighted reflectance objective.

    Returns (total, gradients, weighted per-term values summing to total).
    gradients["image"] is the per-pixel dL/dpred to feed the renderer's
    backward pass; gradients["specular"] / gradients["diffuse"] act directly
    on the texture values.
    """
    w = weights if weights is not None else RefLossWeights()
    w.validate()
    l_rgb, g_img = rgb_l1_loss(pred, gt)
    l_reg, g_spec, g_diff = bilateral_specular_reg(theta_d, theta_s, w)
    terms = {"rgb": w.rgb * l_rgb, "reg": w.reg * l_reg}
    total = terms["rgb"] + terms["reg"]
    grads = {
        "image": w.rgb * g_img,
        "specular": w.reg * g_spec,
        "diffuse": w.reg * g_diff,
    }
    return total, grads, terms
