"""Scene assets: cameras, textures, environment light, image I/O.

Conventions, used consistently by the rasterizer and the path tracer:

* Camera space is right handed, the camera looks down -z, y is up. A world
  point projects to pixel u = fx * x / (-z) + cx (v analogously) and its
  depth is -z in camera space.
* Texture uv lives in [0, 1]^2 with texel centers at ((i + 0.5) / W,
  (j + 0.5) / H); u indexes columns, v indexes rows, row 0 is v = 0.
* The lat-long environment map maps direction d to
  u = (atan2(d_x, -d_z) + pi) / (2 pi), v = acos(clamp(d_y)) / pi, wrapping
  horizontally and clamping vertically.
* Linear radiance images are stored as PFM (little endian, scale -1.0, rows
  bottom to top); PNG is for 8-bit sRGB previews and masks only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, SceneError
from .geomcore import TriMesh

TWO_PI_SQ = 2.0 * np.pi * np.pi
INV_FOUR_PI = 1.0 / (4.0 * np.pi)


# ---------------------------------------------------------------------------
# parameter transforms
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def roughness_from_logit(z: np.ndarray) -> np.ndarray:
    """Map unconstrained logits into the stable roughness range [0.01, 1]."""
    return 0.01 + 0.99 * sigmoid(z)


def roughness_to_logit(alpha: np.ndarray) -> np.ndarray:
    return logit((np.asarray(alpha, dtype=np.float64) - 0.01) / 0.99)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera with a 3x4 world-to-camera rigid transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray

    def __post_init__(self) -> None:
        self.world_to_camera = np.ascontiguousarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (3, 4):
            raise SceneError(
                f"world_to_camera must be (3, 4), got {self.world_to_camera.shape}"
            )
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"invalid image size {self.width}x{self.height}")
        if self.fx == 0.0 or self.fy == 0.0:
            raise SceneError("focal lengths must be nonzero")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise SceneError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"[0, {self.width}) x [0, {self.height})"
            )
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise SceneError("rotation block is not orthonormal within 1e-6")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, point: np.ndarray) -> tuple[np.ndarray, float]:
        """Project a world point; returns ((u, v), depth).

        depth is the distance along the viewing axis (-z in camera space);
        a non-positive depth flags a point behind the camera, left to the
        caller to clip. Points on the camera plane itself raise.
        """
        p = self.rotation @ np.asarray(point, dtype=np.float64) + self.translation
        if abs(p[2]) < 1e-9:
            raise SceneError("point lies on the camera plane (z = 0)")
        w = -p[2]
        u = self.fx * p[0] / w + self.cx
        v = self.fy * p[1] / w + self.cy
        return np.array([u, v]), float(w)

    def unproject(self, uv: np.ndarray, depth: float) -> np.ndarray:
        """Inverse of project for positive depth."""
        u, v = float(uv[0]), float(uv[1])
        p_cam = np.array(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, -depth]
        )
        return self.rotation.T @ (p_cam - self.translation)

    def pixel_ray(self, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and unit direction through pixel coords (u, v)."""
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, -1.0])
        d = self.rotation.T @ d_cam
        return self.origin, d / np.linalg.norm(d)

    def downsampled(self, factor: int) -> "Camera":
        if factor < 1 or self.width % factor or self.height % factor:
            raise ConfigError(
                f"downsample factor {factor} must divide {self.width}x{self.height}"
            )
        return Camera(
            self.width // factor,
            self.height // factor,
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            self.world_to_camera.copy(),
        )

    @staticmethod
    def look_at(
        eye,
        target,
        width: int,
        height: int,
        fov_x_deg: float = 60.0,
        up=(0.0, 1.0, 0.0),
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise SceneError("look_at eye and target coincide")
        forward /= norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
            if np.linalg.norm(right) < 1e-8:
                right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, forward)
        r = np.stack([right, cam_up, -forward])
        t = -r @ eye
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2.0)
        return Camera(
            width,
            height,
            fx,
            fx,
            width / 2.0,
            height / 2.0,
            np.concatenate([r, t[:, None]], axis=1),
        )

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": [float(x) for x in self.rotation.reshape(-1)],
            "t": [float(x) for x in self.translation],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Camera":
        try:
            r = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
            t = np.asarray(d["t"], dtype=np.float64).reshape(3, 1)
            return Camera(
                int(d["width"]),
                int(d["height"]),
                float(d["fx"]),
                float(d["fy"]),
                float(d["cx"]),
                float(d["cy"]),
                np.concatenate([r, t], axis=1),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad camera record: {exc}") from None


def save_cameras(cameras: list[Camera], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_json_dict() for c in cameras], fh, indent=1)


def load_cameras(path: str) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ConfigError(f"{path}: camera file must hold a JSON array")
    return [Camera.from_json_dict(d) for d in data]


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


class Texture2D:
    """Row-major texel grid with bilinear sampling and clamp-to-edge."""

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise SceneError(f"texture must be (h, w) or (h, w, 1|3), got {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "Texture2D":
        return Texture2D(self.data.copy())

    def taps(self, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
        """The four contributing texel (row, col) indices and bilinear weights."""
        x = u * self.width - 0.5
        y = v * self.height - 0.5
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        xs = np.clip([x0, x0 + 1], 0, self.width - 1)
        ys = np.clip([y0, y0 + 1], 0, self.height - 1)
        idx = np.array(
            [[ys[0], xs[0]], [ys[0], xs[1]], [ys[1], xs[0]], [ys[1], xs[1]]],
            dtype=np.int64,
        )
        w = np.array(
            [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
        )
        return idx, w

    def sample(self, uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Bilinear sample; returns (value, texel indices (4, 2), weights (4,)).

        The exposed taps let gradient code scatter pixel derivatives onto the
        exact texels the forward interpolation touched.
        """
        u, v = float(uv[0]), float(uv[1])
        idx, w = self.taps(u, v)
        vals = self.data[idx[:, 0], idx[:, 1]]
        return (w[:, None] * vals).sum(axis=0), idx, w


# ---------------------------------------------------------------------------
# environment map
# ---------------------------------------------------------------------------


def dirs_to_env_uv(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(dirs, dtype=np.float64)
    u = (np.arctan2(d[..., 0], -d[..., 2]) + np.pi) / (2.0 * np.pi)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    return u, v


def env_uv_to_dir(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta = np.pi * np.asarray(v, dtype=np.float64)
    phi = 2.0 * np.pi * np.asarray(u, dtype=np.float64) - np.pi
    st = np.sin(theta)
    return np.stack(
        [st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1
    )


class EnvMap:
    """Lat-long radiance map with luminance * sin(theta) importance sampling.

    Within a selected texel the polar coordinate is drawn proportional to
    sin(theta), which makes the solid-angle pdf exactly constant per texel:
    pdf(dir) = lum(texel) / (2 pi^2 Z). A map that is zero everywhere falls
    back to uniform sphere sampling with pdf 1 / (4 pi).
    """

    def __init__(self, radiance: np.ndarray):
        radiance = np.ascontiguousarray(radiance, dtype=np.float64)
        if radiance.ndim != 3 or radiance.shape[2] != 3:
            raise SceneError(f"envmap must be (h, w, 3), got {radiance.shape}")
        if radiance.min() < 0.0 or not np.isfinite(radiance).all():
            raise SceneError("envmap radiance must be finite and non-negative")
        self.radiance = radiance
        self._rebuild_cdf()

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    def copy(self) -> "EnvMap":
        return EnvMap(self.radiance.copy())

    def set_radiance(self, radiance: np.ndarray) -> None:
        """Replace radiance and rebuild the sampling CDF to match."""
        radiance = np.ascontiguousarray(radiance, dtype=np.float64)
        if radiance.shape != self.radiance.shape:
            raise SceneError(
                f"envmap shape change {self.radiance.shape} -> {radiance.shape}"
            )
        self.radiance = radiance
        self._rebuild_cdf()

    def _rebuild_cdf(self) -> None:
        h, w = self.height, self.width
        self.luminance = (
            0.2126 * self.radiance[:, :, 0]
            + 0.7152 * self.radiance[:, :, 1]
            + 0.0722 * self.radiance[:, :, 2]
        )
        # cos(pi j / H) at row boundaries; sin integral of row j is
        # (cos_bounds[j] - cos_bounds[j+1]) / pi.
        self.cos_bounds = np.cos(np.pi * np.arange(h + 1) / h)
        sin_int = (self.cos_bounds[:-1] - self.cos_bounds[1:]) / np.pi
        row_sums = self.luminance.sum(axis=1)
        row_mass = row_sums * sin_int
        self.total = float(row_mass.sum() / w)  # Z = sum lum * sin_int / W
        if self.total > 0.0:
            self.row_cdf = np.cumsum(row_mass) / row_mass.sum()
            self.row_cdf[-1] = 1.0
            safe = np.where(row_sums > 0.0, row_sums, 1.0)
            self.col_cdf = np.cumsum(self.luminance, axis=1) / safe[:, None]
            self.col_cdf[:, -1] = 1.0
        else:
            self.row_cdf = (np.arange(h, dtype=np.float64) + 1.0) / h
            self.col_cdf = np.tile((np.arange(w, dtype=np.float64) + 1.0) / w, (h, 1))

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Bilinear radiance along unit directions, horizontal wrap, vertical clamp."""
        d = np.asarray(dirs, dtype=np.float64)
        n = np.linalg.norm(d, axis=-1)
        if np.abs(n - 1.0).max() > 1e-6:
            bad = float(np.abs(n - 1.0).max())
            raise SceneError(f"envmap_lookup needs unit directions (|len-1| = {bad:.2e})")
        u, v = dirs_to_env_uv(d)
        h, w = self.height, self.width
        x = u * w - 0.5
        y = np.clip(v * h - 0.5, 0.0, h - 1.0)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        x1 = np.mod(x0 + 1, w)
        x0 = np.mod(x0, w)
        y1 = np.minimum(y0 + 1, h - 1)
        rad = self.radiance
        out = (
            rad[y0, x0] * ((1 - fy) * (1 - fx))[..., None]
            + rad[y0, x1] * ((1 - fy) * fx)[..., None]
            + rad[y1, x0] * (fy * (1 - fx))[..., None]
            + rad[y1, x1] * (fy * fx)[..., None]
        )
        return out

    def pdf(self, dirs: np.ndarray) -> np.ndarray:
        """Solid-angle sampling pdf for the current radiance."""
        d = np.asarray(dirs, dtype=np.float64)
        u, v = dirs_to_env_uv(d)
        if self.total <= 0.0:
            return np.full(u.shape, INV_FOUR_PI)
        i = np.minimum((u * self.width).astype(np.int64), self.width - 1)
        j = np.minimum((v * self.height).astype(np.int64), self.height - 1)
        return self.luminance[j, i] / (TWO_PI_SQ * self.total)

    def sample(self, xi1: float, xi2: float) -> tuple[np.ndarray, float]:
        """Draw a direction from two uniforms; returns (direction, pdf)."""
        h, w = self.height, self.width
        if self.total <= 0.0:
            y = 1.0 - 2.0 * xi1
            phi = 2.0 * np.pi * xi2
            r = np.sqrt(max(0.0, 1.0 - y * y))
            return np.array([r * np.cos(phi), y, r * np.sin(phi)]), INV_FOUR_PI
        j = int(np.searchsorted(self.row_cdf, xi1, side="right"))
        j = min(j, h - 1)
        lo = self.row_cdf[j - 1] if j > 0 else 0.0
        seg = self.row_cdf[j] - lo
        t = (xi1 - lo) / seg if seg > 0.0 else 0.5
        # invert the sin-weighted cdf inside row j; the 1e-6 texel margin keeps
        # the direction bin-stable against acos/atan2 round trips
        ca, cb = self.cos_bounds[j], self.cos_bounds[j + 1]
        v = np.arccos(min(1.0, max(-1.0, ca + t * (cb - ca)))) / np.pi
        v = min(max(v, (j + 1e-6) / h), (j + 1.0 - 1e-6) / h)
        i = int(np.searchsorted(self.col_cdf[j], xi2, side="right"))
        i = min(i, w - 1)
        clo = self.col_cdf[j, i - 1] if i > 0 else 0.0
        cseg = self.col_cdf[j, i] - clo
        s = (xi2 - clo) / cseg if cseg > 0.0 else 0.5
        u = (i + min(max(s, 1e-6), 1.0 - 1e-6)) / w
        dir_ = env_uv_to_dir(u, v)
        pdf = self.luminance[j, i] / (TWO_PI_SQ * self.total)
        return dir_, float(pdf)


# ---------------------------------------------------------------------------
# scene parameters
# ---------------------------------------------------------------------------


@dataclass
class SceneParams:
    """Everything the renderer consumes: geometry, SVBRDF textures, light."""

    mesh: TriMesh
    diffuse: Texture2D
    specular: Texture2D
    roughness: Texture2D
    envmap: EnvMap

    def validate(self) -> None:
        self.mesh.validate()
        if self.mesh.uvs is None:
            raise SceneError("scene mesh needs per-vertex uvs for texturing")
        for name, tex, lo, hi in (
            ("diffuse", self.diffuse, 0.0, 1.0),
            ("specular", self.specular, 0.0, 1.0),
            ("roughness", self.roughness, 0.01, 1.0),
        ):
            if tex.data.min() < lo - 1e-12 or tex.data.max() > hi + 1e-12:
                raise SceneError(
                    f"{name} texture outside [{lo}, {hi}]: "
                    f"[{tex.data.min():.4g}, {tex.data.max():.4g}]"
                )
        if self.roughness.channels != 1:
            raise SceneError("roughness texture must have one channel")

    def copy(self) -> "SceneParams":
        return SceneParams(
            self.mesh.copy(),
            self.diffuse.copy(),
            self.specular.copy(),
            self.roughness.copy(),
            self.envmap.copy(),
        )


def bake_vertex_colors(mesh: TriMesh, resolution: int) -> np.ndarray:
    """Rasterize per-vertex colors into uv space; uncovered texels get 0.5."""
    tex = np.full((resolution, resolution, 3), 0.5)
    if mesh.uvs is None or mesh.vertex_colors is None:
        return tex
    uv = mesh.uvs
    for f in mesh.faces:
        a, b, c = uv[f[0]], uv[f[1]], uv[f[2]]
        lo = np.floor(np.minimum(np.minimum(a, b), c) * resolution - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) * resolution - 0.5).astype(int)
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-15:
            continue
        for j in range(max(lo[1], 0), min(hi[1] + 1, resolution)):
            for i in range(max(lo[0], 0), min(hi[0] + 1, resolution)):
                p = np.array([(i + 0.5) / resolution, (j + 0.5) / resolution])
                wb = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det
                wc = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det
                wa = 1.0 - wb - wc
                if wa >= -1e-9 and wb >= -1e-9 and wc >= -1e-9:
                    tex[j, i] = (
                        wa * mesh.vertex_colors[f[0]]
                        + wb * mesh.vertex_colors[f[1]]
                        + wc * mesh.vertex_colors[f[2]]
                    )
    return tex


def init_scene(
    mesh: TriMesh,
    tex_resolution: int,
    env_width: int = 512,
    env_height: int = 128,
) -> SceneParams:
    """Neutral starting point for reflectance optimization.

    Diffuse starts at 0.5 (or colors baked from the mesh when present),
    specular at 0.04, roughness at 0.3, and the environment at constant
    0.5 gray.
    """
    if mesh.vertex_colors is not None:
        diffuse = bake_vertex_colors(mesh, tex_resolution)
    else:
        diffuse = np.full((tex_resolution, tex_resolution, 3), 0.5)
    specular = np.full((tex_resolution, tex_resolution, 3), 0.04)
    roughness = np.full((tex_resolution, tex_resolution, 1), 0.3)
    env = np.full((env_height, env_width, 3), 0.5)
    return SceneParams(
        mesh.copy(),
        Texture2D(diffuse),
        Texture2D(specular),
        Texture2D(roughness),
        EnvMap(env),
    )


def scene_to_logits(scene: SceneParams) -> dict[str, np.ndarray]:
    """Unconstrained optimization variables for the reflectance blocks."""
    return {
        "diffuse": logit(scene.diffuse.data),
        "specular": logit(scene.specular.data),
        "roughness": roughness_to_logit(scene.roughness.data[:, :, 0]),
        "envmap": np.log(scene.envmap.radiance),
    }


def apply_logits(scene: SceneParams, logits: dict[str, np.ndarray]) -> None:
    """Write transformed logits back into the scene (envmap CDF rebuilt)."""
    scene.diffuse.data[:] = sigmoid(logits["diffuse"])
    scene.specular.data[:] = sigmoid(logits["specular"])
    scene.roughness.data[:, :, 0] = roughness_from_logit(logits["roughness"])
    scene.envmap.set_radiance(np.exp(logits["envmap"]))


# ---------------------------------------------------------------------------
# image I/O and color transfer
# ---------------------------------------------------------------------------


def srgb_oetf(linear: np.ndarray) -> np.ndarray:
    x = np.asarray(linear, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 0.0), 1 / 2.4) - 0.055)


def srgb_eotf(encoded: np.ndarray) -> np.ndarray:
    x = np.asarray(encoded, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def tonemap(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and encode with the sRGB OETF (metric/display space)."""
    return srgb_oetf(np.clip(img, 0.0, 1.0))


def save_pfm(path: str, img: np.ndarray) -> None:
    """Write a 1- or 3-channel float32 PFM, little endian, rows bottom-up."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        header = b"Pf\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    else:
        raise SceneError(f"PFM supports (h, w) or (h, w, 3) images, got {img.shape}")
    h, w = img.shape[0], img.shape[1]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def load_pfm(path: str) -> np.ndarray:
    """Read a PFM written by save_pfm (or any spec-conforming file) as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneError(f"{path}: truncated PFM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after the scale token
    kind, w_s, h_s, scale_s = tokens
    if kind not in (b"PF", b"Pf"):
        raise SceneError(f"{path}: not a PFM file (magic {kind!r})")
    try:
        w, h, scale = int(w_s), int(h_s), float(scale_s)
    except ValueError:
        raise SceneError(f"{path}: malformed PFM header") from None
    channels = 3 if kind == b"PF" else 1
    count = w * h * channels
    dtype = "<f4" if scale < 0 else ">f4"
    available = (len(data) - pos) // 4
    if available < count:
        raise SceneError(f"{path}: PFM payload truncated ({available}/{count} floats)")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    img = raw.reshape(h, w, channels) if channels == 3 else raw.reshape(h, w)
    return np.flipud(img).astype(np.float64)


def save_png(path: str, linear_img: np.ndarray) -> None:
    """8-bit sRGB preview of a linear image."""
    enc = np.clip(tonemap(linear_img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if enc.ndim == 3 and enc.shape[2] == 1:
        enc = enc[:, :, 0]
    Image.fromarray(enc).save(path)


def load_png(path: str) -> np.ndarray:
    """PNG as float64 in [0, 1], still sRGB encoded (no EOTF applied)."""
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return img


def save_mask_png(path: str, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_mask_png(path: str) -> np.ndarray:
    """Single-channel mask: values >= 128 are foreground."""
    img = np.asarray(Image.open(path).convert("L"))
    return (img >= 128).astype(np.float64)


def downsample_image(img: np.ndarray, factor: int) -> np.ndarray:
    """Box average by an integer factor in linear space."""
    if factor == 1:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    if h % factor or w % factor:
        raise ConfigError(f"downsample factor {factor} must divide {w}x{h}")
    shape = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return np.asarray(img, dtype=np.float64).reshape(shape).mean(axis=(1, 3))
