"""Procedural meshes and texture patterns for synthetic scenes."""

from __future__ import annotations

import numpy as np

from .geomcore import TriMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected to a sphere. No texture coordinates."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        vlist = list(verts)
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                idx = len(vlist)
                vlist.append(m)
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(radius * verts, faces)


def uv_sphere(rows: int = 16, cols: int = 32, radius: float = 1.0) -> TriMesh:
    """Lat-long sphere with per-vertex uvs and duplicated seam column.

    The parameterization matches the lat-long environment convention:
    u = (atan2(x, -z) + pi) / (2 pi), v = acos(y) / pi. The u = 0 and u = 1
    columns are distinct vertices at identical positions, and each pole is
    duplicated once per column so every uv stays inside [0, 1]^2.
    """
    if rows < 3 or cols < 3:
        raise ValueError("uv_sphere needs rows >= 3 and cols >= 3")
    verts: list[np.ndarray] = []
    uvs: list[tuple[float, float]] = []

    def ring_index(r: int, c: int) -> int:
        # interior rings r = 1..rows-1, columns c = 0..cols inclusive
        return (r - 1) * (cols + 1) + c

    for r in range(1, rows):
        theta = np.pi * r / rows
        for c in range(cols + 1):
            u = c / cols
            phi = 2.0 * np.pi * u - np.pi
            st, ct = np.sin(theta), np.cos(theta)
            verts.append(radius * np.array([st * np.sin(phi), ct, -st * np.cos(phi)]))
            uvs.append((u, r / rows))
    faces: list[list[int]] = []
    for r in range(1, rows - 1):
        for c in range(cols):
            a = ring_index(r, c)
            b = ring_index(r, c + 1)
            d = ring_index(r + 1, c)
            e = ring_index(r + 1, c + 1)
            faces.append([a, e, b])
            faces.append([a, d, e])
    # Per-column pole copies keep uv interpolation seam free.
    for c in range(cols):
        idx = len(verts)
        verts.append(radius * np.array([0.0, 1.0, 0.0]))
        uvs.append(((c + 0.5) / cols, 0.0))
        faces.append([idx, ring_index(1, c), ring_index(1, c + 1)])
    for c in range(cols):
        idx = len(verts)
        verts.append(radius * np.array([0.0, -1.0, 0.0]))
        uvs.append(((c + 0.5) / cols, 1.0))
        faces.append([idx, ring_index(rows - 1, c + 1), ring_index(rows - 1, c)])
    return TriMesh(
        np.asarray(verts), np.asarray(faces, dtype=np.int64), uvs=np.asarray(uvs)
    )


def radial_perturbation(mesh: TriMesh, amplitude: float = 0.15) -> TriMesh:
    """Displace vertices radially by a smooth deterministic bump field.

    New radius is r * (1 + amplitude * g(direction)) with |g| <= 1, so the
    perturbed surface stays star shaped and recoverable from silhouettes.
    """
    out = mesh.copy()
    center = mesh.vertices.mean(axis=0)
    rel = out.vertices - center
    r = np.linalg.norm(rel, axis=1, keepdims=True)
    d = rel / r
    a = np.array([2.1, 0.6, 1.3])
    b = np.array([-0.8, 1.7, 0.9])
    g = 0.5 * (np.sin(3.0 * d @ a) + np.sin(2.0 * d @ b + 0.4))
    out.vertices = center + rel * (1.0 + amplitude * g[:, None])
    return out


def checker_texture(
    resolution: int,
    grid: int = 4,
    color_a: tuple[float, float, float] = (0.65, 0.55, 0.35),
    color_b: tuple[float, float, float] = (0.35, 0.45, 0.65),
) -> np.ndarray:
    """Texel-aligned checkerboard, (resolution, resolution, 3) float64."""
    if resolution % grid != 0:
        raise ValueError(f"grid {grid} must divide resolution {resolution}")
    idx = np.arange(resolution) * grid // resolution
    parity = (idx[:, None] + idx[None, :]) % 2
    tex = np.where(parity[..., None] == 0, color_a, color_b)
    return np.ascontiguousarray(tex, dtype=np.float64)


def constant_texture(resolution: int, value, channels: int = 3) -> np.ndarray:
    val = np.broadcast_to(np.asarray(value, dtype=np.float64), (channels,))
    return np.tile(val, (resolution, resolution, 1)).astype(np.float64)


def gradient_envmap(
    width: int = 512,
    height: int = 128,
    top: tuple[float, float, float] = (0.9, 0.75, 0.5),
    bottom: tuple[float, float, float] = (0.15, 0.25, 0.45),
    floor: float = 0.05,
) -> np.ndarray:
    """Vertical color ramp with a strictly positive floor, (h, w, 3)."""
    t = (np.arange(height, dtype=np.float64) + 0.5) / height
    ramp = (1.0 - t)[:, None] * np.asarray(top) + t[:, None] * np.asarray(bottom)
    env = np.tile(ramp[:, None, :], (1, width, 1))
    return np.maximum(env, floor)


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """n unit directions spread over the upper (y >= 0) hemisphere."""
    i = np.arange(n, dtype=np.float64)
    y = (i + 0.5) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    return np.stack([rho * np.cos(phi), y, rho * np.sin(phi)], axis=1)
