"""Triangle mesh container, mesh regularizers, and OBJ I/O.

All regularizer losses return ``(value, gradient)`` pairs with gradients taken
analytically with respect to vertex positions; finite differences are used
only in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import MeshError

DEGENERATE_AREA_EPS = 1e-12


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    vertices: (n, 3) float64 positions.
    faces: (m, 3) int64 vertex indices, counter-clockwise winding for
        outward-facing normals.
    uvs: optional (n, 2) float64 texture coordinates in [0, 1]^2, one per
        vertex (meshes with texture seams must duplicate seam vertices).
    vertex_colors: optional (n, 3) float64 linear RGB in [0, 1].
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None
    vertex_colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
        if self.vertex_colors is not None:
            self.vertex_colors = np.ascontiguousarray(self.vertex_colors, dtype=np.float64)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.uvs is None else self.uvs.copy(),
            None if self.vertex_colors is None else self.vertex_colors.copy(),
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Center and radius of a bounding sphere (bbox center based)."""
        lo, hi = self.bounds()
        center = 0.5 * (lo + hi)
        radius = float(np.linalg.norm(self.vertices - center, axis=1).max())
        return center, radius

    def validate(self) -> None:
        """Raise MeshError on structurally invalid data."""
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            bad = int(np.argwhere(~np.isfinite(self.vertices).all(axis=1))[0, 0])
            raise MeshError(f"non-finite vertex position at index {bad}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (m, 3), got {self.faces.shape}")
        n = self.n_vertices
        if self.n_faces:
            fmin, fmax = int(self.faces.min()), int(self.faces.max())
            if fmin < 0 or fmax >= n:
                bad = int(np.argwhere((self.faces < 0) | (self.faces >= n))[0, 0])
                raise MeshError(
                    f"face {bad} references vertex outside [0, {n}): {self.faces[bad].tolist()}"
                )
            repeated = (
                (self.faces[:, 0] == self.faces[:, 1])
                | (self.faces[:, 1] == self.faces[:, 2])
                | (self.faces[:, 0] == self.faces[:, 2])
            )
            if repeated.any():
                bad = int(np.argwhere(repeated)[0, 0])
                raise MeshError(f"face {bad} repeats a vertex: {self.faces[bad].tolist()}")
            edges = _directed_edges(self.faces)
            uniq, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
            if (counts > 2).any():
                bad_edge = uniq[np.argmax(counts)]
                raise MeshError(
                    f"edge {tuple(bad_edge.tolist())} shared by {int(counts.max())} faces; "
                    "at most 2 allowed"
                )
        if self.uvs is not None:
            if self.uvs.shape != (n, 2):
                raise MeshError(f"uvs must be ({n}, 2), got {self.uvs.shape}")
            if self.uvs.size and (self.uvs.min() < 0.0 or self.uvs.max() > 1.0):
                bad = int(np.argwhere(((self.uvs < 0) | (self.uvs > 1)).any(axis=1))[0, 0])
                raise MeshError(f"uv of vertex {bad} outside [0, 1]^2: {self.uvs[bad].tolist()}")
        if self.vertex_colors is not None and self.vertex_colors.shape != (n, 3):
            raise MeshError(
                f"vertex_colors must be ({n}, 3), got {self.vertex_colors.shape}"
            )


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    """All 3m directed edges (a, b) in face winding order."""
    return faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges as a sorted (e, 2) int array."""
    edges = np.sort(_directed_edges(faces), axis=1)
    return np.unique(edges, axis=0)


def face_adjacency(faces: np.ndarray) -> np.ndarray:
    """Pairs of face indices sharing an edge, shape (k, 2).

    Assumes a validated mesh (each edge on at most two faces).
    """
    edges = np.sort(_directed_edges(faces), axis=1)
    face_of_edge = np.repeat(np.arange(faces.shape[0], dtype=np.int64), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, face_of_edge = edges[order], face_of_edge[order]
    same = (edges[1:] == edges[:-1]).all(axis=1)
    return np.stack([face_of_edge[:-1][same], face_of_edge[1:][same]], axis=1)


def build_laplacian(mesh: TriMesh) -> sp.csr_matrix:
    """Uniform graph Laplacian L = I - D^-1 A over the mesh edge graph.

    Row i is e_i - (1/deg_i) * sum of neighbor one-hots, so each row sums to
    zero. Vertices with no incident edge make the row ill-defined and raise.
    """
    n = mesh.n_vertices
    edges = unique_edges(mesh.faces)
    deg = np.zeros(n, dtype=np.int64)
    np.add.at(deg, edges[:, 0], 1)
    np.add.at(deg, edges[:, 1], 1)
    if (deg == 0).any():
        bad = int(np.argwhere(deg == 0)[0, 0])
        raise MeshError(f"isolated vertex {bad}: degree 0 has no neighbor average")
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    vals = np.concatenate(
        [
            -1.0 / deg[edges[:, 0]],
            -1.0 / deg[edges[:, 1]],
            np.ones(n),
        ]
    )
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def laplacian_loss(
    vertices: np.ndarray, laplacian: sp.csr_matrix
) -> tuple[float, np.ndarray]:
    """Squared Laplacian smoothness ||L V||_F^2 with gradient 2 L^T L V."""
    lv = laplacian @ vertices
    value = float(np.sum(lv * lv))
    grad = 2.0 * (laplacian.T @ lv)
    return value, grad


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unit face normals from the cross product in winding order.

    Raises MeshError naming the first face whose area falls below
    DEGENERATE_AREA_EPS.
    """
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cross, axis=1)
    area = 0.5 * norm
    if (area < DEGENERATE_AREA_EPS).any():
        bad = int(np.argwhere(area < DEGENERATE_AREA_EPS)[0, 0])
        raise MeshError(
            f"degenerate face {bad}: area {area[bad]:.3e} below {DEGENERATE_AREA_EPS:.0e}"
        )
    return cross / norm[:, None]


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (sum of incident face cross products)."""
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    if (norm < 1e-20).any():
        bad = int(np.argwhere(norm < 1e-20)[0, 0])
        raise MeshError(f"vertex {bad} has a vanishing area-weighted normal")
    return acc / norm[:, None]


def normal_consistency_loss(mesh: TriMesh) -> tuple[float, np.ndarray]:
    """Sum over edge-sharing face pairs of (1 - n_i . n_j)^2.

    The gradient flows analytically through the cross-product normalization
    of both face normals. Zero for closed flat regions; scale invariant.
    """
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    cross = np.cross(e1, e2)
    norm = np.linalg.norm(cross, axis=1)
    if (norm < 2.0 * DEGENERATE_AREA_EPS).any():
        bad = int(np.argwhere(norm < 2.0 * DEGENERATE_AREA_EPS)[0, 0])
        raise MeshError(f"degenerate face {bad} in normal consistency loss")
    n = cross / norm[:, None]

    pairs = face_adjacency(f)
    grad = np.zeros_like(v)
    if pairs.shape[0] == 0:
        return 0.0, grad
    d = np.sum(n[pairs[:, 0]] * n[pairs[:, 1]], axis=1)
    value = float(np.sum((1.0 - d) ** 2))

    # dloss/dn accumulated per face, then pulled back through normalization.
    g_n = np.zeros_like(n)
    coef = (-2.0 * (1.0 - d))[:, None]
    np.add.at(g_n, pairs[:, 0], coef * n[pairs[:, 1]])
    np.add.at(g_n, pairs[:, 1], coef * n[pairs[:, 0]])
    g_c = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / norm[:, None]
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    np.add.at(grad, f[:, 0], -(g_e1 + g_e2))
    np.add.at(grad, f[:, 1], g_e1)
    np.add.at(grad, f[:, 2], g_e2)
    return value, grad


def edge_length_loss(mesh: TriMesh) -> tuple[float, np.ndarray]:
    """sqrt(sum of squared edge lengths) over unique undirected edges.

    Gradient is defined as zero at the (fully collapsed) non-smooth point.
    """
    v = mesh.vertices
    edges = unique_edges(mesh.faces)
    grad = np.zeros_like(v)
    if edges.shape[0] == 0:
        return 0.0, grad
    d = v[edges[:, 0]] - v[edges[:, 1]]
    total = float(np.sum(d * d))
    value = float(np.sqrt(total))
    if value == 0.0:
        return 0.0, grad
    g = d / value
    np.add.at(grad, edges[:, 0], g)
    np.add.at(grad, edges[:, 1], -g)
    return value, grad


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------


def load_obj(path: str) -> TriMesh:
    """Load a triangle mesh from a Wavefront OBJ file.

    Supports ``v x y z [r g b]``, ``vt u v [w]`` and triangular ``f`` records
    using ``i``, ``i/j``, ``i/j/k`` or ``i//k`` references (normal indices are
    ignored). Texture coordinates must be usable per vertex: a vertex
    referenced with two different vt indices is an error, since this mesh
    representation stores one uv per vertex. All parse errors carry the
    1-based line number.
    """
    positions: list[list[float]] = []
    colors: list[list[float]] = []
    texcoords: list[list[float]] = []
    faces: list[list[int]] = []
    vt_of_vertex: dict[int, int] = {}
    any_vt = False

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) not in (4, 7):
                    raise MeshError(f"{path}:{lineno}: 'v' needs 3 or 6 floats")
                try:
                    nums = [float(x) for x in parts[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad float in 'v': {exc}") from None
                positions.append(nums[:3])
                if len(nums) == 6:
                    colors.append(nums[3:])
            elif tag == "vt":
                if len(parts) not in (3, 4):
                    raise MeshError(f"{path}:{lineno}: 'vt' needs 2 or 3 floats")
                try:
                    texcoords.append([float(parts[1]), float(parts[2])])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad float in 'vt': {exc}") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(
                        f"{path}:{lineno}: only triangular faces supported, "
                        f"got {len(parts) - 1} vertices"
                    )
                tri = []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    try:
                        vi = int(fields[0])
                    except ValueError:
                        raise MeshError(
                            f"{path}:{lineno}: bad vertex reference {corner!r}"
                        ) from None
                    if vi <= 0 or vi > len(positions):
                        raise MeshError(
                            f"{path}:{lineno}: vertex index {vi} out of range "
                            f"[1, {len(positions)}]"
                        )
                    vi -= 1
                    if len(fields) >= 2 and fields[1] != "":
                        try:
                            ti = int(fields[1])
                        except ValueError:
                            raise MeshError(
                                f"{path}:{lineno}: bad texcoord reference {corner!r}"
                            ) from None
                        if ti <= 0 or ti > len(texcoords):
                            raise MeshError(
                                f"{path}:{lineno}: texcoord index {ti} out of range "
                                f"[1, {len(texcoords)}]"
                            )
                        any_vt = True
                        prev = vt_of_vertex.setdefault(vi, ti - 1)
                        if prev != ti - 1:
                            raise MeshError(
                                f"{path}:{lineno}: vertex {vi + 1} referenced with "
                                f"conflicting texcoords {prev + 1} and {ti}; split seam "
                                "vertices before export"
                            )
                    tri.append(vi)
                faces.append(tri)
            else:
                # Benign records (vn, o, g, s, usemtl, mtllib, ...) are skipped.
                continue

    verts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uvs = None
    if any_vt:
        missing = [vi for vi in range(len(positions)) if vi not in vt_of_vertex]
        if missing:
            raise MeshError(
                f"{path}: mesh mixes textured and untextured vertices "
                f"(vertex {missing[0] + 1} has no vt)"
            )
        tex = np.asarray(texcoords, dtype=np.float64)
        uvs = tex[[vt_of_vertex[vi] for vi in range(len(positions))]]
    vcolors = None
    if colors:
        if len(colors) != len(positions):
            raise MeshError(f"{path}: vertex colors present on only some vertices")
        vcolors = np.asarray(colors, dtype=np.float64)
    mesh = TriMesh(verts, tris, uvs=uvs, vertex_colors=vcolors)
    mesh.validate()
    return mesh


def save_obj(mesh: TriMesh, path: str) -> None:
    """Write a mesh as OBJ with one vt per vertex; round-trips float64 exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        if mesh.vertex_colors is not None:
            for p, c in zip(mesh.vertices, mesh.vertex_colors):
                fh.write(
                    f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                    f"{c[0]:.17g} {c[1]:.17g} {c[2]:.17g}\n"
                )
        else:
            for p in mesh.vertices:
                fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        if mesh.uvs is not None:
            for t in mesh.uvs:
                fh.write(f"vt {t[0]:.17g} {t[1]:.17g}\n")
            for f in mesh.faces:
                fh.write(
                    f"f {f[0] + 1}/{f[0] + 1} {f[1] + 1}/{f[1] + 1} {f[2] + 1}/{f[2] + 1}\n"
                )
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
