"""Procedural meshes and targets used for initial meshes, tests and demos."""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Polyline, TriMesh
from .targets import Ellipsoid, GridSDF, Sphere, SmoothUnion


def _icosahedron():
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(frequency: int = 4, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere: each icosahedron face split into ``frequency**2`` triangles.

    Vertex count is ``10 * frequency**2 + 2``.
    """
    n = int(frequency)
    if n < 1:
        raise ValueError("frequency must be >= 1")
    base_v, base_f = _icosahedron()
    pts = []
    tris = []
    for a, b, c in base_f:
        A, B, C = base_v[a], base_v[b], base_v[c]
        local = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                local[i, j] = len(pts)
                pts.append(A + (B - A) * i / n + (C - A) * j / n)
        for i in range(n):
            for j in range(n - i):
                tris.append([local[i, j], local[i + 1, j], local[i, j + 1]])
                if i + j < n - 1:
                    tris.append([local[i + 1, j], local[i + 1, j + 1], local[i, j + 1]])
    pts = np.array(pts)
    key = np.round(pts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep vertex order deterministic: first occurrence order
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = pts[first[order]]
    faces = remap[inverse.reshape(-1)][np.array(tris)]
    verts = radius * verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts, faces)


def grid_mesh(n: int, domain=(0.0, 1.0, 0.0, 1.0), z=None) -> TriMesh:
    """Regular ``n x n`` vertex grid over a rectangle, CCW seen from +z.

    Diagonals alternate per cell so the triangulation has no preferred direction.
    """
    x0, x1, y0, y1 = domain
    xs, ys = np.linspace(x0, x1, n), np.linspace(y0, y1, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(n * n)])
    if z is not None:
        pts[:, 2] = z(pts[:, 0], pts[:, 1])
    idx = np.arange(n * n).reshape(n, n)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            if (i + j) % 2 == 0:
                faces += [[a, b, c], [a, c, d]]
            else:
                faces += [[a, b, d], [b, c, d]]
    return TriMesh(pts, np.array(faces))


def disk_mesh(rings: int = 8, radius: float = 1.0, segments: int = 6) -> TriMesh:
    """Flat disk in the xy-plane: Delaunay triangulation of concentric rings.

    Ring ``k`` carries ``segments * k`` vertices, so the outer ring is the boundary.
    """
    pts = [[0.0, 0.0]]
    for k in range(1, rings + 1):
        m = segments * k
        th = 2 * np.pi * np.arange(m) / m
        pts += (radius * k / rings * np.column_stack([np.cos(th), np.sin(th)])).tolist()
    pts = np.array(pts)
    tri = Delaunay(pts).simplices
    e1 = pts[tri[:, 1]] - pts[tri[:, 0]]
    e2 = pts[tri[:, 2]] - pts[tri[:, 0]]
    cw = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    return TriMesh(np.column_stack([pts, np.zeros(len(pts))]), tri)


def mobius_strip(n_around: int = 48, n_across: int = 4, radius: float = 1.0, width: float = 0.3) -> TriMesh:
    """Triangulated Moebius strip (non-orientable, one boundary loop)."""
    pts = []
    for i in range(n_around):
        u = 2 * np.pi * i / n_around
        for j in range(n_across):
            v = width * (2 * j / (n_across - 1) - 1)
            pts.append([(radius + v * np.cos(u / 2)) * np.cos(u),
                        (radius + v * np.cos(u / 2)) * np.sin(u),
                        v * np.sin(u / 2)])
    faces = []
    for i in range(n_around):
        for j in range(n_across - 1):
            a = i * n_across + j
            b = i * n_across + j + 1
            if i + 1 < n_around:
                c, d = (i + 1) * n_across + j, (i + 1) * n_across + j + 1
            else:  # half twist on the seam
                c, d = n_across - 1 - j, n_across - 2 - j
            faces += [[a, c, d], [a, d, b]]
    return TriMesh(np.array(pts), np.array(faces))


def ellipse_polyline(n: int = 200, a: float = 2.0, b: float = 1.0) -> Polyline:
    """Closed polyline uniform in the parameter angle (hence uneven in arc length)."""
    t = 2 * np.pi * np.arange(n) / n
    return Polyline(np.column_stack([a * np.cos(t), b * np.sin(t), np.zeros(n)]), closed=True)


def bunny_like_sdf() -> SmoothUnion:
    """Smooth blend of ellipsoids roughly shaped like a sitting rabbit (body, head, ears, tail)."""
    parts = [
        Ellipsoid((0.55, 0.45, 0.42), center=(0.0, 0.0, 0.0)),
        Sphere(0.28, center=(0.42, 0.0, 0.32)),
        Ellipsoid((0.07, 0.05, 0.26), center=(0.40, 0.10, 0.72)),
        Ellipsoid((0.07, 0.05, 0.26), center=(0.40, -0.10, 0.72)),
        Sphere(0.1, center=(-0.55, 0.0, 0.05)),
    ]
    return SmoothUnion(parts, k=0.08)


def bunny_grid_sdf(resolution: int = 64) -> GridSDF:
    """:func:`bunny_like_sdf` sampled on a ``resolution**3`` grid with a margin."""
    return GridSDF.from_target(bunny_like_sdf(), (-0.9, -0.7, -0.7), (0.9, 0.7, 1.2), resolution)


def torus_mesh(n_major: int = 48, n_minor: int = 16, major: float = 1.0, minor: float = 0.3) -> TriMesh:
    """Quad-split torus around the z axis, outward-facing."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    U, V = np.meshgrid(u, v, indexing="ij")
    rho = major + minor * np.cos(V)
    pts = np.column_stack([(rho * np.cos(U)).ravel(), (rho * np.sin(U)).ravel(), (minor * np.sin(V)).ravel()])
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.column_stack([a.ravel(), b.ravel(), c.ravel()]),
                            np.column_stack([a.ravel(), c.ravel(), d.ravel()])])
    return TriMesh(pts, faces)
