"""Monitor-function construction: 2x2 symmetric matrix functions, per-face
shape operators ``|S|^alpha`` and per-edge scalar curvatures.

Symmetric 2x2 matrices are plain ``(..., 2, 2)`` arrays; every function here
broadcasts over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .targets import EUCLIDEAN, ISOTROPIC, graph_normal, isotropic_gauss_map, surface_normal


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 2x2 symmetric matrix functions

def sym2_eig(m):
    """Closed-form eigen-decomposition of symmetric 2x2 matrices.

    Returns ``(lam, vecs)`` with ``lam[..., 0] >= lam[..., 1]`` and
    eigenvectors in the columns of ``vecs``. For repeated eigenvalues the
    standard basis is returned.
    """
    m = np.asarray(m, dtype=float)
    a, b, c = m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]
    mean = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    lam = np.stack([mean + r, mean - r], axis=-1)
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    cs, sn = np.cos(theta), np.sin(theta)
    vecs = np.stack([np.stack([cs, -sn], axis=-1), np.stack([sn, cs], axis=-1)], axis=-2)
    return lam, vecs


def sym2_apply(m, fn):
    """``P diag(fn(lam)) P^T`` for symmetric 2x2 ``m``."""
    lam, vecs = sym2_eig(m)
    f = fn(lam)
    return np.einsum("...ik,...k,...jk->...ij", vecs, f, vecs)


def sym2_abs(m):
    return sym2_apply(m, np.abs)


def _psd_check(lam, tol=1e-12):
    if np.any(lam < -tol):
        raise MetricError(f"matrix has negative eigenvalue {lam.min():.3e}")
    return np.clip(lam, 0.0, None)


def sym2_sqrt(m):
    return sym2_apply(m, lambda lam: np.sqrt(_psd_check(lam)))


def sym2_power(m, alpha):
    """Matrix power of a positive-semidefinite 2x2 matrix; ``alpha = 0`` gives the identity."""
    if alpha == 0:
        return np.broadcast_to(np.eye(2), np.shape(m)).copy()
    return sym2_apply(m, lambda lam: _psd_check(lam) ** alpha)


# ---------------------------------------------------------------------------
# normals

def vertex_normals(mesh, target, positions=None):
    """Per-vertex normals for the shape-operator stencil.

    Euclidean targets give unit SDF normals; isotropic targets give the
    (non-unit) isotropic Gauss image ``(f_x, f_y, (f_x^2 + f_y^2) / 2)``.
    """
    p = mesh.positions if positions is None else positions
    if target.mode == ISOTROPIC:
        return isotropic_gauss_map(target, target.clamp(p[:, :2]))
    return surface_normal(target, p)


def _align(ref, n):
    """Flip ``n`` where it points against ``ref`` (local orientation on non-orientable meshes)."""
    s = np.where(np.sum(ref * n, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return n * s


# ---------------------------------------------------------------------------
# per-face shape operators

@dataclass
class FaceMetric:
    """Per-face monitor tensors.

    ``tensors`` are the ambient 3x3 forms ``T^T (S22 + delta I)^alpha T``;
    ``bases`` holds the tangent rows ``(x1, x2)`` of each ``T``; ``shape``
    is the raw ``S22`` before regularisation.
    """

    tensors: np.ndarray
    bases: np.ndarray
    shape: np.ndarray
    degenerate: np.ndarray
    delta: float
    alpha: float

    @property
    def n_degenerate(self) -> int:
        return int(np.count_nonzero(self.degenerate))


def tangent_bases(mesh, positions, mode=EUCLIDEAN):
    """Orthonormal tangent rows ``(x1, x2)`` per face, shape ``(F, 2, 3)``.

    Euclidean: ``x1`` along the longest edge, ``x2 = n_face x x1``.
    Isotropic: the fixed ``(e_x, e_y)``.
    """
    nf = mesh.n_faces
    if mode == ISOTROPIC:
        T = np.zeros((nf, 2, 3))
        T[:, 0, 0] = 1.0
        T[:, 1, 1] = 1.0
        return T
    f = mesh.faces
    p = positions
    e = np.stack([p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 1]], p[f[:, 0]] - p[f[:, 2]]], axis=1)
    longest = np.argmax(np.linalg.norm(e, axis=2), axis=1)
    x1 = e[np.arange(nf), longest]
    x1 = x1 / np.maximum(np.linalg.norm(x1, axis=1, keepdims=True), 1e-300)
    nrm = np.cross(e[:, 0], -e[:, 2])
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    x2 = np.cross(nrm, x1)
    return np.stack([x1, x2], axis=1)


def shape_operators(mesh, positions, normals, mode=EUCLIDEAN):
    """Raw ``S22 = sqrt(S32^T S32)`` per face with ``S32 = N U^{-1}``.

    Returns ``(S22, bases, degenerate)``. In isotropic mode both ``U`` and
    ``N`` use only the xy components (the i-distance), so for a quadratic
    heightfield ``S22`` is exactly ``|Hessian|``.
    """
    f = mesh.faces
    p = positions
    T = tangent_bases(mesh, p, mode)
    n = normals
    ni, nj, nk = n[f[:, 0]], n[f[:, 1]], n[f[:, 2]]
    if not getattr(mesh, "orientable", True):
        nj, nk = _align(ni, nj), _align(ni, nk)
    D = np.stack([p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]]], axis=2)    # (F,3,2)
    N = np.stack([nj - ni, nk - ni], axis=2)
    if mode == ISOTROPIC:
        N = N[:, :2, :]
    U = np.einsum("fij,fjk->fik", T, D)
    det = U[:, 0, 0] * U[:, 1, 1] - U[:, 0, 1] * U[:, 1, 0]
    area = 0.5 * np.abs(det)
    ref = np.mean(area) if len(area) else 0.0
    degenerate = ~(area > 1e-12 * ref) if ref > 0 else np.ones(len(f), dtype=bool)
    safe = np.where(degenerate, 1.0, det)
    Uinv = np.stack([np.stack([U[:, 1, 1], -U[:, 0, 1]], -1),
                     np.stack([-U[:, 1, 0], U[:, 0, 0]], -1)], axis=1) / safe[:, None, None]
    S32 = np.einsum("fij,fjk->fik", N, Uinv)
    G = np.einsum("fji,fjk->fik", S32, S32)
    S22 = sym2_apply(G, lambda lam: np.sqrt(np.clip(lam, 0.0, None)))
    S22[degenerate] = 0.0
    return S22, T, degenerate


def default_delta(S22, scale=1e-3, length=1.0, degenerate=None):
    """``scale`` times the mean largest |eigenvalue|; falls back to ``scale / length`` when flat."""
    lam, _ = sym2_eig(S22)
    top = np.abs(lam).max(axis=-1)
    if degenerate is not None:
        top = top[~degenerate]
    mean = float(np.mean(top)) if top.size else 0.0
    if mean > 0:
        return scale * mean
    return scale / max(length, 1e-300)


def face_metrics(mesh, positions, normals, alpha=1.0, delta=None, mode=EUCLIDEAN,
                 delta_scale=1e-3, previous: FaceMetric | None = None) -> FaceMetric:
    """Regularised monitor tensors ``T^T (S22 + delta I)^alpha T`` for every face."""
    if not 0.0 <= alpha <= 1.0:
        raise MetricError("alpha must lie in [0, 1]")
    S22, T, degenerate = shape_operators(mesh, positions, normals, mode)
    if delta is None:
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        delta = default_delta(S22, delta_scale, float(np.linalg.norm(hi - lo)), degenerate)
    reg = S22 + delta * np.eye(2)
    P = sym2_power(reg, alpha) if alpha != 0 else np.broadcast_to(np.eye(2), reg.shape).copy()
    tensors = np.einsum("fki,fkl,flj->fij", T, P, T)
    if np.any(degenerate):
        idx = np.flatnonzero(degenerate)
        if previous is not None:
            tensors[idx] = previous.tensors[idx]
            T[idx] = previous.bases[idx]
        else:
            tensors[idx] = (delta ** alpha) * np.einsum("fki,fkj->fij", T[idx], T[idx])
    return FaceMetric(tensors, T, S22, degenerate, float(delta), float(alpha))


def face_shape_operator(mesh, normals, face, alpha=1.0, delta=0.0, mode=EUCLIDEAN, positions=None):
    """Single-face ``T^T (S22 + delta I)^alpha T``.

    Returns ``(tensor, S22, basis)``; raises :class:`MetricError` on a degenerate face.
    """
    p = mesh.positions if positions is None else positions
    S22, T, degenerate = shape_operators(mesh, p, normals, mode)
    if degenerate[face]:
        raise MetricError(f"face {face} is degenerate")
    P = sym2_power(S22[face] + delta * np.eye(2), alpha)
    return T[face].T @ P @ T[face], S22[face], T[face]


# ---------------------------------------------------------------------------
# edge curvatures

@dataclass
class EdgeCurvatures:
    """``kappa`` on every edge and ``kappa_b`` (zero off the boundary)."""

    kappa: np.ndarray
    kappa_b: np.ndarray
    boundary: np.ndarray


def _lengths(vec, mode):
    if mode == ISOTROPIC:
        vec = vec[..., :2]
    return np.linalg.norm(vec, axis=-1)


def edge_curvatures(mesh, positions, normals, mode=EUCLIDEAN):
    """``kappa_ij = |dn_ij| / |dphi_ij|`` on every edge (xy-projected in isotropic mode)."""
    e = mesh.edges
    ni, nj = normals[e[:, 0]], normals[e[:, 1]]
    if not getattr(mesh, "orientable", True):
        nj = _align(ni, nj)
    dl = _lengths(positions[e[:, 1]] - positions[e[:, 0]], mode)
    if np.any(dl <= 0):
        raise MetricError(f"zero-length edge {int(np.argmin(dl))}")
    return _lengths(nj - ni, mode) / dl


def edge_curvature(mesh, normals, edge, mode=EUCLIDEAN, positions=None):
    p = mesh.positions if positions is None else positions
    i, j = mesh.edges[edge]
    ni, nj = normals[i], normals[j]
    if not getattr(mesh, "orientable", True) and np.dot(ni, nj) < 0:
        nj = -nj
    dl = _lengths(p[j] - p[i], mode)
    if dl <= 0:
        raise MetricError(f"zero-length edge {edge}")
    return float(_lengths(nj - ni, mode) / dl)


# ---------------------------------------------------------------------------
# boundary Darboux frames

def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass
class BoundaryFrames:
    """Per-boundary-vertex frame vectors, indexed like ``vertices``."""

    vertices: np.ndarray
    normal: np.ndarray
    tangent_normal: np.ndarray
    tangent: np.ndarray


def _boundary_neighbours(mesh):
    from .mesh import boundary_loops

    prev, nxt = {}, {}
    for loop in boundary_loops(mesh):
        n = len(loop)
        closed = n > 2 and mesh.boundary_edge[_edge_index(mesh, loop[-1], loop[0])]
        for k, v in enumerate(loop):
            if k > 0 or closed:
                prev[v] = loop[k - 1]
            if k + 1 < n or closed:
                nxt[v] = loop[(k + 1) % n]
    return prev, nxt


def _edge_index(mesh, i, j):
    lo, hi = mesh.star_ptr[i], mesh.star_ptr[i + 1]
    hit = np.flatnonzero(mesh.star_nbr[lo:hi] == j)
    return int(mesh.star_edge[lo + hit[0]]) if len(hit) else -1


def boundary_frames(mesh, target, positions=None) -> BoundaryFrames:
    """Darboux frames ``(n, t, T = n x t)`` at every boundary vertex.

    ``t`` is tangent to the surface, orthogonal to the averaged boundary
    direction and points out of the surface; the normal ``n`` is oriented
    to agree with the winding of the adjacent boundary face. For isotropic
    targets the frame uses the graph normal ``(-f_x, -f_y, 1)``.
    """
    p = mesh.positions if positions is None else positions
    prev, nxt = _boundary_neighbours(mesh)
    verts = np.array(sorted(set(prev) | set(nxt)), dtype=np.int64)
    if len(verts) == 0:
        z = np.zeros((0, 3))
        return BoundaryFrames(verts, z, z, z)
    d = np.zeros((len(verts), 3))
    for k, v in enumerate(verts):
        if v in prev:
            d[k] += _unit(p[v] - p[prev[v]])
        if v in nxt:
            d[k] += _unit(p[nxt[v]] - p[v])
    if np.any(np.linalg.norm(d, axis=1) < 1e-12):
        raise MetricError("degenerate boundary direction (boundary folds back on itself)")
    d = d / np.linalg.norm(d, axis=1, keepdims=True)

    if target.mode == ISOTROPIC:
        nrm = graph_normal(target, p[verts, :2])
    else:
        nrm = surface_normal(target, p[verts])
    # one incident boundary face per vertex: its winding orients n, its centroid orients t
    fn = mesh.face_normals(p)
    face_of = np.full(len(verts), -1)
    for e in np.flatnonzero(mesh.boundary_edge):
        for v in mesh.edges[e]:
            k = np.searchsorted(verts, v)
            if face_of[k] < 0:
                face_of[k] = mesh.edge_faces[e, 0]
    if target.mode != ISOTROPIC:
        nrm = _align(fn[face_of], nrm)
    t = np.cross(d, nrm)
    tl = np.linalg.norm(t, axis=1)
    if np.any(tl < 1e-12):
        raise MetricError(f"degenerate Darboux frame at vertex {int(verts[np.argmin(tl)])}")
    t = t / tl[:, None]
    centroid = p[mesh.faces[face_of]].mean(axis=1)
    t = _align(p[verts] - centroid, t)
    T = np.cross(nrm, t)
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    return BoundaryFrames(verts, nrm, t, T)


def tangent_normal(mesh, target, v, positions=None):
    """Unit tangent-normal at boundary vertex ``v`` (outward, orthogonal to the boundary)."""
    if not mesh.boundary_vertex[v]:
        raise MetricError(f"vertex {v} is not on the boundary")
    fr = boundary_frames(mesh, target, positions)
    return fr.tangent_normal[np.searchsorted(fr.vertices, v)]


def boundary_edge_curvatures(mesh, target, positions=None, frames=None):
    """``(kappa_b)_ij = arccos(T_i . T_j) / |dphi_ij|`` on boundary edges, zero elsewhere."""
    p = mesh.positions if positions is None else positions
    out = np.zeros(mesh.n_edges)
    bidx = np.flatnonzero(mesh.boundary_edge)
    if len(bidx) == 0:
        return out
    fr = boundary_frames(mesh, target, p) if frames is None else frames
    e = mesh.edges[bidx]
    Ti = fr.tangent[np.searchsorted(fr.vertices, e[:, 0])]
    Tj = fr.tangent[np.searchsorted(fr.vertices, e[:, 1])]
    dots = np.sum(Ti * Tj, axis=1)
    if not mesh.orientable:
        dots = np.abs(dots)
    ang = np.arccos(np.clip(dots, -1.0, 1.0))
    dl = _lengths(p[e[:, 1]] - p[e[:, 0]], target.mode)
    if np.any(dl <= 0):
        raise MetricError("zero-length boundary edge")
    out[bidx] = ang / dl
    return out


def boundary_edge_curvature(mesh, target, edge, positions=None):
    if not mesh.boundary_edge[edge]:
        raise MetricError(f"edge {edge} is not a boundary edge")
    return float(boundary_edge_curvatures(mesh, target, positions)[edge])


def curvatures(mesh, target, positions, normals, floor=0.0) -> EdgeCurvatures:
    """Edge and boundary curvatures for one flow iteration, ``kappa`` clamped below by ``floor``."""
    kappa = np.maximum(edge_curvatures(mesh, positions, normals, target.mode), floor)
    boundary = np.asarray(getattr(mesh, "boundary_edge", np.zeros(len(kappa), bool)))
    if hasattr(mesh, "faces") and boundary.any():
        kb = boundary_edge_curvatures(mesh, target, positions)
    else:
        kb = np.zeros(len(kappa))
    return EdgeCurvatures(kappa, kb, boundary)

