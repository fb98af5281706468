"""Per-face quality measures: density ``det(|S| dphi)``, aspect ratio under the
target metric, flipped-element detection and histogram/CSV helpers."""
from __future__ import annotations

import csv
from typing import NamedTuple

import numpy as np

from .metric import FaceMetric, sym2_power, tangent_bases
from .targets import EUCLIDEAN, ISOTROPIC, surface_normal

_EQUILATERAL = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])
_EQUILATERAL_INV = np.linalg.inv(_EQUILATERAL)
_REF_DET = np.sqrt(3.0) / 2.0


def _edge_matrix(mesh, positions):
    f = mesh.faces
    p = positions
    return np.stack([p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]]], axis=2)


def _tensors(metrics):
    return metrics.tensors if isinstance(metrics, FaceMetric) else np.asarray(metrics, dtype=float)


def face_densities(mesh, metrics, positions=None, mode=EUCLIDEAN):
    """``det(T |S| [e1 e2]) / (sqrt(3)/2)`` for every face.

    A unit equilateral face under the identity metric reads 1. Degenerate
    faces read 0.
    """
    p = mesh.positions if positions is None else positions
    T = tangent_bases(mesh, p, mode)
    X = np.einsum("fij,fjk,fkl->fil", T, _tensors(metrics), _edge_matrix(mesh, p))
    det = X[:, 0, 0] * X[:, 1, 1] - X[:, 0, 1] * X[:, 1, 0]
    area = mesh.face_areas(p)
    ok = area > 1e-12 * max(float(np.mean(area)), 1e-300)
    return np.where(ok, det / _REF_DET, 0.0)


def face_density(mesh, metrics, face, positions=None, mode=EUCLIDEAN):
    return float(face_densities(mesh, metrics, positions, mode)[face])


def _sigma_transform(mesh, metrics, positions, alpha, mode):
    T = tangent_bases(mesh, positions, mode)
    if isinstance(metrics, FaceMetric):
        base = metrics.shape + metrics.delta * np.eye(2)
        # express the stored basis' tensor in the current basis
        R = np.einsum("fij,fkj->fik", T, metrics.bases)
        base = np.einsum("fij,fjk,flk->fil", R, base, R)
    else:
        base = np.einsum("fij,fjk,flk->fil", T, np.asarray(metrics, float), T)
    return T, sym2_power(base, alpha)


def aspect_ratios(mesh, metrics, alpha=1.0, positions=None, mode=EUCLIDEAN):
    """Ratio of singular values of the map from a reference equilateral
    triangle to each face transformed by ``|S|^alpha``.

    ``metrics`` is a :class:`FaceMetric` (its unregularised-plus-delta
    ``S22`` is raised to ``alpha``) or an ``(F, 3, 3)`` array of ambient
    ``|S|`` tensors. Degenerate faces give ``inf``.
    """
    p = mesh.positions if positions is None else positions
    T, P = _sigma_transform(mesh, metrics, p, alpha, mode)
    X = np.einsum("fij,fjk,fkl->fil", P, T, _edge_matrix(mesh, p)) @ _EQUILATERAL_INV
    s = np.linalg.svd(X, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(s[:, 1] > 1e-300 * s[:, 0], s[:, 0] / s[:, 1], np.inf)


def aspect_ratio_under_sigma(mesh, metrics, face, alpha=1.0, positions=None, mode=EUCLIDEAN):
    return float(aspect_ratios(mesh, metrics, alpha, positions, mode)[face])


def flipped_faces(mesh, target, positions=None):
    """Faces whose winding normal opposes the target's normal.

    Euclidean targets compare against the outward SDF normal at the face
    centroid; isotropic targets flag faces with a downward normal.
    Non-orientable meshes have no global normal, so a face counts as flipped
    when most of its neighbours, brought into local agreement across the
    shared edge, fold back against it.
    Returns ``(count, face_indices)``.
    """
    p = mesh.positions if positions is None else positions
    fn = mesh.face_normals(p)
    if target.mode == ISOTROPIC:
        bad = fn[:, 2] < 0
    elif getattr(mesh, "orientable", True):
        c = p[mesh.faces].mean(axis=1)
        bad = np.sum(fn * surface_normal(target, c), axis=1) < 0
    else:
        bad = _fold_majority(mesh, fn)
    idx = np.flatnonzero(bad)
    return len(idx), idx


def _fold_majority(mesh, fn):
    interior = np.flatnonzero(~mesh.boundary_edge)
    he = mesh._halfedges
    h0, h1 = mesh._edge_he[interior, 0], mesh._edge_he[interior, 1]
    rel = np.where(he[h0, 0] == he[h1, 0], -1.0, 1.0)
    fa, fb = mesh.edge_faces[interior, 0], mesh.edge_faces[interior, 1]
    fold = np.sum(fn[fa] * fn[fb], axis=1) * rel < 0
    votes = np.zeros(mesh.n_faces)
    np.add.at(votes, fa, fold)
    np.add.at(votes, fb, fold)
    deg = np.zeros(mesh.n_faces)
    np.add.at(deg, fa, 1)
    np.add.at(deg, fb, 1)
    return votes > 0.5 * np.maximum(deg, 1)


def coefficient_of_variation(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0
    m = float(np.mean(v))
    return float(np.std(v) / abs(m)) if m != 0 else float("inf")


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int


def histogram(values, bins: int = 40, range=(0.0, 4.0)) -> Histogram:
    """Fixed-range histogram; values outside ``range`` go to under/overflow counters."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = range
    v = np.asarray(values, dtype=float).reshape(-1)
    counts, edges = np.histogram(v[(v >= lo) & (v <= hi)], bins=bins, range=(lo, hi))
    return Histogram(edges, counts, int(np.sum(v < lo)), int(np.sum(v > hi)))


def write_face_csv(path, density, aspect, flipped_mask):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "density", "aspect_ratio", "flipped"])
        for k, (d, a, f) in enumerate(zip(density, aspect, flipped_mask)):
            w.writerow([k, repr(float(d)), repr(float(a)), int(bool(f))])


def write_histogram_csv(path, hist: Histogram):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        w.writerow(["-inf", repr(float(hist.edges[0])), hist.underflow])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([repr(float(hist.edges[-1])), "inf", hist.overflow])
