"""Projected implicit flows that move mesh vertices toward a harmonic map
under the shape-operator metric.

Two solvers share one loop:

* ``diffusion`` -- backward Euler on the 3x3-block Laplacian with edge
  tensors ``|S|_f1 + |S|_f2``, followed by projection onto the target;
* ``spring`` -- a mass-normalised scalar spring graph with stiffness
  ``kappa_ij`` per edge and ``epsilon = 1``.

Metrics are evaluated at the current positions and frozen during each solve.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from . import diagnostics
from .mesh import TriMesh
from .metric import (EdgeCurvatures, FaceMetric, boundary_edge_curvatures, default_delta,
                     edge_curvatures, face_metrics, shape_operators, vertex_normals)
from .targets import ISOTROPIC, Heightfield, newton_project, project_isotropic

logger = logging.getLogger(__name__)

SOLVERS = ("diffusion", "spring")


class FlowError(RuntimeError):
    """A flow step failed; ``positions`` and ``trace`` hold the state reached so far."""

    def __init__(self, message, positions=None, trace=None):
        super().__init__(message)
        self.positions = positions
        self.trace = trace


@dataclass
class FlowConfig:
    solver: str = "spring"
    alpha: float = 1.0
    epsilon: float = 0.01
    max_iterations: int = 500
    energy_rel_tol: float = 1e-7
    boundary_weight: float = 1.0
    boundary_treatment: bool = True
    projection_tol: float | None = None
    projection_max_iter: int = 20
    delta_scale: float = 1e-3
    delta: float | None = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.boundary_weight < 0:
            raise ValueError("boundary_weight must be >= 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class EnergyTrace:
    iteration: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    flipped_faces: list = field(default_factory=list)
    density_cv: list = field(default_factory=list)
    max_abs_sdf: list = field(default_factory=list)
    projection_failures: list = field(default_factory=list)
    degenerate_faces: list = field(default_factory=list)

    COLUMNS = ("iteration", "energy", "flipped_faces", "density_cv", "max_abs_sdf")

    def __len__(self):
        return len(self.iteration)

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.iteration.append(int(row["iteration"]))
                out.energy.append(float(row["energy"]))
                out.flipped_faces.append(int(row["flipped_faces"]))
                out.density_cv.append(float(row["density_cv"]))
                out.max_abs_sdf.append(float(row["max_abs_sdf"]))
        return out


@dataclass
class SparseSystem:
    """``matrix`` is the SPD system; ``laplacian`` the weighted graph Laplacian; ``rhs_scale`` the
    diagonal applied to the old positions (ones for diffusion, the masses for springs)."""

    matrix: sparse.csc_matrix
    laplacian: sparse.csr_matrix
    rhs_scale: np.ndarray
    block: int


@dataclass
class FlowState:
    positions: np.ndarray
    iteration: int = 0
    metrics: FaceMetric | None = None
    curvatures: EdgeCurvatures | None = None
    half_step: np.ndarray | None = None
    projection_failures: int = 0
    delta: float | None = None
    trace: EnergyTrace = field(default_factory=EnergyTrace)
    sides: np.ndarray | None = None


# ---------------------------------------------------------------------------
# energy and assembly

def _edge_face_tensors(mesh, metrics):
    """Per-edge ``(|S|_f1, |S|_f2)``; boundary edges repeat their single face."""
    t = metrics.tensors if isinstance(metrics, FaceMetric) else np.asarray(metrics, float)
    f1 = mesh.edge_faces[:, 0]
    f2 = np.where(mesh.edge_faces[:, 1] >= 0, mesh.edge_faces[:, 1], f1)
    return t[f1], t[f2]


def discrete_energy(mesh, metrics, positions=None) -> float:
    """``sum_edges |((|S|_f1 + |S|_f2) / 2) dphi_ij|^2``, each edge counted once."""
    p = mesh.positions if positions is None else positions
    a, b = _edge_face_tensors(mesh, metrics)
    dphi = p[mesh.edges[:, 1]] - p[mesh.edges[:, 0]]
    v = np.einsum("eij,ej->ei", 0.5 * (a + b), dphi)
    return float(np.sum(v * v))


def energy_edge_weights(mesh, metrics):
    """Edge tensors ``Mbar^T Mbar`` of the quadratic form behind :func:`discrete_energy`."""
    a, b = _edge_face_tensors(mesh, metrics)
    m = 0.5 * (a + b)
    return np.einsum("eki,ekj->eij", m, m)


def diffusion_edge_weights(mesh, metrics, kappa_b=None, cfg: FlowConfig | None = None):
    """``|S|_f1 + |S|_f2`` on interior edges; ``w * kappa_b^alpha * I`` on boundary edges."""
    a, b = _edge_face_tensors(mesh, metrics)
    W = a + b
    interior_only = mesh.edge_faces[:, 1] < 0
    if interior_only.any():
        W[interior_only] = a[interior_only]
        if cfg is not None and cfg.boundary_treatment and kappa_b is not None:
            kb = kappa_b[interior_only] ** cfg.alpha
            W[interior_only] = cfg.boundary_weight * kb[:, None, None] * np.eye(3)
    return W


def block_laplacian(n_vertices, edges, weights) -> sparse.csr_matrix:
    """3V x 3V Laplacian ``d^T W d`` from per-edge 3x3 tensors (xyz interleaved per vertex)."""
    W = np.asarray(weights, dtype=float)
    i, j = edges[:, 0], edges[:, 1]
    r = np.arange(3)
    ri = (3 * i[:, None, None] + r[None, :, None]) * np.ones((1, 1, 3), dtype=np.int64)
    cj = (3 * j[:, None, None] + r[None, None, :]) * np.ones((1, 3, 1), dtype=np.int64)
    rj = (3 * j[:, None, None] + r[None, :, None]) * np.ones((1, 1, 3), dtype=np.int64)
    ci = (3 * i[:, None, None] + r[None, None, :]) * np.ones((1, 3, 1), dtype=np.int64)
    Ws = 0.5 * (W + np.swapaxes(W, 1, 2))
    rows = np.concatenate([ri, rj, ri, rj], axis=0).ravel()
    cols = np.concatenate([ci, cj, cj, ci], axis=0).ravel()
    vals = np.concatenate([Ws, Ws, -Ws, -Ws], axis=0).ravel()
    n = 3 * n_vertices
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def scalar_laplacian(n_vertices, edges, weights) -> sparse.csr_matrix:
    w = np.asarray(weights, dtype=float)
    i, j = edges[:, 0], edges[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([w, w, -w, -w])
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()


def assemble_diffusion(mesh, metrics, kappa_b, cfg: FlowConfig) -> SparseSystem:
    """``A = I + epsilon * L`` with block weights from :func:`diffusion_edge_weights`."""
    W = diffusion_edge_weights(mesh, metrics, kappa_b, cfg)
    if not np.all(np.isfinite(W)):
        raise FlowError("non-finite diffusion weights")
    L = block_laplacian(mesh.n_vertices, mesh.edges, W)
    n = 3 * mesh.n_vertices
    A = (sparse.identity(n, format="csr") + cfg.epsilon * L).tocsc()
    return SparseSystem(A, L, np.ones(n), 3)


def spring_weights(mesh, curv: EdgeCurvatures, cfg: FlowConfig):
    """Spring constants ``kappa^alpha``; boundary edges use ``w * kappa_b^alpha``."""
    K = curv.kappa ** cfg.alpha
    if cfg.boundary_treatment and curv.boundary is not None and curv.boundary.any():
        b = curv.boundary
        K = K.copy()
        K[b] = cfg.boundary_weight * curv.kappa_b[b] ** cfg.alpha
    return K


def assemble_spring(mesh, curv: EdgeCurvatures, cfg: FlowConfig, epsilon: float = 1.0) -> SparseSystem:
    """``A = M + epsilon * L_K`` with masses ``m_i = sum_j K_ij``."""
    K = spring_weights(mesh, curv, cfg)
    if not np.all(np.isfinite(K)):
        raise FlowError("non-finite spring constants")
    n = mesh.n_vertices
    mass = np.zeros(n)
    np.add.at(mass, mesh.edges[:, 0], K)
    np.add.at(mass, mesh.edges[:, 1], K)
    if np.any(mass <= 0):
        raise FlowError(f"vertex {int(np.argmin(mass))} has zero spring mass")
    L = scalar_laplacian(n, mesh.edges, K)
    A = (sparse.diags(mass) + epsilon * L).tocsc()
    return SparseSystem(A, L, mass, 1)


def solve_spd(A, B, rtol=1e-10):
    """Solve ``A X = B`` for SPD ``A`` by sparse LU with symmetric pivoting.

    Raises :class:`FlowError` if a pivot is non-positive or the relative
    residual exceeds ``rtol`` after one refinement step.
    """
    A = sparse.csc_matrix(A)
    lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    piv = lu.U.diagonal()
    if np.any(piv <= 0):
        raise FlowError("system matrix is not positive definite")
    X = lu.solve(B)
    bn = max(np.linalg.norm(B), 1e-300)
    R = B - A @ X
    if np.linalg.norm(R) > rtol * bn:
        X = X + lu.solve(R)
        R = B - A @ X
        if np.linalg.norm(R) > rtol * bn:
            raise FlowError(f"linear solve residual {np.linalg.norm(R) / bn:.2e} exceeds {rtol}")
    return X


# ---------------------------------------------------------------------------
# projection

def default_projection_tol(positions) -> float:
    return 1e-6 * float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def boundary_sides(mesh, target, positions):
    """Rectangle sides (bit mask) touched by each boundary vertex of a heightfield mesh."""
    if not isinstance(target, Heightfield):
        return None
    x0, x1, y0, y1 = target.domain
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    sides = target.side_mask(positions[:, :2], tol)
    bv = np.asarray(getattr(mesh, "boundary_vertex", np.zeros(len(positions), bool)))
    return np.where(bv, sides, 0)


def project_positions(target, positions, tol, max_iter=20, sides=None, boundary=None):
    """Project every vertex back onto the target.

    Returns ``(positions, failures, max_abs_distance)``. Failures (Newton
    budget exhausted or vanishing gradient) keep their last iterate.
    """
    if target.mode == ISOTROPIC:
        out = project_isotropic(target, positions)
        if sides is not None and np.any(sides):
            on = sides > 0
            xy = target.snap_to_sides(out[on, :2], sides[on])
            out[on] = np.column_stack([xy, target.height(xy)])
        resid = np.abs(out[:, 2] - target.height(out[:, :2]))
        return out, 0, float(resid.max()) if len(resid) else 0.0
    out, _, absd, stalled = newton_project(target, positions, tol, max_iter)
    if target.boundary_projector is not None and boundary is not None and np.any(boundary):
        out[boundary] = target.boundary_projector(out[boundary])
        absd = np.abs(target.sdf(out))
    failures = int(np.count_nonzero(stalled | (absd >= tol)))
    return out, failures, float(absd.max()) if len(absd) else 0.0


# ---------------------------------------------------------------------------
# per-iteration quantities

def _is_surface(mesh):
    return isinstance(mesh, TriMesh)


def _delta_for(mesh, positions, normals, target, cfg, S22=None, degenerate=None):
    if cfg.delta is not None:
        return cfg.delta
    diag = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    if _is_surface(mesh):
        if S22 is None:
            S22, _, degenerate = shape_operators(mesh, positions, normals, target.mode)
        return default_delta(S22, cfg.delta_scale, diag, degenerate)
    k = edge_curvatures(mesh, positions, normals, target.mode)
    m = float(np.mean(k)) if len(k) else 0.0
    return cfg.delta_scale * m if m > 0 else cfg.delta_scale / max(diag, 1e-300)


def evaluate(mesh, target, positions, cfg: FlowConfig, previous: FaceMetric | None = None):
    """Metrics, curvatures and regularisation at ``positions``."""
    normals = vertex_normals(mesh, target, positions)
    metrics = None
    if _is_surface(mesh):
        S22, _, degenerate = shape_operators(mesh, positions, normals, target.mode)
        delta = _delta_for(mesh, positions, normals, target, cfg, S22, degenerate)
        metrics = face_metrics(mesh, positions, normals, cfg.alpha, delta, target.mode,
                               previous=previous)
    else:
        delta = _delta_for(mesh, positions, normals, target, cfg)
    curv = None
    if cfg.solver == "spring" or (_is_surface(mesh) and mesh.boundary_edge.any()):
        kappa = np.maximum(edge_curvatures(mesh, positions, normals, target.mode), delta)
        boundary = np.asarray(mesh.boundary_edge)
        kb = np.zeros(len(kappa))
        if _is_surface(mesh) and boundary.any():
            kb = np.maximum(boundary_edge_curvatures(mesh, target, positions), delta)
        curv = EdgeCurvatures(kappa, kb, boundary)
    return metrics, curv, delta


def _record(state: FlowState, mesh, target, cfg, max_abs):
    p = state.positions
    if state.metrics is not None:
        energy = discrete_energy(mesh, state.metrics, p)
        dens = diagnostics.face_densities(mesh, state.metrics, p, target.mode)
        cv = diagnostics.coefficient_of_variation(dens)
        flipped = diagnostics.flipped_faces(mesh, target, p)[0]
        degenerate = state.metrics.n_degenerate
    else:
        K = spring_weights(mesh, state.curvatures, cfg)
        dphi = p[mesh.edges[:, 1]] - p[mesh.edges[:, 0]]
        lengths = np.linalg.norm(dphi[:, :2] if target.mode == ISOTROPIC else dphi, axis=1)
        energy = float(np.sum(K * lengths ** 2))
        cv = diagnostics.coefficient_of_variation(K * lengths)
        flipped = 0
        degenerate = 0
    state.trace.append(iteration=state.iteration, energy=energy, flipped_faces=int(flipped),
                       density_cv=cv, max_abs_sdf=max_abs,
                       projection_failures=state.projection_failures, degenerate_faces=degenerate)


# ---------------------------------------------------------------------------
# steps

def _flat(p):
    return p.reshape(-1)


def diffusion_step(state: FlowState, mesh, target, cfg: FlowConfig) -> FlowState:
    """One backward-Euler diffusion step followed by projection."""
    if state.metrics is None:
        state.metrics, state.curvatures, state.delta = evaluate(mesh, target, state.positions, cfg)
    kb = state.curvatures.kappa_b if state.curvatures is not None else None
    system = assemble_diffusion(mesh, state.metrics, kb, cfg)
    half = solve_spd(system.matrix, _flat(state.positions)).reshape(-1, 3)
    return _finish(state, mesh, target, cfg, half)


def spring_step(state: FlowState, mesh, target, cfg: FlowConfig) -> FlowState:
    """One implicit spring-graph step (``epsilon = 1``) followed by projection."""
    if state.curvatures is None:
        state.metrics, state.curvatures, state.delta = evaluate(mesh, target, state.positions, cfg)
    system = assemble_spring(mesh, state.curvatures, cfg)
    half = solve_spd(system.matrix, system.rhs_scale[:, None] * state.positions)
    return _finish(state, mesh, target, cfg, half)


def _finish(state, mesh, target, cfg, half):
    tol = cfg.projection_tol
    boundary = getattr(mesh, "boundary_vertex", None)
    new_p, failures, max_abs = project_positions(target, half, tol, cfg.projection_max_iter,
                                                 state.sides, boundary)
    metrics, curv, delta = evaluate(mesh, target, new_p, cfg, previous=state.metrics)
    out = FlowState(new_p, state.iteration + 1, metrics, curv, half,
                    state.projection_failures + failures, delta, state.trace, state.sides)
    if failures:
        logger.warning("iteration %d: %d vertices missed the projection tolerance",
                       out.iteration, failures)
    _record(out, mesh, target, cfg, max_abs)
    return out


def initial_state(mesh, target, cfg: FlowConfig) -> FlowState:
    """Project the input once and evaluate iteration 0."""
    if cfg.projection_tol is None:
        cfg.projection_tol = default_projection_tol(mesh.positions)
    boundary = getattr(mesh, "boundary_vertex", None)
    sides = boundary_sides(mesh, target, mesh.positions)
    p, failures, max_abs = project_positions(target, mesh.positions.copy(), cfg.projection_tol,
                                             cfg.projection_max_iter, sides, boundary)
    metrics, curv, delta = evaluate(mesh, target, p, cfg)
    state = FlowState(p, 0, metrics, curv, None, failures, delta, EnergyTrace(), sides)
    _record(state, mesh, target, cfg, max_abs)
    return state


def _converged(energy, tol, window=5):
    if tol <= 0 or len(energy) <= window:
        return False
    e = np.asarray(energy[-window - 1:])
    prev = np.where(np.abs(e[:-1]) > 0, np.abs(e[:-1]), 1.0)
    return bool(np.all(np.abs(np.diff(e)) / prev < tol))


def run_flow(mesh, target, cfg: FlowConfig, callback=None):
    """Iterate the configured solver.

    Stops after ``cfg.max_iterations`` steps or once the relative energy
    change stays below ``cfg.energy_rel_tol`` for 5 consecutive steps.
    ``callback(state)`` runs after every iteration, including iteration 0.
    Returns ``(positions, trace)``; on failure raises :class:`FlowError`
    carrying the last good positions and the trace.
    """
    state = initial_state(mesh, target, cfg)
    if callback is not None:
        callback(state)
    step = diffusion_step if cfg.solver == "diffusion" else spring_step
    for _ in range(cfg.max_iterations):
        try:
            state = step(state, mesh, target, cfg)
        except Exception as exc:
            raise FlowError(f"iteration {state.iteration + 1} failed: {exc}",
                            state.positions, state.trace) from exc
        if callback is not None:
            callback(state)
        if _converged(state.trace.energy, cfg.energy_rel_tol):
            break
    return state.positions, state.trace
