import numpy as np
import pytest
from scipy.spatial import Delaunay

from harmonic_remesh import shapes
from harmonic_remesh.flow import (EnergyTrace, FlowConfig, FlowError, FlowState, assemble_diffusion,
                                  assemble_spring, block_laplacian, diffusion_step,
                                  discrete_energy, energy_edge_weights, initial_state, run_flow,
                                  scalar_laplacian, solve_spd, spring_step)
from harmonic_remesh.mesh import Polyline, TriMesh
from harmonic_remesh.metric import EdgeCurvatures
from harmonic_remesh.targets import EllipseCurve, Ellipsoid, Sphere, named_heightfield

EQ = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])


def random_mesh(rng, n=20):
    xy = rng.uniform(-1, 1, size=(n, 2))
    tri = Delaunay(xy).simplices
    p = np.column_stack([xy, 0.2 * rng.normal(size=n)])
    e1, e2 = xy[tri[:, 1]] - xy[tri[:, 0]], xy[tri[:, 2]] - xy[tri[:, 0]]
    cw = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    return TriMesh(p, tri)


def random_spd(rng, k, dim=3):
    a = rng.normal(size=(k, dim, dim))
    return np.einsum("kji,kjl->kil", a, a) + 0.1 * np.eye(dim)


def dense_block_laplacian(n, edges, W):
    L = np.zeros((3 * n, 3 * n))
    for (i, j), w in zip(edges, W):
        for a, b, s in ((i, i, 1), (j, j, 1), (i, j, -1), (j, i, -1)):
            L[3 * a:3 * a + 3, 3 * b:3 * b + 3] += s * w
    return L


# --- energy ------------------------------------------------------------------

def test_energy_single_triangle():
    m = TriMesh(EQ, [[0, 1, 2]])
    assert discrete_energy(m, np.diag([1.0, 1.0, 0.0])[None]) == pytest.approx(3.0)


def test_energy_zero_metric():
    m = shapes.grid_mesh(5)
    assert discrete_energy(m, np.zeros((m.n_faces, 3, 3))) == 0.0


def test_energy_sphere_is_edge_length_sum():
    m = shapes.icosphere(8)
    from harmonic_remesh.metric import face_metrics
    fm = face_metrics(m, m.positions, m.positions, 1.0, 0.0)
    d = m.positions[m.edges[:, 1]] - m.positions[m.edges[:, 0]]
    assert discrete_energy(m, fm) == pytest.approx(np.sum(d * d), rel=0.02)


def test_energy_gradient_matches_operator(rng):
    for _ in range(5):
        m = random_mesh(rng)
        metric = random_spd(rng, m.n_faces)
        L = block_laplacian(m.n_vertices, m.edges, energy_edge_weights(m, metric))
        phi = m.positions.ravel()
        g = 2 * (L @ phi)
        h = 1e-6
        fd = np.empty_like(phi)
        for k in range(len(phi)):
            pp, pm = phi.copy(), phi.copy()
            pp[k] += h
            pm[k] -= h
            fd[k] = (discrete_energy(m, metric, pp.reshape(-1, 3))
                     - discrete_energy(m, metric, pm.reshape(-1, 3))) / (2 * h)
        assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)


# --- assembly ----------------------------------------------------------------

def test_two_vertex_system():
    m = type("Edge", (), {})()
    L = block_laplacian(2, np.array([[0, 1]]), np.eye(3)[None])
    A = (np.eye(6) + L.toarray())
    I = np.eye(3)
    assert np.array_equal(A, np.block([[2 * I, -I], [-I, 2 * I]]))


def test_zero_metrics_give_identity():
    m = shapes.icosphere(2)
    sysm = assemble_diffusion(m, np.zeros((m.n_faces, 3, 3)), None, FlowConfig(epsilon=0.5))
    assert np.array_equal(sysm.matrix.toarray(), np.eye(3 * m.n_vertices))


def test_grid_annihilates_constants():
    m = shapes.grid_mesh(5)
    cfg = FlowConfig(epsilon=0.1, boundary_treatment=False)
    sysm = assemble_diffusion(m, np.broadcast_to(np.eye(3), (m.n_faces, 3, 3)), None, cfg)
    ones = np.ones(3 * m.n_vertices)
    assert np.allclose(sysm.matrix @ ones, ones, atol=1e-14)
    # dense oracle
    W = np.full((m.n_edges, 3, 3), 0.0)
    W[:] = 2 * np.eye(3)
    W[m.boundary_edge] = np.eye(3)
    A = np.eye(3 * m.n_vertices) + 0.1 * dense_block_laplacian(m.n_vertices, m.edges, W)
    assert np.allclose(sysm.matrix.toarray(), A, atol=1e-14)


def test_boundary_rows_use_boundary_curvature():
    m = shapes.grid_mesh(4)
    kb = np.where(m.boundary_edge, 2.5, 0.0)
    cfg = FlowConfig(epsilon=1.0, boundary_weight=2.0, alpha=1.0)
    sysm = assemble_diffusion(m, np.zeros((m.n_faces, 3, 3)), kb, cfg)
    L = sysm.laplacian.toarray()
    e = int(np.flatnonzero(m.boundary_edge)[0])
    i, j = m.edges[e]
    assert np.allclose(L[3 * i:3 * i + 3, 3 * j:3 * j + 3], -5.0 * np.eye(3))


def test_systems_symmetric_positive_definite(rng):
    for _ in range(5):
        m = random_mesh(rng, 40)
        cfg = FlowConfig(epsilon=rng.uniform(0.01, 1))
        A = assemble_diffusion(m, random_spd(rng, m.n_faces), rng.uniform(0, 2, m.n_edges), cfg).matrix.toarray()
        assert np.abs(A - A.T).max() <= 1e-12 * np.abs(A).max()
        assert np.linalg.eigvalsh(A).min() > 0
        curv = EdgeCurvatures(rng.uniform(0.1, 3, m.n_edges), rng.uniform(0.1, 3, m.n_edges),
                              m.boundary_edge)
        B = assemble_spring(m, curv, cfg).matrix.toarray()
        assert np.abs(B - B.T).max() <= 1e-12 * np.abs(B).max()
        np.linalg.cholesky(B)


def test_spring_path_graph_equilibrium():
    line = Polyline(np.array([[0.0, 0, 0], [0.2, 0, 0], [1.0, 0, 0]]), closed=False)
    curv = EdgeCurvatures(np.array([1.0, 3.0]), np.zeros(2), np.zeros(2, bool))
    sysm = assemble_spring(line, curv, FlowConfig(alpha=1.0))
    x = line.positions[:, 0].copy()
    for _ in range(200):
        x = solve_spd(sysm.matrix, sysm.rhs_scale * x)
        x[0], x[2] = 0.0, 1.0
    assert x[1] == pytest.approx(0.75, abs=1e-12)


def test_spring_masses_include_boundary_terms():
    m = shapes.grid_mesh(3)
    kappa = np.ones(m.n_edges)
    kb = np.where(m.boundary_edge, 4.0, 0.0)
    cfg = FlowConfig(boundary_weight=0.5, alpha=1.0)
    sysm = assemble_spring(m, EdgeCurvatures(kappa, kb, m.boundary_edge), cfg)
    K = np.where(m.boundary_edge, 2.0, 1.0)
    mass = np.zeros(m.n_vertices)
    np.add.at(mass, m.edges[:, 0], K)
    np.add.at(mass, m.edges[:, 1], K)
    assert np.allclose(sysm.rhs_scale, mass)


def test_solve_spd_rejects_indefinite():
    from scipy import sparse
    with pytest.raises(FlowError):
        solve_spd(sparse.csc_matrix(np.diag([1.0, -1.0])), np.ones(2))


def test_laplacian_translation_covariance(rng):
    m = random_mesh(rng, 30)
    cfg = FlowConfig(epsilon=0.3)
    sysm = assemble_diffusion(m, random_spd(rng, m.n_faces), None, cfg)
    shift = np.array([1.5, -2.0, 0.25])
    a = solve_spd(sysm.matrix, m.positions.ravel()).reshape(-1, 3)
    b = solve_spd(sysm.matrix, (m.positions + shift).ravel()).reshape(-1, 3)
    assert np.allclose(b - a, shift, atol=1e-10)


def test_frozen_metric_step_does_not_increase_quadratic_form(rng):
    for _ in range(5):
        m = random_mesh(rng, 30)
        cfg = FlowConfig(epsilon=rng.uniform(0.01, 2))
        sysm = assemble_diffusion(m, random_spd(rng, m.n_faces), None, cfg)
        L = sysm.laplacian
        phi = m.positions.ravel()
        new = solve_spd(sysm.matrix, phi)
        assert new @ (L @ new) <= phi @ (L @ phi) * (1 + 1e-12)


def test_scalar_laplacian_rows_sum_to_zero(rng):
    m = random_mesh(rng)
    L = scalar_laplacian(m.n_vertices, m.edges, rng.uniform(0, 1, m.n_edges))
    assert np.allclose(np.asarray(L.sum(axis=1)).ravel(), 0)


# --- dense-solve equivalence ------------------------------------------------------

def test_diffusion_step_matches_dense_solve(rng):
    m = random_mesh(rng, 50)
    target = Sphere(5.0)
    cfg = FlowConfig(solver="diffusion", epsilon=0.2, projection_tol=1e-8)
    metric = random_spd(rng, m.n_faces)
    kb = rng.uniform(0.1, 2, m.n_edges)
    state = FlowState(m.positions.copy(), metrics=metric,
                      curvatures=EdgeCurvatures(np.ones(m.n_edges), kb, m.boundary_edge))
    out = diffusion_step(state, m, target, cfg)
    f1 = m.edge_faces[:, 0]
    f2 = np.where(m.edge_faces[:, 1] >= 0, m.edge_faces[:, 1], f1)
    W = metric[f1] + metric[f2]
    W[m.boundary_edge] = kb[m.boundary_edge, None, None] * np.eye(3)
    A = np.eye(3 * m.n_vertices) + 0.2 * dense_block_laplacian(m.n_vertices, m.edges, W)
    want = np.linalg.solve(A, m.positions.ravel()).reshape(-1, 3)
    assert np.abs(out.half_step - want).max() < 1e-8


def test_spring_step_matches_dense_solve(rng):
    m = random_mesh(rng, 50)
    cfg = FlowConfig(solver="spring", projection_tol=1e-8)
    kappa = rng.uniform(0.1, 3, m.n_edges)
    state = FlowState(m.positions.copy(), curvatures=EdgeCurvatures(kappa, np.zeros(m.n_edges),
                                                                    np.zeros(m.n_edges, bool)))
    out = spring_step(state, m, Sphere(5.0), cfg)
    L = np.zeros((m.n_vertices,) * 2)
    for (i, j), k in zip(m.edges, kappa):
        L[i, i] += k
        L[j, j] += k
        L[i, j] -= k
        L[j, i] -= k
    M = np.diag(np.diag(L))
    want = np.linalg.solve(M + L, M @ m.positions)
    assert np.abs(out.half_step - want).max() < 1e-8


# --- flows --------------------------------------------------------------------------

def test_zero_iterations_returns_projected_input():
    m = shapes.icosphere(3, radius=1.3)
    p, trace = run_flow(m, Sphere(1.0), FlowConfig(max_iterations=0))
    assert len(trace) == 1
    assert np.allclose(p, m.positions / 1.3)


def test_icosahedron_is_fixed_point():
    m = shapes.icosphere(1)
    cfg = FlowConfig(solver="diffusion", epsilon=0.1, projection_tol=1e-12)
    state = initial_state(m, Sphere(1.0), cfg)
    out = diffusion_step(state, m, Sphere(1.0), cfg)
    assert np.abs(out.positions - m.positions).max() < 1e-8


def test_ellipsoid_diffusion_energy_decreases():
    m = shapes.icosphere(8)
    cfg = FlowConfig(solver="diffusion", alpha=1.0, epsilon=0.03, max_iterations=50, energy_rel_tol=0)
    _, trace = run_flow(m, Ellipsoid((2, 1, 1)), cfg)
    e = np.array(trace.energy)
    assert len(trace) == 51
    assert np.all(np.diff(e) < 0)


def test_projection_postcondition_every_iteration():
    m = shapes.icosphere(5)
    cfg = FlowConfig(solver="spring", alpha=0.5, max_iterations=20, energy_rel_tol=0)
    seen = []
    run_flow(m, Ellipsoid((1.5, 1, 0.8)), cfg,
             lambda s: seen.append(np.abs(Ellipsoid((1.5, 1, 0.8)).sdf(s.positions)).max()))
    assert len(seen) == 21 and max(seen) < cfg.projection_tol


def test_circle_spacing_becomes_uniform(rng):
    n = 32
    t = np.sort(2 * np.pi * (np.arange(n) + rng.uniform(-0.35, 0.35, n)) / n)
    line = Polyline(np.column_stack([np.cos(t), np.sin(t), np.zeros(n)]))
    circle = EllipseCurve(1.0, 1.0)
    p, trace = run_flow(line, circle, FlowConfig(solver="spring", max_iterations=100, energy_rel_tol=0))
    ang = np.diff(np.unwrap(np.append(np.arctan2(p[:, 1], p[:, 0]), np.arctan2(p[0, 1], p[0, 0]))))
    assert np.all(np.abs(ang - 2 * np.pi / n) < 0.01 * 2 * np.pi / n)


def test_spring_step_preserves_symmetric_polygon():
    n = 24
    t = 2 * np.pi * np.arange(n) / n
    line = Polyline(np.column_stack([np.cos(t), np.sin(t), np.zeros(n)]))
    cfg = FlowConfig(solver="spring", projection_tol=1e-12)
    state = initial_state(line, EllipseCurve(1, 1), cfg)
    out = spring_step(state, line, EllipseCurve(1, 1), cfg)
    assert np.abs(out.half_step.mean(axis=0)).max() < 1e-14
    r = np.linalg.norm(out.half_step, axis=1)
    assert np.ptp(r) < 1e-12


def test_heightfield_boundary_stays_on_rectangle():
    hf = named_heightfield("ripple", (0.15, 3.0))
    m = shapes.grid_mesh(12, hf.domain, z=lambda x, y: hf.height(np.column_stack([x, y])))
    bv = m.boundary_vertex
    sides0 = hf.side_mask(m.positions[:, :2], 1e-12)

    def check(s):
        assert np.array_equal(hf.side_mask(s.positions[:, :2], 1e-12)[bv], sides0[bv])
        assert np.array_equal(s.positions[:, 2], hf.height(s.positions[:, :2]))

    run_flow(m, hf, FlowConfig(solver="spring", alpha=0.5, max_iterations=125, energy_rel_tol=0), check)


def test_bunny_flips_decrease():
    bunny = shapes.bunny_grid_sdf(48)
    m = shapes.icosphere(8, radius=1.3)
    cfg = FlowConfig(solver="spring", alpha=1.0, max_iterations=350, energy_rel_tol=0)
    p, trace = run_flow(m, bunny, cfg)
    assert np.all(np.isfinite(p))
    assert trace.flipped_faces[0] > 0
    assert trace.flipped_faces[-1] < trace.flipped_faces[0]


def test_energy_window_stops_early():
    m = shapes.icosphere(1)
    _, trace = run_flow(m, Sphere(1.0), FlowConfig(max_iterations=100, energy_rel_tol=1e-6))
    assert len(trace) == 6


def test_flow_error_carries_trace():
    m = shapes.icosphere(2)

    class Broken(Sphere):
        calls = 0

        def sdf_and_grad(self, p):
            Broken.calls += 1
            if Broken.calls > 3:
                raise RuntimeError("boom")
            return super().sdf_and_grad(p)

    with pytest.raises(FlowError) as info:
        run_flow(m, Broken(1.0), FlowConfig(max_iterations=5))
    assert info.value.trace is not None and len(info.value.trace) >= 1
    assert info.value.positions.shape == m.positions.shape


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(alpha=1.5)
    with pytest.raises(ValueError):
        FlowConfig(epsilon=0)
    with pytest.raises(ValueError):
        FlowConfig(boundary_weight=-1)
    with pytest.raises(ValueError):
        FlowConfig(solver="newton")


def test_trace_csv_round_trip(tmp_path):
    m = shapes.icosphere(2)
    _, trace = run_flow(m, Ellipsoid((1.2, 1, 1)), FlowConfig(max_iterations=3, energy_rel_tol=0))
    trace.to_csv(tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "iteration,energy,flipped_faces,density_cv,max_abs_sdf"
    back = EnergyTrace.read_csv(tmp_path / "t.csv")
    assert back.energy == trace.energy and back.iteration == [0, 1, 2, 3]


def test_runs_are_deterministic():
    m = shapes.icosphere(4)
    cfg = dict(solver="diffusion", epsilon=0.05, max_iterations=5, energy_rel_tol=0)
    a, ta = run_flow(m, Ellipsoid((2, 1, 1)), FlowConfig(**cfg))
    b, tb = run_flow(m, Ellipsoid((2, 1, 1)), FlowConfig(**cfg))
    assert np.array_equal(a, b) and ta.energy == tb.energy


def test_two_components_flow_independently():
    a = shapes.icosphere(3)
    two = TriMesh(np.vstack([a.positions, a.positions + [5, 0, 0]]),
                  np.vstack([a.faces, a.faces + a.n_vertices]))

    class TwoSpheres(Sphere):
        def sdf(self, p):
            return np.minimum(np.linalg.norm(p, axis=1), np.linalg.norm(p - [5, 0, 0], axis=1)) - 1

        def grad(self, p):
            near = np.linalg.norm(p, axis=1) < np.linalg.norm(p - [5, 0, 0], axis=1)
            c = np.where(near[:, None], 0.0, [5.0, 0, 0])
            d = p - c
            return d / np.linalg.norm(d, axis=1, keepdims=True)

        def sdf_and_grad(self, p):
            return self.sdf(p), self.grad(p)

    cfg = dict(solver="spring", max_iterations=3, energy_rel_tol=0)
    p2, _ = run_flow(two, TwoSpheres(), FlowConfig(**cfg))
    p1, _ = run_flow(a, Sphere(1.0), FlowConfig(**cfg))
    assert np.allclose(p2[:a.n_vertices], p1, atol=1e-10)
