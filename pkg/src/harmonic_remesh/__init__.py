"""Adaptive surface remeshing by shape-operator-weighted harmonic flow.

The flow moves the vertices of a fixed-connectivity triangle mesh toward a
target surface (signed distance field or heightfield) so that edge density
follows ``|S|^alpha``, the convexified shape operator raised to a power.
"""
from .mesh import MeshError, Polyline, TriMesh, boundary_loops, load_obj, save_obj, vertex_star
from .targets import (EUCLIDEAN, ISOTROPIC, AnalyticHeightfield, Box, Ellipsoid, EllipseCurve,
                      GridHeightfield, GridSDF, Plane, ProjectionError, SmoothUnion, Sphere,
                      TargetError, Torus, named_heightfield, project_to_surface)
from .metric import (FaceMetric, MetricError, face_metrics, sym2_abs, sym2_power, sym2_sqrt,
                     vertex_normals)
from .flow import EnergyTrace, FlowConfig, FlowError, FlowState, discrete_energy, run_flow

__version__ = "0.1.0"

__all__ = [
    "MeshError", "Polyline", "TriMesh", "boundary_loops", "load_obj", "save_obj", "vertex_star",
    "EUCLIDEAN", "ISOTROPIC", "AnalyticHeightfield", "Box", "Ellipsoid", "EllipseCurve",
    "GridHeightfield", "GridSDF", "Plane", "ProjectionError", "SmoothUnion", "Sphere",
    "TargetError", "Torus", "named_heightfield", "project_to_surface",
    "FaceMetric", "MetricError", "face_metrics", "sym2_abs", "sym2_power", "sym2_sqrt",
    "vertex_normals",
    "EnergyTrace", "FlowConfig", "FlowError", "FlowState", "discrete_energy", "run_flow",
]
