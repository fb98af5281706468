"""Indexed triangle meshes with immutable topology tables, plus OBJ/PLY I/O.

Connectivity is built once at construction and never changes afterwards;
only vertex positions are replaced as a flow runs.
"""
from __future__ import annotations

from collections import deque
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh input (parse errors, bad faces, non-manifold edges)."""


class TriMesh:
    """Triangle mesh with precomputed edges, vertex stars and boundary flags.

    Parameters
    ----------
    positions : array_like, shape (V, 3)
        Vertex coordinates.
    faces : array_like, shape (F, 3)
        Vertex indices per face, counter-clockwise.

    Attributes
    ----------
    edges : ndarray, shape (E, 2)
        Unordered edges stored as ``i < j``.
    edge_faces : ndarray, shape (E, 2)
        Adjacent faces per edge; the second entry is ``-1`` on boundary edges.
    face_edges : ndarray, shape (F, 3)
        Edge index of face side ``(v0, v1)``, ``(v1, v2)``, ``(v2, v0)``.
    star_ptr, star_nbr, star_edge : ndarray
        CSR layout of the vertex stars; neighbours of ``v`` are
        ``star_nbr[star_ptr[v]:star_ptr[v + 1]]``.
    boundary_edge, boundary_vertex : ndarray of bool
    consistently_oriented : bool
        Every interior edge is traversed in opposite directions by its faces.
    orientable : bool
        Some reorientation of the faces is consistent (False for a Moebius strip).
    """

    def __init__(self, positions, faces):
        self.positions = np.array(positions, dtype=float).reshape(-1, 3)
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.positions)
        if faces.size and (faces.min() < 0 or faces.max() >= nv):
            raise MeshError("face references an out-of-range vertex index")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                  | (faces[:, 0] == faces[:, 2])):
            raise MeshError("face with repeated vertex index")
        self.faces = faces
        self.faces.setflags(write=False)
        self._build_topology()

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def with_positions(self, positions) -> "TriMesh":
        """Return a mesh sharing this topology with new vertex positions."""
        out = object.__new__(TriMesh)
        out.__dict__.update(self.__dict__)
        out.positions = np.array(positions, dtype=float).reshape(-1, 3)
        if out.positions.shape != self.positions.shape:
            raise MeshError("position array does not match vertex count")
        return out

    def _build_topology(self):
        f = self.faces
        nf = len(f)
        nv = self.n_vertices
        # half-edges in face order: (v0,v1), (v1,v2), (v2,v0)
        he = np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)
        key = np.sort(he, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            bad = edges[np.argmax(counts > 2)]
            raise MeshError(f"non-manifold edge ({bad[0]}, {bad[1]}) has more than 2 adjacent faces")
        self.edges = edges.astype(np.int64)
        ne = len(edges)
        he_face = np.repeat(np.arange(nf), 3)
        order = np.argsort(inverse, kind="stable")
        edge_faces = np.full((ne, 2), -1, dtype=np.int64)
        edge_he = np.full((ne, 2), -1, dtype=np.int64)
        slot = np.zeros(ne, dtype=np.int64)
        for h in order:
            e = inverse[h]
            edge_faces[e, slot[e]] = he_face[h]
            edge_he[e, slot[e]] = h
            slot[e] += 1
        self.edge_faces = edge_faces
        self.face_edges = inverse.reshape(nf, 3)
        self.boundary_edge = edge_faces[:, 1] < 0
        self.boundary_vertex = np.zeros(nv, dtype=bool)
        self.boundary_vertex[self.edges[self.boundary_edge].ravel()] = True

        # vertex stars in CSR form
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        eid = np.concatenate([np.arange(ne), np.arange(ne)])
        order = np.lexsort((dst, src))
        self.star_nbr = dst[order]
        self.star_edge = eid[order]
        self.star_ptr = np.zeros(nv + 1, dtype=np.int64)
        np.add.at(self.star_ptr, src + 1, 1)
        self.star_ptr = np.cumsum(self.star_ptr)

        # orientation: an interior edge is consistent when its two half-edges point opposite ways
        interior = ~self.boundary_edge
        h0, h1 = edge_he[interior, 0], edge_he[interior, 1]
        same_dir = he[h0, 0] == he[h1, 0]
        self.consistently_oriented = not np.any(same_dir)
        self.orientable = self.consistently_oriented or self._check_orientable(interior, same_dir)
        self._edge_he = edge_he
        self._halfedges = he

    def _check_orientable(self, interior, same_dir) -> bool:
        # two-colour the face adjacency graph: faces sharing a same-direction edge must flip relative to each other
        nf = self.n_faces
        pairs = self.edge_faces[interior]
        adj = [[] for _ in range(nf)]
        for (a, b), flip in zip(pairs, same_dir):
            adj[a].append((b, bool(flip)))
            adj[b].append((a, bool(flip)))
        sign = np.zeros(nf, dtype=np.int8)
        for seed in range(nf):
            if sign[seed]:
                continue
            sign[seed] = 1
            queue = deque([seed])
            while queue:
                u = queue.popleft()
                for w, flip in adj[u]:
                    want = -sign[u] if flip else sign[u]
                    if sign[w] == 0:
                        sign[w] = want
                        queue.append(w)
                    elif sign[w] != want:
                        return False
        return True

    def face_normals(self, positions=None, unit=True) -> np.ndarray:
        """Geometric face normals from the winding order."""
        p = self.positions if positions is None else positions
        f = self.faces
        n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        if unit:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(ln > 0, ln, 1.0)
        return n

    def face_areas(self, positions=None) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(positions, unit=False), axis=1)

    def bbox_diagonal(self, positions=None) -> float:
        p = self.positions if positions is None else positions
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


class Polyline:
    """Vertex chain (open or closed) used by the one-dimensional spring flow."""

    def __init__(self, positions, closed=True):
        self.positions = np.array(positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        if n < 2:
            raise MeshError("polyline needs at least 2 vertices")
        idx = np.arange(n)
        nxt = (idx + 1) % n
        self.closed = closed
        self.edges = np.stack([idx, nxt], axis=1)[: n if closed else n - 1].astype(np.int64)
        self.boundary_edge = np.zeros(len(self.edges), dtype=bool)
        self.boundary_vertex = np.zeros(n, dtype=bool)
        if not closed:
            self.boundary_vertex[[0, n - 1]] = True

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def with_positions(self, positions) -> "Polyline":
        return Polyline(positions, closed=self.closed)


def vertex_star(mesh: TriMesh, v: int) -> list[tuple[int, int, tuple[int, ...]]]:
    """Return ``(neighbor, edge, adjacent_faces)`` for every edge incident to ``v``."""
    if not 0 <= v < mesh.n_vertices:
        raise IndexError(f"vertex index {v} out of range [0, {mesh.n_vertices})")
    lo, hi = mesh.star_ptr[v], mesh.star_ptr[v + 1]
    out = []
    for j, e in zip(mesh.star_nbr[lo:hi], mesh.star_edge[lo:hi]):
        faces = tuple(int(x) for x in mesh.edge_faces[e] if x >= 0)
        out.append((int(j), int(e), faces))
    return out


def boundary_loops(mesh: TriMesh) -> list[list[int]]:
    """Ordered boundary vertex cycles, surface on the left of the walking direction.

    Each boundary edge is used exactly once. Closed loops repeat no vertex;
    a chain that cannot be closed (only possible on non-orientable input)
    is returned as an open list.
    """
    bidx = np.flatnonzero(mesh.boundary_edge)
    if len(bidx) == 0:
        return []
    # the single face traverses a boundary edge as (a -> b); walking a -> b keeps that face on the left
    he = mesh._halfedges[mesh._edge_he[bidx, 0]]
    outgoing: dict[int, list[int]] = {}
    for k, (a, _) in enumerate(he):
        outgoing.setdefault(int(a), []).append(k)
    used = np.zeros(len(bidx), dtype=bool)
    loops = []
    for start in range(len(bidx)):
        if used[start]:
            continue
        used[start] = True
        loop = [int(he[start, 0])]
        cur = int(he[start, 1])
        while cur != loop[0]:
            loop.append(cur)
            nxt = [k for k in outgoing.get(cur, []) if not used[k]]
            if not nxt:
                # non-orientable boundary: continue against the half-edge direction
                cands = [k for k in range(len(bidx)) if not used[k] and he[k, 1] == cur]
                if not cands:
                    break
                k = cands[0]
                used[k] = True
                cur = int(he[k, 0])
                continue
            k = nxt[0]
            used[k] = True
            cur = int(he[k, 1])
        loops.append(loop)
    return loops


def _parse_index(tok: str, nv: int, lineno: int) -> int:
    raw = tok.split("/")[0]
    try:
        i = int(raw)
    except ValueError:
        raise MeshError(f"line {lineno}: cannot parse face index {tok!r}") from None
    if i < 0:
        i = nv + i
    else:
        i -= 1
    if not 0 <= i < nv:
        raise MeshError(f"line {lineno}: out-of-range vertex index {raw}")
    return i


def load_obj(path, require_orientation: bool = True) -> TriMesh:
    """Read a triangle mesh from a Wavefront OBJ file.

    Only ``v`` and ``f`` records are interpreted; texture/normal indices in
    face tokens are ignored. Orientable meshes must be consistently wound
    unless ``require_orientation`` is False.
    """
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshError(f"line {lineno}: cannot parse vertex") from None
                if len(verts[-1]) != 3:
                    raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshError(f"line {lineno}: non-triangle face with {len(parts) - 1} vertices")
                faces.append([_parse_index(t, len(verts), lineno) for t in parts[1:]])
    mesh = TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if require_orientation and mesh.orientable and not mesh.consistently_oriented:
        raise MeshError(f"{path}: faces are not consistently oriented")
    return mesh


def save_obj(mesh: TriMesh, path, face_scalars=None, positions=None) -> None:
    """Write ``mesh`` as OBJ; with ``face_scalars`` also write a sidecar PLY next to it."""
    p = mesh.positions if positions is None else np.asarray(positions, dtype=float)
    path = Path(path)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in p.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if face_scalars is not None:
        write_ply(mesh, path.with_suffix(".ply"), face_scalars, positions=p)


def write_ply(mesh: TriMesh, path, face_scalars, positions=None) -> None:
    """ASCII PLY with a ``double quality`` property on every face."""
    p = mesh.positions if positions is None else np.asarray(positions, dtype=float)
    q = np.asarray(face_scalars, dtype=float).reshape(-1)
    if len(q) != mesh.n_faces:
        raise MeshError(f"expected {mesh.n_faces} face scalars, got {len(q)}")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "property double quality",
        "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in p.tolist()]
    body += [f"3 {a} {b} {c} {s!r}" for (a, b, c), s in zip(mesh.faces.tolist(), q.tolist())]
    with open(path, "w") as fh:
        fh.write("\n".join(header + body) + "\n")


def read_ply_face_scalars(path) -> np.ndarray:
    """Read back the per-face ``quality`` column written by :func:`write_ply`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    nv = nf = 0
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
        elif line == "end_header":
            start = k + 1
            break
    rows = lines[start + nv: start + nv + nf]
    return np.array([float(r.split()[-1]) for r in rows])

