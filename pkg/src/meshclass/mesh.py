"""Triangle mesh container, topology derivation and validity checks.

A :class:`TriMesh` stores vertex coordinates and counter-clockwise oriented
triangles. Edges and the vertex adjacency matrix are derived from the faces
on first access and cached; the arrays themselves are read-only so a mesh
can be shared freely once built.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class MeshError(ValueError):
    """Raised for structurally invalid meshes (bad indices, non-manifold edges, ...)."""


def _readonly(a):
    a.setflags(write=False)
    return a


def face_edges(faces):
    """Derive the unique undirected edges of a face list.

    Parameters
    ----------
    faces : (F, 3) int array

    Returns
    -------
    edges : (E, 2) int array
        Sorted vertex pairs ``(i, j)`` with ``i < j``, lexicographically ordered.
    halfedge_edge : (F, 3) int array
        Edge index of the directed side ``faces[f, k] -> faces[f, (k + 1) % 3]``.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    a = faces.reshape(-1)
    b = np.roll(faces, -1, axis=1).reshape(-1)
    pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def face_topology(faces):
    """Edge/face incidence and the ordered four-edge neighbourhood of each edge.

    For an edge shared by faces ``f1`` and ``f2`` (``f1`` the lower face index)
    the neighbours are ``(a, b)`` from ``f1`` and ``(c, d)`` from ``f2``: within
    each face the two remaining sides in winding order, starting with the side
    that follows the shared edge. Missing slots on boundary edges hold -1.

    Returns
    -------
    edges : (E, 2) int array
    edge_faces : (E, 2) int array
    edge_nbrs : (E, 4) int array

    Raises
    ------
    MeshError
        If any edge borders more than two faces.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    edges, he = face_edges(faces)
    n_edges = len(edges)
    counts = np.bincount(he.reshape(-1), minlength=n_edges)
    if n_edges and counts.max() > 2:
        bad = int(np.argmax(counts > 2))
        raise MeshError(
            f"non-manifold edge {tuple(int(v) for v in edges[bad])} borders {counts[bad]} faces"
        )
    edge_faces = np.full((n_edges, 2), -1, dtype=np.int64)
    edge_nbrs = np.full((n_edges, 4), -1, dtype=np.int64)
    # halfedges in face order, so the first face seen per edge has the lower index
    flat = he.reshape(-1)
    face_of = np.repeat(np.arange(len(faces)), 3)
    side = np.tile(np.arange(3), len(faces))
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    first = np.ones(len(flat_sorted), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    slot = np.where(first, 0, 1)
    e_ids = flat_sorted
    f_ids = face_of[order]
    k = side[order]
    edge_faces[e_ids, slot] = f_ids
    nxt = he[f_ids, (k + 1) % 3]
    prv = he[f_ids, (k + 2) % 3]
    edge_nbrs[e_ids, 2 * slot] = nxt
    edge_nbrs[e_ids, 2 * slot + 1] = prv
    return edges, edge_faces, edge_nbrs


class TriMesh:
    """Immutable triangle mesh ``M = (V, E, A, F)``.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
    faces : array_like, shape (F, 3)
        Vertex indices, counter-clockwise when seen from outside.

    Raises
    ------
    MeshError
        On out-of-range indices or faces with repeated vertices.
    """

    def __init__(self, vertices, faces):
        vertices = np.array(vertices, dtype=np.float64)
        faces = np.array(faces, dtype=np.int64)
        if vertices.size == 0:
            vertices = vertices.reshape(0, 3)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be vertex-index triples, got shape {faces.shape}")
        n = len(vertices)
        if faces.size:
            if faces.min() < 0 or faces.max() >= n:
                bad = int(np.argmax((faces < 0).any(1) | (faces >= n).any(1)))
                raise MeshError(f"face {bad} references a vertex outside [0, {n})")
            rep = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if rep.any():
                raise MeshError(f"face {int(np.argmax(rep))} has repeated vertices")
        self._vertices = _readonly(vertices)
        self._faces = _readonly(faces)

    @property
    def vertices(self):
        return self._vertices

    @property
    def faces(self):
        return self._faces

    @property
    def n_vertices(self):
        return len(self._vertices)

    @property
    def n_faces(self):
        return len(self._faces)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def _edges_and_halfedges(self):
        edges, he = face_edges(self._faces)
        return _readonly(edges), _readonly(he)

    @property
    def edges(self):
        """Unique sorted vertex pairs, shape (E, 2)."""
        return self._edges_and_halfedges[0]

    @property
    def halfedge_edges(self):
        """Edge index of each directed face side, shape (F, 3)."""
        return self._edges_and_halfedges[1]

    @cached_property
    def adjacency(self):
        """Symmetric boolean vertex adjacency as a CSR matrix."""
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix(
            (np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n)
        )
        a.sum_duplicates()
        return a

    def with_vertices(self, vertices):
        """Same connectivity, new coordinates."""
        return TriMesh(vertices, self._faces)

    def face_hash(self):
        """Stable hex digest of the face list (connectivity identity)."""
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self._faces, dtype="<i8").tobytes()).hexdigest()

    def __repr__(self):
        return f"TriMesh(N={self.n_vertices}, E={self.n_edges}, F={self.n_faces})"


@dataclass(frozen=True)
class MeshReport:
    is_edge_manifold: bool
    is_closed: bool
    boundary_edge_count: int
    connected_components: int


def validate(mesh):
    """Report manifoldness, closure and component count; never raises."""
    he = mesh.halfedge_edges
    counts = np.bincount(he.reshape(-1), minlength=mesh.n_edges)
    manifold = bool((counts <= 2).all())
    boundary = int((counts == 1).sum())
    closed = bool(mesh.n_edges > 0 and (counts == 2).all())
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.reshape(-1)] = True
    if used.any():
        n_comp, labels = csgraph.connected_components(mesh.adjacency, directed=False)
        n_comp = len(np.unique(labels[used]))
    else:
        n_comp = 0
    return MeshReport(
        is_edge_manifold=manifold,
        is_closed=closed,
        boundary_edge_count=boundary,
        connected_components=int(n_comp),
    )


@dataclass(frozen=True)
class EdgeTopology:
    """Per-edge incident faces and ordered neighbour edges (-1 = absent)."""

    edges: np.ndarray
    edge_faces: np.ndarray
    edge_nbrs: np.ndarray

    def as_dict(self):
        return {
            (int(e[0]), int(e[1])): (
                tuple(int(f) for f in ef if f >= 0),
                tuple(int(n) for n in nb),
            )
            for e, ef, nb in zip(self.edges, self.edge_faces, self.edge_nbrs)
        }


def edge_face_topology(mesh):
    """Incident faces and the four neighbour edges of every edge.

    Raises
    ------
    MeshError
        Naming the first edge that borders more than two faces.
    """
    edges, edge_faces, edge_nbrs = face_topology(mesh.faces)
    return EdgeTopology(_readonly(edges), _readonly(edge_faces), _readonly(edge_nbrs))


def fix_winding(mesh):
    """Make face orientation consistent by propagating across shared edges.

    The first face of every connected patch keeps its winding. Returns a new
    mesh; the input is untouched.

    Raises
    ------
    MeshError
        If the surface is non-orientable or non-manifold.
    """
    faces = mesh.faces.copy()
    _, edge_faces, _ = face_topology(faces)
    n_faces = len(faces)
    face_nbrs = [[] for _ in range(n_faces)]
    for f1, f2 in edge_faces:
        if f2 >= 0:
            face_nbrs[f1].append(f2)
            face_nbrs[f2].append(f1)

    def directed(f):
        t = faces[f]
        return {(int(t[k]), int(t[(k + 1) % 3])) for k in range(3)}

    done = np.zeros(n_faces, dtype=bool)
    for seed in range(n_faces):
        if done[seed]:
            continue
        done[seed] = True
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            d = directed(f)
            for g in face_nbrs[f]:
                same = bool(d & directed(g))
                if done[g]:
                    if same:
                        raise MeshError(f"surface is not orientable near faces {f} and {g}")
                    continue
                if same:
                    faces[g] = faces[g][::-1]
                done[g] = True
                queue.append(g)
    return TriMesh(mesh.vertices, faces)


def face_normals(vertices, faces, normalize=True):
    v = np.asarray(vertices)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if not normalize:
        return n
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(face_normals(vertices, faces, normalize=False), axis=1)


def check_nondegenerate(mesh, tol=1e-14):
    """Raise :class:`MeshError` naming the first zero-area face."""
    areas = face_areas(mesh.vertices, mesh.faces)
    scale = max(float(np.ptp(mesh.vertices, axis=0).max()) if mesh.n_vertices else 1.0, 1e-300)
    bad = areas <= tol * scale * scale
    if bad.any():
        f = int(np.argmax(bad))
        raise MeshError(f"face {f} {tuple(int(i) for i in mesh.faces[f])} has zero area")


# ---------------------------------------------------------------------------
# reference shapes


def tetrahedron():
    """Regular tetrahedron with outward-facing winding."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


def icosahedron():
    """Unit-radius icosahedron, 12 vertices / 20 faces, outward winding."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return TriMesh(v, f)


def icosphere(level):
    """Loop-style subdivided icosahedron projected to the unit sphere.

    ``level`` subdivisions give ``10 * 4**level + 2`` vertices (642 at level 3).
    """
    base = icosahedron()
    verts = [tuple(p) for p in base.vertices]
    faces = [tuple(int(i) for i in f) for f in base.faces]
    for _ in range(level):
        cache = {}
        pts = verts

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = np.add(pts[a], pts[b]) / 2.0
                m = m / np.linalg.norm(m)
                pts.append(tuple(m))
                idx = cache[key] = len(pts) - 1
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts), np.array(faces))


def grid(n_rows, n_cols, spacing=1.0):
    """Planar triangulated grid in the z=0 plane, normals along +z.

    Vertex ``(r, c)`` has index ``r * n_cols + c``; each cell is split along
    the diagonal from ``(r, c)`` to ``(r + 1, c + 1)``.
    """
    ys, xs = np.mgrid[0:n_rows, 0:n_cols]
    v = np.stack([xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(xs.size)], axis=1)
    faces = []
    for r in range(n_rows - 1):
        for c in range(n_cols - 1):
            i = r * n_cols + c
            faces.append((i, i + 1, i + n_cols + 1))
            faces.append((i, i + n_cols + 1, i + n_cols))
    return TriMesh(v, np.array(faces))
