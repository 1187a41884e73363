"""Quadric-error edge contraction and template pooling hierarchies.

Each vertex carries the sum of the plane quadrics of its incident faces.
Contracting an edge merges the two quadrics and places the new vertex at
their joint minimiser. Edges are contracted cheapest-first from a heap with
lazy invalidation until the target vertex count is reached.

The decimated mesh places every coarse vertex at the mean of the fine
vertices merged into it, so that the returned down-sampling matrix applied
to the fine coordinates reproduces the coarse coordinates exactly. The QEM
optimal positions only drive cost evaluation and the flip test.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .mesh import MeshError, TriMesh, check_nondegenerate, face_normals, validate

SINGULAR_RTOL = 1e-10


class DecimationError(RuntimeError):
    def __init__(self, message, achieved):
        self.achieved = achieved
        super().__init__(f"{message} (reached {achieved} vertices)")


def plane_quadric(p0, p1, p2):
    """Outer product ``p p^T`` of the unit plane ``p = (a, b, c, d)`` through three points."""
    n = np.cross(np.subtract(p1, p0), np.subtract(p2, p0))
    norm = np.linalg.norm(n)
    if norm == 0:
        raise MeshError("zero-area face has no plane")
    n = n / norm
    p = np.append(n, -np.dot(n, p0))
    return np.outer(p, p)


def vertex_quadrics(mesh):
    """Per-vertex quadrics ``Q_v = sum of plane quadrics of faces around v``.

    Returns
    -------
    ndarray, shape (N, 4, 4)

    Raises
    ------
    MeshError
        If a face has zero area.
    """
    check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    n = face_normals(v, f)
    d = -np.einsum("ij,ij->i", n, v[f[:, 0]])
    p = np.concatenate([n, d[:, None]], axis=1)
    kf = p[:, :, None] * p[:, None, :]
    q = np.zeros((mesh.n_vertices, 4, 4))
    for k in range(3):
        np.add.at(q, f[:, k], kf)
    return q


def quadric_error(q, x):
    h = np.append(np.asarray(x, dtype=float), 1.0)
    return float(h @ q @ h)


def collapse_cost(q1, q2, p1=None, p2=None):
    """Cost and position of contracting two vertices with quadrics ``q1``, ``q2``.

    The position minimises ``[v;1]^T (q1 + q2) [v;1]``. When the 3x3 system is
    singular relative to its scale, the best of the two endpoints and their
    midpoint is used instead (or the minimum-norm least-squares solution if
    no endpoints are supplied).

    Returns
    -------
    cost : float
    position : ndarray, shape (3,)
    """
    q = np.asarray(q1) + np.asarray(q2)
    a = q[:3, :3]
    b = -q[:3, 3]
    scale = float(np.sum(a * a)) ** 1.5
    det = float(np.linalg.det(a))
    if scale > 0 and abs(det) >= SINGULAR_RTOL * scale:
        x = np.linalg.solve(a, b)
    elif p1 is not None and p2 is not None:
        p1 = np.asarray(p1, dtype=float)
        p2 = np.asarray(p2, dtype=float)
        cands = (p1, p2, 0.5 * (p1 + p2))
        errs = [quadric_error(q, c) for c in cands]
        k = int(np.argmin(errs))
        return errs[k], cands[k].copy()
    else:
        x = np.linalg.lstsq(a, b, rcond=None)[0]
    return quadric_error(q, x), x


@dataclass
class Contraction:
    kept: int
    removed: int
    cost: float
    position: np.ndarray


class _Decimator:
    """Mutable contraction state over the original vertex numbering."""

    def __init__(self, mesh):
        report = validate(mesh)
        if not report.is_edge_manifold:
            raise MeshError("decimation requires an edge-manifold mesh")
        self.mesh = mesh
        self.q = vertex_quadrics(mesh)
        self.pos = mesh.vertices.copy()
        n = mesh.n_vertices
        self.alive = np.ones(n, dtype=bool)
        self.n_alive = n
        self.faces = [list(map(int, f)) for f in mesh.faces]
        self.face_alive = [True] * len(self.faces)
        self.vfaces = [set() for _ in range(n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(fi)
        self.nbrs = [set() for _ in range(n)]
        for a, b in mesh.edges:
            self.nbrs[int(a)].add(int(b))
            self.nbrs[int(b)].add(int(a))
        self.cluster = [[v] for v in range(n)]
        self.heap = []
        self.stamp = {}
        self.cost_of = {}
        self.rejected = set()
        self.history = []
        for a, b in mesh.edges:
            self._push(int(a), int(b), recompute=True)

    # -- heap ---------------------------------------------------------------

    def _push(self, a, b, recompute):
        key = (a, b) if a < b else (b, a)
        if recompute or key not in self.cost_of:
            self.cost_of[key] = collapse_cost(self.q[key[0]], self.q[key[1]],
                                              self.pos[key[0]], self.pos[key[1]])
        s = self.stamp.get(key, 0) + 1
        self.stamp[key] = s
        self.rejected.discard(key)
        heapq.heappush(self.heap, (self.cost_of[key][0], key[0], key[1], s))

    # -- topology queries ---------------------------------------------------

    def _edge_faces(self, a, b):
        return [fi for fi in self.vfaces[a] & self.vfaces[b]]

    def _is_boundary_vertex(self, v):
        for u in self.nbrs[v]:
            if len(self._edge_faces(v, u)) == 1:
                return True
        return False

    def is_valid(self, a, b, position):
        """Link condition, degree and boundary rules, and the 90-degree normal flip test."""
        shared = self._edge_faces(a, b)
        opp = set()
        for fi in shared:
            opp.update(self.faces[fi])
        opp -= {a, b}
        if self.nbrs[a] & self.nbrs[b] != opp:
            return False
        # a closed tetrahedron would fold into a doubly covered triangle
        if len(self.nbrs[a] | self.nbrs[b]) - 2 < len(shared) + 1:
            return False
        if len(shared) == 2 and self._is_boundary_vertex(a) and self._is_boundary_vertex(b):
            return False
        shared_set = set(shared)
        for v in (a, b):
            for fi in self.vfaces[v]:
                if fi in shared_set:
                    continue
                f = self.faces[fi]
                p = [self.pos[u] for u in f]
                before = np.cross(p[1] - p[0], p[2] - p[0])
                k = f.index(v)
                p[k] = position
                after = np.cross(p[1] - p[0], p[2] - p[0])
                scale = np.dot(before, before)
                if np.dot(after, after) <= 1e-24 * max(scale, 1e-300):
                    return False
                if np.dot(before, after) < 0:
                    return False
        return True

    def contract(self, a, b, position, cost):
        keep, gone = (a, b) if a < b else (b, a)
        for fi in self._edge_faces(keep, gone):
            self.face_alive[fi] = False
            for u in self.faces[fi]:
                self.vfaces[u].discard(fi)
        for fi in list(self.vfaces[gone]):
            f = self.faces[fi]
            f[f.index(gone)] = keep
            self.vfaces[keep].add(fi)
        self.vfaces[gone] = set()
        for u in self.nbrs[gone]:
            self.nbrs[u].discard(gone)
            if u != keep:
                self.nbrs[u].add(keep)
                self.nbrs[keep].add(u)
        self.nbrs[keep].discard(gone)
        self.nbrs[gone] = set()
        self.q[keep] = self.q[keep] + self.q[gone]
        self.pos[keep] = position
        self.alive[gone] = False
        self.n_alive -= 1
        self.cluster[keep].extend(self.cluster[gone])
        self.cluster[gone] = []
        self.history.append(Contraction(keep, gone, cost, np.array(position)))
        for u in self.nbrs[keep]:
            self._push(keep, u, recompute=True)
        ring = set(self.nbrs[keep]) | {keep}
        for key in [k for k in self.rejected if k[0] in ring or k[1] in ring]:
            self._push(*key, recompute=False)

    def step(self):
        """Contract the cheapest valid edge; False when the heap is exhausted."""
        while self.heap:
            cost, a, b, s = heapq.heappop(self.heap)
            if self.stamp.get((a, b)) != s or not (self.alive[a] and self.alive[b]):
                continue
            if b not in self.nbrs[a]:
                continue
            position = self.cost_of[(a, b)][1]
            if not self.is_valid(a, b, position):
                self.rejected.add((a, b))
                continue
            self.contract(a, b, position, cost)
            return True
        return False

    def result(self):
        keep = np.flatnonzero(self.alive)
        remap = np.full(len(self.alive), -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        rows, cols, vals = [], [], []
        for c, v in enumerate(keep):
            members = sorted(self.cluster[v])
            w = 1.0 / len(members)
            rows += [c] * len(members)
            cols += members
            vals += [w] * len(members)
        down = sparse.csr_matrix((vals, (rows, cols)), shape=(len(keep), len(self.alive)))
        faces = np.array([f for f, ok in zip(self.faces, self.face_alive) if ok], dtype=np.int64)
        coarse = TriMesh(down @ self.mesh.vertices, remap[faces])
        return coarse, down


def decimate(mesh, target_vertex_count, return_history=False):
    """Contract cheapest valid edges until ``target_vertex_count`` vertices remain.

    Returns
    -------
    coarse : TriMesh
        Vertices at the mean of their merged clusters, in ascending order of
        the surviving original index.
    down_map : scipy.sparse.csr_matrix, shape (N_coarse, N_fine)
    history : list of Contraction, only if ``return_history``

    Raises
    ------
    DecimationError
        If no valid contraction remains before the target is reached.
    """
    n = mesh.n_vertices
    if not 4 <= target_vertex_count < n:
        raise ValueError(f"target must satisfy 4 <= target < {n}, got {target_vertex_count}")
    dec = _Decimator(mesh)
    while dec.n_alive > target_vertex_count:
        if not dec.step():
            raise DecimationError("no valid contraction left", dec.n_alive)
    coarse, down = dec.result()
    if return_history:
        return coarse, down, dec.history
    return coarse, down


@dataclass
class PoolHierarchy:
    """Template meshes from fine to coarse plus the averaging maps between them."""

    levels: list
    down_maps: list
    _hash: str = field(default="", repr=False)

    def pool(self, level, x):
        """Average per-vertex features ``x`` (numpy) from ``level`` to ``level + 1``."""
        return self.down_maps[level] @ x

    def pattern_hash(self):
        import hashlib

        h = hashlib.sha256()
        for d in self.down_maps:
            d = d.tocsr()
            h.update(np.asarray(d.indptr, "<i8").tobytes())
            h.update(np.asarray(d.indices, "<i8").tobytes())
        return h.hexdigest()


def build_hierarchy(template, factors):
    """Decimate the template repeatedly; ``factors`` apply to the previous level.

    Level sizes are ``floor(N_prev * factor)``.
    """
    levels = [template]
    maps = []
    for r in factors:
        if not 0 < r < 1:
            raise ValueError(f"reduction factor must lie in (0, 1), got {r}")
        prev = levels[-1]
        target = int(math.floor(prev.n_vertices * r))
        coarse, down = decimate(prev, target)
        levels.append(coarse)
        maps.append(down)
    return PoolHierarchy(levels, maps)


def save_hierarchy(hier, directory):
    """Write ``level_<k>.off`` and ``down_<k>.txt`` (``coarse fine weight`` triplets)."""
    from .io import save_mesh

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(hier.levels):
        save_mesh(m, d / f"level_{k}.off")
    for k, dm in enumerate(hier.down_maps):
        coo = dm.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}" for i in order]
        (d / f"down_{k}.txt").write_text("\n".join(lines) + "\n")


def load_hierarchy(directory):
    from .io import load_mesh

    d = Path(directory)
    levels = []
    k = 0
    while (d / f"level_{k}.off").exists():
        levels.append(load_mesh(d / f"level_{k}.off"))
        k += 1
    if not levels:
        raise FileNotFoundError(f"no hierarchy levels under {d}")
    maps = []
    for k in range(len(levels) - 1):
        arr = np.loadtxt(d / f"down_{k}.txt", ndmin=2)
        maps.append(
            sparse.csr_matrix(
                (arr[:, 2], (arr[:, 0].astype(int), arr[:, 1].astype(int))),
                shape=(levels[k + 1].n_vertices, levels[k].n_vertices),
            )
        )
    return PoolHierarchy(levels, maps)
