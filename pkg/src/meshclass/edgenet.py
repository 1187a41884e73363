"""Edge-centric mesh operators: relative edge features, symmetric edge
convolution and feature-magnitude edge-collapse pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .io import write_edge_attr
from .mesh import MeshError, check_nondegenerate, face_topology
from .nn import Module, Parameter, glorot


def _angle(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    c = np.einsum("...i,...i->...", u, v) / (nu * nv)
    return np.arccos(np.clip(c, -1.0, 1.0))


def edge_input_features(mesh):
    """Five relative geometric features per edge, shape (E, 5).

    Columns: dihedral angle (pi when coplanar, below pi for convex edges),
    the two opposite inner angles sorted ascending, and the two
    edge-length / triangle-height ratios sorted ascending. Boundary edges
    repeat their single face's values and use a dihedral of pi.
    """
    check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    edges, edge_faces, _ = face_topology(f)
    he = mesh.halfedge_edges
    n_e = len(edges)

    # per incident face: the directed shared side (tail, head) and the opposite vertex
    tails = np.zeros((n_e, 2), dtype=np.int64)
    heads = np.zeros((n_e, 2), dtype=np.int64)
    opps = np.zeros((n_e, 2), dtype=np.int64)
    for slot in range(2):
        fi = edge_faces[:, slot]
        fi_safe = np.where(fi >= 0, fi, edge_faces[:, 0])
        tri = f[fi_safe]
        k = np.argmax(he[fi_safe] == np.arange(n_e)[:, None], axis=1)
        r = np.arange(n_e)
        tails[:, slot] = tri[r, k]
        heads[:, slot] = tri[r, (k + 1) % 3]
        opps[:, slot] = tri[r, (k + 2) % 3]

    inner = _angle(v[tails] - v[opps], v[heads] - v[opps])
    elen = np.linalg.norm(v[edges[:, 1]] - v[edges[:, 0]], axis=1)
    area2 = np.linalg.norm(np.cross(v[tails] - v[opps], v[heads] - v[opps]), axis=-1)
    ratio = elen[:, None] ** 2 / area2

    n1 = np.cross(v[heads[:, 0]] - v[tails[:, 0]], v[opps[:, 0]] - v[tails[:, 0]])
    n2 = np.cross(v[heads[:, 1]] - v[tails[:, 1]], v[opps[:, 1]] - v[tails[:, 1]])
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
    d = v[heads[:, 0]] - v[tails[:, 0]]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    bend = np.arctan2(np.einsum("ij,ij->i", np.cross(n1, n2), d), np.einsum("ij,ij->i", n1, n2))
    dihedral = math.pi - bend
    boundary = edge_faces[:, 1] < 0
    dihedral[boundary] = math.pi

    return np.column_stack([dihedral, np.sort(inner, axis=1), np.sort(ratio, axis=1)])


class EdgeConvLayer(Module):
    def __init__(self, n_in, n_out, rng):
        self.n_in, self.n_out = n_in, n_out
        self.kernel = Parameter(glorot(rng, 5 * n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x, nbrs):
        return edge_conv(self, x, nbrs)


def symmetric_neighbourhood(x, nbrs):
    """``(x_e, |x_a - x_c|, x_a + x_c, |x_b - x_d|, x_b + x_d)`` concatenated on channels.

    ``nbrs`` is ``(E, 4)`` or per-sample ``(B, E, 4)``; -1 slots read zeros.
    """
    x = ad.as_tensor(x)
    nbrs = np.asarray(nbrs)
    per_sample = nbrs.ndim == 3
    if nbrs.shape[-2] != x.shape[-2]:
        raise ValueError(f"{nbrs.shape[-2]} neighbour rows for {x.shape[-2]} edges")
    xa, xb, xc, xd = (ad.gather_rows(x, nbrs[..., k], per_sample=per_sample) for k in range(4))
    return ad.concat(
        [x, ad.abs_(xa - xc), xa + xc, ad.abs_(xb - xd), xb + xd], axis=-1
    )


def edge_conv(layer, x, nbrs):
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"edge_conv expects {layer.n_in} channels, got {x.shape[-1]}")
    return ad.matmul(symmetric_neighbourhood(x, nbrs), layer.kernel) + layer.bias


# ---------------------------------------------------------------------------
# pooling


@dataclass
class PoolStep:
    step: int
    edge: tuple
    magnitude: float


@dataclass
class EdgeFeatureMesh:
    """Live edge set of a mesh undergoing edge-collapse pooling.

    ``faces`` keep the original vertex numbering. ``owner[o]`` is the live
    edge currently representing original edge ``o`` (-1 once collapsed);
    ``collapse_value[o]`` is the magnitude at which its lineage was
    collapsed and ``latest_value[o]`` the last magnitude its lineage had as
    a pooling candidate.
    """

    faces: np.ndarray
    edges: np.ndarray
    edge_faces: np.ndarray
    edge_nbrs: np.ndarray
    original_edges: np.ndarray
    owner: np.ndarray
    collapse_value: np.ndarray
    latest_value: np.ndarray
    history: list = field(default_factory=list)
    steps: int = 0

    @classmethod
    def from_mesh(cls, mesh):
        edges, edge_faces, edge_nbrs = face_topology(mesh.faces)
        n = len(edges)
        return cls(
            faces=np.array(mesh.faces),
            edges=edges,
            edge_faces=edge_faces,
            edge_nbrs=edge_nbrs,
            original_edges=edges.copy(),
            owner=np.arange(n),
            collapse_value=np.full(n, np.nan),
            latest_value=np.full(n, np.nan),
        )

    @property
    def n_edges(self):
        return len(self.edges)

    def importance(self):
        """Per original edge: collapse magnitude, else its lineage's latest magnitude."""
        return np.where(np.isnan(self.collapse_value), self.latest_value, self.collapse_value)


class EdgePoolError(RuntimeError):
    def __init__(self, message, achieved):
        self.achieved = achieved
        super().__init__(f"{message} (reached {achieved} edges)")


def edge_pool_plan(magnitudes, efm, target_edge_count):
    """Choose collapses by ascending magnitude and build the feature map.

    Returns
    -------
    pool : scipy.sparse.csr_matrix, shape (E_out, E_in)
        Row ``i`` averages the input edges fused into output edge ``i``.
    efm_out : EdgeFeatureMesh
    """
    mags = np.asarray(magnitudes, dtype=float)
    n_e = efm.n_edges
    if mags.shape != (n_e,):
        raise ValueError(f"expected {n_e} magnitudes, got {mags.shape}")
    if target_edge_count >= n_e:
        raise ValueError(f"target {target_edge_count} must be below current count {n_e}")

    faces = efm.faces.tolist()
    face_alive = [True] * len(faces)
    n_v = int(efm.faces.max()) + 1 if len(faces) else 0
    vfaces = [set() for _ in range(n_v)]
    for fi, t in enumerate(faces):
        for u in t:
            vfaces[u].add(fi)
    nbrs = [set() for _ in range(n_v)]
    ev = [tuple(e) for e in efm.edges.tolist()]
    key_to_edge = dict(zip(ev, range(n_e)))
    for a, b in ev:
        nbrs[a].add(b)
        nbrs[b].add(a)
    # rows of the pool matrix that differ from the identity
    rows = {}
    alive = [True] * n_e
    lineage = [[] for _ in range(n_e)]
    for o, e in enumerate(efm.owner.tolist()):
        if e >= 0:
            lineage[e].append(o)

    owner = efm.owner.copy()
    collapse_value = efm.collapse_value.copy()
    latest_value = efm.latest_value.copy()
    live_orig = owner >= 0
    latest_value[live_orig] = mags[owner[live_orig]]
    history = list(efm.history)
    step = efm.steps

    def key(a, b):
        return (a, b) if a < b else (b, a)

    live = n_e
    order = np.lexsort((np.arange(n_e), mags)).tolist()
    for e in order:
        if live <= target_edge_count:
            break
        if not alive[e]:
            continue
        u, w = ev[e]
        shared = vfaces[u] & vfaces[w]
        if len(shared) != 2:
            continue
        opp = set()
        for fi in shared:
            opp.update(faces[fi])
        opp -= {u, w}
        if len(opp) != 2 or (nbrs[u] & nbrs[w]) != opp:
            continue
        if len(nbrs[u]) + len(nbrs[w]) - 4 < 3:
            continue
        # two boundary sides would fuse into an edge without faces
        if any(len(vfaces[u] & vfaces[p]) < 2 and len(vfaces[w] & vfaces[p]) < 2 for p in opp):
            continue

        # collapse w into u
        for fi in shared:
            face_alive[fi] = False
            for x in faces[fi]:
                vfaces[x].discard(fi)
        for fi in list(vfaces[w]):
            t = faces[fi]
            t[t.index(w)] = u
            vfaces[u].add(fi)
        vfaces[w] = set()
        del key_to_edge[key(u, w)]
        alive[e] = False
        for o in lineage[e]:
            collapse_value[o] = mags[e]
            owner[o] = -1
        history.append(PoolStep(step, tuple(efm.edges[e].tolist()), float(mags[e])))
        for p in opp:
            e_up = key_to_edge[key(u, p)]
            e_wp = key_to_edge.pop(key(w, p))
            # the fused edge keeps the earlier priority of its two sides, a
            # choice independent of vertex numbering
            keep, gone = sorted((e_up, e_wp), key=lambda i: (mags[i], i))
            merged = {}
            for src in (rows.get(e_up, {e_up: 1.0}), rows.get(e_wp, {e_wp: 1.0}), rows.get(e, {e: 1.0})):
                for c, wgt in src.items():
                    merged[c] = merged.get(c, 0.0) + wgt / 3.0
            rows[keep] = merged
            alive[gone] = False
            lineage[keep] = lineage[e_up] + lineage[e_wp]
            for o in lineage[keep]:
                owner[o] = keep
            lineage[gone] = []
            key_to_edge[key(u, p)] = keep
            ev[keep] = key(u, p)
            nbrs[p].discard(w)
        for x in list(nbrs[w]):
            if x == u or x in opp:
                continue
            eid = key_to_edge.pop(key(w, x))
            key_to_edge[key(u, x)] = eid
            ev[eid] = key(u, x)
            nbrs[x].discard(w)
            nbrs[x].add(u)
            nbrs[u].add(x)
        nbrs[u].discard(w)
        nbrs[w] = set()
        live -= 3

    if live > target_edge_count:
        raise EdgePoolError("no valid collapse left", live)

    new_faces = np.array([t for t, ok in zip(faces, face_alive) if ok], dtype=np.int64)
    edges, edge_faces, edge_nbrs = face_topology(new_faces)
    old_ids = np.array([key_to_edge[k] for k in map(tuple, edges.tolist())], dtype=np.int64)
    remap = np.full(n_e, -1, dtype=np.int64)
    remap[old_ids] = np.arange(len(old_ids))
    merged = np.zeros(n_e, dtype=bool)
    merged[list(rows)] = True
    plain = ~merged[old_ids]
    r_idx = [np.flatnonzero(plain)]
    c_idx = [old_ids[plain]]
    vals = [np.ones(int(plain.sum()))]
    for i in np.flatnonzero(~plain).tolist():
        row = rows[int(old_ids[i])]
        r_idx.append(np.full(len(row), i))
        c_idx.append(np.fromiter(row.keys(), dtype=np.int64, count=len(row)))
        vals.append(np.fromiter(row.values(), dtype=float, count=len(row)))
    pool = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
        shape=(len(old_ids), n_e),
    )
    owner = np.where(owner >= 0, remap[np.maximum(owner, 0)], -1)
    out = EdgeFeatureMesh(
        faces=new_faces,
        edges=edges,
        edge_faces=edge_faces,
        edge_nbrs=edge_nbrs,
        original_edges=efm.original_edges,
        owner=owner,
        collapse_value=collapse_value,
        latest_value=latest_value,
        history=history,
        steps=step + 1,
    )
    return pool, out


def edge_magnitudes(features):
    return np.linalg.norm(np.asarray(features), axis=-1)


def edge_pool(features, efm, target_edge_count):
    """Collapse the lowest-magnitude valid edges until ``target_edge_count`` remain.

    Returns
    -------
    pooled : Tensor, shape (E_out, F)
    efm_out : EdgeFeatureMesh
    """
    features = ad.as_tensor(features)
    pool, out = edge_pool_plan(edge_magnitudes(features.data), efm, target_edge_count)
    return ad.sparse_matmul(pool, features), out


def export_importance(efm, path):
    """Write one ``v_i v_j magnitude`` line per original edge.

    Raises
    ------
    ValueError
        If no pooling step has been recorded.
    """
    if efm.steps == 0:
        raise ValueError("no pooling step recorded; nothing to export")
    values = efm.importance()
    write_edge_attr(path, efm.original_edges, values)
    return values
