"""Spiral sequences on a template mesh and the spiral convolution operator."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import MeshError
from .nn import Module, Parameter, glorot

PAD = -1


@dataclass(frozen=True)
class SpiralTable:
    """Fixed-length spiral per vertex; ``PAD`` (-1) marks missing entries."""

    indices: np.ndarray

    @property
    def length(self):
        return self.indices.shape[1]

    @property
    def n_vertices(self):
        return self.indices.shape[0]

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.indices, dtype="<i8").tobytes()).hexdigest()


def _rotation(mesh):
    """Per vertex, ``succ[v][a] = b`` for each face ``(v, a, b)`` in winding order."""
    succ = [dict() for _ in range(mesh.n_vertices)]
    for f in mesh.faces:
        f = [int(i) for i in f]
        for k in range(3):
            v, a, b = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            if a in succ[v]:
                raise MeshError(f"non-manifold or inconsistently wound vertex {v}")
            succ[v][a] = b
    return succ


def _ordered_ring(v, succ_v, nbrs_v, start):
    """One-ring of ``v`` in rotational order beginning at ``start``.

    Open fans (boundary vertices) run forward from ``start`` to the end of
    the fan and then wrap to the fan's first vertex.
    """
    ring = [start]
    cur = succ_v.get(start)
    while cur is not None and cur != start:
        ring.append(cur)
        cur = succ_v.get(cur)
    if cur is None:
        pred = {b: a for a, b in succ_v.items()}
        head = start
        back = []
        while head in pred and pred[head] != start:
            head = pred[head]
            back.append(head)
        ring += back[::-1]
    if len(ring) != len(nbrs_v) or set(ring) != nbrs_v:
        raise MeshError(f"non-manifold vertex {v}: neighbourhood is not a single fan")
    return ring


def build_spirals(mesh, length):
    """Spiral sequence of ``length`` entries for every vertex.

    Entry 0 is the vertex itself, followed by its one-ring in rotational
    order starting at the smallest-index neighbour. Outer rings follow: each
    ring vertex, in ring order, contributes its not-yet-visited neighbours
    in the same rotational order, starting just after the vertex that
    reached it. Short spirals are padded with ``PAD``.

    Raises
    ------
    MeshError
        If a vertex neighbourhood is not a single consistently wound fan.
    """
    if length < 1:
        raise ValueError("spiral length must be positive")
    succ = _rotation(mesh)
    n = mesh.n_vertices
    nbrs = [set() for _ in range(n)]
    for a, b in mesh.edges:
        nbrs[int(a)].add(int(b))
        nbrs[int(b)].add(int(a))
    rings = {}

    def ring_of(v):
        r = rings.get(v)
        if r is None:
            r = rings[v] = _ordered_ring(v, succ[v], nbrs[v], min(nbrs[v]))
        return r

    table = np.full((n, length), PAD, dtype=np.int64)
    for v in range(n):
        seq = [v]
        if length > 1 and nbrs[v]:
            visited = {v}
            frontier = ring_of(v)
            seq += frontier
            visited.update(frontier)
            parent = {u: v for u in frontier}
            while len(seq) < length and frontier:
                nxt = []
                for u in frontier:
                    ring = ring_of(u)
                    k = ring.index(parent[u])
                    for w in ring[k + 1 :] + ring[:k]:
                        if w not in visited:
                            visited.add(w)
                            parent[w] = u
                            nxt.append(w)
                seq += nxt
                frontier = nxt
        seq = seq[:length]
        table[v, : len(seq)] = seq
    table.setflags(write=False)
    return SpiralTable(table)


def save_spirals(table, path):
    """One whitespace-separated integer row per vertex (``-1`` = pad)."""
    np.savetxt(path, table.indices, fmt="%d")


def load_spirals(path):
    idx = np.loadtxt(path, dtype=np.int64, ndmin=2)
    idx.setflags(write=False)
    return SpiralTable(idx)


def spiral_gather(x, table):
    """Concatenate features along each spiral: ``(.., N, F) -> (.., N, l*F)``."""
    x = ad.as_tensor(x)
    if x.shape[-2] != table.n_vertices:
        raise ValueError(f"spiral table has {table.n_vertices} vertices, features have {x.shape[-2]}")
    g = ad.gather_rows(x, table.indices)
    return ad.reshape(g, g.shape[:-2] + (table.length * x.shape[-1],))


class SpiralConvLayer(Module):
    def __init__(self, n_in, n_out, length, rng):
        self.n_in, self.n_out, self.length = n_in, n_out, length
        self.weight = Parameter(glorot(rng, length * n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x, table):
        return spiral_conv(self, x, table)


def spiral_conv(layer, x, table):
    """Spiral gather followed by one shared linear layer."""
    if table.length != layer.length:
        raise ValueError(f"layer expects spirals of length {layer.length}, table has {table.length}")
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"layer expects {layer.n_in} input channels, got {x.shape[-1]}")
    return ad.matmul(spiral_gather(x, table), layer.weight) + layer.bias
