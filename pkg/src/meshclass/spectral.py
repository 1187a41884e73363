"""Normalised graph Laplacian and truncated Chebyshev graph convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .mesh import TriMesh
from .nn import Module, Parameter, glorot

LAMBDA_MAX = 2.0


@dataclass(frozen=True)
class ScaledLaplacian:
    """``L~ = 2 L / lambda_max - I`` with ``L = I - D^-1/2 A D^-1/2``."""

    matrix: sparse.csr_matrix
    laplacian: sparse.csr_matrix
    lambda_max: float = LAMBDA_MAX

    @property
    def n(self):
        return self.matrix.shape[0]


def normalized_laplacian(mesh_or_adjacency):
    """Build the scaled Laplacian of a mesh or a symmetric adjacency matrix.

    Raises
    ------
    ValueError
        If any vertex has no neighbours.
    """
    if isinstance(mesh_or_adjacency, TriMesh):
        a = mesh_or_adjacency.adjacency
    else:
        a = mesh_or_adjacency
    a = sparse.csr_matrix(a, dtype=np.float64)
    a.setdiag(0)
    a.eliminate_zeros()
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    if (deg == 0).any():
        raise ValueError(f"isolated vertex {int(np.argmax(deg == 0))}")
    d = sparse.diags(1.0 / np.sqrt(deg))
    n = a.shape[0]
    eye = sparse.identity(n, format="csr")
    lap = (eye - d @ a @ d).tocsr()
    scaled = (2.0 / LAMBDA_MAX * lap - eye).tocsr()
    return ScaledLaplacian(scaled, lap)


class ChebConvLayer(Module):
    """K Chebyshev weight matrices (F_in x F_out) and a bias."""

    def __init__(self, n_in, n_out, order, rng):
        if order < 1:
            raise ValueError("Chebyshev order K must be positive")
        self.order = order
        self.n_in, self.n_out = n_in, n_out
        self.theta = [Parameter(glorot(rng, n_in * order, n_out, (n_in, n_out))) for _ in range(order)]
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, lap, x):
        return cheb_conv(self, lap, x)


def cheb_conv(layer, lap, x):
    """``sum_k T_k(L~) X theta_k + bias`` via the three-term recurrence.

    ``x`` may be ``(N, F_in)`` or batched ``(B, N, F_in)``.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != layer.n_in or x.shape[-2] != lap.n:
        raise ValueError(
            f"cheb_conv expects (..., {lap.n}, {layer.n_in}) input, got {x.shape}"
        )
    L = lap.matrix
    t_prev = x
    out = ad.matmul(x, layer.theta[0])
    if layer.order > 1:
        t_cur = ad.sparse_matmul(L, x)
        out = out + ad.matmul(t_cur, layer.theta[1])
        for k in range(2, layer.order):
            t_next = ad.sub(ad.mul(ad.sparse_matmul(L, t_cur), 2.0), t_prev)
            out = out + ad.matmul(t_next, layer.theta[k])
            t_prev, t_cur = t_cur, t_next
    return out + layer.bias
