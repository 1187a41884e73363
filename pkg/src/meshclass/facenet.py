"""Face-centric mesh operators: spatial descriptor, face rotate convolution,
face kernel correlation and the combination/aggregation mesh convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mesh import check_nondegenerate, face_normals, face_topology
from .nn import Linear, Mlp, Module, Parameter


@dataclass(frozen=True)
class FaceData:
    centers: np.ndarray  # (F, 3)
    corners: np.ndarray  # (F, 3, 3) vertex minus center, in winding order
    normals: np.ndarray  # (F, 3) unit
    neighbors: np.ndarray  # (F, 3) face across each side; self at boundaries

    @property
    def n_faces(self):
        return len(self.centers)


def face_data(mesh):
    """Centers, corner offsets, unit normals and edge-adjacent faces of every face."""
    check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    centers = tri.mean(axis=1)
    corners = tri - centers[:, None, :]
    normals = face_normals(v, f)
    _, edge_faces, _ = face_topology(f)
    he = mesh.halfedge_edges
    ef = edge_faces[he]  # (F, 3, 2)
    own = np.arange(len(f))[:, None]
    other = np.where(ef[..., 0] == own, ef[..., 1], ef[..., 0])
    neighbors = np.where(other >= 0, other, own)
    return FaceData(centers, corners, normals, neighbors)


def spatial_descriptor(centers, mlp):
    return mlp(ad.as_tensor(centers))


class FaceRotateConv(Module):
    """Shared ``pair_mlp`` on the cyclic corner pairs, averaged, then ``out_mlp``."""

    def __init__(self, widths_pair, widths_out, rng):
        if widths_pair[0] != 6:
            raise ValueError("corner pairs have 6 input channels")
        self.pair_mlp = Mlp(widths_pair, rng, activate_last=True)
        self.out_mlp = Mlp(widths_out, rng, activate_last=True)

    def forward(self, corners):
        return face_rotate_conv(corners, self)


def face_rotate_conv(corner_offsets, inner_mlps):
    """Apply the pair MLP to (OV1, OV2), (OV2, OV3), (OV3, OV1), average, then
    the output MLP. ``corner_offsets`` is ``(..., F, 3, 3)``."""
    c = ad.as_tensor(corner_offsets)
    if c.shape[-2:] != (3, 3):
        raise ValueError(f"corner offsets must end in (3, 3), got {c.shape}")
    ov = [c[..., k, :] for k in range(3)]
    acc = None
    for k in range(3):
        y = inner_mlps.pair_mlp(ad.concat([ov[k], ov[(k + 1) % 3]], axis=-1))
        acc = y if acc is None else acc + y
    return inner_mlps.out_mlp(acc * (1.0 / 3.0))


class KernelCorrelationLayer(Module):
    """``n_kernels`` learnable point sets of ``n_points`` unit vectors each.

    Points are stored as spherical angles so they stay on the unit sphere.
    """

    def __init__(self, n_kernels, n_points, rng, sigma=0.2):
        if sigma <= 0:
            raise ValueError("kernel bandwidth sigma must be positive")
        self.n_kernels, self.n_points, self.sigma = n_kernels, n_points, sigma
        self.theta = Parameter(rng.uniform(0.0, np.pi, (n_kernels, n_points)))
        self.phi = Parameter(rng.uniform(0.0, 2 * np.pi, (n_kernels, n_points)))

    def points(self):
        """Kernel points as a (3, M * m) tensor."""
        th = ad.reshape(self.theta, (-1,))
        ph = ad.reshape(self.phi, (-1,))
        st = ad.sin(th)
        return ad.stack([st * ad.cos(ph), st * ad.sin(ph), ad.cos(th)], axis=0)

    def forward(self, normals, neighbor_indices):
        return face_kernel_correlation(normals, neighbor_indices, self)


def face_kernel_correlation(normals, neighbor_indices, layer):
    """Mean Gaussian similarity between each face's normal (plus its three
    neighbours' normals) and every kernel's points.

    ``normals`` is ``(F, 3)`` or ``(B, F, 3)`` with matching ``neighbor_indices``.
    Returns ``(..., F, n_kernels)``.
    """
    if layer.sigma <= 0:
        raise ValueError("kernel bandwidth sigma must be positive")
    n = np.asarray(normals.data if isinstance(normals, ad.Tensor) else normals, dtype=float)
    nb = np.asarray(neighbor_indices)
    if nb.shape != n.shape[:-1] + (3,):
        raise ValueError(f"neighbour indices {nb.shape} do not match normals {n.shape}")
    sq = np.einsum("...i,...i->...", n, n)[..., None]
    s2 = 2.0 * layer.sigma ** 2
    # |n - p|^2 = |n|^2 + 1 - 2 n.p for unit kernel points
    dot = ad.matmul(n, layer.points())  # (..., F, M*m)
    k = ad.exp(ad.mul(dot, 2.0 / s2) - (sq + 1.0) / s2)
    k = ad.sum_(ad.reshape(k, k.shape[:-1] + (layer.n_kernels, layer.n_points)), axis=-1)
    # a face's group is itself plus its three neighbours, whose responses
    # are already rows of k
    per_sample = nb.ndim == 3
    total = k
    for j in range(3):
        total = total + ad.gather_rows(k, nb[..., j], per_sample=per_sample)
    return total * (1.0 / (4 * layer.n_points))


class MeshConvBlock(Module):
    def __init__(self, n_spatial, n_structural, out_spatial, out_structural, rng):
        self.n_spatial, self.n_structural = n_spatial, n_structural
        self.combination = Mlp([n_spatial + n_structural, out_spatial], rng, activate_last=True)
        # acts on the concatenated pair (own, neighbour) structural features
        self.aggregation = Linear(2 * n_structural, out_structural, rng)

    def forward(self, spatial, structural, neighbor_indices):
        return mesh_conv(spatial, structural, neighbor_indices, self)


def mesh_conv(spatial, structural, neighbor_indices, layers):
    """Combination (spatial + structural -> spatial') and max aggregation over
    the three neighbour pairs (structural -> structural').

    ``neighbor_indices`` is ``(F, 3)`` or per-sample ``(B, F, 3)``.
    """
    spatial, structural = ad.as_tensor(spatial), ad.as_tensor(structural)
    if spatial.shape[-1] != layers.n_spatial or structural.shape[-1] != layers.n_structural:
        raise ValueError("mesh_conv channel mismatch")
    if spatial.shape[:-1] != structural.shape[:-1]:
        raise ValueError("spatial and structural features cover different faces")
    nb = np.asarray(neighbor_indices)
    per_sample = nb.ndim == 3
    new_spatial = layers.combination(ad.concat([spatial, structural], axis=-1))
    # W [s_i; s_j] = W_own s_i + W_nbr s_j, and max commutes with the
    # monotone ReLU, so the neighbour term is projected once and maxed
    n = layers.n_structural
    w = layers.aggregation.weight
    own = ad.matmul(structural, w[:n]) + layers.aggregation.bias
    proj = ad.matmul(structural, w[n:])
    best = ad.gather_rows(proj, nb[..., 0], per_sample=per_sample)
    for j in (1, 2):
        best = ad.maximum(best, ad.gather_rows(proj, nb[..., j], per_sample=per_sample))
    return new_spatial, ad.relu(own + best)
