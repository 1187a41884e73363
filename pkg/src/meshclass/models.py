"""The five classifiers compared by the benchmark.

Template-based models (``come``, ``spiralnet``) precompute their pooling
hierarchy, Laplacians and spiral tables once on the template and look them
up from a :class:`TemplateCache` during every forward pass. Template-free
models (``meshcnn``, ``meshnet``, ``pointnet``) derive all structure from
each sample's own mesh.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .decimation import build_hierarchy
from .edgenet import EdgeConvLayer, EdgeFeatureMesh, edge_conv, edge_input_features, edge_magnitudes, edge_pool_plan
from .facenet import FaceRotateConv, KernelCorrelationLayer, MeshConvBlock, face_data, mesh_conv
from .nn import Linear, Mlp, Module
from .spectral import ChebConvLayer, cheb_conv, normalized_laplacian
from .spiral import SpiralConvLayer, build_spirals, spiral_conv

MODEL_IDS = ("come", "spiralnet", "meshcnn", "meshnet", "pointnet")
TEMPLATE_MODELS = ("come", "spiralnet")
DISPLAY_NAMES = {
    "pointnet": "PointNet",
    "meshcnn": "MeshCNN",
    "meshnet": "MeshNet",
    "come": "CoME",
    "spiralnet": "SpiralNet++",
}


class TemplateMismatch(ValueError):
    """A template-based model met a sample without template connectivity (or vice versa)."""


class TemplateCache:
    """Structures derived once from the template, with lookup counters."""

    def __init__(self, template, factors):
        self.template = template
        self.hierarchy = build_hierarchy(template, factors)
        self._store = {}
        self.builds = 0
        self.hits = 0
        self.face_hash = template.face_hash()

    def get(self, kind, level, factory):
        key = (kind, level)
        if key not in self._store:
            self._store[key] = factory(self.hierarchy.levels[level])
            self.builds += 1
        else:
            self.hits += 1
        return self._store[key]

    def down_map(self, level):
        self.hits += 1
        return self.hierarchy.down_maps[level]


def _stack_if_uniform(arrays):
    shapes = {a.shape for a in arrays}
    return np.stack(arrays) if len(shapes) == 1 else None


class _TemplateModel(Module):
    def __init__(self, config, template):
        if template is None:
            raise TemplateMismatch(f"{config.model} needs a template mesh")
        self._cache = TemplateCache(template, config.pool_factors)
        self._template = template
        n_levels = len(self._cache.hierarchy.levels)
        if len(config.widths) != n_levels:
            raise ValueError(
                f"{config.model}: {len(config.widths)} conv widths for {n_levels} hierarchy levels"
            )

    @property
    def cache(self):
        return self._cache

    def encode(self, sample):
        if not sample.shares_template or sample.mesh.face_hash() != self._cache.face_hash:
            raise TemplateMismatch(
                "template-based model requires samples with the template's connectivity"
            )
        return sample.mesh.vertices - self._template.vertices

    def collate(self, encoded):
        return np.stack(encoded)

    def prepare(self, encoded_train):
        pass

    def forward(self, x):
        h = ad.as_tensor(x)
        n_levels = len(self.convs)
        for level, conv in enumerate(self.convs):
            h = ad.relu(self._conv(conv, level, h))
            if level < n_levels - 1:
                h = ad.sparse_matmul(self._cache.down_map(level), h)
        return self.head(ad.mean(h, axis=-2))


class CoME(_TemplateModel):
    """Chebyshev convolutions on the template hierarchy, mean-pooled, linear head."""

    def __init__(self, config, template, rng):
        super().__init__(config, template)
        widths = [3] + list(config.widths)
        self.convs = [ChebConvLayer(a, b, config.cheb_k, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Linear(widths[-1], 2, rng)

    def _conv(self, conv, level, h):
        lap = self._cache.get("laplacian", level, normalized_laplacian)
        return cheb_conv(conv, lap, h)


class SpiralNet(_TemplateModel):
    """Spiral convolutions on the template hierarchy, mean-pooled, linear head."""

    def __init__(self, config, template, rng):
        super().__init__(config, template)
        self._length = config.spiral_length
        widths = [3] + list(config.widths)
        self.convs = [
            SpiralConvLayer(a, b, config.spiral_length, rng) for a, b in zip(widths[:-1], widths[1:])
        ]
        self.head = Linear(widths[-1], 2, rng)

    def _conv(self, conv, level, h):
        table = self._cache.get("spiral", level, lambda m: build_spirals(m, self._length))
        return spiral_conv(conv, h, table)


class _PerSampleModel(Module):
    """Batches samples of equal size; falls back to one-by-one otherwise."""

    def forward(self, batch):
        if batch.get("stacked", True):
            return self._forward(batch)
        outs = [self._forward(b) for b in batch["items"]]
        return ad.concat(outs, axis=0)

    def prepare(self, encoded_train):
        pass


class MeshCNN(_PerSampleModel):
    """Edge convolutions with magnitude-driven edge-collapse pooling.

    Input features are standardised with per-channel statistics of the
    training edges (stored as buffers).
    """

    def __init__(self, config, template, rng):
        if template is not None:
            raise TemplateMismatch("meshcnn is template-free; do not pass a template")
        widths = [5] + list(config.widths)
        self.convs = [EdgeConvLayer(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.pool_ratios = list(config.edge_pool_ratios)
        if len(self.pool_ratios) != len(self.convs):
            raise ValueError("one edge pooling ratio per edge convolution required")
        self.head = Mlp([widths[-1]] + list(config.head) + [2], rng)
        self._mean = np.zeros(5)
        self._std = np.ones(5)
        self.last_meshes = None

    def buffers(self):
        return {"feature_mean": self._mean, "feature_std": self._std}

    def load_buffers(self, buffers):
        self._mean = np.asarray(buffers["feature_mean"], dtype=float)
        self._std = np.asarray(buffers["feature_std"], dtype=float)

    def prepare(self, encoded_train):
        feats = np.concatenate([e[0] for e in encoded_train])
        self._mean = feats.mean(axis=0)
        self._std = feats.std(axis=0) + 1e-8

    def encode(self, sample):
        return edge_input_features(sample.mesh), EdgeFeatureMesh.from_mesh(sample.mesh)

    def collate(self, encoded):
        feats = _stack_if_uniform([e[0] for e in encoded])
        if feats is None:
            return {"stacked": False, "items": [self.collate([e]) for e in encoded]}
        return {"features": feats, "meshes": [e[1] for e in encoded]}

    @staticmethod
    def pool_target(n_edges, ratio):
        # edge collapses remove three edges each
        return n_edges - 3 * int(round(n_edges * (1.0 - ratio) / 3.0))

    def _forward(self, batch):
        meshes = list(batch["meshes"])
        h = ad.Tensor((batch["features"] - self._mean) / self._std)
        for conv, ratio in zip(self.convs, self.pool_ratios):
            nbrs = np.stack([m.edge_nbrs for m in meshes])
            h = ad.relu(edge_conv(conv, h, nbrs))
            mags = edge_magnitudes(h.data)
            target = self.pool_target(h.shape[1], ratio)
            plans = [edge_pool_plan(mags[b], m, target) for b, m in enumerate(meshes)]
            h = ad.block_diag_apply([p[0] for p in plans], h)
            meshes = [p[1] for p in plans]
        self.last_meshes = meshes
        return self.head(ad.mean(h, axis=1))


class MeshNet(_PerSampleModel):
    """Face descriptors, combination/aggregation mesh convolutions, global max."""

    def __init__(self, config, template, rng):
        if template is not None:
            raise TemplateMismatch("meshnet is template-free; do not pass a template")
        s = config.spatial_width
        self.spatial = Mlp([3, s, s], rng, activate_last=True)
        self.rotate = FaceRotateConv([6, 32, 32], [32, s], rng)
        self.kernels = KernelCorrelationLayer(config.kc_kernels, config.kc_points, rng, config.kc_sigma)
        n_sp, n_st = s, s + config.kc_kernels
        self.blocks = []
        for w in config.widths:
            self.blocks.append(MeshConvBlock(n_sp, n_st, w, w, rng))
            n_sp = n_st = w
        self.fuse = Mlp([n_sp + n_st, config.fuse_width], rng, activate_last=True)
        self.head = Mlp([config.fuse_width] + list(config.head) + [2], rng)

    def encode(self, sample):
        return face_data(sample.mesh)

    def collate(self, encoded):
        if len({e.n_faces for e in encoded}) != 1:
            return {"stacked": False, "items": [self.collate([e]) for e in encoded]}
        return {
            "centers": np.stack([e.centers for e in encoded]),
            "corners": np.stack([e.corners for e in encoded]),
            "normals": np.stack([e.normals for e in encoded]),
            "neighbors": np.stack([e.neighbors for e in encoded]),
        }

    def _forward(self, batch):
        nb = batch["neighbors"]
        spatial = self.spatial(ad.Tensor(batch["centers"]))
        structural = ad.concat(
            [self.rotate(batch["corners"]), self.kernels(batch["normals"], nb)], axis=-1
        )
        for block in self.blocks:
            spatial, structural = mesh_conv(spatial, structural, nb, block)
        h = self.fuse(ad.concat([spatial, structural], axis=-1))
        return self.head(ad.max_(h, axis=1))


class PointNet(_PerSampleModel):
    """Shared per-point MLP, global max, MLP head; vertices are the points."""

    def __init__(self, config, template, rng):
        if template is not None:
            raise TemplateMismatch("pointnet is template-free; do not pass a template")
        self.point_mlp = Mlp([3] + list(config.widths), rng, activate_last=True)
        self.head = Mlp([config.widths[-1]] + list(config.head) + [2], rng)

    def encode(self, sample):
        return np.asarray(sample.mesh.vertices)

    def collate(self, encoded):
        pts = _stack_if_uniform(encoded)
        if pts is None:
            return {"stacked": False, "items": [self.collate([e]) for e in encoded]}
        return {"points": pts}

    def _forward(self, batch):
        h = self.point_mlp(ad.Tensor(batch["points"]))
        return self.head(ad.max_(h, axis=1))


_CLASSES = {"come": CoME, "spiralnet": SpiralNet, "meshcnn": MeshCNN, "meshnet": MeshNet, "pointnet": PointNet}


def build_model(config, template=None):
    """Instantiate ``config.model`` with parameters drawn from ``config.seed``.

    Raises
    ------
    TemplateMismatch
        If a template is missing for a template-based model or supplied to a
        template-free one.
    """
    if config.model not in _CLASSES:
        raise ValueError(f"unknown model {config.model!r}; expected one of {MODEL_IDS}")
    rng = np.random.default_rng(config.seed)
    model = _CLASSES[config.model](config, template, rng)
    model.model_id = config.model
    return model.assign_names()
