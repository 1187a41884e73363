"""Synthetic two-class mesh dataset standing in for anatomical shapes.

Every sample is an icosphere template pushed radially outward by a Gaussian
bump around its class's site, plus a smooth random quadratic displacement.
Class labels differ in the bump amplitude distribution (and optionally the
site). Samples keep the template connectivity unless ``vary_topology``
asks for an additional random decimation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decimation import decimate
from .io import load_mesh, save_mesh
from .mesh import TriMesh, icosphere


@dataclass
class SynthSpec:
    subdivision: int = 3
    counts_per_class: tuple = (282, 282)
    sites: tuple = ((0.0, 0.0, 1.0), (0.0, 0.0, 1.0))
    amplitude_mean: tuple = (0.10, 0.30)
    amplitude_std: tuple = (0.02, 0.02)
    bump_width: float = 0.45
    deformation_scale: float = 0.03
    rotate: bool = False
    vary_topology: bool = False
    topology_ratio: tuple = (0.6, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.counts_per_class = tuple(int(c) for c in self.counts_per_class)
        self.sites = tuple(tuple(float(x) for x in s) for s in self.sites)
        self.amplitude_mean = tuple(float(a) for a in self.amplitude_mean)
        self.amplitude_std = tuple(float(a) for a in self.amplitude_std)
        self.topology_ratio = tuple(float(r) for r in self.topology_ratio)
        n = len(self.counts_per_class)
        if n != 2 or len(self.sites) != n or len(self.amplitude_mean) != n or len(self.amplitude_std) != n:
            raise ValueError("two classes required, each with a site, amplitude mean and stddev")
        if self.amplitude_mean[0] == self.amplitude_mean[1]:
            raise ValueError("class amplitude means must differ")
        if any(c <= 0 for c in self.counts_per_class):
            raise ValueError("sample counts must be positive")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown dataset keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: (list(map(list, v)) if k == "sites" else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items()}

    def site(self, label):
        s = np.asarray(self.sites[label], dtype=float)
        return s / np.linalg.norm(s)


@dataclass
class Sample:
    mesh: TriMesh
    label: int
    shares_template: bool
    index: int = 0


@dataclass
class Dataset:
    template: TriMesh
    train: list
    test: list
    spec: SynthSpec = field(default_factory=SynthSpec)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _deform(template, spec, label, rng):
    v = template.vertices
    d = v / np.linalg.norm(v, axis=1, keepdims=True)
    site = spec.site(label)
    ang = np.arccos(np.clip(d @ site, -1.0, 1.0))
    amp = rng.normal(spec.amplitude_mean[label], spec.amplitude_std[label])
    radial = 1.0 + amp * np.exp(-(ang ** 2) / (2.0 * spec.bump_width ** 2))
    # smooth low-frequency displacement: random linear + quadratic field on the sphere
    lin = rng.standard_normal(3)
    quad = rng.standard_normal((3, 3))
    quad = 0.5 * (quad + quad.T)
    field_ = d @ lin + np.einsum("ij,jk,ik->i", d, quad, d)
    radial = radial + spec.deformation_scale * field_
    out = d * radial[:, None]
    if spec.rotate:
        out = out @ _random_rotation(rng).T
    return out


def generate(spec):
    """Build the template and a stratified 50/50 train/test split.

    Returns
    -------
    template : TriMesh
    train, test : list of Sample
    """
    template = icosphere(spec.subdivision)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(spec.counts_per_class)])
    seeds = np.random.SeedSequence(spec.seed).spawn(len(labels) + 1)
    split_rng = np.random.default_rng(seeds[-1])
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng(seeds[i])
        mesh = template.with_vertices(_deform(template, spec, int(label), rng))
        shares = True
        if spec.vary_topology:
            lo, hi = spec.topology_ratio
            target = int(np.floor(template.n_vertices * rng.uniform(lo, hi)))
            if target < template.n_vertices:
                mesh, _ = decimate(mesh, max(target, 4))
                shares = False
        samples.append(Sample(mesh, int(label), shares, i))
    train, test = [], []
    for k in range(len(spec.counts_per_class)):
        idx = np.flatnonzero(labels == k)
        idx = idx[split_rng.permutation(len(idx))]
        half = len(idx) // 2
        train += [samples[i] for i in sorted(idx[:half])]
        test += [samples[i] for i in sorted(idx[half:])]
    train.sort(key=lambda s: s.index)
    test.sort(key=lambda s: s.index)
    return template, train, test


def generate_dataset(spec):
    template, train, test = generate(spec)
    return Dataset(template, train, test, spec)


def bump_radius(mesh, site, width):
    """Mean vertex radius within one bump width of ``site``."""
    v = mesh.vertices
    r = np.linalg.norm(v, axis=1)
    ang = np.arccos(np.clip((v / r[:, None]) @ site, -1.0, 1.0))
    sel = ang <= width
    if not sel.any():
        sel = ang <= ang.min()
    return float(r[sel].mean())


def separability_check(spec, dataset=None):
    """Test accuracy of a logistic regression on the bump-site mean radius.

    A single scalar per sample (mean radius around the class-1 site) is the
    only input, so the score is a floor that any mesh network should beat.
    """
    from sklearn.linear_model import LogisticRegression

    ds = dataset if dataset is not None else generate_dataset(spec)
    site = spec.site(1)

    def xy(samples):
        x = np.array([[bump_radius(s.mesh, site, spec.bump_width)] for s in samples])
        y = np.array([s.label for s in samples])
        return x, y

    xtr, ytr = xy(ds.train)
    xte, yte = xy(ds.test)
    mu, sd = xtr.mean(), xtr.std() or 1.0
    clf = LogisticRegression().fit((xtr - mu) / sd, ytr)
    return float((clf.predict((xte - mu) / sd) == yte).mean())


def bump_region_edges(mesh, spec, label, width_factor=1.0):
    """Boolean mask over ``mesh.edges`` whose midpoint lies in the class bump."""
    v = mesh.vertices
    e = mesh.edges
    mid = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    ang = np.arccos(np.clip(mid @ spec.site(label), -1.0, 1.0))
    return ang <= width_factor * spec.bump_width


# ---------------------------------------------------------------------------
# on-disk layout: template.off, samples/<split>/<idx>_<label>.off, manifest.json


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(ds, directory):
    root = Path(directory)
    (root / "samples" / "train").mkdir(parents=True, exist_ok=True)
    (root / "samples" / "test").mkdir(parents=True, exist_ok=True)
    save_mesh(ds.template, root / "template.off")
    entries = []
    for split, samples in (("train", ds.train), ("test", ds.test)):
        for s in samples:
            rel = Path("samples") / split / f"{s.index}_{s.label}.off"
            save_mesh(s.mesh, root / rel)
            entries.append({
                "split": split, "index": s.index, "label": s.label,
                "shares_template": s.shares_template, "path": str(rel),
                "sha256": _sha(root / rel),
            })
    manifest = {
        "spec": ds.spec.to_dict(),
        "template": {"path": "template.off", "sha256": _sha(root / "template.off")},
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root / "manifest.json"


class DatasetError(RuntimeError):
    pass


def load_dataset(directory, verify=True):
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest in {root}: {exc}") from exc
    spec = SynthSpec.from_dict(manifest["spec"])
    if verify and _sha(root / "template.off") != manifest["template"]["sha256"]:
        raise DatasetError("template checksum mismatch")
    template = load_mesh(root / "template.off")
    train, test = [], []
    for e in manifest["samples"]:
        path = root / e["path"]
        if verify and _sha(path) != e["sha256"]:
            raise DatasetError(f"checksum mismatch for {e['path']}")
        s = Sample(load_mesh(path), int(e["label"]), bool(e["shares_template"]), int(e["index"]))
        (train if e["split"] == "train" else test).append(s)
    return Dataset(template, train, test, spec)
