"""Parameters, modules, the shared MLP, Adam and checkpoint files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A trainable tensor. ``name`` is assigned when its owning model is built."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name


def glorot(rng, fan_in, fan_out, shape=None):
    """Uniform in ``[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


class Module:
    """Base class: parameters, sub-modules and constant buffers are discovered
    from instance attributes (including lists of modules) in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def buffers(self):
        """Named non-trainable arrays stored alongside parameters in checkpoints."""
        return {}

    def load_buffers(self, buffers):
        if buffers:
            raise KeyError(f"unexpected buffers {sorted(buffers)}")

    def assign_names(self):
        names = set()
        for name, p in self.named_parameters():
            if name in names:
                raise ValueError(f"duplicate parameter name {name}")
            names.add(name)
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = Parameter(glorot(rng, n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class Mlp(Module):
    """Stack of linear layers with ReLU between them.

    ``widths = [w0, w1, ..., wk]`` gives k layers. With ``activate_last`` the
    output also passes through ReLU, which is how shared per-element MLPs
    are used inside the networks; classifier heads leave it off.
    """

    def __init__(self, widths, rng, activate_last=False):
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        self.widths = list(widths)
        self.activate_last = activate_last
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.activate_last:
                x = ad.relu(x)
        return x


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    Parameters
    ----------
    params, grads : list of ndarray
    state : dict
        ``{"t": int, "m": [...], "v": [...]}``; empty dict means fresh state.

    Returns
    -------
    params, state
    """
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   magic   b"MCKPT1\0\0"
#   u32     tensor count
#   per tensor:
#     u32 name length, utf-8 name
#     u32 ndim, ndim x u64 dims
#     prod(dims) x float64 payload
# Buffers are stored as tensors whose name starts with "buffer:".

MAGIC = b"MCKPT1\x00\x00"


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out


def save_checkpoint(model, path):
    tensors = {name: p.data for name, p in model.named_parameters()}
    for name, arr in model.buffers().items():
        tensors[f"buffer:{name}"] = arr
    save_tensors(path, tensors)


def load_checkpoint(model, path):
    tensors = load_tensors(path)
    params = dict(model.named_parameters())
    buffers = {k[len("buffer:"):]: v for k, v in tensors.items() if k.startswith("buffer:")}
    stored = {k: v for k, v in tensors.items() if not k.startswith("buffer:")}
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, arr in stored.items():
        if params[name].shape != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {params[name].shape}")
        params[name].data[...] = arr
    model.load_buffers(buffers)
    return model
