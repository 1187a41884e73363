import numpy as np
import pytest

from meshclass import autodiff as ad
from meshclass.bench import RunConfig
from meshclass.models import build_model
from meshclass.nn import Adam, Linear, Mlp, Module, adam_step, count_parameters, glorot, load_checkpoint, save_checkpoint


def test_mlp_parameter_count():
    rng = np.random.default_rng(0)
    assert count_parameters(Mlp([5, 3, 2], rng)) == 26
    assert count_parameters(Mlp([10], rng)) == 0


@pytest.mark.parametrize("widths", [[3, 7], [4, 8, 8, 2], [1, 1, 1]])
def test_mlp_count_formula(widths):
    expect = sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))
    assert count_parameters(Mlp(widths, np.random.default_rng(0))) == expect


def test_glorot_bounds_and_determinism():
    w = glorot(np.random.default_rng(3), 20, 30)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
    assert np.array_equal(w, glorot(np.random.default_rng(3), 20, 30))


def test_adam_first_step_is_lr():
    p = np.array([1.0])
    adam_step([p], [np.array([1.0])], {}, lr=0.1)
    assert p[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_keeps_param():
    p = np.array([2.5, -1.0])
    adam_step([p], [np.zeros(2)], {}, lr=0.1)
    np.testing.assert_array_equal(p, [2.5, -1.0])


def test_adam_descends_quadratic():
    x = np.array([1.0])
    state, mags = {}, [1.0]
    for _ in range(3):
        adam_step([x], [2 * x], state, lr=0.1)
        mags.append(abs(x[0]))
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], {})


def test_adam_class_uses_grads():
    lin = Linear(2, 1, np.random.default_rng(0))
    opt = Adam(lin.parameters(), lr=0.05)
    x = np.array([[1.0, 2.0]])
    before = ad.sum_(lin(x)).data[0]
    for _ in range(5):
        opt.zero_grad()
        ad.sum_(lin(x)).backward()
        opt.step()
    assert ad.sum_(lin(x)).data[0] < before


class _Twice(Module):
    def __init__(self, rng):
        self.a = Linear(2, 2, rng)
        self.layers = [Linear(2, 2, rng), Linear(2, 1, rng)]


def test_parameter_names_unique_and_ordered():
    m = _Twice(np.random.default_rng(0)).assign_names()
    names = [p.name for p in m.parameters()]
    assert names == ["a.weight", "a.bias", "layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]


def test_checkpoint_round_trip(tmp_path):
    m = _Twice(np.random.default_rng(0)).assign_names()
    save_checkpoint(m, tmp_path / "c.bin")
    other = _Twice(np.random.default_rng(1)).assign_names()
    load_checkpoint(other, tmp_path / "c.bin")
    for p, q in zip(m.parameters(), other.parameters()):
        assert np.array_equal(p.data, q.data)


def test_checkpoint_layout(tmp_path):
    m = Linear(2, 3, np.random.default_rng(0))
    m.assign_names()
    save_checkpoint(m, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"MCKPT1\x00\x00" and int.from_bytes(raw[8:12], "little") == 2
    name_len = int.from_bytes(raw[12:16], "little")
    assert raw[16 : 16 + name_len] == b"weight"
    payload = np.frombuffer(raw, "<f8", count=6, offset=16 + name_len + 4 + 16)
    np.testing.assert_array_equal(payload.reshape(2, 3), m.weight.data)


def test_checkpoint_mismatch_rejected(tmp_path):
    save_checkpoint(Linear(2, 3, np.random.default_rng(0)).assign_names(), tmp_path / "c.bin")
    with pytest.raises(KeyError):
        load_checkpoint(_Twice(np.random.default_rng(0)).assign_names(), tmp_path / "c.bin")


def test_default_come_smaller_than_meshnet():
    from meshclass.mesh import icosphere

    t = icosphere(2)
    come = build_model(RunConfig.for_model("come", pool_factors=[0.5, 0.5, 0.5]), t)
    meshnet = build_model(RunConfig.for_model("meshnet"))
    assert count_parameters(come) < count_parameters(meshnet)
