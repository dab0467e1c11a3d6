import numpy as np
import pytest

from fleetsense.nn import (AdamState, Mlp, NonFiniteError, ShapeError, Tensor, adam_step, grad_check,
                           load_checkpoint, no_grad, save_checkpoint)
from fleetsense.nn import autodiff as ad
from fleetsense.nn.checkpoint import CheckpointError


def test_softmax_examples():
    p = ad.masked_softmax(Tensor([[0.0, 0.0]]), [[True, True]]).data
    assert np.allclose(p, [[0.5, 0.5]])
    p = ad.masked_softmax(Tensor([[5.0, 100.0]]), [[True, False]]).data
    assert np.array_equal(p, [[1.0, 0.0]])


def test_all_masked_softmax_errors():
    with pytest.raises(ValueError):
        ad.masked_softmax(Tensor([[1.0, 2.0]]), [[False, False]])
    with pytest.raises(ValueError):
        ad.masked_log_softmax(Tensor([[1.0, 2.0]]), [[False, False]])


def test_segment_mean_example():
    out = ad.segment_mean(Tensor([[2.0], [4.0]]), [0, 0], 1)
    assert out.data.tolist() == [[3.0]]


def test_segment_mean_dense_and_sparse_agree(rng):
    x = rng.standard_normal((40, 3))
    seg = rng.integers(0, 7, size=40)
    a = Tensor(x, requires_grad=True)
    b = Tensor(x.copy(), requires_grad=True)
    da = ad.segment_mean(a, seg, 8)
    db = ad.segment_mean(b, seg, 8, op=ad.SegmentOp(seg, 8))
    assert np.allclose(da.data, db.data)
    g = rng.standard_normal((8, 3))
    da.backward(g)
    db.backward(g)
    assert np.allclose(a.grad, b.grad)
    assert np.all(da.data[7] == 0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.segment_mean(Tensor(np.ones((2, 1))), [0, 3], 2)


def test_non_finite_surfaces():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        with np.errstate(over="ignore"):
            ad.exp(Tensor([1000.0]))


def test_grad_check_square():
    th = {"x": Tensor(np.array([3.0]), requires_grad=True)}
    err = grad_check(lambda p: ad.sum(ad.square(p["x"])), th)
    assert th["x"].grad[0] == 6.0
    assert err <= 1e-9


def _all_ops_loss(p, x, mask, seg):
    h = ad.tanh(ad.add_bias(ad.matmul(x, p["W"]), p["b"]))
    h = ad.relu(ad.add(h, 0.1))
    g = ad.segment_mean(ad.gather_rows(h, [0, 1, 1, 3, 2]), seg, 3)
    lp = ad.masked_log_softmax(g, mask)
    pr = ad.masked_softmax(g, mask)
    picked = ad.pick(lp, [0, 1, 2])
    r = ad.exp(ad.clip(picked, -3.0, 0.0))
    v = ad.maximum(ad.square(ad.sub(r, 0.5)), ad.minimum(r, 0.3))
    return ad.add(ad.mean(v), ad.mul(ad.sum(ad.mul(pr, lp)), -0.1))


def test_grad_check_composite(rng):
    p = {"W": Tensor(rng.standard_normal((4, 3)), requires_grad=True),
         "b": Tensor(rng.standard_normal(3), requires_grad=True)}
    x = Tensor(rng.standard_normal((4, 4)))
    mask = np.array([[True, True, False], [True, True, True], [False, True, True]])
    seg = [0, 1, 1, 2, 2]
    assert grad_check(lambda q: _all_ops_loss(q, x, mask, seg), p) <= 1e-6


def test_grad_check_mlp(rng):
    params = {}
    net = Mlp.create(params, "m", [5, 8, 8, 3], rng)
    x = Tensor(rng.standard_normal((6, 5)))
    y = rng.standard_normal((6, 3))
    assert grad_check(lambda p: ad.mean(ad.square(ad.sub(net(x), y))), params) <= 1e-4


def test_mlp_has_three_layers(rng):
    params = {}
    Mlp.create(params, "actor", [10, 64, 64, 7], rng)
    assert sorted(params) == ["actor.W0", "actor.W1", "actor.W2", "actor.b0", "actor.b1", "actor.b2"]
    assert params["actor.W1"].shape == (64, 64)


def test_no_grad_skips_tape():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = ad.matmul(w, w)
    assert not y.requires_grad and y._parents == ()


def test_deterministic_forward(rng):
    params = {}
    net = Mlp.create(params, "m", [5, 8, 2], rng)
    x = Tensor(rng.standard_normal((9, 5)))
    assert np.array_equal(net(x).data, net(x).data)


def test_adam_zero_grads_unchanged():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)}
    adam_step(p, {"w": np.array([0.3, -7.0, 1e-3])}, AdamState(), 0.01)
    assert np.allclose(p["w"].data, 1.0 - 0.01 * np.array([1, -1, 1]), atol=1e-7)


def test_adam_deterministic_and_rejects_nan():
    def run():
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        s = AdamState()
        for g in (0.1, -0.4):
            adam_step(p, {"w": np.array([g])}, s, 0.01)
        return p["w"].data.copy()
    assert np.array_equal(run(), run())
    with pytest.raises(NonFiniteError):
        adam_step({"w": Tensor([1.0])}, {"w": np.array([np.inf])}, AdamState(), 0.1)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    t = {"a.W": Tensor(rng.standard_normal((3, 4))), "b": Tensor(rng.standard_normal(5))}
    save_checkpoint(tmp_path / "c.npz", t, {"seed": 3})
    arrays, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"seed": 3}
    for k in t:
        assert arrays[k].tobytes() == t[k].data.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.npz")
    np.savez(tmp_path / "bad.npz", x=np.ones(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")
