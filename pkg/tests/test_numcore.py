import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kgfewshot import numcore as nc


def _store(rng, **shapes):
    s = nc.ParameterStore()
    for name, shape in shapes.items():
        s.add(name, rng.normal(size=shape))
    return s


def test_hadamard_example():
    out = nc.hadamard(nc.Tensor([[2.0, 3.0]]), nc.Tensor([[4.0, 5.0]]))
    assert out.data.tolist() == [[8.0, 15.0]]


def test_elementwise_dispatch():
    x = nc.Tensor([[0.0, 1.0]])
    assert np.allclose(nc.elementwise("sub_from_one", x).data, [[1.0, 0.0]])
    assert np.allclose(nc.elementwise("sigmoid", x).data[0, 0], 0.5)
    with pytest.raises((ValueError, KeyError)):
        nc.elementwise("cube", x)


def test_matmul_shape_error():
    with pytest.raises(nc.DimensionError):
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))


def test_stable_sigmoid_extremes():
    vals = nc.stable_sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(vals))
    assert vals[0] == 0.0 and vals[2] == 1.0 and vals[1] == 0.5


def test_softmax_rows_sum_to_one(rng):
    x = nc.Tensor(rng.normal(size=(4, 6)) * 50)
    assert np.allclose(nc.softmax_rows(x).data.sum(axis=1), 1.0)


def test_segment_max_picks_largest():
    a = nc.Tensor([[0.1], [0.7], [0.3], [0.2]])
    out = nc.segment_max(a, [0, 0, 1, 1], 2)
    assert out.data[:, 0].tolist() == [0.7, 0.3]


def test_backward_twice_is_rejected(rng):
    s = _store(rng, w=(2, 2))
    loss = nc.sum_all(nc.matmul(nc.Tensor(np.ones((1, 2))), s["w"]))
    nc.backward(loss)
    with pytest.raises(nc.StaleTapeError):
        nc.backward(loss)


def test_no_grad_builds_no_tape(rng):
    s = _store(rng, w=(2, 2))
    with nc.no_grad():
        out = nc.matmul(nc.Tensor(np.ones((1, 2))), s["w"])
    assert not out.requires_grad


# --- gradient checks for every differentiable op ----------------------------------

OPS = {
    "matmul": lambda s: nc.matmul(s["a"], s["b"]),
    "add": lambda s: nc.add(s["a"], s["a2"]),
    "sub": lambda s: nc.sub(s["a"], s["a2"]),
    "hadamard": lambda s: nc.hadamard(s["a"], s["a2"]),
    "sigmoid": lambda s: nc.sigmoid(s["a"]),
    "tanh": lambda s: nc.tanh(s["a"]),
    "sub_from_one": lambda s: nc.sub_from_one(s["a"]),
    "softmax": lambda s: nc.softmax_rows(s["a"]),
    "layernorm": lambda s: nc.layernorm(s["a"], s["g"], s["bias"]),
    "concat": lambda s: nc.concat_cols([s["a"], s["a2"]]),
    "concat_rows": lambda s: nc.concat_rows([s["a"], s["a2"]]),
    "gather": lambda s: nc.gather_rows(s["a"], [2, 0, 2]),
    "repeat": lambda s: nc.repeat_rows(s["a"], 2),
    "segment_max": lambda s: nc.segment_max(s["a"], [0, 1, 1], 2),
    "transpose": lambda s: nc.transpose(s["a"]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op, rng):
    s = _store(rng, a=(3, 4), a2=(3, 4), b=(4, 2), g=(1, 4), bias=(1, 4))
    probe = rng.normal(size=OPS[op](s).shape)

    def loss():
        out = OPS[op](s)
        return nc.sum_all(nc.hadamard(out, nc.Tensor(probe)))

    report = nc.grad_check(s, loss, tol=1e-4)
    assert report.passed, str(report)


def test_bce_gradient(rng):
    s = _store(rng, x=(5, 1))
    target = (rng.random(5) > 0.5).astype(float)
    report = nc.grad_check(s, lambda: nc.bce(nc.sigmoid(s["x"]), target), tol=1e-4)
    assert report.passed, str(report)


def test_gated_update_gradient(rng):
    F = 4
    s = _store(rng, a=(3, F), h=(3, F), ub=(1, F), wza=(F, F), wzh=(F, F), bz=(1, F),
               wra=(F, F), wrh=(F, F), br=(1, F), wua=(F, F), wuh=(F, F))
    probe = rng.normal(size=(3, F))

    def loss():
        h, _, _ = nc.gated_update(*(s[n] for n in ("a", "h", "ub", "wza", "wzh", "bz",
                                                   "wra", "wrh", "br", "wua", "wuh")))
        return nc.sum_all(nc.hadamard(h, nc.Tensor(probe)))

    report = nc.grad_check(s, loss, tol=1e-4)
    assert report.passed, str(report)


def test_gradcheck_catches_corrupted_gradient(rng):
    s = _store(rng, w=(2, 3))
    x = nc.Tensor(rng.normal(size=(1, 2)))

    def loss():
        return nc.sum_all(nc.tanh(nc.matmul(x, s["w"])))

    bad = {"w": np.zeros((2, 3))}
    assert not nc.grad_check(s, loss, analytic=bad).passed


def test_mlp_gradient(rng):
    spec = nc.MlpSpec((3, 5, 2), "tanh", "sigmoid")
    s = nc.ParameterStore()
    nc.mlp_init(spec, s, "m", rng)
    x = nc.Tensor(rng.normal(size=(4, 3)))
    report = nc.grad_check(s, lambda: nc.sum_all(nc.mlp_forward(spec, s, x, "m")))
    assert report.passed, str(report)


# --- optimiser ------------------------------------------------------------------------

def test_sgd_masked_entries_stay_bit_identical(rng):
    s = _store(rng, w=(3, 3))
    before = s["w"].data.copy()
    mask = np.zeros((3, 3))
    mask[:, 1] = 1
    opt = nc.SGD(s, ["w"], lr=0.5, masks={"w": mask})
    for _ in range(5):
        s.zero_grad()
        nc.backward(nc.sum_all(nc.tanh(s["w"])))
        opt.step()
    after = s["w"].data
    assert np.array_equal(after[:, [0, 2]], before[:, [0, 2]])
    assert not np.array_equal(after[:, 1], before[:, 1])


def test_sgd_clipping_bounds_step(rng):
    s = _store(rng, w=(2, 2))
    opt = nc.SGD(s, ["w"], lr=1.0, momentum=0.0, clip_norm=0.1)
    before = s["w"].data.copy()
    s.zero_grad()
    nc.backward(nc.scale(nc.sum_all(s["w"]), 100.0))
    opt.step()
    assert np.linalg.norm(s["w"].data - before) == pytest.approx(0.1)


# --- parameter store ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=4),
                           elements=st.floats(-1e6, 1e6)), min_size=1, max_size=4))
def test_store_round_trip(arrays):
    s = nc.ParameterStore()
    for i, a in enumerate(arrays):
        s.add(f"p{i}", a)
    back = nc.ParameterStore.from_bytes(s.to_bytes())
    assert back.names() == s.names()
    for n in s.names():
        assert np.array_equal(back[n].data, s[n].data)


def test_store_rejects_truncation(rng):
    s = _store(rng, w=(2, 2))
    blob = s.to_bytes()
    with pytest.raises(nc.ParameterFormatError):
        nc.ParameterStore.from_bytes(blob[:-3])
    with pytest.raises(nc.ParameterFormatError):
        nc.ParameterStore.from_bytes(b"XXXX" + blob[4:])


def test_missing_parameter_raises():
    with pytest.raises(nc.ConfigurationError):
        nc.ParameterStore()["nope"]
