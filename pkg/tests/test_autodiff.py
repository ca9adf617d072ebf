import numpy as np
import pytest

from cvmtl import autodiff as ad
from cvmtl.autodiff import Tensor
from cvmtl.errors import CheckpointError, ContractError, DimensionError, StateError

from conftest import finite_difference_grad, rel_err


def scalar_loss(t):
    # sum of sin keeps gradients non-constant without kinks
    data = t.data
    out = ad.tsum(t * Tensor(np.cos(data * 0 + 1)) + t * t * 0.1)
    return out


def check_grad(build, x_data, tol=1e-4, step=1e-5):
    """build(tensor) -> scalar Tensor; compares reverse-mode grad to central FD."""
    x = Tensor(x_data.copy(), requires_grad=True)
    loss = build(x)
    ad.backward(loss)
    fd = finite_difference_grad(lambda: float(build(Tensor(x.data)).data), x.data, step)
    assert rel_err(x.grad, fd) < tol, f"grad mismatch: {rel_err(x.grad, fd)}"


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = a @ Tensor(np.eye(2))
    assert np.array_equal(out.data, a.data)


def test_matmul_hand_product():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_grad_is_ones_times_b_transpose(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)))
    ad.backward(ad.tsum(a @ b))
    assert np.allclose(a.grad, np.ones((3, 5)) @ b.data.T)
    fd = finite_difference_grad(lambda: float(ad.tsum(Tensor(a.data) @ b).data), a.data)
    assert rel_err(a.grad, fd) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_batched_broadcast(rng):
    a = Tensor(rng.normal(size=(5, 2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    out = a @ b
    assert out.shape == (5, 2, 4)
    ad.backward(ad.tsum(out * out))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


# -- conv2d ----------------------------------------------------------------


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, w, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_ones_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.ravel()[0] == 9.0


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 0, 2), (3, 2, 3)])
def test_conv2d_grad_matches_fd(rng, stride, padding, k):
    x_data = rng.normal(size=(1, 2, 5, 5))
    w_data = rng.normal(size=(3, 2, k, k))

    def run(xa, wa):
        out = ad.conv2d(Tensor(xa), Tensor(wa), stride=stride, padding=padding)
        return float(ad.tsum(out * out).data)

    x = Tensor(x_data.copy(), requires_grad=True)
    w = Tensor(w_data.copy(), requires_grad=True)
    out = ad.conv2d(x, w, stride=stride, padding=padding)
    ad.backward(ad.tsum(out * out))
    fd_x = finite_difference_grad(lambda: run(x_data, w_data), x_data)
    fd_w = finite_difference_grad(lambda: run(x_data, w_data), w_data)
    assert rel_err(x.grad, fd_x) < 1e-5
    assert rel_err(w.grad, fd_w) < 1e-5


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 0, 2), (4, 0, 4), (2, 1, 3)])
def test_conv_transpose2d_grad_matches_fd(rng, stride, padding, k):
    x_data = rng.normal(size=(1, 3, 4, 4))
    w_data = rng.normal(size=(3, 2, k, k))

    def run(xa, wa):
        out = ad.conv_transpose2d(Tensor(xa), Tensor(wa), stride=stride, padding=padding)
        return float(ad.tsum(out * out).data)

    x = Tensor(x_data.copy(), requires_grad=True)
    w = Tensor(w_data.copy(), requires_grad=True)
    ad.backward(ad.tsum(ad.conv_transpose2d(x, w, stride=stride, padding=padding) ** 2))
    assert rel_err(x.grad, finite_difference_grad(lambda: run(x_data, w_data), x_data)) < 1e-5
    assert rel_err(w.grad, finite_difference_grad(lambda: run(x_data, w_data), w_data)) < 1e-5


def test_conv_transpose2d_output_shape(rng):
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    w = Tensor(rng.normal(size=(3, 5, 4, 4)))
    assert ad.conv_transpose2d(x, w, stride=4).shape == (1, 5, 32, 32)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv2d(x), y> == <x, conv_transpose2d(y)> over the region conv windows touch
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    y = rng.normal(size=(1, 3, 2, 2))
    cx = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=0).data
    ty = ad.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=0).data
    assert ty.shape == x.shape
    assert np.allclose((cx * y).sum(), (x * ty).sum())


# -- bilinear sampling -------------------------------------------------------


def test_bilinear_integer_grid_returns_pixels(rng):
    feat = Tensor(rng.normal(size=(2, 4, 5)))
    ys, xs = np.mgrid[0:4, 0:5]
    grid = np.stack([xs, ys], axis=-1).astype(float)
    out, mask = ad.bilinear_sample(feat, grid)
    assert np.allclose(out.data, feat.data)
    assert mask.all()


def test_bilinear_center_of_four():
    feat = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out, mask = ad.bilinear_sample(feat, np.array([[[0.5, 0.5]]]))
    assert out.data.ravel()[0] == pytest.approx(2.5)
    assert mask.all()


def test_bilinear_out_of_bounds_zero_with_mask():
    feat = Tensor(np.ones((1, 2, 2)))
    out, mask = ad.bilinear_sample(feat, np.array([[[5.0, 5.0], [0.0, 0.0]]]))
    assert out.data[0, 0, 0] == 0.0
    assert not mask[0, 0] and mask[0, 1]


def test_bilinear_grid_gradient_matches_fd(rng):
    feat_data = rng.normal(size=(3, 6, 6))
    grid_data = rng.uniform(0.3, 4.7, size=(10, 1, 2))  # interior, non-integer

    def run(g):
        out, _ = ad.bilinear_sample(Tensor(feat_data), Tensor(g))
        return float(ad.tsum(out * out).data)

    grid = Tensor(grid_data.copy(), requires_grad=True)
    out, _ = ad.bilinear_sample(Tensor(feat_data), grid)
    ad.backward(ad.tsum(out * out))
    fd = finite_difference_grad(lambda: run(grid_data), grid_data)
    assert rel_err(grid.grad, fd) < 1e-5


def test_bilinear_feat_gradient_matches_fd(rng):
    feat_data = rng.normal(size=(2, 5, 5))
    grid_data = rng.uniform(-0.5, 5.0, size=(4, 4, 2))  # includes out-of-bounds

    def run(f):
        out, _ = ad.bilinear_sample(Tensor(f), grid_data)
        return float(ad.tsum(out * out).data)

    feat = Tensor(feat_data.copy(), requires_grad=True)
    out, _ = ad.bilinear_sample(feat, grid_data)
    ad.backward(ad.tsum(out * out))
    assert rel_err(feat.grad, finite_difference_grad(lambda: run(feat_data), feat_data)) < 1e-5


# -- activations / shape ops ---------------------------------------------------


def test_softmax_constant_vector_is_uniform():
    out = ad.softmax(Tensor([3.0, 3.0, 3.0, 3.0]), axis=0)
    assert np.allclose(out.data, 0.25)


def test_softmax_sums_to_one(rng):
    out = ad.softmax(Tensor(rng.normal(size=(3, 7))), axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0)


def test_layer_normalize_moments(rng):
    out = ad.layer_normalize(Tensor(rng.normal(2.0, 3.0, size=(4, 16))), axis=1)
    assert np.allclose(out.data.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.data.var(axis=1), 1.0, atol=1e-4)


def test_silu_gate_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.silu_gate(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_concat_extent_addition():
    out = ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
    assert out.shape == (2, 8)


def test_concat_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5)))], axis=1)


def test_learned_upsample_factor_4_shape(rng):
    from cvmtl.nn import LearnedUpsample

    up = LearnedUpsample(rng, 3, 7, factor=4)
    out = up(Tensor(rng.normal(size=(1, 3, 8, 8))))
    assert out.shape == (1, 7, 32, 32)


# -- backward contract -----------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ad.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_two_x(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    ad.backward(ad.tsum(x * x))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar_root(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_second_backward_rejected(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = ad.tsum(x * x)
    ad.backward(loss)
    with pytest.raises(StateError):
        ad.backward(loss)


def test_reachable_tensors_all_have_grads(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    mid = x * 2.0
    loss = ad.tsum(mid * mid)
    ad.backward(loss)
    for t in (x, mid, loss):
        assert t.grad is not None and t.grad.shape == t.shape


def test_backward_linearity(rng):
    x_data = rng.normal(size=(4,))

    def grad_of(fn):
        x = Tensor(x_data.copy(), requires_grad=True)
        ad.backward(fn(x))
        return x.grad

    gf = grad_of(lambda x: ad.tsum(x * x))
    gg = grad_of(lambda x: ad.tsum(ad.exp(x)))
    combined = grad_of(lambda x: ad.tsum(x * x) * 2.5 + ad.tsum(ad.exp(x)) * (-1.5))
    assert np.allclose(combined, 2.5 * gf - 1.5 * gg)


def test_forward_backward_determinism(rng):
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(r.normal(size=(4, 4)), requires_grad=True)
        loss = ad.tsum(ad.softmax(x @ w, axis=1) * x)
        ad.backward(loss)
        return float(loss.data), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


# -- per-primitive randomized gradient sweep -------------------------------------


PRIMITIVES = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "div": lambda x, y: x / (y * y + 1.0),
    "pow": lambda x, y: (x * x + 1.0) ** 1.5,
    "exp": lambda x, y: ad.exp(x),
    "log": lambda x, y: ad.log(x * x + 1.0),
    "sqrt": lambda x, y: ad.sqrt(x * x + 0.5),
    "abs": lambda x, y: ad.absolute(x + 0.37),
    "sigmoid": lambda x, y: ad.sigmoid(x),
    "silu": lambda x, y: ad.silu(x),
    "softplus": lambda x, y: ad.softplus(x),
    "sum_axis": lambda x, y: ad.tsum(x, axis=1, keepdims=True) * y,
    "mean": lambda x, y: ad.tmean(x, axis=0, keepdims=True) * y,
    "reshape": lambda x, y: ad.reshape(x, (-1,)),
    "transpose": lambda x, y: ad.transpose(x) * ad.transpose(y),
    "getitem": lambda x, y: x[1:, :2] * 3.0,
    "concat": lambda x, y: ad.concat([x, y], axis=0),
    "stack": lambda x, y: ad.stack([x, y], axis=1),
    "pad": lambda x, y: ad.pad(x, ((1, 0), (0, 2))),
    "softmax": lambda x, y: ad.softmax(x, axis=1) * y,
    "log_softmax": lambda x, y: ad.log_softmax(x, axis=0) * y,
    "layer_normalize": lambda x, y: ad.layer_normalize(x, axis=1) * y,
    "silu_gate": lambda x, y: ad.silu_gate(x, y),
    "matmul": lambda x, y: x @ ad.transpose(y),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_randomized(name):
    op = PRIMITIVES[name]
    for trial in range(20):
        r = np.random.default_rng(1000 * trial + sum(map(ord, name)))
        x_data = r.normal(size=(3, 4)) + 2.0  # shifted away from kinks of abs/log
        y_data = r.normal(size=(3, 4)) + 2.0

        def loss(xa, ya):
            out = op(Tensor(xa), Tensor(ya))
            return ad.tsum(out * out)

        x = Tensor(x_data.copy(), requires_grad=True)
        y = Tensor(y_data.copy(), requires_grad=True)
        ad.backward(ad.tsum(op(x, y) ** 2))
        fd_x = finite_difference_grad(lambda: float(loss(x_data, y_data).data), x_data)
        assert rel_err(x.grad, fd_x) < 1e-4, f"{name} trial {trial}: input grad"
        if y.grad is not None:
            fd_y = finite_difference_grad(lambda: float(loss(x_data, y_data).data), y_data)
            assert rel_err(y.grad, fd_y) < 1e-4, f"{name} trial {trial}: second grad"


# -- parameter container ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    named = {
        "encoder.w": rng.normal(size=(4, 3, 3, 3)),
        "head.bias": rng.normal(size=(7,)),
        "scalar": np.array(3.25),
    }
    path = tmp_path / "params.cvck"
    ad.save_params(path, named)
    loaded = ad.load_params(path)
    assert set(loaded) == set(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])
    # byte-identical on re-save
    ad.save_params(tmp_path / "again.cvck", loaded)
    assert (tmp_path / "again.cvck").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.cvck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        ad.load_params(path)


def test_checkpoint_truncated(tmp_path, rng):
    path = tmp_path / "trunc.cvck"
    ad.save_params(path, {"w": rng.normal(size=(8, 8))})
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        ad.load_params(path)
