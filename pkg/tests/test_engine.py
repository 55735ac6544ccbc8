import numpy as np
import pytest

from gradcheck import check_op_gradient, numeric_gradient, rel_error

import triavatar.engine as eng
from triavatar.engine import (
    OptimState,
    Tensor,
    adamw_step,
    backward,
    bilerp2d,
    conv2d,
    cumsum,
    leaky_relu,
    load_checkpoint,
    make_rng,
    matmul,
    relu,
    reshape,
    save_checkpoint,
    scatter_rows,
    seeded_normal,
    sigmoid,
    softplus,
    take,
    tmean,
    transpose,
    tsum,
    unfold,
    upsample2x,
)

GRAD_TOL = 1e-5


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    g = backward(y)
    assert g[x].data == pytest.approx(6.0)


def test_relu_dead_region():
    x = Tensor(np.array(-1.0), requires_grad=True)
    g = backward(relu(x))
    assert g[x].data == 0.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * x)


def test_disconnected_parameter_reads_zero():
    x = Tensor(np.array(2.0), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    g = backward(x * x)
    assert np.all(g[unused].data == 0.0)


def test_graph_reusable_after_backward():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x
    g1 = backward(y)
    g2 = backward(y)
    assert g1[x].data == g2[x].data == pytest.approx(4.0)


def test_mlp_matches_finite_differences(rng):
    """Random 3-layer MLP: reverse-mode grads vs central differences."""
    w1 = rng.standard_normal((4, 8)) * 0.5
    w2 = rng.standard_normal((8, 8)) * 0.5
    w3 = rng.standard_normal((8, 1)) * 0.5
    x0 = rng.standard_normal((2, 4))

    def forward(x, a, b, c):
        h1 = relu(matmul(x, a))
        h2 = relu(matmul(h1, b))
        return tsum(matmul(h2, c))

    leaves = {
        "x": Tensor(x0, requires_grad=True),
        "a": Tensor(w1, requires_grad=True),
        "b": Tensor(w2, requires_grad=True),
        "c": Tensor(w3, requires_grad=True),
    }
    out = forward(leaves["x"], leaves["a"], leaves["b"], leaves["c"])
    grads = backward(out)

    base = {"x": x0, "a": w1, "b": w2, "c": w3}
    for key in base:
        def f(arr, key=key):
            vals = {k: Tensor(v) for k, v in base.items()}
            vals[key] = Tensor(arr)
            return float(forward(vals["x"], vals["a"], vals["b"], vals["c"]).data)

        num = numeric_gradient(f, base[key].copy())
        assert rel_error(grads[leaves[key]].data, num) < GRAD_TOL, key


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("add_broadcast", lambda x: tsum((x + Tensor(np.linspace(-1, 1, 5))) * Tensor(np.arange(15.0).reshape(3, 5))), (3, 5)),
        ("mul_broadcast", lambda x: tsum(x * Tensor(np.linspace(0.5, 2.0, 4).reshape(4, 1))), (4, 3)),
        ("div", lambda x: tsum(Tensor(np.ones((3, 3))) / (x * x + 2.0)), (3, 3)),
        ("pow", lambda x: tsum((x * x + 1.5) ** 2.5), (4,)),
        ("reshape_transpose", lambda x: tsum(transpose(reshape(x, (3, 4)), (1, 0)) * Tensor(np.arange(12.0).reshape(4, 3))), (12,)),
        ("sum_axis", lambda x: tsum(tsum(x, axis=1) * Tensor(np.array([1.0, -2.0, 3.0]))), (3, 4)),
        ("mean", lambda x: tmean(x * x), (5, 2)),
        ("cumsum", lambda x: tsum(cumsum(x, 1) * Tensor(np.arange(8.0).reshape(2, 4))), (2, 4)),
        ("sigmoid", lambda x: tsum(sigmoid(x) * Tensor(np.arange(6.0).reshape(2, 3))), (2, 3)),
        ("softplus", lambda x: tsum(softplus(x) * Tensor(np.arange(6.0).reshape(2, 3))), (2, 3)),
        ("exp", lambda x: tsum(eng.exp(x * 0.3) * Tensor(np.arange(6.0).reshape(3, 2))), (3, 2)),
        ("leaky", lambda x: tsum(leaky_relu(x) * Tensor(np.linspace(1, 2, 6).reshape(2, 3))), (2, 3)),
        ("getitem", lambda x: tsum(x[1:, :2] * Tensor(np.arange(4.0).reshape(2, 2))), (3, 3)),
        ("concat", lambda x: tsum(eng.concat([x, x * 2.0], axis=0) * Tensor(np.arange(12.0).reshape(4, 3))), (2, 3)),
        ("flip", lambda x: tsum(eng.flip(x, 0) * Tensor(np.arange(6.0).reshape(3, 2))), (3, 2)),
        ("broadcast", lambda x: tsum(eng.broadcast_to(x, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3))), (1, 3)),
        ("upsample", lambda x: tsum(upsample2x(x) * Tensor(np.arange(64.0).reshape(1, 1, 8, 8))), (1, 1, 4, 4)),
        ("unfold", lambda x: tsum(unfold(x, stride=2) * Tensor(np.arange(72.0).reshape(1, 18, 4))), (1, 2, 4, 4)),
        ("take", lambda x: tsum(take(x, np.array([0, 2, 2, 1]), axis=1) * Tensor(np.arange(8.0).reshape(2, 4))), (2, 3)),
    ],
)
def test_op_gradients(name, fn, shape, rng):
    x0 = rng.standard_normal(shape)
    # keep relu-kinked and floor-crossing ops away from their kinks
    x0 = np.where(np.abs(x0) < 0.1, x0 + 0.25, x0)
    assert check_op_gradient(fn, x0) < GRAD_TOL, name


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride, rng):
    x0 = rng.standard_normal((2, 3, 6, 6))
    w0 = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b0 = rng.standard_normal(4) * 0.1
    proj = None

    def forward(x, w, b):
        out = conv2d(x, w, b, stride=stride)
        nonlocal proj
        if proj is None:
            proj = Tensor(np.random.default_rng(7).standard_normal(out.shape))
        return tsum(out * proj)

    leaves = [Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True), Tensor(b0, requires_grad=True)]
    grads = backward(forward(*leaves))
    base = [x0, w0, b0]
    for i in range(3):
        def f(arr, i=i):
            args = [Tensor(v) for v in base]
            args[i] = Tensor(arr)
            return float(forward(*args).data)

        num = numeric_gradient(f, base[i].copy())
        assert rel_error(grads[leaves[i]].data, num) < GRAD_TOL


def test_conv2d_matches_direct_convolution(rng):
    """Oracle: brute-force sliding-window convolution."""
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for k in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, k, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[k]) + b[k]
    assert np.allclose(out, ref, atol=1e-12)


def test_bilerp2d_grid_gradient(rng):
    grid0 = rng.standard_normal((2, 3, 5, 5))
    uv = rng.uniform(0.6, 3.4, size=(7, 2))
    bidx = rng.integers(0, 2, size=7)
    proj = rng.standard_normal((7, 3))

    err = check_op_gradient(lambda g: tsum(bilerp2d(g, uv, bidx) * Tensor(proj)), grid0)
    assert err < GRAD_TOL


def test_bilerp2d_point_gradient_in_cell_interiors(rng):
    grid = Tensor(rng.standard_normal((1, 2, 6, 6)))
    # sample away from texel boundaries so the bilinear kinks stay > h away
    uv0 = rng.uniform(0.3, 4.7, size=(5, 2))
    uv0 = np.round(uv0 * 2) / 2 + 0.25
    proj = rng.standard_normal((5, 2))

    err = check_op_gradient(lambda p: tsum(bilerp2d(grid, p) * Tensor(proj)), uv0)
    assert err < GRAD_TOL


def test_bilerp2d_constant_grid_and_midpoint(rng):
    grid = Tensor(np.full((1, 4, 8, 8), 1.25))
    uv = rng.uniform(0, 7, size=(10, 2))
    out = bilerp2d(grid, uv).data
    assert np.allclose(out, 1.25)

    # texel-corner coordinate: average of the 4 surrounding texels
    g = np.zeros((1, 1, 4, 4))
    g[0, 0, 1, 1], g[0, 0, 1, 2], g[0, 0, 2, 1], g[0, 0, 2, 2] = 1.0, 2.0, 3.0, 4.0
    val = bilerp2d(Tensor(g), np.array([[1.5, 1.5]])).data
    assert val[0, 0] == pytest.approx(2.5)


def test_bilerp2d_clamps_outside(rng):
    g = rng.standard_normal((1, 2, 4, 4))
    far = bilerp2d(Tensor(g), np.array([[99.0, -99.0]])).data
    assert np.allclose(far[0], g[0, :, 0, 3])


def test_scatter_rows_gradients(rng):
    base0 = rng.standard_normal((6, 3))
    vals0 = rng.standard_normal((2, 3))
    idx = np.array([4, 1])
    proj = rng.standard_normal((6, 3))

    leaves = [Tensor(base0, requires_grad=True), Tensor(vals0, requires_grad=True)]
    out = tsum(scatter_rows(leaves[0], idx, leaves[1]) * Tensor(proj))
    grads = backward(out)
    for i, arr in enumerate([base0, vals0]):
        def f(a, i=i):
            args = [Tensor(base0), Tensor(vals0)]
            args[i] = Tensor(a)
            return float(tsum(scatter_rows(args[0], idx, args[1]) * Tensor(proj)).data)

        num = numeric_gradient(f, arr.copy())
        assert rel_error(grads[leaves[i]].data, num) < GRAD_TOL


def test_double_backward_matches_finite_differences(rng):
    """R1-style grad-of-grad: d/dw of || d logit / d x ||^2."""
    w0 = rng.standard_normal((3, 2, 3, 3)) * 0.4
    v0 = rng.standard_normal((3 * 9, 1)) * 0.4
    x = rng.standard_normal((1, 2, 6, 6))

    def input_grad_norm_sq(wt, vt):
        xt = Tensor(x, requires_grad=True)
        h = leaky_relu(conv2d(xt, wt, None, stride=2))
        logit = matmul(reshape(h, (1, 3 * 9)), vt)
        g = backward(tsum(logit), create_graph=True)[xt]
        return tsum(g * g)

    wt = Tensor(w0, requires_grad=True)
    vt = Tensor(v0, requires_grad=True)
    r1 = input_grad_norm_sq(wt, vt)
    grads = backward(r1)

    for leaf, arr in ((wt, w0), (vt, v0)):
        def f(a, leaf=leaf):
            args = {id(wt): Tensor(w0, requires_grad=True), id(vt): Tensor(v0, requires_grad=True)}
            args[id(leaf)] = Tensor(a, requires_grad=True)
            return float(input_grad_norm_sq(args[id(wt)], args[id(vt)]).data)

        num = numeric_gradient(f, arr.copy(), h=1e-5)
        assert rel_error(grads[leaf].data, num) < 1e-4


def test_double_backward_refuses_first_order_ops(rng):
    g = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    uv = np.array([[1.2, 1.7]])
    out = tsum(bilerp2d(g, uv))
    with pytest.raises(RuntimeError, match="first-order-only"):
        backward(out, create_graph=True)


def test_finite_checks_trip_on_overflow():
    x = Tensor(np.array([800.0]))
    with pytest.raises(FloatingPointError):
        eng.exp(x)


# -- seeded randomness --------------------------------------------------


def test_seeded_normal_deterministic():
    a = seeded_normal((3, 4), 42)
    b = seeded_normal((3, 4), 42)
    assert np.array_equal(a.data, b.data)


def test_seeded_normal_stats():
    x = seeded_normal((100000,), 7).data
    assert abs(x.mean()) < 0.02
    assert abs(x.std() - 1.0) < 0.02


def test_seeded_normal_seed_sensitivity():
    assert not np.array_equal(seeded_normal((8,), 1).data, seeded_normal((8,), 2).data)


def test_make_rng_key_tuples():
    assert make_rng(5, 3, 1).uniform() == make_rng(5, 3, 1).uniform()
    assert make_rng(5, 3, 1).uniform() != make_rng(5, 3, 2).uniform()


# -- AdamW ---------------------------------------------------------------


def test_adamw_first_step_magnitude():
    p = {"w": Tensor(np.array([1.0]))}
    state = OptimState(lr=1e-3, weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, state)
    delta = 1.0 - p["w"].data[0]
    assert abs(delta - 1e-3) < 1e-6


def test_adamw_zero_gradient_fixed_point():
    p = {"w": Tensor(np.array([0.7, -0.3]))}
    state = OptimState(lr=0.01, weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"].data, np.array([0.7, -0.3]))


def test_adamw_pure_decay():
    p = {"w": Tensor(np.array([1.0]))}
    state = OptimState(lr=0.01, weight_decay=0.1)
    adamw_step(p, {"w": np.zeros(1)}, state)
    assert p["w"].data[0] == pytest.approx(0.999, abs=1e-12)


def test_adamw_rejects_nan_gradient():
    p = {"bad_param": Tensor(np.array([1.0]))}
    state = OptimState()
    with pytest.raises(FloatingPointError, match="bad_param"):
        adamw_step(p, {"bad_param": np.array([np.nan])}, state)


def test_adamw_wd_zero_is_adam(rng):
    """Reference Adam written independently; wd=0 must match it exactly."""
    theta = np.array([0.5, -1.2, 2.0])
    p = {"w": Tensor(theta.copy())}
    state = OptimState(lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)

    b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
    ref = theta.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adamw_step(p, {"w": g.copy()}, state)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        mh = m / (1.0 - b1 ** t)
        vh = v / (1.0 - b2 ** t)
        ref = ref - lr * (mh / (np.sqrt(vh) + eps))
        assert np.array_equal(p["w"].data, ref)


# -- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {
        "gen/map.w0": rng.standard_normal((4, 5)),
        "gen/map.b0": rng.standard_normal(5),
        "opt.m.gen/map.w0": rng.standard_normal((4, 5)),
    }
    cfg = {"w_dim": 16, "aabb": [[-1, -1, -1], [1, 1, 1]]}
    save_checkpoint(tmp_path / "ckpt", tensors, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "ckpt")
    assert cfg2 == cfg
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_missing_dir(tmp_path):
    with pytest.raises(eng.CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope")
