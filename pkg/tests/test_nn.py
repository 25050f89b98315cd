import math

import numpy as np
import pytest
from scipy.signal import correlate

from dermalite.errors import (CheckpointError, DegenerateBatch, LabelOutOfRange, NonFiniteError,
                              ShapeMismatch)
from dermalite.nn import layers as L
from dermalite.nn.checkpoint import load_checkpoint, save_checkpoint
from dermalite.nn.gradcheck import (KERNELS, THRESHOLD, check_network, numeric_grad, rel_error,
                                    run_gradcheck)
from dermalite.nn.network import (PAPER_PARAM_REFERENCE, NetworkConfig, forward, glorot_limit,
                                  init_params, loss_and_grads, param_count, param_shapes, predict,
                                  recalibrate_batchnorm)
from dermalite.nn.optim import AdamState, adam_step

try:  # independent second implementation, optional
    import torch
    torch.set_default_dtype(torch.float64)
except ImportError:
    torch = None
needs_torch = pytest.mark.skipif(torch is None, reason="torch not installed")

GRID = [(a, c) for a in ("relu", "elu", "gelu") for c in (3, 2)]


# -- convolution -------------------------------------------------------------------

def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 6, 5, 1))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1
    out, _ = L.conv2d_forward(x, w, np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_padding_arithmetic():
    out, _ = L.conv2d_forward(np.ones((1, 5, 5, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[0, 2, 2, 0] == 9 and out[0, 0, 0, 0] == 4 and out[0, 0, 2, 0] == 6


def test_conv_matches_scipy_correlate():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 7, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    out, _ = L.conv2d_forward(x, w, b)
    for n in range(2):
        for co in range(4):
            ref = sum(correlate(x[n, :, :, ci], w[:, :, ci, co], mode="same") for ci in range(3))
            assert np.allclose(out[n, :, :, co], ref + b[co], atol=1e-12)


@needs_torch
def test_conv_against_torch_forward_and_backward():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out, cache = L.conv2d_forward(x, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = L.conv2d_backward(g, cache)
    tx = torch.tensor(x.transpose(0, 3, 1, 2), requires_grad=True)
    tw = torch.tensor(w.transpose(3, 2, 0, 1), requires_grad=True)
    tb = torch.tensor(b, requires_grad=True)
    to = torch.nn.functional.conv2d(tx, tw, tb, padding=1)
    to.backward(torch.tensor(g.transpose(0, 3, 1, 2)))
    assert np.allclose(out, to.detach().numpy().transpose(0, 2, 3, 1), atol=1e-12)
    assert np.allclose(dx, tx.grad.numpy().transpose(0, 2, 3, 1), atol=1e-12)
    assert np.allclose(dw, tw.grad.numpy().transpose(2, 3, 1, 0), atol=1e-12)
    assert np.allclose(db, tb.grad.numpy(), atol=1e-12)


def test_conv_finite_differences():
    assert KERNELS["conv2d"](np.random.default_rng(3)) < 1e-6


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        L.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        L.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((2, 2, 2, 1)), np.zeros(1))


# -- batch norm -------------------------------------------------------------------------

def test_bn_constant_input_gives_zero():
    x = np.full((4, 3, 3, 2), 7.0)
    out, _, _, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))
    assert np.all(out == 0)


def test_bn_train_moments():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(8, 4, 4, 3))
    out, _, _, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 1e-4)


def test_bn_running_stats_and_inputs_untouched():
    x = np.random.default_rng(5).normal(2.0, 3.0, size=(6, 5))
    rm, rv = np.zeros(5), np.ones(5)
    _, _, nm, nv = L.batchnorm_forward(x, np.ones(5), np.zeros(5), rm, rv, momentum=0.99)
    assert np.array_equal(rm, np.zeros(5)) and np.array_equal(rv, np.ones(5))
    assert np.allclose(nm, 0.01 * x.mean(0))
    assert np.allclose(nv, 0.99 + 0.01 * x.var(0))


def test_bn_inference_uses_running_stats():
    x = np.random.default_rng(6).normal(size=(3, 2))
    out, cache, _, _ = L.batchnorm_forward(x, np.array([2.0, 1.0]), np.array([0.5, 0.0]),
                                           np.array([1.0, -1.0]), np.array([4.0, 1.0]),
                                           train=False, eps=0.0)
    assert cache is None
    assert np.allclose(out[:, 0], (x[:, 0] - 1) / 2 * 2 + 0.5)
    assert np.allclose(out[:, 1], x[:, 1] + 1)


@needs_torch
def test_bn_against_torch():
    rng = np.random.default_rng(7)
    x = rng.normal(1.0, 2.0, size=(3, 4, 4, 3))
    gamma, beta = rng.normal(1, 0.3, 3), rng.normal(size=3)
    out, cache, nm, nv = L.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), eps=1e-3)
    g = rng.normal(size=out.shape)
    dx, dgamma, dbeta = L.batchnorm_backward(g, cache)
    tx = torch.tensor(x.transpose(0, 3, 1, 2), requires_grad=True)
    tg = torch.tensor(gamma, requires_grad=True)
    tb = torch.tensor(beta, requires_grad=True)
    to = torch.nn.functional.batch_norm(tx, None, None, tg, tb, training=True, eps=1e-3)
    to.backward(torch.tensor(g.transpose(0, 3, 1, 2)))
    assert np.allclose(out, to.detach().numpy().transpose(0, 2, 3, 1), atol=1e-10)
    assert np.allclose(dx, tx.grad.numpy().transpose(0, 2, 3, 1), atol=1e-10)
    assert np.allclose(dgamma, tg.grad.numpy(), atol=1e-10)
    assert np.allclose(dbeta, tb.grad.numpy(), atol=1e-10)


def test_bn_finite_differences():
    rng = np.random.default_rng(8)
    assert KERNELS["batchnorm"](rng) < 1e-6
    assert KERNELS["batchnorm_2d"](rng) < 1e-6


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        L.batchnorm_forward(np.zeros((1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))


# -- max pool ---------------------------------------------------------------------------

def test_pool_window_and_routing():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, cache = L.maxpool2_forward(x)
    assert out.ravel().tolist() == [4.0]
    dx = L.maxpool2_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx.reshape(2, 2).tolist() == [[0, 0], [0, 1]]


@needs_torch
def test_pool_floor_and_conservation():
    x = np.random.default_rng(9).normal(size=(2, 7, 7, 3))
    out, cache = L.maxpool2_forward(x)
    assert out.shape == (2, 3, 3, 3)
    g = np.random.default_rng(10).normal(size=out.shape)
    dx = L.maxpool2_backward(g, cache)
    assert dx.sum() == pytest.approx(g.sum())
    assert np.all(dx[:, 6, :, :] == 0) and np.all(dx[:, :, 6, :] == 0)
    ref = torch.nn.functional.max_pool2d(torch.tensor(x.transpose(0, 3, 1, 2)), 2)
    assert np.array_equal(out, ref.numpy().transpose(0, 2, 3, 1))


def test_pool_tie_goes_to_first():
    _, cache = L.maxpool2_forward(np.ones((1, 2, 2, 1)))
    dx = L.maxpool2_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx.reshape(2, 2).tolist() == [[1, 0], [0, 0]]


def test_pool_finite_differences():
    assert KERNELS["maxpool2"](np.random.default_rng(11)) < 1e-6


def test_full_network_spatial_chain():
    params = init_params(NetworkConfig(), 0)
    _, caches = forward(params, np.zeros((2, 28, 28, 3), np.float32), train=True)
    shapes = [c[3][0][1:3] for c in caches[:3]]
    assert shapes == [(28, 28), (14, 14), (7, 7)]
    assert caches[-1][1] == (2, 3, 3, 128)
    assert NetworkConfig().flat_features == 1152


# -- dense and activations --------------------------------------------------------------

def test_dense_identity_and_independence():
    x = np.random.default_rng(12).normal(size=(4, 5))
    out, _ = L.dense_forward(x, np.eye(5), np.zeros(5))
    assert np.array_equal(out, x)
    w, b = np.random.default_rng(13).normal(size=(5, 3)), np.zeros(3)
    y = x.copy()
    y[0] += 100
    assert np.array_equal(L.dense_forward(x, w, b)[0][1:], L.dense_forward(y, w, b)[0][1:])


def test_dense_finite_differences():
    assert KERNELS["dense"](np.random.default_rng(14)) < 1e-6


@pytest.mark.parametrize("kind", ["relu", "elu", "gelu"])
def test_activation_zero_and_fd(kind):
    out, _ = L.activation_forward(np.zeros(3), kind)
    assert np.all(out == 0)
    assert KERNELS[kind](np.random.default_rng(15)) < 1e-6


def test_elu_values():
    out, _ = L.activation_forward(np.array([-1.0, -50.0, 2.0]), "elu")
    assert out[0] == pytest.approx(math.exp(-1) - 1)
    assert out[0] == pytest.approx(-0.6321, abs=1e-4)
    assert out[1] == pytest.approx(-1.0)
    assert out[2] == 2.0


@needs_torch
def test_gelu_against_erf_and_torch():
    x = np.linspace(-6, 6, 101)
    out, cache = L.activation_forward(x, "gelu")
    ref = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.allclose(out, ref, atol=1e-15)
    tx = torch.tensor(x, requires_grad=True)
    torch.nn.functional.gelu(tx).sum().backward()
    assert np.allclose(L.activation_backward(np.ones_like(x), cache), tx.grad.numpy(), atol=1e-12)


def test_activation_keeps_float32():
    x = np.random.default_rng(16).normal(size=(3, 3)).astype(np.float32)
    for kind in ("relu", "elu", "gelu"):
        out, cache = L.activation_forward(x, kind)
        assert out.dtype == np.float32
        assert L.activation_backward(np.ones_like(x), cache).dtype == np.float32


# -- softmax cross-entropy --------------------------------------------------------------

def test_xent_uniform_and_limits():
    loss, _, _ = L.softmax_xent(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(math.log(7)) and loss == pytest.approx(1.9459, abs=1e-4)
    big = np.zeros((1, 7))
    big[0, 2] = 60.0
    assert L.softmax_xent(big, np.array([2]))[0] < 1e-20


def test_xent_gradient_rows_sum_to_zero():
    logits = np.random.default_rng(17).normal(0, 3, size=(5, 7))
    _, d, probs = L.softmax_xent(logits, np.array([0, 1, 2, 3, 4]))
    assert np.all(np.abs(d.sum(1)) < 1e-7)
    assert np.allclose(probs.sum(1), 1.0)
    assert KERNELS["softmax_xent"](np.random.default_rng(18)) < 1e-6


@needs_torch
def test_xent_matches_torch():
    rng = np.random.default_rng(19)
    logits, labels = rng.normal(0, 4, size=(6, 7)), rng.integers(0, 7, 6)
    loss, d, _ = L.softmax_xent(logits, labels)
    t = torch.tensor(logits, requires_grad=True)
    tl = torch.nn.functional.cross_entropy(t, torch.tensor(labels))
    tl.backward()
    assert loss == pytest.approx(tl.item(), abs=1e-12)
    assert np.allclose(d, t.grad.numpy(), atol=1e-12)


def test_xent_label_range():
    with pytest.raises(LabelOutOfRange):
        L.softmax_xent(np.zeros((1, 7)), np.array([7]))


def test_non_finite_detected():
    with pytest.raises(NonFiniteError):
        L.check_finite("x", np.array([1.0, np.nan]))


# -- optimizer ----------------------------------------------------------------------------

def test_adam_zero_gradient():
    w = {"a": np.array([1.0, -2.0])}
    adam_step(w, {"a": np.zeros(2)}, AdamState(), 0.1)
    assert w["a"].tolist() == [1.0, -2.0]


def test_adam_first_step_bounded_by_lr():
    g = np.random.default_rng(20).normal(size=50) * 10 ** np.random.default_rng(21).uniform(-4, 4, 50)
    w = {"a": np.zeros(50)}
    adam_step(w, {"a": g}, AdamState(), 1e-3)
    assert np.all(np.abs(w["a"]) <= 1e-3 * (1 + 1e-6))
    assert np.all(np.sign(w["a"]) == -np.sign(g))


def test_adam_quadratic_oracle():
    w = {"w": np.array([5.0])}
    st = AdamState()
    for _ in range(500):
        adam_step(w, {"w": 2 * w["w"]}, st, 0.1)
    assert abs(w["w"][0]) < 1e-2


@needs_torch
def test_adam_matches_torch():
    rng = np.random.default_rng(22)
    w0 = rng.normal(size=(4, 3))
    w = {"w": w0.copy()}
    st = AdamState()
    tw = torch.tensor(w0, requires_grad=True)
    opt = torch.optim.Adam([tw], lr=0.01, betas=(0.9, 0.999), eps=1e-7)
    for i in range(20):
        g = rng.normal(size=(4, 3))
        adam_step(w, {"w": g}, st, 0.01)
        opt.zero_grad()
        tw.grad = torch.tensor(g)
        opt.step()
    assert np.allclose(w["w"], tw.detach().numpy(), atol=1e-10)


# -- network -----------------------------------------------------------------------------

def test_param_count_reference_values():
    assert param_count(NetworkConfig(input_channels=3)) == 552_839
    assert param_count(NetworkConfig(input_channels=2)) == 552_263
    s = param_shapes(NetworkConfig(input_channels=2))
    assert math.prod(s["conv1/kernel"]) + s["conv1/bias"][0] == 1_216
    assert PAPER_PARAM_REFERENCE == 472_000


@pytest.mark.parametrize("act,ch", GRID)
def test_param_count_equals_allocation(act, ch):
    cfg = NetworkConfig(input_channels=ch, activation=act)
    p = init_params(cfg, 0)
    assert p.trainable_count() == param_count(cfg)
    assert sum(v.size for v in p.state.values()) == 2 * (64 + 128 + 128)


def test_init_glorot_bounds_and_seeds():
    cfg = NetworkConfig()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    for name, w in a.weights.items():
        if name.endswith("/kernel"):
            assert np.all(np.abs(w) <= glorot_limit(w.shape))
        assert np.array_equal(w, b.weights[name])
    assert any(not np.array_equal(a.weights[k], c.weights[k]) for k in a.weights)
    assert glorot_limit((3, 3, 3, 64)) == pytest.approx(math.sqrt(6 / (27 + 576)))


def test_network_gradient_finite_differences():
    rng = np.random.default_rng(23)
    for act in ("relu", "elu", "gelu"):
        assert check_network(rng, act) < THRESHOLD


def _torch_net(params, act):
    """Same network expressed in torch, for an end-to-end gradient oracle."""
    w = {k: torch.tensor(v.astype(np.float64), requires_grad=True) for k, v in params.weights.items()}
    fn = {"relu": torch.relu, "elu": torch.nn.functional.elu,
          "gelu": torch.nn.functional.gelu}[act]

    def run(x):
        h = torch.tensor(x.transpose(0, 3, 1, 2))
        for i in (1, 2, 3):
            h = torch.nn.functional.conv2d(h, w[f"conv{i}/kernel"].permute(3, 2, 0, 1),
                                           w[f"conv{i}/bias"], padding=1)
            h = torch.nn.functional.batch_norm(h, None, None, w[f"bn{i}/gamma"], w[f"bn{i}/beta"],
                                               training=True, eps=1e-3)
            h = torch.nn.functional.max_pool2d(fn(h), 2)
        h = h.permute(0, 2, 3, 1).reshape(len(x), -1)
        for i in (1, 2):
            h = fn(h @ w[f"dense{i}/kernel"] + w[f"dense{i}/bias"])
        return h @ w["output/kernel"] + w["output/bias"]
    return w, run


@needs_torch
@pytest.mark.parametrize("act", ["relu", "elu", "gelu"])
def test_network_matches_torch(act):
    cfg = NetworkConfig(input_channels=3, activation=act)
    params = init_params(cfg, 4, dtype=np.float64)
    rng = np.random.default_rng(24)
    x = rng.uniform(0, 1, size=(4, 28, 28, 3))
    y = rng.integers(0, 7, 4)
    loss, grads, _ = loss_and_grads(params, x, y, update_state=False)
    w, run = _torch_net(params, act)
    tl = torch.nn.functional.cross_entropy(run(x), torch.tensor(y))
    tl.backward()
    assert loss == pytest.approx(tl.item(), rel=1e-10)
    for k in grads:
        ref = w[k].grad.numpy()
        assert np.allclose(grads[k], ref, atol=1e-9 * max(1.0, np.abs(ref).max())), k


def test_forward_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(init_params(NetworkConfig(input_channels=2), 0), np.zeros((1, 28, 28, 3)), train=False)


def test_predict_lowest_id_on_ties():
    params = init_params(NetworkConfig(), 0)
    for k in ("output/kernel", "output/bias"):
        params.weights[k][...] = 0
    assert predict(params, np.zeros((3, 28, 28, 3), np.float32)).tolist() == [0, 0, 0]


def test_recalibrate_uses_population_statistics():
    cfg = NetworkConfig(conv_widths=(4, 4, 4), dense_widths=(8, 8), image_size=12)
    params = init_params(cfg, 0, dtype=np.float64)
    x = np.random.default_rng(25).uniform(size=(10, 12, 12, 3))
    recalibrate_batchnorm(params, x, batch_size=3)
    h, _ = L.conv2d_forward(x, params.weights["conv1/kernel"], params.weights["conv1/bias"])
    assert np.allclose(params.state["bn1/moving_mean"], h.mean((0, 1, 2)))
    assert np.allclose(params.state["bn1/moving_variance"], h.var((0, 1, 2)))
    # with batch statistics equal to population statistics both modes agree
    lt, _ = forward(params.copy(), x, train=True, update_state=False)
    li, _ = forward(params, x, train=False)
    assert np.allclose(lt, li, atol=1e-8)


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = init_params(NetworkConfig(input_channels=2, activation="gelu"), 9)
    params.state["bn2/moving_mean"] += 0.5
    mpath, bpath = save_checkpoint(params, tmp_path / "ck")
    assert mpath.name == "ck.json" and bpath.name == "ck.bin"
    back = load_checkpoint(mpath)
    assert back.config == params.config and back.seed == 9
    for group in ("weights", "state"):
        a, b = getattr(params, group), getattr(back, group)
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)
    again = save_checkpoint(back, tmp_path / "ck2")
    assert again[1].read_bytes() == bpath.read_bytes()


def test_checkpoint_errors(tmp_path):
    params = init_params(NetworkConfig(), 0)
    mpath, bpath = save_checkpoint(params, tmp_path / "ck")
    bpath.write_bytes(bpath.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(mpath)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    text = mpath.read_text().replace('"input_channels": 3', '"input_channels": 2')
    mpath.write_text(text)
    with pytest.raises(CheckpointError):
        load_checkpoint(mpath)


# -- gradient harness -----------------------------------------------------------------------

def test_rel_error_floor():
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-5
    assert rel_error(np.array([1.0]), np.array([2.0])) == 0.5
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


def test_numeric_grad_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert np.allclose(g, 2 * x, atol=1e-8)


def test_run_gradcheck_all_kernels():
    res = run_gradcheck(instances=20, seed=0, include_network=False)
    assert set(res) == set(KERNELS)
    assert all(v < THRESHOLD for v in res.values()), res
