import numpy as np
import pytest

from exosim import neural as nn
from exosim.errors import ConfigError, ShapeMismatchError


# ---------------------------------------------------------------------- forward

def test_forward_zero_weights_gives_bias():
    net = nn.Mlp([3, 4], activation="relu")
    net.params[0].value[:] = 0.0
    net.params[1].value[:] = np.array([1.0, -2.0, 3.0, 0.5], dtype=np.float32)
    y = nn.forward(net, np.ones((2, 3), dtype=np.float32))
    assert np.allclose(y, np.tile([1.0, -2.0, 3.0, 0.5], (2, 1)))


def test_forward_identity_linear_layer():
    net = nn.Mlp([4, 4])
    net.params[0].value = np.eye(4, dtype=np.float32)
    net.params[1].value[:] = 0.0
    x = np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32)
    assert np.allclose(net(x), x)


def test_forward_matches_hand_rolled_matmul():
    rng = np.random.default_rng(1)
    net = nn.Mlp([6, 8, 8, 3], activation="silu", rng=rng)
    x = rng.standard_normal((7, 6)).astype(np.float32)
    # independent float64 evaluation
    h = x.astype(np.float64)
    for i in range(3):
        W = net.params[2 * i].value.astype(np.float64)
        b = net.params[2 * i + 1].value.astype(np.float64)
        h = h @ W + b
        if i < 2:
            h = h * (1.0 / (1.0 + np.exp(-h)))
    assert np.allclose(net(x), h, atol=1e-5)


def test_forward_shape_mismatch():
    net = nn.Mlp([3, 2])
    with pytest.raises(ShapeMismatchError):
        net(np.zeros((4, 5)))


# ---------------------------------------------------------------------- backward

def test_backward_linear_quadratic_analytic():
    # loss = sum((x W + b - y)^2): dW = 2 x^T r, db = 2 sum r
    rng = np.random.default_rng(2)
    net = nn.Mlp([3, 2], rng=rng)
    x = rng.standard_normal((4, 3)).astype(np.float32)
    y = rng.standard_normal((4, 2)).astype(np.float32)
    out = net.apply(nn.Tensor(x))
    loss = (out - nn.Tensor(y)).square().sum()
    nn.zero_grads(net.params)
    nn.backward(loss)
    r = net(x) - y
    dW = 2.0 * x.T @ r
    db = 2.0 * r.sum(axis=0)
    assert np.allclose(net.params[0].grad, dW, atol=1e-4)
    assert np.allclose(net.params[1].grad, db, atol=1e-4)


def test_backward_constant_loss_zero_grad():
    net = nn.Mlp([3, 2])
    loss = nn.Tensor(np.float32(7.0)) * nn.Tensor(np.float32(1.0))
    # constant w.r.t. parameters: gradients stay None / zero
    nn.zero_grads(net.params)
    out = net.apply(nn.Tensor(np.zeros((1, 3), dtype=np.float32)))
    total = (out * nn.Tensor(np.zeros((1, 2), dtype=np.float32))).sum()
    nn.backward(total)
    for p in net.params:
        assert p.grad is None or np.allclose(p.grad, 0.0)


@pytest.mark.parametrize("dims,act", [
    ([5, 16, 3], "relu"),
    ([4, 32, 32, 2], "silu"),
    ([7, 64, 64, 64, 1], "silu"),
    ([3, 48, 24, 4], "relu"),
])
def test_backward_matches_finite_differences(dims, act):
    # float64 run isolates the autodiff math from float32 rounding noise
    rng = np.random.default_rng(hash((tuple(dims), act)) % 2**32)
    net = nn.Mlp(dims, activation=act, rng=rng, dtype=np.float64)
    x = rng.standard_normal((6, dims[0]))
    y = rng.standard_normal((6, dims[-1]))

    def loss_value():
        return float(((net(x) - y) ** 2).mean())

    out = net.apply(nn.Tensor(x))
    loss = (out - nn.Tensor(y)).square().mean()
    nn.zero_grads(net.params)
    nn.backward(loss)

    for p in net.params:
        flat = p.value.ravel()
        idxs = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        fd_vec, an_vec = [], []
        for idx in idxs:
            orig = flat[idx]
            h = 1e-6 * max(1.0, abs(orig))
            flat[idx] = orig + h
            lp = loss_value()
            flat[idx] = orig - h
            lm = loss_value()
            flat[idx] = orig
            fd_vec.append((lp - lm) / (2 * h))
            an_vec.append(float(p.grad.ravel()[idx]))
        fd_vec, an_vec = np.array(fd_vec), np.array(an_vec)
        denom = max(np.linalg.norm(fd_vec), 1e-12)
        assert np.linalg.norm(an_vec - fd_vec) / denom < 1e-4


def test_backward_f32_close_to_finite_differences():
    # at float32 the agreement is bounded by rounding, still tight in norm
    rng = np.random.default_rng(17)
    net = nn.Mlp([4, 24, 24, 2], activation="silu", rng=rng)
    x = rng.standard_normal((8, 4)).astype(np.float32)
    y = rng.standard_normal((8, 2)).astype(np.float32)
    out = net.apply(nn.Tensor(x))
    loss = (out - nn.Tensor(y)).square().mean()
    nn.zero_grads(net.params)
    nn.backward(loss)
    # reference: identical architecture evaluated in float64
    net64 = nn.Mlp(net.layer_dims, activation="silu", dtype=np.float64)
    for p64, p32 in zip(net64.params, net.params):
        p64.value = p32.value.astype(np.float64)
    out64 = net64.apply(nn.Tensor(x.astype(np.float64)))
    loss64 = (out64 - nn.Tensor(y.astype(np.float64))).square().mean()
    nn.backward(loss64)
    for p32, p64 in zip(net.params, net64.params):
        denom = max(np.linalg.norm(p64.grad), 1e-12)
        assert np.linalg.norm(p32.grad - p64.grad) / denom < 1e-4


def test_backward_through_concat():
    rng = np.random.default_rng(3)
    a = nn.Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)
    b = nn.Tensor(rng.standard_normal((2, 2)).astype(np.float32), requires_grad=True)
    c = nn.concat([a, b], axis=1)
    w = nn.Tensor(rng.standard_normal((5, 1)).astype(np.float32))
    loss = c.matmul(w).square().sum()
    nn.backward(loss)
    # finite difference on one element of each operand
    def f():
        cc = np.concatenate([a.value, b.value], axis=1)
        return float(((cc @ w.value) ** 2).sum())
    for t in (a, b):
        orig = t.value[0, 0]
        t.value[0, 0] = orig + 1e-3
        lp = f()
        t.value[0, 0] = orig - 1e-3
        lm = f()
        t.value[0, 0] = orig
        fd = (lp - lm) / 2e-3
        assert abs(t.grad[0, 0] - fd) / max(abs(fd), 1e-6) < 1e-2


# -------------------------------------------------------------------------- adam

def test_adam_zero_gradient_noop():
    net = nn.Mlp([2, 2])
    before = [p.value.copy() for p in net.params]
    st = nn.AdamState(net.params)
    nn.adam_step(net.params, [np.zeros_like(p.value) for p in net.params],
                 nn.TrainConfig(), st)
    for b, p in zip(before, net.params):
        assert np.array_equal(b, p.value)


def test_adam_quadratic_descent():
    # scalar quadratic loss 0.5 w^2, lr = 0.1: steady descent until converged
    w = nn.Tensor(np.float32(3.0), requires_grad=True)
    cfg = nn.TrainConfig(lr=0.1, grad_clip=0.0)
    st = nn.AdamState([w])
    losses = []
    for _ in range(100):
        loss = w.square() * nn.Tensor(np.float32(0.5))
        nn.zero_grads([w])
        nn.backward(loss)
        losses.append(float(loss))
        nn.adam_step([w], nn.grads_of([w]), cfg, st)
    assert losses[-1] < 1e-2 * losses[0]
    # monotone while far from the optimum (Adam dithers once converged)
    assert all(l2 < l1 for l1, l2 in zip(losses[:25], losses[1:26]))


def test_training_bitwise_determinism():
    def run():
        rng = np.random.default_rng(42)
        net = nn.Mlp([4, 16, 2], rng=np.random.default_rng(7))
        cfg = nn.TrainConfig(lr=1e-3, batch=8, epochs=3, seed=5)
        st = nn.AdamState(net.params)
        X = rng.standard_normal((64, 4)).astype(np.float32)
        Y = rng.standard_normal((64, 2)).astype(np.float32)
        for idx in nn.minibatches(64, cfg.batch, cfg.epochs, np.random.default_rng(cfg.seed)):
            out = net.apply(nn.Tensor(X[idx]))
            loss = (out - nn.Tensor(Y[idx])).square().mean()
            nn.zero_grads(net.params)
            nn.backward(loss)
            nn.adam_step(net.params, nn.grads_of(net.params), cfg, st)
        return [p.value.copy() for p in net.params]

    a = run()
    b = run()
    for pa, pb in zip(a, b):
        assert np.array_equal(pa, pb)


# -------------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    nets = {
        "encoder": nn.Mlp([6, 8, 4], activation="relu", rng=rng),
        "denoiser": nn.Mlp([10, 16, 10], activation="silu", rng=rng),
    }
    meta = {"schedule": {"T": 100, "beta_start": 1e-4}, "fingerprint": "abc"}
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, nets, meta)
    loaded, meta2 = nn.load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == {"encoder", "denoiser"}
    for name in nets:
        assert loaded[name].activation == nets[name].activation
        assert loaded[name].layer_dims == nets[name].layer_dims
        for p1, p2 in zip(nets[name].params, loaded[name].params):
            assert np.array_equal(p1.value, p2.value)
    x = rng.standard_normal((3, 6)).astype(np.float32)
    assert np.array_equal(nets["encoder"](x), loaded["encoder"](x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ConfigError):
        nn.load_checkpoint(p)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        nn.TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        nn.TrainConfig(batch=0)
