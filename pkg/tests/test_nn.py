import numpy as np
import pytest

from pclkd.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pclkd.nn import SGD, BatchNorm, Linear, ParamStore, Sequential, backbone_preset, build_layers, lr_at
from pclkd.tensor import DimensionError, Tensor


def store_of(**arrays) -> ParamStore:
    store = ParamStore()
    for name, value in arrays.items():
        store.params[name] = Tensor(np.asarray(value, dtype=float), requires_grad=True)
    return store


def test_zero_gradient_leaves_params_unchanged():
    store = store_of(w=[1.0, -2.0])
    store.params["w"].grad = np.zeros(2)
    SGD(store, lr=0.1, momentum=0.9, weight_decay=0.0).step(0)
    np.testing.assert_array_equal(store.params["w"].data, [1.0, -2.0])


def test_single_plain_step():
    store = store_of(w=[1.0])
    store.params["w"].grad = np.array([1.0])
    SGD(store, lr=0.1, momentum=0.0, weight_decay=0.0).step(0)
    assert store.params["w"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_step_schedule_values():
    lrs = [lr_at(e, 0.1, (150, 225)) for e in (0, 149, 150, 224, 225, 299)]
    np.testing.assert_allclose(lrs, [0.1, 0.1, 0.01, 0.01, 0.001, 0.001], rtol=1e-12)


def test_no_momentum_no_decay_is_gradient_descent(rng):
    w0 = rng.normal(size=(3, 2))
    store = store_of(w=w0.copy())
    opt = SGD(store, lr=0.05, momentum=0.0, weight_decay=0.0)
    w = w0.copy()
    for _ in range(5):
        g = rng.normal(size=w.shape)
        store.params["w"].grad = g
        opt.step(0)
        w = w - 0.05 * g
    np.testing.assert_array_equal(store.params["w"].data, w)


def test_nesterov_matches_buffer_formulation(rng):
    # oracle: buf <- mu*buf + d ; w <- w - lr*(d + mu*buf)
    mu, lr, wd = 0.9, 0.1, 5e-4
    w = rng.normal(size=4)
    store = store_of(w=w.copy())
    opt = SGD(store, lr=lr, momentum=mu, weight_decay=wd)
    buf = np.zeros(4)
    for _ in range(6):
        g = rng.normal(size=4)
        store.params["w"].grad = g
        opt.step(0)
        d = g + wd * w
        buf = mu * buf + d
        w = w - lr * (d + mu * buf)
    np.testing.assert_allclose(store.params["w"].data, w, rtol=1e-12)


def test_weight_decay_can_skip_norm_params():
    bn = BatchNorm(2)
    store = bn.param_store()
    assert store.norm_params == {"weight", "bias"}
    for p in store.params.values():
        p.grad = np.zeros(2)
    SGD(store, lr=0.1, momentum=0.0, weight_decay=0.5, wd_on_norm=False).step(0)
    np.testing.assert_array_equal(bn.weight.data, [1.0, 1.0])
    SGD(store, lr=0.1, momentum=0.0, weight_decay=0.5, wd_on_norm=True).step(0)
    np.testing.assert_allclose(bn.weight.data, [0.95, 0.95])


def test_step_decreases_convex_quadratic():
    # f(w) = 2 (w - 3)^2, curvature 4: any lr < 2/4 decreases f
    store = store_of(w=[10.0])
    opt = SGD(store, lr=0.3, momentum=0.0, weight_decay=0.0)
    f = lambda w: 2.0 * (w - 3.0) ** 2
    before = f(store.params["w"].data[0])
    store.params["w"].grad = 4.0 * (store.params["w"].data - 3.0)
    opt.step(0)
    assert f(store.params["w"].data[0]) < before


def test_missing_gradient_names_parameter():
    store = store_of(alpha=[1.0], beta=[2.0])
    store.params["alpha"].grad = np.ones(1)
    with pytest.raises(RuntimeError, match="beta"):
        SGD(store).step(0)


def test_parameter_order_deterministic():
    spec = backbone_preset("mlp-small", (2,))
    names = [list(build_layers(spec.layers, np.random.default_rng(s)).param_store().params) for s in (0, 1)]
    assert names[0] == names[1]
    assert names[0][:4] == ["0.weight", "0.bias", "1.weight", "1.bias"]


def test_linear_identity():
    lin = Linear(3, 3)
    lin.weight.data[...] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(lin(Tensor(x)).data, x)


def test_linear_shape_error():
    with pytest.raises(DimensionError):
        Linear(3, 2)(Tensor(np.ones((1, 4))))


def test_mlp_golden_forward():
    spec = backbone_preset("mlp-small", (2,))
    net = build_layers(spec.layers, np.random.default_rng(7)).eval()
    x = np.array([[0.5, -1.0], [1.5, 0.25], [-0.3, 0.8]])
    out = net(Tensor(x)).data[:, :4]
    golden = np.array([
        [0.07416848843873959, 0.6606215661315806, 0.06379253424710034, 0.51040552180747],
        [0.453616561905772, 0.0, 0.0, 0.0],
        [0.0, 0.5249489648781188, 0.0, 0.41820282901282524],
    ])
    np.testing.assert_allclose(out, golden, rtol=1e-12, atol=1e-15)


def test_backbone_split_validation():
    spec = backbone_preset("cnn-small", (3, 32, 32))
    with pytest.raises(ValueError):
        spec.with_split(0)
    with pytest.raises(ValueError):
        spec.with_split(len(spec.layers))


def test_cnn_small_shapes(rng):
    spec = backbone_preset("cnn-small", (3, 32, 32))
    net = build_layers(spec.layers, rng)
    out = net(Tensor(rng.normal(size=(2, 3, 32, 32))))
    assert out.shape == (2, spec.feature_dim)


def test_train_eval_switch():
    net = Sequential([Linear(2, 2), BatchNorm(2)])
    net.eval()
    assert all(not m.training for m in net.modules())
    net.train()
    assert all(m.training for m in net.modules())


# -- checkpoint container ---------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b.c": np.arange(4.0), "scalar": np.array(2.5)}
    path = save_checkpoint(tmp_path / "x.ckpt", arrays, {"kind": "train", "global_step": 7})
    loaded, meta = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
    assert meta == {"kind": "train", "global_step": 7}


def test_checkpoint_payload_is_little_endian_f8(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"v": np.array([1.0, -2.0])})
    blob = path.read_bytes()
    assert blob.endswith(np.array([1.0, -2.0], dtype="<f8").tobytes())


def test_checkpoint_corruption_reports_offset(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"v": np.arange(10.0)})
    blob = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "trunc.ckpt")
    assert err.value.offset == len(blob) - 8
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(tmp_path / "magic.ckpt")
