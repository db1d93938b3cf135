"""Property tests for invariants that must hold on any valid input."""
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pclkd.checkpoint import load_checkpoint, save_checkpoint
from pclkd.config import SCHEMA, RunConfig, load_config
from pclkd.data import augment, iterate_batches
from pclkd.losses import ramp_up
from pclkd.model import Architecture, MeanTeacherBank, build_model, smoothing_coefficient
from pclkd.nn import SGD
from pclkd.tensor import Tensor
from pclkd.train import branch_variance, compute_losses

FAST = settings(max_examples=40, deadline=None)


@FAST
@given(st.integers(1, 10 ** 7), st.floats(0.0, 0.9999))
def test_phi_bounded_and_monotone(g, beta):
    phi = smoothing_coefficient(g, beta)
    assert 0.0 <= phi <= beta
    assert smoothing_coefficient(g + 1, beta) >= phi


@FAST
@given(st.floats(0, 500), st.floats(1, 200), st.floats(0, 5))
def test_omega_bounded_and_monotone(e, alpha, lam):
    w = ramp_up(e, alpha, lam)
    assert 0.0 <= w <= lam
    assert ramp_up(e + 1, alpha, lam) >= w - 1e-15


@FAST
@given(st.integers(2, 5), st.integers(1, 6), st.integers(2, 6), st.integers(0, 10 ** 6))
def test_branch_variance_range_and_symmetry(m, n, c, seed):
    gen = np.random.default_rng(seed)
    probs = [gen.dirichlet(np.ones(c), size=n) for _ in range(m)]
    bv = branch_variance(probs)
    assert 0.0 <= bv <= math.sqrt(2) + 1e-12
    assert math.isclose(bv, branch_variance(probs[::-1]), rel_tol=1e-12, abs_tol=1e-15)


@FAST
@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2 ** 31), st.integers(0, 500))
def test_batches_cover_every_sample_once(n, batch, seed, epoch):
    parts = list(iterate_batches(n, batch, seed, epoch))
    assert sorted(np.concatenate(parts).tolist()) == list(range(n))
    assert all(len(p) == batch for p in parts[:-1]) and 1 <= len(parts[-1]) <= batch


@FAST
@given(arrays(np.float64, (2, 5, 5), elements=st.floats(-3, 3)), st.integers(0, 8), st.integers(0, 8),
       st.booleans())
def test_augment_preserves_shape_and_mass_bound(img, i, j, flip):
    out = augment(img, None, pad=4, flip=flip, offset=(i, j))
    assert out.shape == img.shape
    # a crop of the zero-padded image never invents values
    assert np.abs(out).sum() <= np.abs(img).sum() + 1e-12


@FAST
@given(st.dictionaries(st.text("abcdefgh", min_size=1, max_size=6),
                       arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                              elements=st.floats(allow_nan=False, allow_infinity=False)), max_size=4))
def test_checkpoint_roundtrip(tmp_path_factory, named):
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, named, {"note": "p"})
    back, meta = load_checkpoint(path)
    assert list(back) == list(named) and meta["note"] == "p"
    for k in named:
        assert back[k].shape == named[k].shape and back[k].tobytes() == np.ascontiguousarray(named[k]).tobytes()


@FAST
@given(st.integers(1, 4), st.integers(2, 5), st.integers(1, 5), st.integers(0, 1000), st.floats(0, 1))
def test_loss_terms_nonnegative_and_sum(m, c, n, seed, omega):
    model = build_model(Architecture("mlp-small", (2,), c, m, width=4), seed)
    bank = MeanTeacherBank(model)
    gen = np.random.default_rng(seed)
    views = [gen.normal(size=(n + 1, 2)) for _ in range(m)]
    labels = gen.integers(0, c, n + 1)
    bundle, _ = compute_losses(model, bank, views, labels, 3.0, omega)
    v = bundle.values()
    parts = [v["loss_ce_p"], v["loss_ce_t"], v["loss_pe"], v["loss_pm"]]
    assert all(math.isfinite(x) and x >= -1e-12 for x in parts)
    assert math.isclose(v["loss_total"], sum(parts), rel_tol=1e-12, abs_tol=1e-14)


@FAST
@given(st.integers(1, 4), st.integers(2, 6), st.integers(1, 16))
def test_architecture_invariants(m, c, d):
    model = build_model(Architecture("mlp-small", (3,), c, m, width=d), 0)
    assert len(model.heads) == m
    shapes = [[a.shape for a in h.param_store().arrays().values()] for h in model.heads]
    assert all(s == shapes[0] for s in shapes)
    if m > 1:
        assert model.ensemble_classifier.in_features == m * d
        assert not np.array_equal(model.heads[0].classifier.weight.data, model.heads[1].classifier.weight.data)
    opt = SGD(model.param_store())
    assert all(opt.velocity[k].shape == p.shape for k, p in model.param_store().params.items())


def _value_strategy(attr):
    default = getattr(RunConfig(), attr)
    if isinstance(default, bool):
        return st.booleans()
    if isinstance(default, int):
        return st.integers(1, 50)
    if isinstance(default, float):
        return st.floats(0.0, 0.95).map(lambda x: round(x, 6))
    return None


TUNABLE = [(s, k, a) for (s, k), (a, _, _) in SCHEMA.items()
           if s in ("optim", "pcl") and _value_strategy(a) is not None and k not in ("m", "deploy_peer")]


@FAST
@given(st.data())
def test_config_text_roundtrip(tmp_path_factory, data):
    base = dict(dataset="spiral", backbone="mlp-small")
    for section, key, attr in TUNABLE:
        if data.draw(st.booleans()):
            base[attr] = data.draw(_value_strategy(attr))
    base["temperature"] = max(base.get("temperature", 3.0), 0.1)
    base["alpha"] = max(base.get("alpha", 80.0), 0.1)
    base["lr"] = max(base.get("lr", 0.1), 1e-3)
    cfg = RunConfig(**base)
    try:
        cfg.validate()
    except ValueError:
        return
    path = tmp_path_factory.mktemp("cfg") / "c.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
