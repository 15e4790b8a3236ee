import numpy as np
import pytest

from eisnet import model, nn
from eisnet.oracles import ema_closed_form

MCFG = model.ModelConfig(image_side=30, num_classes=5)
TINY = model.ModelConfig(image_side=6, num_classes=3, encoder_kind="mlp")


@pytest.fixture(scope="module")
def params():
    return model.init_params(MCFG, np.random.default_rng(0), dtype=np.float64)


def batch(n=3, cfg=MCFG, seed=1):
    return np.random.default_rng(seed).random((n, cfg.channels, cfg.image_side,
                                               cfg.image_side))


# ---------------------------------------------------------------------------
# config / schema
# ---------------------------------------------------------------------------


def test_config_rejects_untileable_side():
    with pytest.raises(ValueError, match="divisible by 3"):
        model.ModelConfig(image_side=32)


def test_config_rejects_pool_incompatible_side():
    with pytest.raises(ValueError, match="conv"):
        model.ModelConfig(image_side=36)  # 36 tiles 3x3 but breaks 2x2 pooling
    model.ModelConfig(image_side=36, encoder_kind="mlp")  # mlp has no pooling


def test_schema_stable_order(params):
    assert list(params.keys()) == [n for n, _ in model.param_schema(MCFG)]
    for name, shape in model.param_schema(MCFG):
        assert params[name].shape == shape


def test_tracked_subset_excludes_task_heads():
    names = model.tracked_names(MCFG)
    assert all(not n.startswith(("cls.", "aux.")) for n in names)
    assert "emb.w" in names and "conv1.k" in names


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------


def test_forward_shapes(params):
    out = model.forward_all(params, MCFG, batch(4))
    assert out.feats.shape == (4, MCFG.feature_dim)
    assert out.class_logits.shape == (4, 5)
    assert out.aux_logits.shape == (4, 31)
    assert out.embeddings.shape == (4, 128)


def test_forward_deterministic(params):
    x = batch(2)
    a = model.forward_all(params, MCFG, x)
    b = model.forward_all(params, MCFG, x)
    assert np.array_equal(a.feats, b.feats)
    assert np.array_equal(a.embeddings, b.embeddings)


def test_forward_zero_input_finite(params):
    feats, _ = model.forward_features(params, MCFG, np.zeros((1, 3, 30, 30)))
    assert np.all(np.isfinite(feats))


def test_embed_rejects_degenerate_vector(params):
    # zero input with zero biases gives a zero pre-normalization embedding
    with pytest.raises(ValueError, match="degenerate"):
        model.embed(params, MCFG, np.zeros((1, 3, 30, 30)))


def test_forward_rejects_bad_shape(params):
    with pytest.raises(ValueError, match="input shape"):
        model.forward_features(params, MCFG, np.zeros((1, 3, 12, 12)))


def test_embeddings_unit_norm(params):
    out = model.forward_all(params, MCFG, batch(5))
    assert np.allclose(np.linalg.norm(out.embeddings, axis=1), 1.0, atol=1e-6)


def test_embed_scale_invariance(params):
    feats, _ = model.forward_features(params, MCFG, batch(2))
    e1, pre = model.embed_from_features(params, feats)
    e2 = nn.l2_normalize(5.0 * pre)
    assert np.allclose(e1, e2, atol=1e-12)


def test_zero_init_head_uniform_softmax(params):
    p = dict(params)
    p["cls.w"] = np.zeros_like(params["cls.w"])
    p["cls.b"] = np.zeros_like(params["cls.b"])
    feats, _ = model.forward_features(p, MCFG, batch(3))
    logits = model.classify(p, feats)
    loss, _ = nn.softmax_cross_entropy(logits, [0, 1, 2])
    assert loss == pytest.approx(np.log(5), abs=1e-12)


def test_mlp_variant_shapes():
    p = model.init_params(TINY, np.random.default_rng(2), dtype=np.float64)
    out = model.forward_all(p, TINY, batch(2, TINY))
    assert out.feats.shape == (2, TINY.feature_dim)
    assert out.class_logits.shape == (2, 3)


# ---------------------------------------------------------------------------
# gradients through the heads and encoder
# ---------------------------------------------------------------------------


def grad_check_head(cfg, grad_slot, seed=3):
    p = model.init_params(cfg, np.random.default_rng(seed), dtype=np.float64)
    x = batch(2, cfg, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    probes = {"cls": rng.standard_normal((2, cfg.num_classes)),
              "aux": rng.standard_normal((2, cfg.aux_classes)),
              "emb": rng.standard_normal((2, cfg.embed_dim))}

    def loss_fn(params):
        out = model.forward_all(params, cfg, x)
        loss = 0.0
        kw = {"grad_class_logits": None, "grad_aux_logits": None,
              "grad_embeddings": None}
        if grad_slot == "cls":
            loss = float((out.class_logits * probes["cls"]).sum())
            kw["grad_class_logits"] = probes["cls"]
        elif grad_slot == "aux":
            loss = float((out.aux_logits * probes["aux"]).sum())
            kw["grad_aux_logits"] = probes["aux"]
        else:
            loss = float((out.embeddings * probes["emb"]).sum())
            kw["grad_embeddings"] = probes["emb"]
        return loss, model.backward_all(params, cfg, out, **kw)

    return nn.finite_diff_check(loss_fn, p, coords_per_tensor=16)


@pytest.mark.parametrize("slot", ["cls", "aux", "emb"])
def test_grad_check_each_head_mlp(slot):
    assert grad_check_head(TINY, slot) <= 1e-4


@pytest.mark.parametrize("slot", ["cls", "emb"])
def test_grad_check_each_head_conv(slot):
    cfg = model.ModelConfig(image_side=18, num_classes=3)
    assert grad_check_head(cfg, slot) <= 1e-4


# ---------------------------------------------------------------------------
# momentum twin
# ---------------------------------------------------------------------------


def test_momentum_init_copies(params):
    mom = model.momentum_init(params, MCFG, delta=0.9)
    x = batch(2)
    assert np.array_equal(model.momentum_embed(mom, MCFG, x),
                          model.embed(params, MCFG, x))
    # SGD on the trained params must not leak into the twin
    grads = {k: np.ones_like(v) for k, v in params.items()}
    _ = nn.sgd_step(params, grads, 0.1)
    assert np.array_equal(mom.theta["fc.w"], params["fc.w"])


def test_momentum_update_delta_zero(params):
    mom = model.momentum_init(params, MCFG, delta=0.0)
    for k in mom.theta:
        mom.theta[k] = mom.theta[k] + 1.0
    model.momentum_update(mom, params, MCFG)
    for k in mom.theta:
        assert np.array_equal(mom.theta[k], params[k])


def test_momentum_update_elementwise_monotone(params):
    mom = model.momentum_init(params, MCFG, delta=0.7)
    for k in mom.theta:
        mom.theta[k] = mom.theta[k] + np.random.default_rng(4).standard_normal(
            mom.theta[k].shape)
    before = {k: v.copy() for k, v in mom.theta.items()}
    model.momentum_update(mom, params, MCFG)
    for k, v in mom.theta.items():
        lo = np.minimum(before[k], params[k])
        hi = np.maximum(before[k], params[k])
        assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)
        assert v.shape == before[k].shape


def test_momentum_geometric_convergence(params):
    mom = model.momentum_init(params, MCFG, delta=0.999)
    start = {k: v + 1.0 for k, v in mom.theta.items()}
    mom.theta = {k: v.copy() for k, v in start.items()}
    for _ in range(1000):
        model.momentum_update(mom, params, MCFG)
    for k in mom.theta:
        want = ema_closed_form(start[k], params[k], 0.999, 1000)
        assert np.allclose(mom.theta[k], want, rtol=1e-6)


def test_momentum_embed_pure(params):
    mom = model.momentum_init(params, MCFG, delta=0.5)
    before = {k: v.copy() for k, v in mom.theta.items()}
    e = model.momentum_embed(mom, MCFG, batch(2))
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    for k, v in mom.theta.items():
        assert np.array_equal(v, before[k])


def test_momentum_rejects_bad_delta(params):
    with pytest.raises(ValueError, match="delta"):
        model.momentum_init(params, MCFG, delta=1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    f32 = {k: v.astype(np.float32) for k, v in params.items()}
    model.save_params(path, f32)
    loaded = model.load_params(path)
    assert list(loaded.keys()) == list(f32.keys())
    for k in f32:
        assert np.array_equal(loaded[k], f32[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="checkpoint"):
        model.load_params(path)
