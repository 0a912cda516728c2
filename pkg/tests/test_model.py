import numpy as np
import pytest

from dcsep import cluster, signal
from dcsep.model import (
    EMB,
    Model,
    ModelConfig,
    dpcl_loss,
    init_model_params,
    make_batch,
    signal_loss,
    utterance_arrays,
)
from fdcheck import max_rel_error

TINY = ModelConfig(n_bins=3, embedding_dim=2, hidden_units=3, blstm_layers=1,
                   enh_hidden_units=2, enh_blstm_layers=1, alpha=3.0, cluster_iters=2)


def random_batch(rng, B=2, T=4, F=3, C=2, lengths=None):
    ref = rng.random((C, B, T, F)) + 0.05
    mix = ref.sum(0)
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    valid = (np.arange(T)[None, :, None] < lengths[:, None, None]).astype(float)
    Y = (ref.argmax(0)[..., None] == np.arange(C)).astype(float)
    return {"feats": rng.normal(size=(B, T, F)) * valid, "mix_mag": mix * valid, "ref_mag": ref * valid,
            "Y": Y * valid[..., None], "w": np.broadcast_to(valid, (B, T, F)).copy(), "lengths": lengths}


def pad_batch(batch, extra, rng):
    """Append ``extra`` junk frames that the lengths mark invalid."""
    out = dict(batch)
    for k in ("feats", "mix_mag", "w"):
        out[k] = np.concatenate([batch[k], np.zeros(batch[k].shape[:1] + (extra,) + batch[k].shape[2:])], 1)
    out["feats"][:, -extra:] = rng.normal(size=out["feats"][:, -extra:].shape)
    out["ref_mag"] = np.concatenate([batch["ref_mag"], np.zeros(batch["ref_mag"].shape[:2] + (extra,) + batch["ref_mag"].shape[3:])], 2)
    out["Y"] = np.concatenate([batch["Y"], np.zeros(batch["Y"].shape[:1] + (extra,) + batch["Y"].shape[2:])], 1)
    return out


@pytest.fixture
def frozen_init(monkeypatch):
    """Pin k-means++ centroids to their first draw so finite differences see a constant init."""
    seen = {}
    real = cluster.kmeanspp_init

    def pinned(V, w, n, rng):
        # weights identify the segment and do not move with the parameters
        key = (np.asarray(w).tobytes(), n)
        if key not in seen:
            seen[key] = real(V, w, n, rng)
        return seen[key].copy()

    monkeypatch.setattr(cluster, "kmeanspp_init", pinned)


def test_dpcl_loss_fd(rng):
    params = init_model_params(TINY, np.random.default_rng(0), with_enhancer=False)
    batch = random_batch(rng, lengths=[4, 3])
    loss, grads = dpcl_loss(params, batch, TINY)
    err = max_rel_error(lambda: dpcl_loss(params, batch, TINY, need_grad=False)[0], params, grads)
    assert err < 1e-4


def test_signal_loss_end_to_end_fd(rng, frozen_init):
    batch = random_batch(rng, B=1, T=3, lengths=[3])
    params = init_model_params(TINY, np.random.default_rng(1))
    loss, grads = signal_loss(params, batch, TINY, seed=4)
    assert set(grads) == set(params)
    emb = {k: params[k] for k in params if k.startswith(EMB)}
    f = lambda: signal_loss(params, batch, TINY, seed=4, need_grad=False)[0]
    assert max_rel_error(f, emb, grads) < 1e-4
    enh = {k: params[k] for k in params if not k.startswith(EMB)}
    assert max_rel_error(f, enh, grads) < 1e-4


def test_signal_loss_with_dpcl_term_fd(rng, frozen_init):
    batch = random_batch(rng, B=2, T=3, lengths=[3, 2])
    params = init_model_params(TINY, np.random.default_rng(2))
    _, grads = signal_loss(params, batch, TINY, seed=1, dpcl_weight=0.5)
    f = lambda: signal_loss(params, batch, TINY, seed=1, need_grad=False, dpcl_weight=0.5)[0]
    assert max_rel_error(f, {k: params[k] for k in params if k.startswith(EMB)}, grads) < 1e-4


def test_enhancement_only_has_no_embedding_grads(rng):
    batch = random_batch(rng)
    params = init_model_params(TINY, np.random.default_rng(0))
    a, grads = signal_loss(params, batch, TINY, train_embedding=False)
    assert grads and not any(k.startswith(EMB) for k in grads)
    b, _ = signal_loss(params, batch, TINY, train_embedding=True)
    assert a == b


@pytest.mark.parametrize("which", ["dpcl", "signal"])
def test_padding_extension_invariance(rng, which):
    batch = random_batch(rng, B=2, T=5, lengths=[5, 3])
    padded = pad_batch(batch, 4, rng)
    params = init_model_params(TINY, np.random.default_rng(3))
    fn = (lambda b: dpcl_loss(params, b, TINY)) if which == "dpcl" else (lambda b: signal_loss(params, b, TINY, seed=2))
    la, ga = fn(batch)
    lb, gb = fn(padded)
    assert lb == pytest.approx(la, rel=1e-12)
    for k in ga:
        np.testing.assert_allclose(gb[k], ga[k], rtol=1e-9, atol=1e-14)


def test_utterance_arrays_and_batch(rng):
    scfg = signal.SignalConfig()
    refs = rng.normal(size=(2, 2000)) * 0.1
    u = utterance_arrays(refs.sum(0), refs, None, scfg)
    T = u["feats"].shape[0]
    assert u["ref_mag"].shape == (T, 2, 129)
    np.testing.assert_array_equal(u["Y"].sum(-1), 1.0)
    seg = {k: u[k] for k in ("feats", "mix_mag", "ref_mag", "Y", "w")}
    seg["length"] = T
    b = make_batch([seg, seg])
    assert b["ref_mag"].shape == (2, 2, T, 129)
    np.testing.assert_array_equal(b["ref_mag"][1, 0], u["ref_mag"][:, 1])


def _toy_model(F=129, seed=0):
    cfg = ModelConfig(n_bins=F, embedding_dim=3, hidden_units=4, blstm_layers=2,
                      enh_hidden_units=3, enh_blstm_layers=1)
    stats = signal.GlobalStats(np.zeros(F), np.ones(F))
    return Model(cfg, init_model_params(cfg, np.random.default_rng(seed)), stats, meta={"enh_sources": [2]})


def test_checkpoint_forward_equality(tmp_path, rng):
    m = _toy_model()
    x = rng.normal(size=3000) * 0.1
    m.save(tmp_path / "m.ckpt")
    m2, _ = Model.load(tmp_path / "m.ckpt")
    assert m2.cfg == m.cfg and m2.meta == m.meta
    np.testing.assert_array_equal(m2.embeddings(x)[1], m.embeddings(x)[1])
    np.testing.assert_array_equal(m2.separate(x, 2, "enhanced"), m.separate(x, 2, "enhanced"))


def test_masks_modes(rng):
    m = _toy_model()
    x = rng.normal(size=3000) * 0.1
    _, hard = m.masks(x, 2, "hard")
    assert set(np.unique(hard)) <= {0.0, 1.0}
    np.testing.assert_array_equal(hard.sum(0), 1.0)
    _, soft = m.masks(x, 3, "soft")
    np.testing.assert_allclose(soft.sum(0), 1.0, atol=1e-12)
    _, enh = m.masks(x, 2, "enhanced")
    np.testing.assert_allclose(enh.sum(0), 1.0, atol=1e-12)
    with pytest.raises(ValueError, match="trained for"):
        m.masks(x, 3, "enhanced")
    with pytest.raises(ValueError):
        m.masks(x, 2, "bogus")


def test_enhanced_estimates_sum_to_interior_mixture(rng):
    m = _toy_model()
    x = rng.normal(size=4000) * 0.1
    est = m.separate(x, 2, "enhanced")
    lo, hi = m.scfg.covered_range(signal.stft(x, m.scfg).shape[0])
    np.testing.assert_allclose(est.sum(0)[lo:hi], x[lo:hi], atol=1e-9)


def test_layer_activations(rng):
    m = _toy_model()
    x = rng.normal(size=2000)
    logmag, hid = m.layer_activations(x, 1)
    assert hid.shape == (logmag.shape[0], 8)
    with pytest.raises(ValueError):
        m.layer_activations(x, 2)
    with pytest.raises(ValueError):
        m.layer_activations(x, -1)
