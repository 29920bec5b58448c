import math

import numpy as np
import pytest

from noisycnn import model as M
from noisycnn import train as T
from noisycnn.noisegen import build_uniform_noise, corrupt_labels
from noisycnn.textpipe import LabeledDataset, SyntheticSpec, init_embeddings, make_synthetic_corpus


# ------------------------------------------------------------ optimizers

def test_adadelta_zero_grad_is_noop():
    p = np.array([1.0, -2.0])
    st = {}
    T.adadelta_step(p, np.zeros(2), st)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adadelta_first_and_second_step():
    p, st = np.array([0.0]), {}
    T.adadelta_step(p, np.array([1.0]), st, rho=0.95, eps=1e-6)
    assert p[0] == pytest.approx(-0.004472091234310839, rel=1e-12)
    T.adadelta_step(p, np.array([1.0]), st, rho=0.95, eps=1e-6)
    assert p[0] == pytest.approx(-0.009001153499844046, rel=1e-12)
    # state persists: two steps differ from a single doubled step
    q = np.array([0.0])
    T.adadelta_step(q, np.array([2.0]), {})
    assert q[0] != pytest.approx(p[0])


def test_adadelta_shape_mismatch():
    with pytest.raises(ValueError):
        T.adadelta_step(np.zeros(2), np.zeros(3), {})


def test_sgd_steps():
    p = np.array([0.0])
    T.sgd_step(p, np.array([2.0]), {}, lr=0.1)
    assert p[0] == pytest.approx(-0.2)
    p = np.array([1.0])
    T.sgd_step(p, np.zeros(1), {}, lr=0.1)
    assert p[0] == 1.0
    p, st = np.array([1.0]), {}
    T.sgd_step(p, np.array([2.0]), st, lr=0.1, momentum=0.9)
    T.sgd_step(p, np.array([1.0]), st, lr=0.1, momentum=0.9)
    assert p[0] == pytest.approx(0.52, abs=1e-15)


def test_optimizer_updates_commute_across_tensors():
    rng = np.random.default_rng(0)
    a = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
    g = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
    b = {k: a[k].copy() for k in ("y", "x")}
    oa, ob = T.Optimizer("adadelta"), T.Optimizer("adadelta")
    for _ in range(3):
        oa.step(a, g)
        ob.step(b, g)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        T.TrainConfig(patience=0)
    with pytest.raises(ValueError):
        T.TrainConfig(rho=1.0)


# --------------------------------------------------------------- helpers

SMALL = SyntheticSpec(n=400, n_dev=100, n_test=100, t=12, vocab_size=300, signal_tokens_per_class=10)


def setup(spec=SMALL, seed=0, p=0.0, noise=True, lam=0.01, **cfg_kw):
    (tr, dv, te), vocab = make_synthetic_corpus(spec, np.random.default_rng([seed, 0]))
    phi = build_uniform_noise(spec.k, p)
    tr = corrupt_labels(tr, phi, np.random.default_rng([seed, 1]))
    dv = corrupt_labels(dv, phi, np.random.default_rng([seed, 2]))
    kw = dict(k=spec.k, vocab_size=len(vocab), t_fixed=spec.t, d=16, feature_maps=8, lam=lam)
    kw.update(cfg_kw)
    cfg = M.ModelConfig(**kw)
    params = M.init_base_params(cfg, init_embeddings(vocab, cfg.d, np.random.default_rng([seed, 3])),
                                np.random.default_rng([seed, 4]))
    psi = M.init_noise_layer(spec.k) if noise else None
    return tr, dv, te, cfg, params, psi


def run(seed=0, tcfg=None, **kw):
    tr, dv, te, cfg, params, psi = setup(seed=seed, **kw)
    tcfg = tcfg or T.TrainConfig(batch_size=20, max_epochs=4, patience=10)
    out = T.train(tr, dv, tcfg, cfg, params, psi, np.random.default_rng([seed, 5]),
                  np.random.default_rng([seed, 6]), test_set=te)
    return out, (tr, dv, te, cfg)


# -------------------------------------------------------------- training

def test_zero_epochs_returns_initial_state():
    tr, dv, te, cfg, params, psi = setup()
    init = {k: v.copy() for k, v in params.items()}
    bp, bpsi, rec = T.train(tr, dv, T.TrainConfig(max_epochs=0), cfg, params, psi,
                            np.random.default_rng(0), np.random.default_rng(1))
    assert rec.history == [] and rec.best_epoch is None
    for k in init:
        np.testing.assert_array_equal(bp[k], init[k])
    np.testing.assert_array_equal(bpsi, psi)


def test_empty_train_set():
    tr, dv, te, cfg, params, psi = setup()
    empty = LabeledDataset(np.zeros((0, cfg.t_fixed), int), np.zeros(0, int), cfg.k, "train", noisy_labels=np.zeros(0, int))
    with pytest.raises(ValueError):
        T.train(empty, dv, T.TrainConfig(), cfg, params, psi, np.random.default_rng(0), np.random.default_rng(1))


def test_training_is_bit_reproducible():
    (p1, s1, r1), _ = run(seed=3, p=0.3)
    (p2, s2, r2), _ = run(seed=3, p=0.3)
    assert r1.to_jsonl() == r2.to_jsonl()
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    np.testing.assert_array_equal(s1, s2)


def test_best_epoch_is_first_argmax_of_dev():
    (bp, bpsi, rec), (tr, dv, te, cfg) = run(seed=1, p=0.3, tcfg=T.TrainConfig(batch_size=20, max_epochs=6, patience=2))
    devs = [row["dev_acc"] for row in rec.history]
    assert rec.best_epoch == int(np.argmax(devs))
    assert T.evaluate_noisy(dv, bp, bpsi, cfg) == devs[rec.best_epoch]
    assert T.evaluate_clean(te, bp, cfg) == rec.history[rec.best_epoch]["test_acc"]
    np.testing.assert_array_equal(rec.psi, bpsi)
    # patience respected
    assert len(devs) - 1 - rec.best_epoch <= 2


def test_noise_layer_actually_trains():
    (bp, bpsi, rec), _ = run(seed=2, p=0.4)
    assert rec.history[0]["psi_fro"] != pytest.approx(2 * 4.0)
    assert not np.array_equal(bpsi, 4 * np.eye(4))


def test_strong_regularizer_shrinks_psi():
    tcfg = T.TrainConfig(batch_size=20, max_epochs=3, patience=10)
    (_, s10, r10), _ = run(seed=4, p=0.4, lam=10.0, tcfg=tcfg)
    (_, s0, r0), _ = run(seed=4, p=0.4, lam=0.0, tcfg=tcfg)
    assert r10.history[-1]["psi_fro"] < r0.history[-1]["psi_fro"]


def test_clean_synthetic_reaches_high_accuracy():
    spec = SyntheticSpec()
    (bp, _, rec), (tr, dv, te, cfg) = run(seed=0, spec=spec, noise=False, d=32, feature_maps=16,
                                          tcfg=T.TrainConfig(batch_size=50, max_epochs=30, patience=3))
    assert T.evaluate_clean(te, bp, cfg) >= 0.95


# ------------------------------------------------------------ evaluation

def test_evaluate_clean_perfect_and_errors():
    tr, dv, te, cfg, params, psi = setup()
    pred = T.predict_base(te, params, cfg)
    relabeled = LabeledDataset(te.tokens, pred, cfg.k, "test")
    assert T.evaluate_clean(relabeled, params, cfg) == 1.0
    assert T.evaluate_clean(te, params, cfg) == T.evaluate_clean(te, params, cfg)
    with pytest.raises(ValueError):
        T.evaluate_clean(LabeledDataset(np.zeros((0, cfg.t_fixed), int), np.zeros(0, int), cfg.k, "test"), params, cfg)


def test_random_two_class_model_is_at_chance():
    spec = SyntheticSpec(k=2, n=200, n_dev=10, n_test=200, t=12, vocab_size=300, signal_tokens_per_class=10)
    accs = []
    for seed in range(40):
        _, _, te, cfg, params, _ = setup(spec=spec, seed=seed)
        accs.append(T.evaluate_clean(te, params, cfg))
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_extract_features():
    tr, dv, te, cfg, params, psi = setup()
    f = T.extract_features(te, params, cfg)
    assert f.shape == (len(te), cfg.n_features)
    np.testing.assert_array_equal(f, T.extract_features(te, params, cfg))
    assert T.extract_features(te, params, cfg, kind="logits").shape == (len(te), cfg.k)
    zero = {k: (np.zeros_like(v) if k.startswith("conv") else v) for k, v in params.items()}
    assert not T.extract_features(te, zero, cfg).any()


# ---------------------------------------------------------------- probes

def test_probe_separable_toy():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-3, 0.5, size=(50, 2)), rng.normal(3, 0.5, size=(50, 2))])
    y = np.repeat([0, 1], 50)
    assert T.linear_probe(X, y, X, y, 2, rng=np.random.default_rng(1)) == 1.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(2000, 8))
    y = (X[:, 0] > 0).astype(int)
    Xt = rng.normal(size=(2000, 8))
    yt = (Xt[:, 0] > 0).astype(int)
    assert T.linear_probe(X, y, Xt, yt, 2, rng=np.random.default_rng(3)) > 0.95
    shuffled = rng.permutation(y)
    assert abs(T.linear_probe(X, shuffled, Xt, yt, 2, rng=np.random.default_rng(3)) - 0.5) < 0.05


def test_probe_deterministic_and_single_class():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(100, 3)), rng.integers(0, 3, size=100)
    a = T.linear_probe(X, y, X, y, 3, rng=np.random.default_rng(5))
    assert a == T.linear_probe(X, y, X, y, 3, rng=np.random.default_rng(5))
    with pytest.raises(ValueError):
        T.linear_probe(X, np.zeros(100, int), X, y, 3, rng=np.random.default_rng(5))


def test_run_record_jsonl():
    rec = T.RunRecord(history=[{"epoch": 0, "train_loss": 1.5, "dev_acc": 0.5, "test_acc": 0.25, "psi_fro": None}])
    assert rec.to_jsonl() == '{"epoch": 0, "train_loss": 1.5, "dev_acc": 0.5, "test_acc": 0.25, "psi_fro": null}\n'
    assert math.isfinite(rec.history[0]["train_loss"])
