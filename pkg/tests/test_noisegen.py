import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisycnn import noisegen as ng
from noisycnn.textpipe import LabeledDataset


def dataset(labels, split="train", k=4):
    labels = np.asarray(labels)
    return LabeledDataset(np.zeros((len(labels), 3), dtype=np.int64), labels, k, split)


def test_uniform_noise_values():
    t = ng.build_uniform_noise(4, 0.4)
    assert np.all(np.diag(t.phi) == 0.7)
    off = t.phi[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, 0.1, rtol=0, atol=1e-15)
    assert t.kind == "uniform" and t.p == 0.4


def test_uniform_noise_edge_cases():
    np.testing.assert_array_equal(ng.build_uniform_noise(3, 0.0).phi, np.eye(3))
    np.testing.assert_allclose(ng.build_uniform_noise(2, 0.5).phi, [[0.75, 0.25], [0.25, 0.75]])
    with pytest.raises(ValueError):
        ng.build_uniform_noise(4, 1.5)
    with pytest.raises(ValueError):
        ng.build_uniform_noise(1, 0.2)


def test_random_noise_structure():
    t = ng.build_random_noise(5, 0.3, np.random.default_rng(0))
    assert np.all(np.diag(t.phi) == 1 - 0.3)
    np.testing.assert_allclose(t.phi.sum(axis=0), 1.0, atol=1e-9)


def test_random_noise_two_classes_is_deterministic():
    t = ng.build_random_noise(2, 0.35, np.random.default_rng(1))
    assert t.phi[1, 0] == pytest.approx(0.35, abs=1e-15)
    assert t.phi[0, 1] == pytest.approx(0.35, abs=1e-15)


def test_random_noise_monte_carlo_mean():
    # flat Dirichlet over 3 off-diagonal slots has mean 1/3 per slot
    rng = np.random.default_rng(2)
    acc = np.zeros((4, 4))
    for _ in range(10_000):
        acc += ng.build_random_noise(4, 0.4, rng).phi
    mean = acc / 10_000
    off = mean[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off - 0.4 / 3) < 0.01)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.floats(0, 1), st.integers(0, 2**31))
def test_constructors_are_column_stochastic(k, p, seed):
    for t in (ng.build_uniform_noise(k, p), ng.build_random_noise(k, p, np.random.default_rng(seed))):
        assert np.all(np.abs(t.phi.sum(axis=0) - 1) <= 1e-9)
        assert np.all((t.phi >= 0) & (t.phi <= 1))
        if np.ptp(t.phi) > 0:  # p = 1 uniform noise is a constant matrix
            assert ng.pearson(ng.column_normalize(t.phi), t.phi) == pytest.approx(1.0, abs=1e-12)


def test_custom_noise():
    np.testing.assert_array_equal(ng.build_custom_noise(np.eye(3)).phi, np.eye(3))
    with pytest.warns(UserWarning):
        t = ng.build_custom_noise([[2.0, 0.0], [2.0, 1.0]])
    np.testing.assert_allclose(t.phi[:, 0], [0.5, 0.5])
    with pytest.raises(ValueError):
        ng.build_custom_noise([[0.0, 1.0], [0.0, 0.0]])


def test_class_dependent_noise():
    t = ng.class_dependent_noise([0.9, 0.7, 0.8, 0.6])
    np.testing.assert_allclose(np.diag(t.phi), [0.9, 0.7, 0.8, 0.6])
    np.testing.assert_allclose(t.phi.sum(axis=0), 1.0, atol=1e-12)
    assert t.phi[0, 3] == pytest.approx(0.4 / 3)


def test_corrupt_identity_keeps_labels():
    ds = dataset(np.arange(100) % 4)
    out = ng.corrupt_labels(ds, ng.build_uniform_noise(4, 0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(out.noisy_labels, ds.labels)
    assert ds.noisy_labels is None  # input untouched


def test_corrupt_flip_rates():
    labels = np.arange(100_000) % 4
    ds = dataset(labels)
    u = ng.corrupt_labels(ds, ng.build_uniform_noise(4, 0.4), np.random.default_rng(1))
    assert abs(ng.flip_fraction(u.labels, u.noisy_labels) - 0.30) < 0.01
    r = ng.corrupt_labels(ds, ng.build_random_noise(4, 0.4, np.random.default_rng(2)), np.random.default_rng(3))
    assert abs(ng.flip_fraction(r.labels, r.noisy_labels) - 0.40) < 0.01
    np.testing.assert_array_equal(u.labels, labels)


def test_corrupt_empirical_columns_match_phi():
    phi = ng.class_dependent_noise([0.9, 0.7, 0.8, 0.6])
    labels = np.arange(200_000) % 4
    noisy = ng.sample_noisy(labels, phi, np.random.default_rng(4))
    emp = np.zeros((4, 4))
    np.add.at(emp, (noisy, labels), 1)
    emp /= emp.sum(axis=0)
    # 3 standard errors of a proportion over 50k draws
    se = np.sqrt(phi.phi * (1 - phi.phi) / 50_000)
    assert np.all(np.abs(emp - phi.phi) <= 3 * se + 1e-12)


def test_corrupt_deterministic():
    ds = dataset(np.arange(500) % 4)
    phi = ng.build_uniform_noise(4, 0.5)
    a = ng.corrupt_labels(ds, phi, np.random.default_rng(9))
    b = ng.corrupt_labels(ds, phi, np.random.default_rng(9))
    np.testing.assert_array_equal(a.noisy_labels, b.noisy_labels)


def test_corrupt_refuses_test_and_k_mismatch():
    with pytest.raises(ValueError):
        ng.corrupt_labels(dataset([0, 1], split="test"), ng.build_uniform_noise(4, 0.2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        ng.corrupt_labels(dataset([0, 1]), ng.build_uniform_noise(3, 0.2), np.random.default_rng(0))


def test_column_normalize():
    m = ng.build_uniform_noise(3, 0.3).phi
    np.testing.assert_allclose(ng.column_normalize(m), m)
    np.testing.assert_allclose(ng.column_normalize([[1.0], [3.0]]), [[0.25], [0.75]])
    np.testing.assert_allclose(ng.column_normalize([[-1.0], [3.0]]), [[-0.5], [1.5]])
    with pytest.raises(ValueError):
        ng.column_normalize([[0.0, 1.0], [0.0, 1.0]])


def test_pearson():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert ng.pearson(a, a) == pytest.approx(1.0)
    assert ng.pearson(a, -a + 7) == pytest.approx(-1.0)
    assert ng.pearson(a, [[1, 2], [3, 5]]) == pytest.approx(0.9827076298239908, abs=1e-12)
    with pytest.raises(ValueError):
        ng.pearson(np.ones((2, 2)), a)


def test_frobenius_norm():
    assert ng.frobenius_norm(np.eye(4)) == 2.0
    assert ng.frobenius_norm(np.zeros((3, 3))) == 0.0
    assert ng.frobenius_norm(2.5 * np.eye(9)) == pytest.approx(2.5 * 3)


def test_matrix_csv_round_trip(tmp_path):
    t = ng.build_random_noise(4, 0.37, np.random.default_rng(5))
    ng.save_matrix_csv(tmp_path / "phi.csv", t.phi)
    back = ng.load_transition_csv(tmp_path / "phi.csv")
    np.testing.assert_array_equal(back.phi, t.phi)


def test_matrix_csv_rejects_non_stochastic(tmp_path):
    (tmp_path / "bad.csv").write_text("0.5,0.5\n0.2,0.5\n")
    with pytest.raises(ValueError):
        ng.load_transition_csv(tmp_path / "bad.csv")
