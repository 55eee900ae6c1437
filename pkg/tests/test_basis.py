import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from basisconv import basis as bs
from basisconv.tensor import FilterBank, ShapeError, bank_from_matrix, vectorize


def random_bank(rng, p, d, l):
    return FilterBank(rng.standard_normal((p, d, d, l)), rng.standard_normal(p))


def fm_of(a, size=1, channels=None):
    a = np.asarray(a, dtype=float)
    return bs.FilterMatrix(a, size, channels if channels is not None else a.shape[0])


def test_jacobi_against_numpy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 5, 17):
        g = rng.standard_normal((n, n))
        s = g @ g.T
        vals, vecs = bs.jacobi_eigh(s)
        np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(s), atol=1e-10)
        np.testing.assert_allclose(s @ vecs, vecs * vals, atol=1e-10)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)


def test_build_filter_matrix():
    one = FilterBank(np.full((1, 1, 1, 1), 5.0), np.zeros(1))
    np.testing.assert_array_equal(bs.build_filter_matrix(one).A, [[5.0]])
    pair = FilterBank(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 1, 1, 2), np.zeros(2))
    np.testing.assert_array_equal(bs.build_filter_matrix(pair).A, np.eye(2))
    bank = random_bank(np.random.default_rng(1), 4, 3, 2)
    fm = bs.build_filter_matrix(bank)
    np.testing.assert_array_equal(bank_from_matrix(fm.A, 3, 2), bank.weights)


def test_eigen_identity():
    sp = bs.eigen_decompose(fm_of(np.eye(2)))
    np.testing.assert_allclose(sp.eigenvalues, [1.0, 1.0])
    np.testing.assert_allclose(np.abs(sp.eigenvectors), np.eye(2), atol=1e-15)


def test_eigen_single_filter():
    sp = bs.eigen_decompose(fm_of([[3.0], [4.0]]))
    np.testing.assert_allclose(sp.eigenvalues, [25.0])
    np.testing.assert_allclose(sp.eigenvectors[:, 0], [0.6, 0.8], atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 5), (5, 8), (6, 6)])
def test_eigen_residual_and_trace(shape):
    a = np.random.default_rng(2).standard_normal(shape)
    sp = bs.eigen_decompose(fm_of(a))
    lam1 = sp.eigenvalues[0]
    aat = a @ a.T
    for lam, f in zip(sp.eigenvalues, sp.eigenvectors.T):
        assert np.linalg.norm(aat @ f - lam * f) <= 1e-8 * lam1
    f = sp.eigenvectors
    assert np.abs(f.T @ f - np.eye(f.shape[1])).max() <= 1e-8
    assert abs(sp.total - np.linalg.norm(a) ** 2) <= 1e-8 * np.linalg.norm(a) ** 2
    assert np.all(np.diff(sp.eigenvalues) <= 0)
    assert sp.rank == min(shape)
    # independent check on the spectrum itself
    ref = np.sort(np.linalg.eigvalsh(aat))[::-1][: sp.rank]
    np.testing.assert_allclose(sp.eigenvalues, ref, rtol=1e-10)


def test_eigen_sign_convention():
    sp = bs.eigen_decompose(fm_of(np.random.default_rng(3).standard_normal((7, 4))))
    for f in sp.eigenvectors.T:
        assert f[np.abs(f).argmax()] > 0


def test_degenerate_bank():
    with pytest.raises(bs.DegenerateBankError, match="degenerate filter bank"):
        bs.eigen_decompose(fm_of(np.zeros((4, 3))))
    h = np.random.default_rng(4).standard_normal(9)
    sp = bs.eigen_decompose(fm_of(np.column_stack([h] * 4)))
    assert sp.rank == 1
    for t in (0.1, 0.5, 0.99, 1.0):
        assert bs.select_q(sp, t) == 1


def spectrum_of(eigs):
    eigs = np.asarray(eigs, dtype=float)
    keep = eigs > 0
    n = len(eigs)
    return bs.Spectrum(eigs[keep], np.eye(n)[:, keep], eigs[~keep], 1, n)


def test_select_q_examples():
    assert bs.select_q(spectrum_of([10, 0, 0]), 0.99) == 1
    assert bs.select_q(spectrum_of([6, 3, 1]), 0.85) == 2
    assert bs.select_q(spectrum_of([6, 3, 1]), 0.6) == 1
    sp = bs.eigen_decompose(fm_of(np.random.default_rng(5).standard_normal((9, 6))))
    assert bs.select_q(sp, 1.0) == sp.rank
    with pytest.raises(ValueError):
        bs.select_q(sp, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=12),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_select_q_monotone_and_minimal(eigs, t1, t2):
    sp = spectrum_of(sorted(eigs, reverse=True))
    lo, hi = sorted((t1, t2))
    q_lo, q_hi = bs.select_q(sp, lo), bs.select_q(sp, hi)
    assert q_lo <= q_hi
    frac = np.cumsum(sp.eigenvalues) / sp.total
    assert frac[q_hi - 1] >= hi - 1e-12
    if q_hi > 1:
        assert frac[q_hi - 2] < hi


def test_truncate_full_rank_spans_columns():
    a = np.random.default_rng(6).standard_normal((12, 5))
    sp = bs.eigen_decompose(fm_of(a))
    f = bs.truncate(sp, sp.rank).F
    assert np.linalg.norm(a - f @ f.T @ a) <= 1e-8 * np.linalg.norm(a)
    for q in range(1, sp.rank + 1):
        fq = bs.truncate(sp, q).F
        assert np.abs(fq.T @ fq - np.eye(q)).max() <= 1e-8
    with pytest.raises(ValueError):
        bs.truncate(sp, sp.rank + 1)


def test_truncate_single_filter():
    b = bs.truncate(bs.eigen_decompose(fm_of([[3.0], [4.0]])), 1)
    np.testing.assert_allclose(np.abs(b.F[:, 0]), [0.6, 0.8])
    assert b.origin == "eigen"


def test_project_and_reconstruct():
    rng = np.random.default_rng(7)
    h = rng.standard_normal((2, 2, 3))
    bank = FilterBank(h[None], np.zeros(1))
    v = vectorize(h)
    basis = bs.BasisSet((v / np.linalg.norm(v))[:, None], 2, 3)
    np.testing.assert_allclose(bs.project_weights(basis, bank), [[np.linalg.norm(v)]])

    eye = FilterBank(np.eye(2).reshape(2, 1, 1, 2), np.zeros(2))
    ident = bs.BasisSet(np.eye(2), 1, 2)
    np.testing.assert_array_equal(bs.project_weights(ident, eye), np.eye(2))
    np.testing.assert_array_equal(bs.reconstruct(ident, np.eye(2)).weights, eye.weights)

    bank = random_bank(rng, 6, 3, 2)
    sp = bs.eigen_decompose(bs.build_filter_matrix(bank))
    full = bs.truncate(sp, sp.rank)
    w = bs.project_weights(full, bank)
    back = bs.reconstruct(full, w, bank.biases)
    np.testing.assert_allclose(back.weights, bank.weights, atol=1e-8)
    np.testing.assert_array_equal(back.biases, bank.biases)


def test_projection_shape_mismatch():
    basis = bs.random_orthonormal(3, 2, 4, seed=0)
    with pytest.raises(ShapeError):
        bs.project_weights(basis, random_bank(np.random.default_rng(0), 2, 3, 3))
    with pytest.raises(ShapeError):
        bs.reconstruct(basis, np.ones((2, 5)))


def test_eigen_basis_beats_random_bases():
    rng = np.random.default_rng(8)
    bank = random_bank(rng, 10, 3, 2)
    fm = bs.build_filter_matrix(bank)
    sp = bs.eigen_decompose(fm)
    a = fm.A
    errs = []
    for q in range(1, sp.rank + 1):
        f = bs.truncate(sp, q).F
        err = np.linalg.norm(a - f @ (f.T @ a))
        errs.append(err)
        for seed in range(100):
            g = bs.random_orthonormal(3, 2, q, seed=seed).F
            assert err <= np.linalg.norm(a - g @ (g.T @ a)) + 1e-8
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))


def test_random_orthonormal():
    sq = bs.random_orthonormal(2, 1, 4, seed=3).F
    np.testing.assert_allclose(sq.T @ sq, np.eye(4), atol=1e-8)
    np.testing.assert_allclose(sq @ sq.T, np.eye(4), atol=1e-8)
    a = bs.random_orthonormal(3, 2, 5, seed=42)
    b = bs.random_orthonormal(3, 2, 5, seed=42)
    assert a.F.tobytes() == b.F.tobytes()
    assert a.origin == "random" and a.seed == 42
    for seed in range(100):
        f = bs.random_orthonormal(2, 2, 3, seed=seed).F
        assert np.abs(f.T @ f - np.eye(3)).max() <= 1e-8
    with pytest.raises(ValueError):
        bs.random_orthonormal(2, 2, 9, seed=0)


def test_basis_set_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        bs.BasisSet(np.ones((4, 2)), 2, 1)


def test_approx_error_extremes():
    basis = bs.BasisSet(np.eye(4)[:, :2], 2, 1)
    inside = np.array([1.0, -2.0, 0.0, 0.0]).reshape(1, 2, 2).transpose(1, 2, 0)
    outside = np.array([0.0, 0.0, 3.0, 1.0]).reshape(1, 2, 2).transpose(1, 2, 0)
    assert bs.approx_error(basis, inside).rel_sq_err <= 1e-12
    assert abs(bs.approx_error(basis, outside).rel_sq_err - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        bs.approx_error(basis, np.zeros((2, 2, 1)))


def test_approx_error_expectation():
    # rotational symmetry: E[||(I - FF^T) h||^2 / ||h||^2] = 1 - Q/n
    rng = np.random.default_rng(9)
    n, q = 8, 3
    vals = []
    for seed in range(1000):
        basis = bs.random_orthonormal(2, 2, q, seed=seed)
        vals.append(bs.approx_error(basis, rng.standard_normal((2, 2, 2))).rel_sq_err)
    assert abs(np.mean(vals) - (1 - q / n)) <= 0.05


def test_error_bounds():
    sq = bs.random_orthonormal(2, 1, 4, seed=0)
    lo, hi = bs.error_bounds(sq)
    assert abs(lo) <= 1e-12 and abs(hi) <= 1e-12
    h = np.random.default_rng(0).standard_normal((2, 2, 1))
    assert bs.approx_error(sq, h).rel_sq_err <= 1e-12
    part = bs.random_orthonormal(2, 2, 3, seed=1)
    lo, hi = bs.error_bounds(part)
    assert abs(lo) <= 1e-12 and hi == 1.0
