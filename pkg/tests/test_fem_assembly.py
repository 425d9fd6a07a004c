import itertools

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from rsdsolve.fem_assembly import (
    PdeKind, assemble, element_matrix, export_matrix_market, manufactured_problem, mass_matrix,
)
from rsdsolve.grid_tree import ConfigurationError, build_grid

from conftest import make_problem
from oracles import dense_assembly, symbolic_element

KINDS = ["poisson", "weak", "strong", "lame"]

# exact values: symbolic integration (tests/oracles.py), hx = hy = 1
POISSON_UNIT = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6
MASS_UNIT = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36


def test_poisson_element_unit_square():
    Ke = element_matrix(PdeKind.POISSON, 1.0, 1.0)
    np.testing.assert_allclose(Ke, POISSON_UNIT, atol=1e-15)
    np.testing.assert_allclose(symbolic_element("poisson", 1.0, 1.0), POISSON_UNIT, atol=1e-15)


def test_weak_coupling_block_is_scaled_mass():
    Ke = element_matrix(PdeKind.WEAK_COUPLED, 1.0, 1.0)
    np.testing.assert_allclose(Ke[0::2, 1::2], MASS_UNIT / 100, atol=1e-16)
    np.testing.assert_allclose(Ke[1::2, 0::2], -MASS_UNIT / 100, atol=1e-16)
    np.testing.assert_allclose(mass_matrix(1.0, 1.0), MASS_UNIT, atol=1e-16)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("hx, hy", [(1.0, 1.0), (0.5, 0.25), (1 / 16, 1 / 16)])
def test_element_matches_symbolic(kind, hx, hy):
    np.testing.assert_allclose(element_matrix(PdeKind.parse(kind), hx, hy),
                               symbolic_element(kind, hx, hy), rtol=1e-13, atol=1e-13)


def test_literal_lame_sign_matches_symbolic():
    np.testing.assert_allclose(element_matrix("lame", 1.0, 1.0, literal_eq4_sign=True),
                               symbolic_element("lame", 1.0, 1.0, True), atol=1e-13)


@pytest.mark.parametrize("kind", KINDS)
def test_stiffness_annihilates_constants(kind):
    Ke = element_matrix(PdeKind.parse(kind), 0.7, 1.3)
    c = PdeKind.parse(kind).components
    for comp in range(c):
        blk = Ke[comp::c, comp::c]
        np.testing.assert_allclose(blk.sum(axis=1), 0.0, atol=1e-14)


def test_element_rejects_nonpositive_size():
    with pytest.raises(ConfigurationError):
        element_matrix(PdeKind.POISSON, 0.0, 1.0)


def test_poisson_two_subdomains_is_tridiagonal():
    _, _, K = make_problem("poisson", 2, 3)
    D = K.toarray()
    assert D.shape == (3, 3)
    np.testing.assert_allclose(np.diag(D), 8 / 3)
    np.testing.assert_allclose(D, np.diag(np.diag(D)) + np.diag([-1 / 3] * 2, 1) + np.diag([-1 / 3] * 2, -1),
                               atol=1e-15)


@pytest.mark.parametrize("P, N", list(itertools.product([2, 4], [3, 4, 5])))
def test_poisson_matches_dense_oracle(P, N):
    _, _, K = make_problem("poisson", P, N)
    np.testing.assert_allclose(K.toarray(), dense_assembly("poisson", P, N), rtol=0, atol=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_matches_dense_oracle(kind):
    _, _, K = make_problem(kind, 2, 3)
    np.testing.assert_allclose(K.toarray(), dense_assembly(kind, 2, 3), rtol=0, atol=1e-13)
    _, _, K = make_problem(kind, 4, 5)
    np.testing.assert_allclose(K.toarray(), dense_assembly(kind, 4, 5), rtol=0, atol=1e-12)


def test_literal_sign_assembly_matches_oracle():
    g = build_grid(P=2, N=4, components=2)
    K = assemble(g, PdeKind.NAVIER_LAME, literal_eq4_sign=True)
    np.testing.assert_allclose(K.toarray(), dense_assembly("lame", 2, 4, literal=True), atol=1e-12)


@pytest.mark.parametrize("kind, symmetric", [("poisson", True), ("lame", True),
                                             ("weak", False), ("strong", False)])
def test_symmetry_classification(kind, symmetric):
    _, _, K = make_problem(kind, 4, 5)
    asym = abs(K - K.T).max()
    if kind == "poisson":
        assert asym == 0.0
    elif symmetric:
        assert asym <= 1e-14 * abs(K).max()
    else:
        assert asym > 0.0


@pytest.mark.parametrize("kind", ["poisson", "lame"])
def test_symmetric_kinds_are_positive_definite(kind):
    _, _, K = make_problem(kind, 2, 5)
    assert np.linalg.eigvalsh(K.toarray()).min() > 0


def test_strong_coupling_is_antisymmetric_between_components():
    _, _, K = make_problem("strong", 4, 5)
    D = K.toarray()
    sym = (D + D.T) / 2
    uv = sym[0::2, 1::2]
    assert np.abs(uv).max() < 1e-13
    assert np.abs(D[0::2, 1::2]).max() > 0


def test_poisson_rows_diagonally_dominant():
    _, _, K = make_problem("poisson", 4, 6)
    D = K.toarray()
    off = np.abs(D).sum(axis=1) - np.abs(np.diag(D))
    assert np.all(np.diag(D) >= off - 1e-14)


def test_component_mismatch_rejected():
    g = build_grid(P=2, N=3, components=1)
    with pytest.raises(ConfigurationError):
        assemble(g, PdeKind.WEAK_COUPLED)


def test_csr_layout():
    _, _, K = make_problem("lame", 4, 5)
    assert isinstance(K, sp.csr_matrix)
    assert K.has_sorted_indices
    for i in range(K.shape[0]):
        cols = K.indices[K.indptr[i]:K.indptr[i + 1]]
        assert np.all(np.diff(cols) > 0)


def test_manufactured_problem_determinism_and_range():
    _, _, K = make_problem("poisson", 4, 5)
    u1, f1 = manufactured_problem(K, seed=7)
    u2, f2 = manufactured_problem(K, seed=7)
    assert np.array_equal(u1, u2) and np.array_equal(f1, f2)
    assert np.all(np.abs(u1) <= 1.0)
    assert np.array_equal(f1, K @ u1)
    u3, _ = manufactured_problem(K, seed=8)
    assert not np.array_equal(u1, u3)


def test_manufactured_zero_hook():
    _, _, K = make_problem("poisson", 2, 3)
    u, f = manufactured_problem(K, seed=1, zero=True)
    assert not u.any() and not f.any()


def test_matrix_market_export(tmp_path):
    _, _, K = make_problem("weak", 2, 4)
    path = tmp_path / "K.mtx"
    export_matrix_market(K, path)
    assert path.read_text().splitlines()[0] == "%%MatrixMarket matrix coordinate real general"
    back = scipy.io.mmread(str(path))
    assert abs(back - K).max() == 0.0
