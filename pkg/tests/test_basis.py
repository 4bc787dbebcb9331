import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from frk.basis import (
    BasisFunction,
    BasisSet,
    auto_basis,
    basis_from_json,
    build_S,
    eval_basis,
    local_basis,
    prune_basis,
    radial,
    tensor_basis,
)
from frk.baus import auto_baus
from frk.manifold import plane, real_line, sphere


def bisq(A=2.0, r=1.0):
    return BasisFunction("bisquare", (0.0, 0.0), r, A)


def test_bisquare_values():
    m = plane()
    assert eval_basis(bisq(), m, (0, 0)) == 2.0
    assert eval_basis(bisq(), m, (1, 0)) == 0.0
    assert eval_basis(bisq(), m, (1.5, 0)) == 0.0
    assert eval_basis(bisq(), m, (0.5, 0)) == pytest.approx(2.0 * 9 / 16, rel=1e-15)


def test_other_families():
    assert radial("gaussian", 2.0, 2.0) == pytest.approx(np.exp(-0.5))
    assert radial("exponential", 3.0, 3.0) == pytest.approx(np.exp(-1))
    v = np.sqrt(3.0)
    assert radial("matern32", 1.0, 1.0) == pytest.approx((1 + v) * np.exp(-v))


@pytest.mark.parametrize("family", ["gaussian", "exponential", "matern32"])
def test_monotone_decay(family):
    d = np.linspace(0, 10, 400)
    vals = radial(family, d, 1.3, 0.7)
    assert np.all(np.diff(vals) < 0)


def test_invalid_function():
    with pytest.raises(ValueError):
        BasisFunction("bisquare", (0, 0), 0.0)
    with pytest.raises(ValueError):
        BasisFunction("bisquare", (0, 0), 1.0, -1.0)
    with pytest.raises(ValueError):
        BasisFunction("wavelet", (0, 0), 1.0)


def test_local_basis_examples():
    g = np.array([(x, y) for y in (2, 5, 8) for x in (2, 5, 8)], float)
    assert local_basis(plane(), g, np.full(9, 2.0)).r == 9
    assert local_basis(plane(), [(0.0, 0.0)], [1.0]).r == 1
    t = local_basis(real_line(), np.arange(2, 28, 4.0), np.full(7, 3.0), "gaussian")
    assert t.r == 7
    assert np.all(t.resolutions == 0)
    with pytest.raises(ValueError):
        local_basis(plane(), g, np.full(8, 2.0))
    with pytest.raises(ValueError):
        local_basis(plane(), g[:1], [0.0])


def test_auto_basis_counts():
    ext = [(0, 1), (0, 1)]
    assert auto_basis(plane(), ext, nres=1).r == 9
    b2 = auto_basis(plane(), ext, nres=2)
    assert b2.r == 90
    assert [g.size for g in b2.resolution_groups()] == [9, 81]
    assert sorted(set(b2.resolutions.tolist())) == [1, 2]
    assert auto_basis(plane(), ext, nres=3, max_basis=50).r == 9
    assert auto_basis(plane(), ext, nres=3).r == 9 + 81 + 729
    with pytest.raises(ValueError):
        auto_basis(plane(), ext, nres=2, max_basis=5)


def test_auto_basis_geometry():
    b = auto_basis(plane(), [(0, 3), (0, 3)], nres=1)
    assert np.allclose(np.sort(np.unique(b.centres[:, 0])), [0.5, 1.5, 2.5])
    assert np.allclose(b.scales, 1.5)
    s = auto_basis(sphere(), [(-180, 180), (-90, 90)], nres=1)
    assert s.r == 15
    assert np.all(np.abs(s.centres[:, 1]) < 90)


def test_auto_basis_errors():
    with pytest.raises(ValueError):
        auto_basis(plane(), [(0, 0), (0, 1)])
    with pytest.raises(ValueError):
        auto_basis(plane(), [(0, 1), (0, 1)], nres=0)


def test_tensor_counts_and_product():
    sp9 = local_basis(plane(), np.random.default_rng(0).uniform(size=(9, 2)), np.full(9, 0.5))
    t7 = local_basis(real_line(), np.arange(2, 28, 4.0), np.full(7, 3.0), "gaussian")
    tb = tensor_basis(sp9, t7)
    assert tb.r == 63
    assert tb.manifold.kind == "st_plane"
    big = tensor_basis(auto_basis(plane(), [(0, 1), (0, 1)], nres=1, k0=6).subset(range(36)),
                       local_basis(real_line(), np.arange(8.0), np.ones(8)))
    assert big.r == 36 * 8
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.uniform(size=(20, 2)), rng.uniform(0, 28, 20)])
    full = tb.evaluate(X, sparse=False)
    Phi = sp9.evaluate(X[:, :2], sparse=False)
    Psi = t7.evaluate(X[:, 2:], sparse=False)
    for q in range(7):
        for p in range(9):
            expect = Phi[:, p] * Psi[:, q]
            assert np.allclose(full[:, q * 9 + p], expect, rtol=1e-15, atol=0)
    assert np.allclose(tb.evaluate(X, sparse=True).toarray(), full, rtol=1e-15, atol=0)


def test_tensor_one_by_one():
    s1 = local_basis(plane(), [(0.0, 0.0)], [2.0])
    t1 = local_basis(real_line(), [0.0], [1.0], "gaussian")
    tb = tensor_basis(s1, t1)
    v = tb.evaluate(np.array([[0.5, 0.5, 0.3]]), sparse=False)[0, 0]
    expect = radial("bisquare", np.sqrt(0.5), 2.0) * radial("gaussian", 0.3, 1.0)
    assert v == pytest.approx(expect, rel=1e-15)


def test_tensor_requires_real_line():
    s = local_basis(plane(), [(0.0, 0.0)], [2.0])
    with pytest.raises(ValueError):
        tensor_basis(s, s)


def test_build_S_centroid_matches_pointwise():
    rng = np.random.default_rng(2)
    baus = auto_baus(plane(), (0.1, 0.1), [(0, 1), (0, 1)])
    basis = local_basis(plane(), rng.uniform(size=(20, 2)), rng.uniform(0.1, 0.5, 20))
    S = build_S(basis, baus)
    assert sp.issparse(S)
    Sd = S.toarray()
    m = plane()
    for f_i, f in enumerate(basis.functions()):
        for i in range(baus.N):
            assert Sd[i, f_i] == pytest.approx(eval_basis(f, m, baus.centroids[i]), abs=1e-13)


def test_build_S_examples():
    baus = auto_baus(plane(), (1.0, 1.0), [(0, 3), (0, 1)])
    b = local_basis(plane(), [baus.centroids[1]], [1.0])
    S = build_S(b, baus).toarray()
    assert S[1, 0] == 1.0
    assert S[0, 0] == 0.0 and S[2, 0] == 0.0
    g = local_basis(plane(), [(0.0, 0.0)], [1.0], "gaussian")
    assert isinstance(build_S(g, baus), np.ndarray)


def test_build_S_monte_carlo_linear_cell():
    # an exponential profile far from its centre is nearly linear over a cell
    baus = auto_baus(plane(), (0.05, 0.05), [(10, 10.05), (0, 0.05)])
    f = local_basis(plane(), [(0.0, 0.025)], [100.0], "exponential")
    n = 4000
    mc = build_S(f, baus, "monte_carlo", n_samples=n, seed=3)[0, 0]
    cen = build_S(f, baus)[0, 0]
    rng = np.random.default_rng(0)
    U = baus.centroids + rng.uniform(-0.025, 0.025, size=(n, 2))
    sd = f.evaluate(U, sparse=False).std()
    assert abs(mc - cen) <= 3 * sd / np.sqrt(n)


def test_build_S_errors():
    b = local_basis(sphere(), [(0.0, 0.0)], [100.0])
    with pytest.raises(ValueError):
        build_S(b, auto_baus(plane(), (1, 1), [(0, 2), (0, 2)]))
    b2 = local_basis(plane(), [(0.0, 0.0)], [1.0])
    with pytest.raises(ValueError):
        build_S(b2, auto_baus(plane(), (1, 1), [(0, 2), (0, 2)]), method="quadrature")


def test_prune_basis():
    rng = np.random.default_rng(4)
    basis = local_basis(plane(), rng.uniform(size=(9, 2)), np.ones(9))
    S_Z = rng.uniform(0.1, 1, size=(5, 9))
    same, keep = prune_basis(basis, S_Z)
    assert same.r == 9 and np.array_equal(keep, np.arange(9))
    S_Z[:, 4] = 0
    red, keep = prune_basis(basis, sp.csr_matrix(S_Z))
    assert red.r == 8 and 4 not in keep
    S_Z[:, [0, 7]] = 0
    red, keep = prune_basis(basis, S_Z)
    assert red.r == 6
    assert np.array_equal(red.centres, basis.centres[keep])
    with pytest.raises(ValueError):
        prune_basis(basis, np.zeros((5, 9)))


def test_json_round_trip():
    b = auto_basis(plane(), [(0, 1), (0, 1)], nres=2, family="matern32")
    b2 = basis_from_json(b.to_json())
    X = np.random.default_rng(5).uniform(size=(30, 2))
    assert np.array_equal(b.evaluate(X), b2.evaluate(X))
    assert np.array_equal(b.resolutions, b2.resolutions)
    t = tensor_basis(local_basis(plane(), [(0.0, 0.0)], [1.0]),
                     local_basis(real_line(), [0.0, 1.0], [1.0, 1.0], "gaussian"))
    t2 = basis_from_json(t.to_json())
    Y = np.column_stack([X, X[:, 0]])
    assert np.array_equal(t.evaluate(Y, sparse=False), t2.evaluate(Y, sparse=False))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0, 20))
def test_bisquare_compact_support(scale, amp, d):
    v = radial("bisquare", d, scale, amp)
    if d >= scale:
        assert v == 0.0
    else:
        assert 0.0 <= v <= amp
