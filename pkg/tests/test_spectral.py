import numpy as np
import pytest
from hypothesis import given, strategies as st

from sbmlab.graph_model import LabeledGraph, ModelParams, chain4_pattern, generate, identity_pattern
from sbmlab.spectral import (
    NonbacktrackingOperator,
    SpectralError,
    band_radius_formula,
    band_radius_forms,
    band_radius_trace_bound,
    empirical_spectrum,
    isolated_eigenvalue_formula,
    mean_field_matrix,
    split_isolated,
    write_spectrum_csv,
)

PAT2 = identity_pattern(2)
BASE = ModelParams.uniform(2, [3.0, 5.0], [0.1, 0.6])


def dense_oracle(g, w):
    # loop over ordered pairs of directed edges
    B = np.zeros((g.n_directed, g.n_directed))
    for e in range(g.n_directed):
        i, j = g.src[e], g.dst[e]
        for f in range(g.n_directed):
            k, i2 = g.src[f], g.dst[f]
            if i2 == i and k != j:
                B[e, f] = w[g.labels[f >> 1]]
    return B


def small_graph():
    # path 0-1-2-3 plus chord 1-3, two labels
    edges = np.array([[0, 1], [1, 2], [2, 3], [1, 3]])
    return LabeledGraph(4, 2, 2, edges, np.array([0, 1, 0, 1]))


def test_operator_matches_loop_oracle():
    g = small_graph()
    w = np.array([0.7, -0.3])
    B = NonbacktrackingOperator(g, w).to_dense()
    assert np.array_equal(B, dense_oracle(g, w))


def test_oriented_structure():
    g = small_graph()
    B = NonbacktrackingOperator(g, np.array([1.0, 1.0])).to_dense()
    # no backtracking: entry (i->j, j->i) is zero
    for e in range(g.n_directed):
        assert B[e, e ^ 1] == 0.0
    # oriented: B[a, b] and B[b, a] never both nonzero
    assert not np.any((B != 0) & (B.T != 0))
    # row of i->j has deg(i) - 1 entries
    deg = g.degrees
    assert np.array_equal((B != 0).sum(axis=1), deg[g.src] - 1)


def test_operator_random_graph_oracle():
    g = generate(PAT2, BASE, 40, 3)
    w = np.array([0.2, -0.9])
    op = NonbacktrackingOperator(g, w)
    assert np.allclose(op.to_dense(), dense_oracle(g, w))
    v = np.random.default_rng(0).normal(size=g.n_directed)
    assert np.allclose(op.matvec(v), dense_oracle(g, w) @ v)


def test_uniform_weights_zero_operator():
    g = generate(PAT2, BASE, 60, 1)
    summ = empirical_spectrum(g, BASE.with_x([0.5, 0.5]), PAT2)
    assert np.all(summ.eigenvalues == 0)
    assert summ.band_radius_formula == 0.0


def test_band_formula_value():
    est = BASE.with_x([0.85, 0.45])
    assert est.delta_c(PAT2) == pytest.approx([4.2, -1.0])
    expected = np.sqrt(4.2 ** 2 / 0.375 + 1.0 ** 2 / 0.625) / (2 * np.sqrt(8))
    assert band_radius_formula(est, PAT2) == pytest.approx(expected, rel=1e-14)
    assert band_radius_formula(est, PAT2) == pytest.approx(1.2330, abs=5e-4)


def test_standard_sbm_band():
    # one label: lambda_b = |dc| / (2 sqrt c)
    est = ModelParams.uniform(2, [4.0], [0.9])
    dc = est.delta_c(PAT2)[0]
    assert band_radius_formula(est, PAT2) == pytest.approx(abs(dc) / (2 * np.sqrt(4.0)))


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=4), st.lists(st.floats(0.2, 20.0), min_size=4, max_size=4),
       st.sampled_from([2, 3, 4]))
def test_band_forms_agree(xs, cs, q):
    est = ModelParams.uniform(q, cs[: len(xs)], xs)
    a, b = band_radius_forms(est, identity_pattern(q))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2), st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2),
       st.sampled_from(["id2", "id3", "chain4"]))
def test_nishimori_identity(x, xh, which):
    pat = {"id2": identity_pattern(2), "id3": identity_pattern(3), "chain4": chain4_pattern()}[which]
    pl = ModelParams.uniform(pat.q, [3.0, 5.0], x)
    iso = isolated_eigenvalue_formula(pl, pl, pat)
    lb = band_radius_formula(pl, pat)
    assert abs(pat.lambda2 * iso.iso) == pytest.approx((pat.lambda2 * lb) ** 2, rel=1e-12, abs=1e-12)
    other = isolated_eigenvalue_formula(pl, pl.with_x(xh), pat)
    assert other.iso == pytest.approx(other.iso_from_x, rel=1e-12, abs=1e-12)


def test_iso_zero_at_uniform_estimate():
    assert isolated_eigenvalue_formula(BASE, BASE.with_x([0.5, 0.5]), PAT2).iso == 0.0


def test_iso_stall_example():
    iso = isolated_eigenvalue_formula(BASE, BASE.with_x([0.3232, 0.6768]), PAT2)
    assert iso.iso > 1.0
    # hand value: 4 * (3 * 0.4 * 0.1768 + 5 * 0.1 * 0.1768)
    assert iso.iso == pytest.approx(4 * (3 * 0.4 * 0.1768 + 5 * 0.1 * 0.1768), rel=1e-12)


def test_mean_field_eigenvalues():
    est = BASE.with_x([0.1, 0.9])
    J = mean_field_matrix(BASE, est, PAT2)
    iso = isolated_eigenvalue_formula(BASE, est, PAT2)
    assert sorted(np.linalg.eigvals(J).real) == pytest.approx(sorted([iso.iso, iso.plus]))


def test_formula_rejections():
    skew = ModelParams(np.array([0.3, 0.7]), [3.0], [0.6])
    with pytest.raises(SpectralError):
        isolated_eigenvalue_formula(skew, skew, PAT2)
    from sbmlab.graph_model import make_pattern

    uneven = make_pattern([[1, 1, 0], [1, 0, 0], [0, 0, 1]])
    p3 = ModelParams.uniform(3, [3.0], [0.6])
    with pytest.raises(SpectralError):
        isolated_eigenvalue_formula(p3, p3, uneven)


def test_split_isolated():
    eigs = np.array([2.7, 1.0 + 1.0j, 1.0 - 1.0j, 0.3, -0.2j])
    band, iso = split_isolated(eigs, [2.72])
    assert band == pytest.approx(np.sqrt(2)) and iso == [2.7]
    band, iso = split_isolated(eigs, [])
    assert band == pytest.approx(np.sqrt(2)) and iso == [2.7]
    # an unmatched prediction falls back to the non-real pool
    band, iso = split_isolated(eigs, [5.0])
    assert band == pytest.approx(np.sqrt(2)) and iso == [2.7]


def test_iterative_matches_dense_leading():
    g = generate(PAT2, BASE, 300, 7)
    est = BASE.with_x([0.1, 0.9])
    d = empirical_spectrum(g, est, PAT2, "dense", planted=BASE)
    it = empirical_spectrum(g, est, PAT2, "iterative", planted=BASE, k=6)
    top = np.sort(np.abs(d.eigenvalues))[::-1][:4]
    assert np.sort(np.abs(it.eigenvalues))[::-1][:4] == pytest.approx(top, rel=1e-6)
    assert it.converged and it.residual < 1e-6


def test_dense_limit():
    g = generate(PAT2, BASE, 3000, 1)
    with pytest.raises(SpectralError, match="dense"):
        empirical_spectrum(g, BASE, PAT2, "dense")


def test_trace_bound_trivial_and_bulk_case():
    g = generate(PAT2, BASE, 2000, 2)
    assert band_radius_trace_bound(g, BASE.with_x([0.5, 0.5]), PAT2, 4, seed=0).value == 0.0
    # at the stall point every outlier sits inside the bulk
    big = generate(PAT2, BASE, 20000, 3)
    est = BASE.with_x([0.3232, 0.6768])
    tb = band_radius_trace_bound(big, est, PAT2, 8, seed=1)
    assert tb.value == pytest.approx(band_radius_formula(est, PAT2), rel=0.05)
    with pytest.raises(ValueError):
        band_radius_trace_bound(big, est, PAT2, 1)


def test_trace_bound_tracks_perron_for_one_label():
    # one label: B' = w B, whose Perron root c w dominates at large d
    pl = ModelParams.uniform(2, [6.0], [0.8])
    g = generate(PAT2, pl, 5000, 3)
    iso = isolated_eigenvalue_formula(pl, pl, PAT2)
    assert iso.plus == pytest.approx(3.6)
    assert band_radius_trace_bound(g, pl, PAT2, 60, probes=4, seed=0).value == pytest.approx(3.6, rel=0.1)


def test_trace_bound_no_overflow():
    g = generate(PAT2, BASE, 2000, 2)
    tb = band_radius_trace_bound(g, BASE.with_x([0.0, 1.0]), PAT2, 400, probes=4, seed=0)
    assert np.isfinite(tb.value) and tb.value > 1.0


def test_spectrum_files(tmp_path):
    g = generate(PAT2, BASE, 80, 5)
    summ = empirical_spectrum(g, BASE.with_x([0.1, 0.9]), PAT2, planted=BASE)
    write_spectrum_csv(tmp_path / "s.csv", summ.eigenvalues, header="hdr")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[:2] == ["# hdr", "re,im"] and len(lines) == 2 + g.n_directed
    summ.to_json(tmp_path / "s.json", header={"seed": 1})
    import json

    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["band_radius_formula"] == pytest.approx(summ.band_radius_formula)
    assert doc["band_radius_empirical"] >= 0
