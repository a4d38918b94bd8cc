import numpy as np
import pytest
from hypothesis import given, strategies as st

from sbmlab.graph_model import (
    CHAIN4,
    LabeledGraph,
    ModelParams,
    ModularPattern,
    ParametrizationError,
    PatternError,
    build_affinity,
    chain4_pattern,
    delta_c_to_x,
    generate,
    identity_pattern,
    make_pattern,
    overlap,
    project_strength,
    read_graph,
    total_variation,
    write_graph,
    x_to_delta_c,
)


def test_pattern_validation():
    with pytest.raises(PatternError):
        make_pattern([[1, 0], [1, 1]])
    with pytest.raises(PatternError):
        make_pattern([[1, 2], [2, 1]])
    with pytest.raises(PatternError):
        make_pattern([[1]])


def test_pattern_invariants():
    W = identity_pattern(3)
    assert W.row_sum == 1 and W.lambda2 == pytest.approx(1.0)
    ch = chain4_pattern()
    assert ch.row_sum == 2
    assert ch.lambda2 == pytest.approx(np.sqrt(2), abs=1e-12)
    assert sorted(np.round(np.linalg.eigvalsh(np.array(CHAIN4, float)), 12)) == pytest.approx([-np.sqrt(2), 0, np.sqrt(2), 2])
    assert ch.omega(np.full(4, 0.25)) == pytest.approx(0.5)
    assert identity_pattern(3).omega(np.full(3, 1 / 3)) == pytest.approx(1 / 3)


def test_affinity_closed_form():
    # c_in = c x / Omega, c_out = c (1 - x) / (1 - Omega), derived by hand
    pat = identity_pattern(3)
    par = ModelParams.uniform(3, [3.0, 5.0], [0.7, 0.1])
    aff = build_affinity(pat, par)
    om = 1 / 3
    for a, (c, x) in enumerate([(3.0, 0.7), (5.0, 0.1)]):
        assert aff[a, 0, 0] == pytest.approx(c * x / om)
        assert aff[a, 0, 1] == pytest.approx(c * (1 - x) / (1 - om))
    # average degree of a label is gamma' c gamma
    g = par.gamma
    assert np.einsum("s,ast,t->a", g, aff, g) == pytest.approx(par.c)


def test_affinity_uniform_point():
    pat = chain4_pattern()
    par = ModelParams.uniform(4, [3.0, 5.0], [0.5, 0.5])
    aff = build_affinity(pat, par)
    assert np.allclose(aff[0], 3.0) and np.allclose(aff[1], 5.0)
    assert total_variation(aff) == pytest.approx([0.0, 0.0])


def test_negative_affinity_names_label():
    pat = identity_pattern(2)
    par = ModelParams(np.array([0.5, 0.5]), [3.0], [0.5], affinity=np.array([[[1.0, -0.5], [-0.5, 1.0]]]))
    with pytest.raises(ParametrizationError, match="label 0"):
        build_affinity(pat, par)


def test_nonedge_check():
    pat = identity_pattern(2)
    par = ModelParams.uniform(2, [3.0], [0.9])
    with pytest.raises(ParametrizationError):
        build_affinity(pat, par, n=5)


@given(st.floats(0.0, 1.0), st.floats(0.5, 20.0), st.sampled_from([1 / 2, 1 / 3, 1 / 4]))
def test_x_delta_c_roundtrip(x, c, om):
    dc = x_to_delta_c(x, c, om)
    assert delta_c_to_x(dc, c, om) == pytest.approx(x, abs=1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=3), st.sampled_from([2, 3, 4]))
def test_project_strength_inverts(xs, q):
    pat = identity_pattern(q)
    par = ModelParams.uniform(q, [2.0 + a for a in range(len(xs))], xs)
    aff = build_affinity(pat, par)
    assert project_strength(pat, par.gamma, aff) == pytest.approx(np.array(xs), abs=1e-12)


def test_project_strength_align_undoes_relabeling():
    pat = chain4_pattern()
    par = ModelParams.uniform(4, [3.0, 5.0], [0.05, 0.9])
    aff = build_affinity(pat, par)
    assert project_strength(pat, par.gamma, aff, align=True) == pytest.approx([0.05, 0.9], abs=1e-12)
    perm = [2, 0, 3, 1]
    shuffled = aff[:, perm][:, :, perm]
    plain = project_strength(pat, par.gamma, shuffled)
    assert not np.allclose(plain, [0.05, 0.9], atol=1e-3)
    # x and 1 - x are related by a relabeling of chain4; the reference picks one
    for ref in ([0.1, 0.9], [0.9, 0.1]):
        want = np.array([0.05, 0.9]) if ref[0] < 0.5 else np.array([0.95, 0.1])
        got = project_strength(pat, par.gamma, shuffled, align=True, reference=ref)
        assert got == pytest.approx(want, abs=1e-12)


def test_generate_statistics():
    pat = identity_pattern(2)
    par = ModelParams.uniform(2, [3.0, 5.0], [0.1, 0.6])
    g = generate(pat, par, 20000, 0)
    assert g.empirical_degrees() == pytest.approx([3.0, 5.0], rel=0.03)
    s = g.planted
    same = s[g.edges[:, 0]] == s[g.edges[:, 1]]
    frac = [same[g.labels == a].mean() for a in range(2)]
    assert frac == pytest.approx([0.1, 0.6], abs=0.015)
    # simple graph
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    assert len({tuple(e) for e in g.edges.tolist()}) == g.n_edges


def test_generate_deterministic():
    pat = identity_pattern(2)
    par = ModelParams.uniform(2, [3.0], [0.8])
    a = generate(pat, par, 500, 9)
    b = generate(pat, par, 500, 9)
    assert np.array_equal(a.edges, b.edges) and np.array_equal(a.labels, b.labels)


def test_directed_edge_layout():
    g = LabeledGraph(4, 2, 1, np.array([[0, 1], [1, 2], [1, 3]]), np.zeros(3, dtype=np.int64))
    assert g.n_directed == 6
    assert np.array_equal(g.src[::2], [0, 1, 1]) and np.array_equal(g.dst[::2], [1, 2, 3])
    assert np.array_equal(g.src[1::2], g.dst[::2])
    assert np.array_equal(g.degrees, [1, 3, 1, 1])
    assert sorted(g.adjacency(1)) == [(0, 0), (2, 0), (3, 0)]


def test_overlap_permutation_invariant(rng):
    planted = rng.integers(0, 3, 300)
    perm = np.array([2, 0, 1])
    assert overlap(perm[planted], planted, 3) == 1.0
    noisy = planted.copy()
    noisy[:30] = (noisy[:30] + 1) % 3
    assert overlap(perm[noisy], planted, 3) == pytest.approx(0.9)


def test_graph_file_roundtrip(tmp_path):
    pat = identity_pattern(3)
    par = ModelParams.uniform(3, [2.0, 4.0], [0.8, 0.2])
    g = generate(pat, par, 300, 4)
    path = tmp_path / "g.txt"
    write_graph(path, g, header="hello")
    assert path.read_text().startswith("# hello")
    h = read_graph(path)
    assert (h.n, h.q, h.p) == (g.n, g.q, g.p)
    assert np.array_equal(h.edges, g.edges) and np.array_equal(h.labels, g.labels)
    assert np.array_equal(h.planted, g.planted)
