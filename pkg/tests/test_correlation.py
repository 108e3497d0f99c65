import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from graphprune.correlation import (ActivationStack, capture_activations, correlation_report, high_corr_pairs,
                                    pearson_matrix)
from graphprune.graph import channel_count, uniform_ratios
from graphprune.trainer import recalibrate_bn


def literal_oracle(f1, f2):
    h, w, m = f1.shape
    n = f2.shape[2]
    out = np.zeros((m, n))
    for i in range(m):
        si = f1[:, :, i].std()
        for j in range(n):
            sj = f2[:, :, j].std()
            for s in range(h):
                for t in range(w):
                    out[i, j] += abs(f1[s, t, i] * f2[s, t, j] / (si * sj))
    return out


def literal_standard(f1, f2):
    a, b = f1.reshape(-1, f1.shape[2]), f2.reshape(-1, f2.shape[2])
    return np.array([[np.corrcoef(a[:, i], b[:, j])[0, 1] for j in range(b.shape[1])] for i in range(a.shape[1])])


stacks = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


def test_literal_mode_matches_double_loop():
    rng = np.random.default_rng(0)
    f1, f2 = rng.standard_normal((4, 4, 2)), rng.standard_normal((4, 4, 3))
    P, skipped = pearson_matrix(f1, f2, "literal")
    assert not skipped
    assert np.max(np.abs(P - literal_oracle(f1, f2))) < 1e-10
    assert (P >= 0).all()


def test_standard_self_and_negation():
    f = np.random.default_rng(1).standard_normal((5, 6, 3))
    stacked = np.concatenate([f, -f], axis=2)
    P, _ = pearson_matrix(f, stacked)
    np.testing.assert_array_equal(np.diag(P[:, :3]), 1.0)
    np.testing.assert_array_equal(np.diag(P[:, 3:]), -1.0)


def test_standard_matches_corrcoef():
    rng = np.random.default_rng(2)
    f1, f2 = rng.standard_normal((6, 5, 4)), rng.standard_normal((6, 5, 3))
    np.testing.assert_allclose(pearson_matrix(f1, f2)[0], literal_standard(f1, f2), atol=1e-12)


def test_zero_variance_channels_are_skipped():
    rng = np.random.default_rng(3)
    f1, f2 = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 2))
    f1[:, :, 1] = 2.0
    f2[:, :, 0] = 0.0
    for mode in ("literal", "standard"):
        P, skipped = pearson_matrix(f1, f2, mode)
        assert skipped == [("row", 1), ("col", 0)]
        assert np.isnan(P[1]).all() and np.isnan(P[:, 0]).all()
        assert np.isfinite(P[[0, 2]][:, 1]).all()


def test_bad_inputs():
    with pytest.raises(ValueError):
        pearson_matrix(np.ones((4, 4, 2)), np.ones((3, 4, 2)))
    with pytest.raises(ValueError):
        pearson_matrix(np.ones((4, 4, 2)), np.ones((4, 4, 2)), mode="spearman")
    with pytest.raises(ValueError):
        ActivationStack(0, np.full((2, 2, 1), np.inf))
    with pytest.raises(ValueError):
        ActivationStack(0, np.ones((2, 2, 0)))


@settings(max_examples=50, deadline=None)
@given(stacks, st.integers(1, 5), st.integers(1, 5))
def test_standard_bounded_and_affine_invariant(rng, m, n):
    f1, f2 = rng.standard_normal((5, 4, m)), rng.standard_normal((5, 4, n))
    P, _ = pearson_matrix(f1, f2)
    assert np.all(np.abs(P) <= 1 + 1e-9)
    scaled = f1 * rng.uniform(0.1, 10, size=m) + rng.uniform(-5, 5, size=m)
    assert np.max(np.abs(pearson_matrix(scaled, f2)[0] - P)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(stacks, st.integers(1, 6))
def test_self_correlation_symmetric_unit_diagonal(rng, m):
    f = rng.standard_normal((4, 5, m))
    P, _ = pearson_matrix(f, f)
    np.testing.assert_allclose(P, P.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(P), 1.0, atol=1e-12)


# -- pair filter -------------------------------------------------------------

def test_zero_matrix_has_no_pairs():
    assert high_corr_pairs(np.zeros((4, 5))) == []


def test_threshold_is_strict():
    P = np.array([[0.8, -0.8], [0.8000001, -0.95]])
    assert high_corr_pairs(P, 0.8) == [(1, 1, -0.95), (1, 0, 0.8000001)]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-1, 1)),
       st.floats(0, 1))
def test_pairs_equal_brute_force(P, tau):
    want = {(i, j) for i in range(P.shape[0]) for j in range(P.shape[1]) if abs(P[i, j]) > tau}
    got = high_corr_pairs(P, tau)
    assert {(i, j) for i, j, _ in got} == want
    mags = [abs(v) for _, _, v in got]
    assert mags == sorted(mags, reverse=True)


def test_nan_never_reported():
    assert high_corr_pairs(np.array([[np.nan, 0.9]])) == [(0, 1, 0.9)]


def test_report_summary():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((4, 4, 3))
    rep = correlation_report(ActivationStack(2, f), ActivationStack(5, np.concatenate([f, -f], axis=2)))
    s = rep.summary()
    assert s["layers"] == [2, 5] and s["shape"] == [3, 6] and s["num_pairs"] == len(rep.pairs) >= 6
    assert s["skipped_rows"] == s["skipped_cols"] == []


# -- capture -------------------------------------------------------------------

def test_capture_shapes_and_determinism(trained_v1, synth4):
    g = trained_v1.graph
    r = uniform_ratios(g, 0.5)
    recalibrate_bn(trained_v1, r, synth4[1])
    probe = synth4[2].images[:16]
    a = capture_activations(trained_v1, r, [0, 2], probe)
    b = capture_activations(trained_v1, r, [0, 2], probe)
    for i in (0, 2):
        np.testing.assert_array_equal(a[i].maps, b[i].maps)
        assert a[i].channels == channel_count(g.nodes[i].base_out_channels, 0.5)
        assert a[i].maps.shape[0] == 16 * g.nodes[i].spatial_out


def test_capture_zero_probe_first_layer(trained_v1, synth4):
    r = uniform_ratios(trained_v1.graph, 1.0)
    recalibrate_bn(trained_v1, r, synth4[1])
    zero = np.zeros((2, 3, 8, 8), dtype=np.float32)
    stack = capture_activations(trained_v1, r, [0], zero)[0]
    assert not stack.maps.any()


def test_capture_unknown_layer(trained_v1):
    r = uniform_ratios(trained_v1.graph, 1.0)
    with pytest.raises(ValueError):
        capture_activations(trained_v1, r, [99], np.zeros((1, 3, 8, 8), dtype=np.uint8))
