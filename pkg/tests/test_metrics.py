import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dcsep.metrics import (
    DB_CAP,
    REPORT_COLUMNS,
    evaluate_separation,
    ideal_binary_mask,
    magnitude_snr,
    read_report_tsv,
    si_sdr,
    summarize,
    wiener_like_filter,
    write_report_tsv,
    write_summary_tsv,
)


def test_si_sdr_caps(rng):
    s = rng.normal(size=500)
    assert si_sdr(s, s) == DB_CAP
    assert si_sdr(2 * s, s) == DB_CAP
    assert si_sdr(np.zeros(500), s) == -DB_CAP
    with pytest.raises(ValueError):
        si_sdr(s, np.zeros(500))
    with pytest.raises(ValueError):
        si_sdr(s, s[:-1])


def test_si_sdr_orthogonal_noise_10db(rng):
    s = rng.normal(size=1000)
    s -= s.mean()
    n = rng.normal(size=1000)
    n -= n.mean()
    n -= (n @ s) / (s @ s) * s
    n *= math.sqrt((s @ s) / 10 / (n @ n))
    assert si_sdr(s + n, s) == pytest.approx(10.0, abs=1e-6)


def test_si_sdr_mean_removed(rng):
    s = rng.normal(size=300)
    e = s + 0.3 * rng.normal(size=300)
    assert si_sdr(e + 5.0, s - 2.0) == pytest.approx(si_sdr(e, s), abs=1e-9)


@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3), st.integers(0, 2**32 - 1))
def test_si_sdr_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    s, e = rng.normal(size=64), rng.normal(size=64)
    assert si_sdr(c * e, s) == pytest.approx(si_sdr(e, s), abs=1e-8)


def test_magnitude_snr_examples(rng):
    ref = rng.random((5, 4))
    assert magnitude_snr(ref, ref) == DB_CAP
    assert magnitude_snr(np.zeros_like(ref), ref) == 0.0
    est = rng.random((5, 4))
    num = sum(r * r for r in ref.ravel())
    den = sum((r - e) ** 2 for r, e in zip(ref.ravel(), est.ravel()))
    assert magnitude_snr(est, ref) == pytest.approx(10 * math.log10(num / den), abs=1e-9)
    with pytest.raises(ValueError):
        magnitude_snr(est, np.zeros_like(ref))


def test_ibm_examples():
    m = ideal_binary_mask(np.array([[3.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_array_equal(m, [[1, 0], [0, 1]])


def _ibm_is_optimal(mags):
    """Exhaustive oracle: est = mask * (sum of source magnitudes)."""
    mix = mags.sum(0)
    ibm = ideal_binary_mask(mags)
    flat = mix.ravel()
    for c in range(mags.shape[0]):
        best = magnitude_snr(ibm[c] * mix, mags[c])
        for bits in itertools.product([0.0, 1.0], repeat=flat.size):
            alt = magnitude_snr(np.reshape(bits, mix.shape) * mix, mags[c])
            assert best >= alt - 1e-9


def test_ibm_exhaustive_2x3(rng):
    _ibm_is_optimal(rng.random((2, 2, 3)))


@given(arrays(np.float64, st.tuples(st.just(2), st.integers(1, 8)), elements=st.floats(0.01, 10.0)))
def test_ibm_optimal_small(mags):
    _ibm_is_optimal(mags)


@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_ibm_partition_and_permutation(C, seed):
    rng = np.random.default_rng(seed)
    mags = rng.random((C, 6))
    m = ideal_binary_mask(mags)
    np.testing.assert_array_equal(m.sum(0), 1.0)
    perm = rng.permutation(C)
    np.testing.assert_array_equal(ideal_binary_mask(mags[perm]), m[perm])


def test_wiener_examples():
    m = wiener_like_filter(np.array([[3.0, 2.0, 0.0], [1.0, 2.0, 0.0]]))
    np.testing.assert_allclose(m[:, 0], [0.9, 0.1])
    np.testing.assert_allclose(m[:, 1], [0.5, 0.5])
    np.testing.assert_allclose(m[:, 2], [0.5, 0.5])
    with pytest.raises(ValueError):
        wiener_like_filter(np.ones((1, 3)))


@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_wiener_partition(C, seed):
    rng = np.random.default_rng(seed)
    mags = rng.random((C, 5, 3)) * (rng.random((C, 5, 3)) > 0.3)
    m = wiener_like_filter(mags)
    assert np.all((m >= 0) & (m <= 1))
    energetic = (mags**2).sum(0) > 0
    np.testing.assert_allclose(m.sum(0)[energetic], 1.0, atol=1e-12)
    np.testing.assert_allclose(m[:, ~energetic], 1.0 / C)


# ---------------------------------------------------------------- evaluation


def _signals(rng, C=2, n=2048):
    refs = rng.normal(size=(C, n)) * np.linspace(0.5, 1.5, C)[:, None]
    return refs, refs.sum(0)


def test_evaluate_identity(rng):
    refs, mix = _signals(rng)
    rep = evaluate_separation(refs, refs, mix, "m0")
    assert rep.permutation == (0, 1)
    np.testing.assert_allclose(rep.improvement, DB_CAP - rep.input_sdr)
    np.testing.assert_allclose(rep.input_sdr, [si_sdr(mix, r) for r in refs])


def test_evaluate_swapped(rng):
    refs, mix = _signals(rng)
    a = evaluate_separation(refs, refs, mix)
    b = evaluate_separation(refs[::-1], refs, mix)
    assert b.permutation == (1, 0)
    np.testing.assert_allclose(b.improvement, a.improvement)
    np.testing.assert_allclose(b.magnitude_snr, a.magnitude_snr)


def test_evaluate_exhaustive_oracle(rng):
    refs, mix = _signals(rng, C=3)
    est = refs[[2, 0, 1]] + 0.8 * rng.normal(size=refs.shape)
    rep = evaluate_separation(est, refs, mix)
    totals = {p: sum(si_sdr(est[p[c]], refs[c]) for c in range(3)) for p in itertools.permutations(range(3))}
    assert rep.permutation == max(totals, key=totals.get)
    assert rep.permutation == (1, 2, 0)


@given(st.integers(0, 2**32 - 1))
def test_evaluate_estimate_order_invariance(seed):
    rng = np.random.default_rng(seed)
    refs, mix = _signals(rng, C=3, n=512)
    est = refs + 0.5 * rng.normal(size=refs.shape)
    perm = rng.permutation(3)
    a = evaluate_separation(est, refs, mix)
    b = evaluate_separation(est[perm], refs, mix)
    np.testing.assert_allclose(b.improvement, a.improvement)
    assert [perm[k] for k in b.permutation] == list(a.permutation)


def test_evaluate_shape_error(rng):
    refs, mix = _signals(rng)
    with pytest.raises(ValueError):
        evaluate_separation(refs[:1], refs, mix)
    with pytest.raises(ValueError):
        evaluate_separation(refs, refs, mix[:-1])


def test_report_round_trip(tmp_path, rng):
    refs, mix = _signals(rng)
    reps = [evaluate_separation(refs + 0.1 * rng.normal(size=refs.shape), refs, mix, f"m{i}") for i in range(3)]
    path = tmp_path / "report.tsv"
    write_report_tsv(path, reps)
    assert path.read_text().splitlines()[0].split("\t") == REPORT_COLUMNS
    rows = read_report_tsv(path)
    assert len(rows) == 6
    expect = [r for rep in reps for r in rep.rows()]
    for got, want in zip(rows, expect):
        assert got["mixture_id"] == want["mixture_id"] and got["source"] == want["source"]
        assert got["sdr_improvement_db"] == want["sdr_improvement_db"]
        assert got["permutation"] == (0, 1)


def test_report_bad_header(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("a\tb\n1\t2\n")
    with pytest.raises(ValueError):
        read_report_tsv(p)


def test_summarize_groups(tmp_path):
    rows = [{"mixture_id": m, "source": 0, "sdr_improvement_db": v, "magnitude_snr_db": 2 * v}
            for m, v in [("a", 1.0), ("a", 3.0), ("b", 5.0)]]
    s = summarize(rows, {"a": "same", "b": "diff"})
    assert s["overall"]["sdr_improvement_db"] == pytest.approx(3.0)
    assert s["same"] == {"count": 2, "sdr_improvement_db": 2.0, "magnitude_snr_db": 4.0}
    assert s["diff"]["count"] == 1
    write_summary_tsv(tmp_path / "s.tsv", s)
    lines = (tmp_path / "s.tsv").read_text().splitlines()
    assert lines[0] == "group\tcount\tsdr_improvement_db\tmagnitude_snr_db"
    assert len(lines) == 4
