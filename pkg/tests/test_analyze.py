import json
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soundgood.analyze import (
    SCHEMA_VERSION,
    MetricsReport,
    analyze_dirs,
    binomial_test_two_tailed,
    emit_report,
    histogram_counts,
    histogram_edges,
    load_report,
    onset_report,
    rolloff_error_report,
)
from soundgood.data import DegradationSpec, synthesize_corpus, synthesize_pair
from soundgood.diffarray import ContractError
from soundgood.dsp import AudioBuffer


def tone_mix(seed, n=32000):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / 16000
    return AudioBuffer(sum(rng.uniform(0.1, 0.4) * np.sin(2 * np.pi * f * t) for f in rng.uniform(50, 3000, 6)))


# histogram --------------------------------------------------------------------------


def test_histogram_layout():
    edges = histogram_edges()
    assert edges[0] == -5000 and edges[-1] == 5000 and len(edges) == 201
    counts = histogram_counts(np.array([-6000.0, -5000.0, -0.1, 0.0, 49.9, 50.0, 4999.0, 5000.0]))
    assert len(counts) == 202 and sum(counts) == 8
    assert counts[0] == 1 and counts[1] == 1 and counts[-1] == 1
    assert counts[100] == 1 and counts[101] == 2 and counts[102] == 1


# rolloff -----------------------------------------------------------------------------


def test_rolloff_identity():
    refs = {f"t{i}": tone_mix(i) for i in range(3)}
    rep = rolloff_error_report(refs, refs)
    assert rep.mean_signed == 0.0 and rep.mean_abs == 0.0 and rep.median == 0.0
    assert rep.analyzed > 0 and rep.hist_counts[101] == rep.analyzed
    assert rep.total == rep.analyzed + rep.gated + rep.skipped
    assert all(np.isnan(f[4]) or f[4] == 0.0 for f in rep.frames if f[4] != "")


def test_rolloff_gating_and_unpaired():
    quiet = AudioBuffer(np.concatenate([tone_mix(0, 16000).samples, np.zeros(16000)]))
    rep = rolloff_error_report({"a": quiet, "b": quiet}, {"a": quiet, "c": quiet})
    assert rep.unpaired == ["b", "c"]
    assert rep.gated > 0 and len(rep.tracks) == 1


def test_rolloff_sign_follows_degradation():
    for kind, sign in (("hfnoise", 1), ("lowpass", -1)):
        est, ref = {}, {}
        for i in range(4):
            truth, degraded = synthesize_pair(DegradationSpec.sample(kind, i), 32000, np.random.default_rng(i))
            est[f"t{i}"], ref[f"t{i}"] = degraded, truth
        rep = rolloff_error_report(est, ref)
        assert sign * rep.mean_signed > 100 and sign * rep.median > 0


def test_rolloff_rate_mismatch():
    with pytest.raises(ContractError, match="sample rates"):
        rolloff_error_report({"a": AudioBuffer(np.zeros(4000), 16000)}, {"a": AudioBuffer(np.zeros(4000), 8000)})


# onsets -------------------------------------------------------------------------------


def clicks(seed, n=32000):
    rng = np.random.default_rng(seed)
    x = np.zeros(n)
    for pos in rng.choice(np.arange(1000, n - 1000, 1500), 10, replace=False):
        x[pos:pos + 200] += rng.uniform(0.3, 1.0) * np.exp(-np.arange(200) / 40) * rng.choice([-1, 1], 200)
    return AudioBuffer(x)


def test_onset_identity_and_unpaired():
    refs = {f"t{i}": clicks(i) for i in range(3)}
    rep = onset_report({**refs, "extra": clicks(9)}, refs)
    assert rep.counts.f1 == 1.0 and rep.counts.fp == rep.counts.fn == 0
    assert rep.unpaired == ["extra"] and len(rep.tracks) == 3


def test_onset_empty():
    with pytest.raises(ContractError, match="no pairs"):
        onset_report({}, {})
    with pytest.raises(ContractError, match="no pairs"):
        onset_report({"a": clicks(0)}, {"b": clicks(0)})


# binomial test --------------------------------------------------------------------------


def brute_force(k, n, p0):
    p0 = Fraction(p0)
    pmf = [comb(n, i) * p0 ** i * (1 - p0) ** (n - i) for i in range(n + 1)]
    # same relative slack scipy uses to decide ties
    return float(sum(q for q in pmf if q <= pmf[k] * Fraction(10000001, 10000000)))


def test_binomial_examples():
    assert binomial_test_two_tailed(50, 100) == 1.0
    assert abs(binomial_test_two_tailed(60, 100) - brute_force(60, 100, 0.5)) < 1e-12
    assert binomial_test_two_tailed(60, 100) == pytest.approx(0.0569, abs=5e-5)
    assert binomial_test_two_tailed(100, 100) == pytest.approx(2 * 2.0 ** -100, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))),
       st.sampled_from([0.5, 0.25, 0.1, 0.7]))
def test_binomial_matches_brute_force(kn, p0):
    k, n = kn
    assert abs(binomial_test_two_tailed(k, n, p0) - brute_force(k, n, p0)) < 1e-12


def test_binomial_rejects_bad_counts():
    for args in ((5, 4), (-1, 4), (0, 0), (1.5, 4), (True, 4)):
        with pytest.raises(ContractError):
            binomial_test_two_tailed(*args)
    with pytest.raises(ContractError):
        binomial_test_two_tailed(1, 4, 1.5)


# reports -----------------------------------------------------------------------------------


def corpus(tmp_path):
    synthesize_corpus(tmp_path, 3, "hfnoise", seed=4, clip_len=32000)
    return tmp_path / "hfnoise", tmp_path / "reference"


def test_emit_deterministic_and_round_trip(tmp_path):
    est, ref = corpus(tmp_path)
    rep = analyze_dirs("rolloff", est, ref)
    emit_report(rep, tmp_path / "a.json", tmp_path / "a.csv")
    emit_report(analyze_dirs("rolloff", est, ref), tmp_path / "b.json", tmp_path / "b.csv")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = load_report(tmp_path / "a.json")
    assert back.to_dict() == rep.to_dict()
    raw = json.loads((tmp_path / "a.json").read_text())
    assert raw["schema_version"] == SCHEMA_VERSION and raw["parameters"]["percent"] == 0.98
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "track,frame,ref_rolloff_hz,est_rolloff_hz,cents,gated,skipped"


def test_onset_report_round_trip(tmp_path):
    est, ref = corpus(tmp_path)
    rep = analyze_dirs("onsets", est, ref)
    emit_report(rep, tmp_path / "o.json")
    assert load_report(tmp_path / "o.json").to_dict() == rep.to_dict()
    assert rep.parameters["pooling"] == "counts"


def test_report_errors(tmp_path):
    est, ref = corpus(tmp_path)
    (est / "broken").mkdir()
    (est / "broken" / "bass.wav").write_bytes(b"nope")
    rep = analyze_dirs("rolloff", est, ref)
    assert len(rep.failures) == 1 and "broken" in rep.failures[0]
    with pytest.raises(Exception, match="missing"):
        emit_report(rep, tmp_path / "missing" / "r.json")
    bad = rep.to_dict()
    bad["schema_version"] = 99
    with pytest.raises(ContractError, match="schema"):
        MetricsReport.from_dict(bad)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ContractError, match="no pairs"):
        analyze_dirs("rolloff", empty, ref)
