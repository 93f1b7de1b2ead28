"""Artifact metrics over paired estimate/reference audio: rolloff error in cents,
onset agreement, the two-tailed binomial test, and report emission."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .data import AudioIOError, load_track
from .diffarray import ContractError
from .dsp import (
    AudioBuffer,
    OnsetMatchCounts,
    cents_difference,
    frame_rms_dbfs,
    match_counts,
    onset_f1,
    onset_strength,
    spectral_rolloff,
    stft,
)

SCHEMA_VERSION = 1
HIST_WIDTH = 50.0
HIST_LIMIT = 5000.0
ROLLOFF_FFT = 1024
CSV_COLUMNS = ("track", "frame", "ref_rolloff_hz", "est_rolloff_hz", "cents", "gated", "skipped")


def histogram_edges() -> np.ndarray:
    return np.arange(-HIST_LIMIT, HIST_LIMIT + HIST_WIDTH / 2, HIST_WIDTH)


def histogram_counts(cents: np.ndarray) -> list[int]:
    """``[below -5000] + 200 bins of 50 cents + [at or above +5000]``."""
    edges = histogram_edges()
    inner, _ = np.histogram(cents[(cents >= edges[0]) & (cents < edges[-1])], bins=edges)
    return [int(np.sum(cents < edges[0]))] + [int(c) for c in inner] + [int(np.sum(cents >= edges[-1]))]


# rolloff -----------------------------------------------------------------------


@dataclass
class TrackRolloff:
    track: str
    mean_signed: float
    mean_abs: float
    analyzed: int
    gated: int
    skipped: int


@dataclass
class RolloffReport:
    tracks: list = field(default_factory=list)
    mean_signed: float = 0.0
    mean_abs: float = 0.0
    median: float = 0.0
    hist_edges: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)
    total: int = 0
    analyzed: int = 0
    gated: int = 0
    skipped: int = 0
    unpaired: list = field(default_factory=list)
    frames: list = field(default_factory=list, repr=False)  # per-frame CSV rows, not serialized to JSON

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("frames")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RolloffReport":
        d = dict(d)
        d["tracks"] = [TrackRolloff(**t) for t in d["tracks"]]
        return cls(**d)


def _as_pairs(estimates, references):
    """Accept dicts keyed by track (values AudioBuffer) and return (pairs, unpaired)."""
    keys = sorted(set(estimates) | set(references))
    pairs = [(k, estimates[k], references[k]) for k in keys if k in estimates and k in references]
    unpaired = [k for k in keys if not (k in estimates and k in references)]
    return pairs, unpaired


def track_rolloff_frames(est: AudioBuffer, ref: AudioBuffer, percent: float = 0.98, gate_db: float = -40.0,
                         hop: int = 512, fft_size: int = ROLLOFF_FFT):
    """Per-frame ``(ref_hz, est_hz, cents, gated, skipped)``; cents is NaN where unused."""
    if est.sample_rate != ref.sample_rate:
        raise ContractError(f"sample rates differ: {est.sample_rate} vs {ref.sample_rate}")
    n = min(len(est), len(ref))
    est_s, ref_s = AudioBuffer(est.samples[:n], est.sample_rate), AudioBuffer(ref.samples[:n], ref.sample_rate)
    ref_hz = spectral_rolloff(stft(ref_s, fft_size, fft_size, hop), percent)
    est_hz = spectral_rolloff(stft(est_s, fft_size, fft_size, hop), percent)
    gated = frame_rms_dbfs(ref_s, fft_size, hop) < gate_db
    skipped = ~gated & ((ref_hz <= 0) | (est_hz <= 0))
    use = ~gated & ~skipped
    cents = np.full(len(ref_hz), np.nan)
    if np.any(use):
        cents[use] = cents_difference(est_hz[use], ref_hz[use])
    return ref_hz, est_hz, cents, gated, skipped


def rolloff_error_report(estimates: dict, references: dict, percent: float = 0.98, gate_db: float = -40.0,
                         hop: int = 512, fft_size: int = ROLLOFF_FFT) -> RolloffReport:
    """Rolloff error of estimates against references, frame by frame, gated on reference level."""
    pairs, unpaired = _as_pairs(estimates, references)
    rep = RolloffReport(hist_edges=[float(e) for e in histogram_edges()], unpaired=unpaired)
    pooled = []
    for track, est, ref in pairs:
        ref_hz, est_hz, cents, gated, skipped = track_rolloff_frames(est, ref, percent, gate_db, hop, fft_size)
        good = cents[~np.isnan(cents)]
        pooled.append(good)
        rep.tracks.append(TrackRolloff(track, float(good.mean()) if good.size else 0.0,
                                       float(np.abs(good).mean()) if good.size else 0.0,
                                       int(good.size), int(gated.sum()), int(skipped.sum())))
        for i in range(len(ref_hz)):
            rep.frames.append((track, i, float(ref_hz[i]), float(est_hz[i]),
                               "" if np.isnan(cents[i]) else float(cents[i]), int(gated[i]), int(skipped[i])))
    allc = np.concatenate(pooled) if pooled else np.zeros(0)
    rep.analyzed = int(allc.size)
    rep.gated = sum(t.gated for t in rep.tracks)
    rep.skipped = sum(t.skipped for t in rep.tracks)
    rep.total = rep.analyzed + rep.gated + rep.skipped
    if allc.size:
        rep.mean_signed = float(allc.mean())
        rep.mean_abs = float(np.abs(allc).mean())
        rep.median = float(np.median(allc))
    rep.hist_counts = histogram_counts(allc)
    return rep


# onsets ------------------------------------------------------------------------


@dataclass
class OnsetReport:
    counts: OnsetMatchCounts
    tracks: list = field(default_factory=list)  # [track, tp, fp, fn]
    unpaired: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "f1": self.counts.f1,
                "tracks": [list(t) for t in self.tracks], "unpaired": list(self.unpaired)}

    @classmethod
    def from_dict(cls, d: dict) -> "OnsetReport":
        return cls(OnsetMatchCounts(d["tp"], d["fp"], d["fn"], d["f1"]), [list(t) for t in d["tracks"]],
                   list(d["unpaired"]))


def onset_report(estimates: dict, references: dict, threshold: float = 0.75) -> OnsetReport:
    """Onset-envelope agreement, counts pooled over tracks."""
    pairs, unpaired = _as_pairs(estimates, references)
    if not pairs:
        raise ContractError("no pairs to analyze")
    tp = fp = fn = 0
    tracks = []
    for track, est, ref in pairs:
        n = min(len(est), len(ref))
        c = onset_f1(onset_strength(AudioBuffer(est.samples[:n], est.sample_rate)),
                     onset_strength(AudioBuffer(ref.samples[:n], ref.sample_rate)), threshold)
        tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        tracks.append([track, c.tp, c.fp, c.fn])
    return OnsetReport(match_counts(tp, fp, fn), tracks, unpaired)


# significance ----------------------------------------------------------------------


def binomial_test_two_tailed(successes: int, trials: int, p0: float = 0.5) -> float:
    """Exact two-tailed p-value: total probability of outcomes no likelier than ``successes``."""
    if isinstance(successes, bool) or isinstance(trials, bool):
        raise ContractError("successes and trials must be integers")
    if int(successes) != successes or int(trials) != trials:
        raise ContractError(f"successes and trials must be integers, got {successes}, {trials}")
    successes, trials = int(successes), int(trials)
    if trials < 1 or not 0 <= successes <= trials:
        raise ContractError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    if not 0.0 <= p0 <= 1.0:
        raise ContractError(f"p0 must lie in [0, 1], got {p0}")
    return float(binomtest(successes, trials, p0, alternative="two-sided").pvalue)


# reports -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    corpus: str
    kind: str  # "rolloff" or "onsets"
    classes: dict  # source -> RolloffReport | OnsetReport
    parameters: dict
    tool_version: str = __version__
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "corpus": self.corpus, "kind": self.kind,
                "tool_version": self.tool_version, "parameters": dict(self.parameters),
                "failures": list(self.failures),
                "classes": {k: v.to_dict() for k, v in sorted(self.classes.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ContractError(f"unsupported report schema {d.get('schema_version')!r}")
        sub = RolloffReport if d["kind"] == "rolloff" else OnsetReport
        return cls(d["corpus"], d["kind"], {k: sub.from_dict(v) for k, v in d["classes"].items()},
                   d["parameters"], d["tool_version"], d["failures"])


def emit_report(report: MetricsReport, path, csv_path=None) -> None:
    """Write sorted-key JSON and, for rolloff reports, an optional per-frame CSV."""
    path = Path(path)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    try:
        path.write_text(text)
        if csv_path is not None and report.kind == "rolloff":
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for source in sorted(report.classes):
                    for row in report.classes[source].frames:
                        w.writerow([f"{row[0]}/{source}", *row[1:]])
    except OSError as exc:
        raise AudioIOError(f"cannot write report {path}: {exc}") from exc


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


# directory-level driver ------------------------------------------------------------


def load_pairs(est_dir, ref_dir) -> tuple[dict, dict, list]:
    """Load ``<track>/<source>.wav`` trees, grouped by source.

    Returns ``(estimates, references, failures)`` where the first two map
    source -> {track: AudioBuffer}.
    """
    est_dir, ref_dir = Path(est_dir), Path(ref_dir)
    for d in (est_dir, ref_dir):
        if not d.is_dir():
            raise AudioIOError(f"{d}: not a directory")
    est, ref, failures = {}, {}, []
    for root, out in ((est_dir, est), (ref_dir, ref)):
        for path in sorted(root.glob("*/*.wav")):
            try:
                audio = load_track(path)
            except (AudioIOError, ContractError) as exc:
                failures.append(f"{path}: {exc}")
                continue
            out.setdefault(path.stem, {})[path.parent.name] = audio
    return est, ref, failures


def analyze_dirs(kind: str, est_dir, ref_dir, percent: float = 0.98, gate_db: float = -40.0,
                 threshold: float = 0.75, hop: int = 512) -> MetricsReport:
    est, ref, failures = load_pairs(est_dir, ref_dir)
    sources = sorted(s for s in est if s in ref)
    if not sources:
        raise ContractError(f"no pairs between {est_dir} and {ref_dir}")
    if kind == "rolloff":
        params = {"percent": percent, "gate_db": gate_db, "hop": hop, "fft_size": ROLLOFF_FFT,
                  "histogram_width_cents": HIST_WIDTH, "histogram_limit_cents": HIST_LIMIT}
        classes = {s: rolloff_error_report(est[s], ref[s], percent, gate_db, hop) for s in sources}
    elif kind == "onsets":
        params = {"threshold": threshold, "hop": 512, "fft_size": 1024, "n_mels": 128, "pooling": "counts"}
        classes = {s: onset_report(est[s], ref[s], threshold) for s in sources}
    else:
        raise ContractError(f"unknown analysis {kind!r}")
    return MetricsReport(str(Path(est_dir)), kind, classes, params, __version__, failures)
