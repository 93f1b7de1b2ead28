"""Audio I/O, clip segmentation and manifests, augmentation, and synthetic degradations.

Corpus layout on disk (also used for real separator output)::

    ROOT/reference/<track>/<source>.wav       ground truth
    ROOT/<separator>/<track>/<source>.wav     estimates
    ROOT/manifest.json                        clip offsets, RMS, rejection reasons
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .diffarray import ContractError
from .dsp import SAMPLE_RATE, AudioBuffer, rms_dbfs

SOURCES = ("bass", "drums", "vocals")
DEGRADATIONS = ("hfnoise", "lowpass", "smear")
REFERENCE_DIR = "reference"
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SILENCE_DB = -60.0
CLIP_LEN = 16000


class AudioIOError(IOError):
    pass


# WAV I/O ------------------------------------------------------------------------


def read_wav(path) -> AudioBuffer:
    """Read PCM16 or float32 WAV as mono floats in [-1, 1]; stereo is averaged."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise AudioIOError(f"{path}: no such file") from exc
    except (ValueError, OSError, EOFError, UnboundLocalError) as exc:
        # older scipy raises UnboundLocalError when the fmt chunk is missing
        raise AudioIOError(f"{path}: malformed or unsupported WAV ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioIOError(f"{path}: unsupported sample format {data.dtype}; expected PCM16 or float32")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioBuffer(samples, int(rate))


def write_wav(path, audio: AudioBuffer, format: str = "float32") -> None:
    """Write mono WAV. ``float32`` is lossless for samples already on the float32 grid."""
    path = Path(path)
    if format == "float32":
        data = audio.samples.astype(np.float32)
    elif format == "pcm16":
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {format!r}; use 'float32' or 'pcm16'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(path, audio.sample_rate, data)
    except OSError as exc:
        raise AudioIOError(f"{path}: cannot write WAV ({exc})") from exc


# level and rate ---------------------------------------------------------------


def peak_gain(samples: np.ndarray) -> float:
    peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
    return 1.0 / peak if peak > 0 else 1.0


def peak_normalize(audio: AudioBuffer) -> AudioBuffer:
    """Scale so max |sample| is 1; silence is returned unchanged."""
    if len(audio) == 0:
        raise ContractError("cannot peak-normalize an empty buffer")
    peak = float(np.max(np.abs(audio.samples)))
    if peak == 0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    return AudioBuffer(audio.samples / peak, audio.sample_rate)


MAX_RATIO_TERM = 2000
TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


def sinc_lowpass(cutoff_hz: float, rate: int, num_taps: int) -> np.ndarray:
    """Kaiser-windowed sinc lowpass (odd length, unit DC gain)."""
    if num_taps % 2 == 0:
        num_taps += 1
    return firwin(num_taps, cutoff_hz, window=("kaiser", KAISER_BETA), fs=rate)


def resample_to_16k(audio: AudioBuffer, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Polyphase windowed-sinc resampling; cutoff at 0.45 x the lower rate."""
    src = int(audio.sample_rate)
    if src == target_rate:
        return AudioBuffer(audio.samples.copy(), src)
    if src < 8000:
        raise ContractError(f"source rate {src} Hz is below the 8000 Hz minimum")
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    if max(up, down) > MAX_RATIO_TERM:
        raise ContractError(f"unsupported rate ratio {up}/{down} ({src} Hz -> {target_rate} Hz)")
    # the filter runs at the upsampled rate up * src
    cutoff = 0.45 * min(src, target_rate)
    h = sinc_lowpass(cutoff, up * src, TAPS_PER_PHASE * max(up, down)) * up
    return AudioBuffer(resample_poly(audio.samples, up, down, window=h), target_rate)


def load_track(path) -> AudioBuffer:
    audio = read_wav(path)
    return resample_to_16k(audio) if audio.sample_rate != SAMPLE_RATE else audio


# examples, segmentation, augmentation ---------------------------------------------


@dataclass
class TrainingExample:
    input: AudioBuffer
    target: AudioBuffer
    source_class: str
    separator_tag: str
    track: str = ""
    offset: int = 0

    def __post_init__(self):
        if len(self.input) != len(self.target):
            raise ContractError(f"example lengths differ: {len(self.input)} vs {len(self.target)}")


def clip_rms_ok(samples: np.ndarray, floor_db: float = SILENCE_DB) -> tuple[bool, float]:
    """Clips strictly below the floor are rejected; ``floor_db`` itself is kept."""
    db = rms_dbfs(samples)
    return db >= floor_db - 1e-9, db


def segment_track(truth_len: int, truth: np.ndarray, clip_len: int = CLIP_LEN) -> list[dict]:
    """Manifest entries for consecutive non-overlapping clips (partial tail dropped)."""
    entries = []
    for i in range(truth_len // clip_len):
        offset = i * clip_len
        ok, db = clip_rms_ok(truth[offset:offset + clip_len])
        entries.append({"offset": offset, "rms_db": round(db, 6),
                        "rejected": None if ok else f"reference RMS {db:.1f} dBFS below {SILENCE_DB:g}"})
    return entries


def segment_dataset(estimate_track: AudioBuffer, truth_track: AudioBuffer, clip_len: int = CLIP_LEN,
                    source_class: str = "bass", separator_tag: str = "", track: str = "") -> list[TrainingExample]:
    """Cut a paired track into 1-second clips, dropping silent reference clips."""
    n_est, n_ref = len(estimate_track), len(truth_track)
    if n_est != n_ref:
        warnings.warn(f"track lengths differ ({n_est} vs {n_ref}); truncating to {min(n_est, n_ref)}")
    n = min(n_est, n_ref)
    est, ref = estimate_track.samples[:n], truth_track.samples[:n]
    out = []
    for e in segment_track(n, ref, clip_len):
        if e["rejected"]:
            continue
        o = e["offset"]
        out.append(TrainingExample(AudioBuffer(est[o:o + clip_len]), AudioBuffer(ref[o:o + clip_len]),
                                   source_class, separator_tag, track, o))
    if not out:
        warnings.warn(f"no clips survived segmentation{f' for {track}' if track else ''}")
    return out


def swap_augment(example: TrainingExample, p: float = 0.1, rng: np.random.Generator | None = None) -> TrainingExample:
    """With probability ``p`` replace the input by the target. Always draws once from ``rng``."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"swap probability must lie in [0, 1], got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    if rng.random() < p:
        return replace(example, input=AudioBuffer(example.target.samples.copy(), example.target.sample_rate))
    return example


# manifests ---------------------------------------------------------------------


def build_manifest(root, clip_len: int = CLIP_LEN, extra: dict | None = None) -> dict:
    """Scan ``root`` for reference/estimate pairs and write ``root/manifest.json``."""
    root = Path(root)
    ref_dir = root / REFERENCE_DIR
    if not ref_dir.is_dir():
        raise AudioIOError(f"{root}: missing {REFERENCE_DIR}/ directory")
    separators = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != REFERENCE_DIR)
    clips, unpaired = [], []
    for track_dir in sorted(p for p in ref_dir.iterdir() if p.is_dir()):
        for ref_path in sorted(track_dir.glob("*.wav")):
            source = ref_path.stem
            if source not in SOURCES:
                continue
            truth = load_track(ref_path).samples
            entries = segment_track(len(truth), truth, clip_len)
            found = [sep for sep in separators if (root / sep / track_dir.name / ref_path.name).exists()]
            if not found:
                unpaired.append(str(ref_path.relative_to(root)))
            for sep in found:
                est_path = root / sep / track_dir.name / ref_path.name
                for e in entries:
                    clips.append({"track": track_dir.name, "source": source, "separator": sep,
                                  "reference": str(ref_path.relative_to(root)),
                                  "estimate": str(est_path.relative_to(root)), **e})
    manifest = {"schema_version": MANIFEST_VERSION, "sample_rate": SAMPLE_RATE, "clip_len": clip_len,
                "separators": separators, "clips": clips, "unpaired": unpaired, **(extra or {})}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AudioIOError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise AudioIOError(f"{path}: unsupported manifest schema {manifest.get('schema_version')!r}")
    return manifest


def load_examples(manifest_path, source: str | None = None, separators=None) -> list[TrainingExample]:
    """Materialize the kept clips of a manifest, optionally filtered by source and separator."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    clip_len = int(manifest["clip_len"])
    cache: dict[str, np.ndarray] = {}

    def samples(rel):
        if rel not in cache:
            cache[rel] = load_track(root / rel).samples
        return cache[rel]

    out = []
    for c in manifest["clips"]:
        if c["rejected"] or (source and c["source"] != source):
            continue
        if separators and c["separator"] not in separators:
            continue
        o = c["offset"]
        est, ref = samples(c["estimate"]), samples(c["reference"])
        if len(est) < o + clip_len or len(ref) < o + clip_len:
            raise AudioIOError(f"{c['estimate']}: shorter than manifest offset {o} + {clip_len}")
        out.append(TrainingExample(AudioBuffer(est[o:o + clip_len]), AudioBuffer(ref[o:o + clip_len]),
                                   c["source"], c["separator"], c["track"], o))
    return out


# synthetic degradations -----------------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    """One synthetic "separator". Unused parameters are ignored by the other kinds.

    hfnoise: noise above ``cutoff_hz`` at ``noise_db`` relative to the clip RMS.
    lowpass: sinc lowpass at ``cutoff_hz``.
    smear:   convolution with a ``smear_ms`` wide Hann-weighted noise kernel.
    """

    kind: str
    cutoff_hz: float = 3000.0
    noise_db: float = -10.0
    smear_ms: float = 25.0
    seed: int = 0

    RANGES = {"hfnoise": {"cutoff_hz": (2000.0, 4000.0), "noise_db": (-15.0, -5.0)},
              "lowpass": {"cutoff_hz": (250.0, 600.0)},
              "smear": {"smear_ms": (10.0, 40.0)}}

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ContractError(f"unknown degradation {self.kind!r}; expected one of {DEGRADATIONS}")
        for name, (lo, hi) in self.RANGES[self.kind].items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ContractError(f"{self.kind} {name}={v} outside [{lo}, {hi}]")

    @classmethod
    def sample(cls, kind: str, seed: int) -> "DegradationSpec":
        """Draw parameters uniformly from the documented ranges."""
        if kind not in DEGRADATIONS:
            raise ContractError(f"unknown degradation {kind!r}; expected one of {DEGRADATIONS}")
        rng = np.random.default_rng([seed, 1])
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in cls.RANGES[kind].items()}
        return cls(kind, seed=seed, **params)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_SOURCE = {"hfnoise": "bass", "lowpass": "bass", "smear": "drums"}


def synth_bass(n: int, rng: np.random.Generator, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Plucked harmonic tone stacks: f0 in 40-200 Hz, 6-12 partials, one to three notes."""
    t = np.arange(n) / rate
    out = np.zeros(n)
    bounds = np.sort(rng.integers(0, n, size=int(rng.integers(0, 3))))
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [n]])
    for a, b in zip(starts, ends):
        if b - a < rate // 20:
            continue
        f0 = rng.uniform(40.0, 200.0)
        k = np.arange(1, int(rng.integers(6, 13)) + 1)
        amps = rng.uniform(0.6, 1.0, size=k.size) / k ** rng.uniform(0.7, 1.2)
        phases = rng.uniform(0, 2 * np.pi, size=k.size)
        tt = t[a:b] - t[a]
        env = (1 - np.exp(-tt / 0.005)) * np.exp(-tt / rng.uniform(0.4, 1.5))
        note = np.sin(2 * np.pi * f0 * k[:, None] * tt[None, :] + phases[:, None])
        out[a:b] += env * (amps @ note)
    return out


def synth_drums(n: int, rng: np.random.Generator, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying noise bursts at random, well-separated onsets."""
    out = np.zeros(n)
    gap = int(0.12 * rate)
    count = int(rng.integers(3, 8))
    onsets = np.sort(rng.choice(np.arange(0, n - gap, gap // 2), size=count, replace=False))
    onsets = onsets[np.concatenate([[True], np.diff(onsets) >= gap])]
    for o in onsets:
        length = n - o
        tt = np.arange(length) / rate
        burst = rng.normal(size=length) * np.exp(-tt / rng.uniform(0.02, 0.08))
        out[o:] += rng.uniform(0.4, 1.0) * burst
    return out


def band_noise_above(n: int, cutoff_hz: float, rng: np.random.Generator, rate: int = SAMPLE_RATE) -> np.ndarray:
    """White noise with every DFT bin below ``cutoff_hz`` zeroed."""
    spec = np.fft.rfft(rng.normal(size=n))
    spec[np.fft.rfftfreq(n, 1.0 / rate) < cutoff_hz] = 0.0
    return np.fft.irfft(spec, n)


def degrade(truth: np.ndarray, spec: DegradationSpec, rng: np.random.Generator,
            rate: int = SAMPLE_RATE) -> np.ndarray:
    if spec.kind == "hfnoise":
        noise = band_noise_above(len(truth), spec.cutoff_hz, rng, rate)
        level = np.sqrt(np.mean(truth ** 2)) * 10 ** (spec.noise_db / 20)
        return truth + noise * (level / max(np.sqrt(np.mean(noise ** 2)), 1e-12))
    if spec.kind == "lowpass":
        h = sinc_lowpass(spec.cutoff_hz, rate, 1025)
        return np.convolve(truth, h, mode="same")
    width = max(3, int(round(spec.smear_ms * 1e-3 * rate)) | 1)
    kernel = np.hanning(width + 2)[1:-1] * rng.normal(size=width)
    kernel /= np.sqrt(np.sum(kernel ** 2))
    return np.convolve(truth, kernel, mode="same")


def synthesize_pair(spec: DegradationSpec, clip_len: int = CLIP_LEN, rng: np.random.Generator | None = None,
                    source: str | None = None) -> tuple[AudioBuffer, AudioBuffer]:
    """Deterministic ``(truth, estimate)`` clip pair for one degradation."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    source = source or DEFAULT_SOURCE[spec.kind]
    if source == "drums":
        truth = synth_drums(clip_len, rng)
    else:
        truth = synth_bass(clip_len, rng)
    truth *= rng.uniform(0.3, 0.9) / max(np.max(np.abs(truth)), 1e-12)
    estimate = degrade(truth, spec, rng)
    peak = np.max(np.abs(estimate))
    if peak > 1.0:
        truth, estimate = truth / peak, estimate / peak
    # store on the float32 grid so a WAV round trip is lossless
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    return AudioBuffer(f32(truth)), AudioBuffer(f32(estimate))


def synthesize_corpus(out_dir, num_clips: int, degradation: str, seed: int = 0, source: str | None = None,
                      clip_len: int = CLIP_LEN) -> dict:
    """Write ``num_clips`` pairs under ``out_dir`` and (re)build the manifest.

    Track names carry the degradation so several corpora can share a directory.
    """
    if num_clips < 1:
        raise ContractError(f"num_clips must be >= 1, got {num_clips}")
    out_dir = Path(out_dir)
    source = source or DEFAULT_SOURCE.get(degradation, "bass")
    if source not in SOURCES:
        raise ContractError(f"unknown source {source!r}; expected one of {SOURCES}")
    kind_index = DEGRADATIONS.index(degradation) if degradation in DEGRADATIONS else -1
    specs = []
    for i in range(num_clips):
        spec = DegradationSpec.sample(degradation, seed * 100003 + i)
        truth, est = synthesize_pair(spec, clip_len, np.random.default_rng([seed, kind_index, i]), source)
        track = f"{degradation}_{i:04d}"
        write_wav(out_dir / REFERENCE_DIR / track / f"{source}.wav", truth)
        write_wav(out_dir / degradation / track / f"{source}.wav", est)
        specs.append({"track": track, **spec.to_dict()})
    meta_path = out_dir / "synth.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta[degradation] = {"seed": seed, "source": source, "num_clips": num_clips, "specs": specs}
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return build_manifest(out_dir, clip_len)
