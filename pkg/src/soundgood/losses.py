"""Training objectives: least-squares adversarial terms, feature matching,
multi-scale log-mel reconstruction, and the calibrate-then-freeze balancer."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffarray import ContractError, DiffArray, as_diff, log, no_grad
from .dsp import LOG_EPS, SAMPLE_RATE, mel_spectrogram_diff

TERMS = ("adv", "fm", "mel")
WEIGHT_MIN, WEIGHT_MAX = 1e-6, 1e6


def _mean_of(losses: list[DiffArray]) -> DiffArray:
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total / float(len(losses))


def generator_adv_loss(fake_scores: list) -> DiffArray:
    """``(1/K) sum_k mean((D_k(G(x)) - 1)^2)``."""
    if not fake_scores:
        raise ContractError("generator adversarial loss needs at least one discriminator")
    return _mean_of([(as_diff(s) - 1.0).square().mean() for s in fake_scores])


def discriminator_adv_loss(real_scores: list, fake_scores: list) -> DiffArray:
    """Sum over members of ``mean((D(s) - 1)^2) + mean(D(s~)^2)``.

    The fake scores must come from a detached generator output.
    """
    if not real_scores or len(real_scores) != len(fake_scores):
        raise ContractError(
            f"discriminator loss needs matching, nonempty score lists ({len(real_scores)} vs {len(fake_scores)})"
        )
    total = None
    for r, f in zip(real_scores, fake_scores):
        term = (as_diff(r) - 1.0).square().mean() + as_diff(f).square().mean()
        total = term if total is None else total + term
    return total


def feature_matching_loss(features_real: list, features_fake: list) -> DiffArray:
    """Mean over members of the mean over layers of elementwise L1 distance.

    Each argument is a list (one entry per member) of feature lists. Real
    features are detached here so no gradient reaches the real branch.
    """
    if not features_fake or len(features_real) != len(features_fake):
        raise ContractError(
            f"feature matching needs one feature list per member ({len(features_real)} vs {len(features_fake)})"
        )
    per_member = []
    for k, (real, fake) in enumerate(zip(features_real, features_fake)):
        if not fake or len(real) != len(fake):
            raise ContractError(f"member {k}: {len(real)} real layers vs {len(fake)} fake layers")
        layers = []
        for j, (r, f) in enumerate(zip(real, fake)):
            r, f = as_diff(r), as_diff(f)
            if r.shape != f.shape:
                raise ContractError(f"member {k} layer {j}: shape {r.shape} vs {f.shape}")
            layers.append((f - r.detach()).abs().mean())
        per_member.append(_mean_of(layers))
    return _mean_of(per_member)


@dataclass(frozen=True)
class MelLossConfig:
    # (fft, window, hop, n_mels) per scale
    scales: tuple = ((512, 512, 128, 32), (1024, 1024, 256, 64), (2048, 2048, 512, 128))
    eps: float = LOG_EPS
    sample_rate: int = SAMPLE_RATE


def log_mel(x: DiffArray, fft: int, win: int, hop: int, n_mels: int, eps: float = LOG_EPS,
            sample_rate: int = SAMPLE_RATE) -> DiffArray:
    return log(mel_spectrogram_diff(x, fft, win, hop, n_mels, sample_rate) + eps)


def multiscale_mel_loss(estimate, target, cfg: MelLossConfig | None = None) -> DiffArray:
    """Average over scales of mean ``|log(mel(est) + eps) - log(mel(ref) + eps)|``."""
    cfg = cfg or MelLossConfig()
    estimate, target = as_diff(estimate), as_diff(target)
    if estimate.shape != target.shape:
        raise ContractError(f"mel loss length mismatch: {estimate.shape} vs {target.shape}")
    if estimate.ndim == 3:
        # [batch, 1, len] waveforms from the generator
        estimate = estimate.reshape(estimate.shape[0], estimate.shape[-1])
        target = target.reshape(target.shape[0], target.shape[-1])
    target = target.detach()
    per_scale = []
    for fft, win, hop, n_mels in cfg.scales:
        a = log_mel(estimate, fft, win, hop, n_mels, cfg.eps, cfg.sample_rate)
        b = log_mel(target, fft, win, hop, n_mels, cfg.eps, cfg.sample_rate)
        per_scale.append((a - b).abs().mean())
    return _mean_of(per_scale)


# loss balancing ---------------------------------------------------------------


def balance_weights(means) -> np.ndarray:
    """Least-squares solution of ``w_i * m_i = 1`` per term, i.e. ``1 / m_i``, clamped."""
    means = np.asarray(means, dtype=np.float64)
    with np.errstate(divide="ignore"):
        w = np.where(means > 0, 1.0 / np.where(means > 0, means, 1.0), WEIGHT_MAX)
    for i in np.flatnonzero(means <= 0):
        warnings.warn(f"loss term {i} has zero mean over the calibration window; weight clamped to {WEIGHT_MAX:g}")
    return np.clip(w, WEIGHT_MIN, WEIGHT_MAX)


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_fm: float = 1.0
    w_mel: float = 1.0
    frozen: bool = False
    sums: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    count: int = 0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_adv, self.w_fm, self.w_mel)

    @property
    def means(self) -> list[float]:
        return [s / self.count for s in self.sums] if self.count else [0.0, 0.0, 0.0]

    def to_dict(self) -> dict:
        return {"w_adv": self.w_adv, "w_fm": self.w_fm, "w_mel": self.w_mel, "frozen": self.frozen,
                "sums": list(self.sums), "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(float(d["w_adv"]), float(d["w_fm"]), float(d["w_mel"]), bool(d["frozen"]),
                   [float(v) for v in d["sums"]], int(d["count"]))


class LossBalancer:
    """Unit weights while the running means accumulate, then reciprocal means, frozen."""

    def __init__(self, window: int = 1000, weights: LossWeights | None = None):
        if window < 1:
            raise ContractError(f"calibration window must be >= 1, got {window}")
        self.window = window
        self.weights = weights or LossWeights()

    @property
    def frozen(self) -> bool:
        return self.weights.frozen

    def observe(self, values) -> LossWeights:
        """Record one step's unweighted ``(adv, fm, mel)`` values; freeze at the window end."""
        w = self.weights
        if w.frozen:
            return w
        values = [float(v) for v in values]
        if len(values) != len(TERMS):
            raise ContractError(f"expected {len(TERMS)} loss values, got {len(values)}")
        w.sums = [s + v for s, v in zip(w.sums, values)]
        w.count += 1
        if w.count >= self.window:
            w.w_adv, w.w_fm, w.w_mel = (float(v) for v in balance_weights(w.means))
            w.frozen = True
        return w


def generator_objective(fake: DiffArray, target, D, weights=(1.0, 1.0, 1.0), mel_cfg: MelLossConfig | None = None,
                        real_features: list | None = None) -> tuple[DiffArray, dict]:
    """``w_adv * L_G + w_fm * L_FM + w_mel * L_mel`` for generator output ``fake``.

    Feature matching compares intermediate activations only (score maps
    excluded). ``real_features`` may be passed in when already computed.
    """
    target = as_diff(target).detach()
    if real_features is None:
        with no_grad():
            real_features = [feats[:-1] for _, feats in D(target)]
    fake_out = D(fake)
    parts = {
        "L_G": generator_adv_loss([score for score, _ in fake_out]),
        "L_FM": feature_matching_loss(real_features, [feats[:-1] for _, feats in fake_out]),
        "L_mel": multiscale_mel_loss(fake, target, mel_cfg),
    }
    w_adv, w_fm, w_mel = weights
    total = parts["L_G"] * w_adv + parts["L_FM"] * w_fm + parts["L_mel"] * w_mel
    return total, parts
