"""Adversarial training loop: Adam, D-then-G updates, loss balancing, checkpoints, resume."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TrainingExample, load_examples, peak_gain, resample_to_16k, swap_augment
from .diffarray import ContractError, DiffArray, Tape, backward, no_grad
from .dsp import SAMPLE_RATE, AudioBuffer
from .losses import (
    LossBalancer,
    LossWeights,
    MelLossConfig,
    discriminator_adv_loss,
    generator_objective,
)
from .model import (
    CheckpointError,
    DiscriminatorConfig,
    DiscriminatorEnsemble,
    Generator,
    GeneratorConfig,
    config_dict,
    load_checkpoint,
    save_checkpoint,
    to_float32_grid,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "L_G", "L_D", "L_FM", "L_mel", "w_adv", "w_fm", "w_mel")

# stream tags for the stateless per-use generators
TAG_INIT_G, TAG_INIT_D, TAG_SHUFFLE, TAG_SWAP = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


# Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: dict, state: AdamState, grads: dict | None = None) -> AdamState:
    """Bias-corrected Adam, in place. Parameters and moments stay on the float32 grid.

    ``grads`` defaults to each parameter's ``.grad`` (missing gradients count as zero).
    A non-finite gradient aborts before anything is modified.
    """
    g_all = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        g_all[name] = g
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = g_all[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name] = to_float32_grid(m)
        state.v[name] = to_float32_grid(v)
        p.values = to_float32_grid(p.values - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return state


# configuration -------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    calibration_window: int = 1000
    checkpoint_every: int = 500
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.toy)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig.toy)
    manifest: str | None = None
    source: str | None = None
    separators: list | None = None
    out: str = "msg.ckpt"
    loss_csv: str | None = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    swap_p: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1 or self.calibration_window < 1:
            raise ContractError("checkpoint_every and calibration_window must be >= 1")

    @property
    def csv_path(self) -> Path:
        return Path(self.loss_csv) if self.loss_csv else Path(str(self.out) + ".losses.csv")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = config_dict(self.generator)
        d["discriminator"] = config_dict(self.discriminator)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**d)


# batches -----------------------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, TAG_SHUFFLE, epoch]).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Example indices for 1-based ``step``: consecutive slices of per-epoch shuffles."""
    out = []
    for q in range((step - 1) * batch_size, step * batch_size):
        epoch, pos = divmod(q, n)
        out.append(int(epoch_order(seed, epoch, n)[pos]))
    return out


def assemble_batch(examples: list[TrainingExample], seed: int, step: int, batch_size: int,
                   swap_p: float) -> tuple[np.ndarray, np.ndarray]:
    """``[batch, 1, len]`` inputs and targets. Each pair is scaled by the input's peak gain."""
    xs, ys = [], []
    for j, i in enumerate(batch_indices(seed, step, batch_size, len(examples))):
        q = (step - 1) * batch_size + j
        ex = swap_augment(examples[i], swap_p, np.random.default_rng([seed, TAG_SWAP, q]))
        gain = peak_gain(ex.input.samples)
        xs.append(ex.input.samples * gain)
        ys.append(ex.target.samples * gain)
    return np.stack(xs)[:, None, :], np.stack(ys)[:, None, :]


# one step -------------------------------------------------------------------------


def train_step(inputs: np.ndarray, targets: np.ndarray, G: Generator, D: DiscriminatorEnsemble,
               balancer: LossBalancer, adam_g: AdamState, adam_d: AdamState,
               mel_cfg: MelLossConfig | None = None, probe=None) -> dict:
    """One discriminator update followed by one generator update.

    ``probe(phase, G, D)`` is called after each sub-step's backward pass, before
    its optimizer update, for inspection in tests.
    """
    x = DiffArray(np.asarray(inputs, dtype=np.float64))
    s = DiffArray(np.asarray(targets, dtype=np.float64))
    G.zero_grad()
    D.zero_grad()

    g_tape = Tape()
    with g_tape:
        fake = G(x)

    with Tape() as d_tape:
        real_out = D(s)
        fake_out = D(fake.detach())
        loss_d = discriminator_adv_loss([o[0] for o in real_out], [o[0] for o in fake_out])
    backward(loss_d, d_tape)
    if probe:
        probe("D", G, D)
    adam_step(D.params, adam_d)
    D.zero_grad()

    w_adv, w_fm, w_mel = balancer.weights.as_tuple()
    D.set_requires_grad(False)
    try:
        with g_tape:
            total, parts = generator_objective(fake, s, D, (w_adv, w_fm, w_mel), mel_cfg)
        backward(total, g_tape)
    finally:
        D.set_requires_grad(True)
    if probe:
        probe("G", G, D)
    adam_step(G.params, adam_g)
    G.zero_grad()

    values = {"L_G": parts["L_G"].item(), "L_D": loss_d.item(), "L_FM": parts["L_FM"].item(),
              "L_mel": parts["L_mel"].item(), "w_adv": w_adv, "w_fm": w_fm, "w_mel": w_mel}
    balancer.observe((values["L_G"], values["L_FM"], values["L_mel"]))
    return values


# checkpoints -------------------------------------------------------------------


def _adam_tensors(prefix: str, state: AdamState) -> dict:
    out = {}
    for name in sorted(state.m):
        out[f"{prefix}.m/{name}"] = state.m[name]
        out[f"{prefix}.v/{name}"] = state.v[name]
    return out


def save_training_checkpoint(path, cfg: TrainConfig, step: int, G, D, adam_g, adam_d, balancer) -> None:
    header = {
        "format": "msg-train",
        "step": step,
        "generator": config_dict(cfg.generator),
        "discriminator": config_dict(cfg.discriminator),
        "train": cfg.to_dict(),
        "weights": balancer.weights.to_dict(),
        "adam_g": adam_g.hyper(),
        "adam_d": adam_d.hyper(),
    }
    tensors = {f"G/{k}": v.values for k, v in G.params.items()}
    tensors.update({f"D/{k}": v.values for k, v in D.params.items()})
    tensors.update(_adam_tensors("adamG", adam_g))
    tensors.update(_adam_tensors("adamD", adam_d))
    save_checkpoint(path, header, tensors)


def _restore_adam(hyper: dict, tensors: dict, prefix: str) -> AdamState:
    st = AdamState(hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"], int(hyper["t"]))
    for key, arr in tensors.items():
        kind, _, name = key.partition("/")
        if kind == f"{prefix}.m":
            st.m[name] = arr
        elif kind == f"{prefix}.v":
            st.v[name] = arr
    return st


def restore_training_checkpoint(path, cfg: TrainConfig, G, D):
    header, tensors = load_checkpoint(path)
    if header.get("format") != "msg-train":
        raise CheckpointError(f"{path}: not a training checkpoint")
    # compare through JSON so tuples and lists agree
    want = json.loads(json.dumps({"g": config_dict(cfg.generator), "d": config_dict(cfg.discriminator)}))
    if {"g": header["generator"], "d": header["discriminator"]} != want:
        raise CheckpointError(f"{path}: model configuration differs from the requested run")
    G.load_state({k[2:]: v for k, v in tensors.items() if k.startswith("G/")})
    D.load_state({k[2:]: v for k, v in tensors.items() if k.startswith("D/")})
    adam_g = _restore_adam(header["adam_g"], tensors, "adamG")
    adam_d = _restore_adam(header["adam_d"], tensors, "adamD")
    balancer = LossBalancer(cfg.calibration_window, LossWeights.from_dict(header["weights"]))
    return int(header["step"]), adam_g, adam_d, balancer


# loop --------------------------------------------------------------------------


def tune_allocator() -> None:
    """Keep freed memory in the process heap (glibc only).

    Training allocates and frees the same large temporaries every step; letting
    glibc return them to the OS makes each step pay page faults again.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-3, 1 << 30)      # M_MMAP_THRESHOLD
        libc.mallopt(-1, 2 ** 31 - 1)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 1 << 26)      # M_TOP_PAD
    except (OSError, AttributeError):
        pass


@dataclass
class TrainResult:
    checkpoint: Path
    loss_csv: Path
    history: list
    weights: LossWeights


def _read_csv_rows(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) <= upto]


def build_models(cfg: TrainConfig) -> tuple[Generator, DiscriminatorEnsemble]:
    G = Generator(cfg.generator, np.random.default_rng([cfg.seed, TAG_INIT_G]))
    D = DiscriminatorEnsemble(cfg.discriminator, np.random.default_rng([cfg.seed, TAG_INIT_D]))
    return G, D


def run_training(cfg: TrainConfig, examples: list[TrainingExample] | None = None, resume=None,
                 mel_cfg: MelLossConfig | None = None, stop_after: int | None = None) -> TrainResult:
    """Train for ``cfg.steps`` steps, checkpointing every ``cfg.checkpoint_every``.

    ``resume`` names a training checkpoint to continue from. ``stop_after``
    ends the run early (after writing a checkpoint) to simulate an interruption.
    """
    tune_allocator()
    if examples is None:
        if not cfg.manifest:
            raise ContractError("training needs a manifest or an explicit example list")
        if not Path(cfg.manifest).exists():
            raise FileNotFoundError(f"manifest {cfg.manifest} does not exist")
        examples = load_examples(cfg.manifest, cfg.source, cfg.separators)
    if not examples:
        raise ContractError("no training examples")
    for e in examples:
        if not (np.all(np.isfinite(e.input.samples)) and np.all(np.isfinite(e.target.samples))):
            raise ContractError(f"non-finite samples in training clip {e.track}@{e.offset}")
    lengths = {len(e.input) for e in examples}
    if len(lengths) != 1:
        raise ContractError(f"training clips must share one length, got {sorted(lengths)}")

    G, D = build_models(cfg)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.csv_path
    start = 0
    if resume:
        start, adam_g, adam_d, balancer = restore_training_checkpoint(resume, cfg, G, D)
        log.info("resumed from %s at step %d", resume, start)
    else:
        adam_g = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        adam_d = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        balancer = LossBalancer(cfg.calibration_window)
    history = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()}
               for r in _read_csv_rows(csv_path, start)]

    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    last_good = Path(resume) if resume else None
    t0 = time.time()
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
        for step in range(start + 1, end + 1):
            xb, yb = assemble_batch(examples, cfg.seed, step, cfg.batch_size, cfg.swap_p)
            try:
                values = train_step(xb, yb, G, D, balancer, adam_g, adam_d, mel_cfg)
            except FloatingPointError as exc:
                ref = f"last good checkpoint: {last_good}" if last_good else "no checkpoint written yet"
                raise TrainingError(f"step {step}: {exc}; {ref}") from exc
            row = {"step": step, **values}
            history.append(row)
            writer.writerow(row)
            if step % cfg.log_every == 0:
                fh.flush()
                log.info("step %d  L_G %.4f  L_D %.4f  L_FM %.4f  L_mel %.4f  (%.2fs/step)", step, values["L_G"],
                         values["L_D"], values["L_FM"], values["L_mel"], (time.time() - t0) / (step - start))
            if step % cfg.checkpoint_every == 0 or step == end:
                save_training_checkpoint(out, cfg, step, G, D, adam_g, adam_d, balancer)
                last_good = out
    return TrainResult(out, csv_path, history, balancer.weights)


def load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from exc


# inference -----------------------------------------------------------------------


def enhance_audio(G: Generator, audio, context: int = 1024):
    """Run the generator on one buffer at its own level and sample rate.

    The input is resampled to 16 kHz and peak-normalized for the network, and
    the output is scaled back and resampled to the input rate with exactly the
    input's sample count. ``context`` samples of mirrored signal are added at
    both ends and trimmed afterwards, so the convolutions' zero-padded borders
    fall outside the returned audio.
    """
    x = resample_to_16k(audio) if audio.sample_rate != SAMPLE_RATE else audio
    n = len(x)
    if n == 0:
        raise ContractError("cannot enhance an empty buffer")
    gain = peak_gain(x.samples)
    ctx = min(max(int(context), 0), n - 1)
    padded = np.pad(x.samples * gain, (ctx, ctx), mode="reflect") if ctx else x.samples * gain
    padded = np.pad(padded, (0, max(0, G.config.min_length - len(padded))))
    with no_grad():
        y = G(DiffArray(padded[None, None, :])).values[0, 0, ctx:ctx + n] / gain
    out = AudioBuffer(y, SAMPLE_RATE)
    if audio.sample_rate != SAMPLE_RATE:
        out = resample_to_16k(out, audio.sample_rate)
        m = len(audio)
        out = AudioBuffer(np.pad(out.samples[:m], (0, max(0, m - len(out)))), audio.sample_rate)
    return out
