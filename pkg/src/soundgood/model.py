"""Generator U-Net, period/resolution discriminators, and the checkpoint file format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffarray import (
    ContractError,
    DiffArray,
    conv1d,
    conv2d,
    conv_transpose1d,
    glu,
    leaky_relu,
    pad_last,
    relu,
)
from .dsp import stft_magnitude_diff


def to_float32_grid(values: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 (kept as float64) so 32-bit storage is lossless."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


class Module:
    """Ordered bag of named parameters."""

    def __init__(self):
        self.params: dict[str, DiffArray] = {}

    def _param(self, name: str, shape: tuple, fan_in: int, rng: np.random.Generator) -> DiffArray:
        bound = 1.0 / np.sqrt(fan_in)
        p = DiffArray(to_float32_grid(rng.uniform(-bound, bound, size=shape)), requires_grad=True, name=name)
        self.params[name] = p
        return p

    def parameters(self) -> dict[str, DiffArray]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ContractError(f"parameter {k}: expected shape {p.shape}, got {v.shape}")
            p.values = v.copy()


# generator ---------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    depth: int = 6
    base_channels: int = 64
    kernel: int = 8
    stride: int = 4
    growth: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.growth < 1:
            raise ContractError("base_channels and growth must be positive")
        if self.kernel < self.stride or self.stride < 1:
            raise ContractError(f"need kernel >= stride >= 1, got kernel={self.kernel}, stride={self.stride}")
        if (self.kernel - self.stride) % 2:
            raise ContractError("kernel - stride must be even for symmetric pad-and-trim")

    @classmethod
    def toy(cls) -> "GeneratorConfig":
        return cls(depth=2, base_channels=4)

    def channels(self) -> list[int]:
        return [self.base_channels * self.growth ** i for i in range(self.depth)]

    @property
    def min_length(self) -> int:
        return self.stride ** self.depth


class Generator(Module):
    """Waveform U-Net: strided conv encoder, transposed-conv decoder, additive skips.

    Encoder layer: conv(k, s) -> ReLU -> 1x1 conv to 2c -> GLU.
    Decoder layer: 1x1 conv to 2c -> GLU -> transposed conv(k, s) -> ReLU
    (no ReLU on the output layer).
    """

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        k = config.kernel
        chans = config.channels()
        for i, c in enumerate(chans):
            c_in = 1 if i == 0 else chans[i - 1]
            self._param(f"enc{i}.conv.w", (c, c_in, k), c_in * k, rng)
            self._param(f"enc{i}.conv.b", (c,), c_in * k, rng)
            self._param(f"enc{i}.rewrite.w", (2 * c, c, 1), c, rng)
            self._param(f"enc{i}.rewrite.b", (2 * c,), c, rng)
        for i in reversed(range(config.depth)):
            c = chans[i]
            c_out = 1 if i == 0 else chans[i - 1]
            self._param(f"dec{i}.rewrite.w", (2 * c, c, 1), c, rng)
            self._param(f"dec{i}.rewrite.b", (2 * c,), c, rng)
            self._param(f"dec{i}.convtr.w", (c, c_out, k), c * k, rng)
            self._param(f"dec{i}.convtr.b", (c_out,), c * k, rng)

    def __call__(self, x: DiffArray) -> DiffArray:
        return generator_forward(self, x)


def generator_forward(g: Generator, x: DiffArray) -> DiffArray:
    """Run the U-Net on ``x[batch, 1, len]``; output has the same shape."""
    cfg = g.config
    p = g.params
    if x.ndim != 3 or x.shape[1] != 1:
        raise ContractError(f"generator input must be [batch, 1, len], got {x.shape}")
    n = x.shape[-1]
    if n < cfg.min_length:
        raise ContractError(f"generator needs at least {cfg.min_length} samples, got {n}")
    padded = -(-n // cfg.min_length) * cfg.min_length
    h = pad_last(x, 0, padded - n) if padded != n else x
    trim = (cfg.kernel - cfg.stride) // 2

    skips = []
    for i in range(cfg.depth):
        h = relu(conv1d(h, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"], cfg.stride, trim))
        h = glu(conv1d(h, p[f"enc{i}.rewrite.w"], p[f"enc{i}.rewrite.b"]))
        skips.append(h)
    for i in reversed(range(cfg.depth)):
        h = h + skips.pop()
        h = glu(conv1d(h, p[f"dec{i}.rewrite.w"], p[f"dec{i}.rewrite.b"]))
        h = conv_transpose1d(h, p[f"dec{i}.convtr.w"], p[f"dec{i}.convtr.b"], cfg.stride)
        if trim:
            h = h[:, :, trim:h.shape[-1] - trim]
        if i > 0:
            h = relu(h)
    return h[:, :, :n] if padded != n else h


# discriminators ---------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    period_channels: tuple = (8, 16, 32)
    resolutions: tuple = ((512, 512, 128), (1024, 1024, 256), (2048, 2048, 512))
    resolution_channels: int = 8
    slope: float = 0.1

    def __post_init__(self):
        self.periods = tuple(sorted(int(p) for p in self.periods))
        self.period_channels = tuple(int(c) for c in self.period_channels)
        self.resolutions = tuple(sorted(tuple(int(v) for v in r) for r in self.resolutions))
        if not self.periods and not self.resolutions:
            raise ContractError("discriminator ensemble needs at least one member")
        for fft, win, hop in self.resolutions:
            if win > fft or hop < 1:
                raise ContractError(f"bad resolution triple {(fft, win, hop)}")

    @classmethod
    def toy(cls) -> "DiscriminatorConfig":
        return cls(periods=(2, 3), resolutions=((512, 512, 128),))

    @property
    def num_members(self) -> int:
        return len(self.periods) + len(self.resolutions)


class PeriodDiscriminator(Module):
    """Folds the waveform into ``(len / period, period)`` and runs (5, 1) convs over it."""

    def __init__(self, period: int, channels=(8, 16, 32), slope: float = 0.1, rng=None, prefix: str = ""):
        super().__init__()
        self.period = period
        self.slope = slope
        self.prefix = prefix or f"mpd{period}."
        # (kernel_h, stride_h, pad_h) per layer; the last layer is the 1-channel score head
        self.layers = []
        c_in = 1
        for c in channels:
            self._add(c_in, c, 5, 3, 2, rng)
            c_in = c
        self._add(c_in, c_in, 5, 1, 2, rng)
        self._add(c_in, 1, 3, 1, 1, rng)

    def _add(self, c_in, c_out, kh, sh, ph, rng):
        i = len(self.layers)
        w = self._param(f"{self.prefix}conv{i}.w", (c_out, c_in, kh, 1), c_in * kh, rng)
        b = self._param(f"{self.prefix}conv{i}.b", (c_out,), c_in * kh, rng)
        self.layers.append((w, b, (sh, 1), (ph, 0)))

    def __call__(self, x):
        return period_disc_forward(self, x)


def fold_by_period(x: DiffArray, period: int) -> DiffArray:
    """``[batch, 1, len] -> [batch, 1, ceil(len / p), p]`` with right reflect padding."""
    batch, _, n = x.shape
    if n < period:
        raise ContractError(f"period discriminator needs at least {period} samples, got {n}")
    extra = (-n) % period
    if extra:
        x = pad_last(x, 0, extra, "reflect")
    return x.reshape(batch, 1, (n + extra) // period, period)


def period_disc_forward(d: PeriodDiscriminator, x: DiffArray):
    h = fold_by_period(x, d.period)
    features = []
    last = len(d.layers) - 1
    for i, (w, b, stride, pad) in enumerate(d.layers):
        h = conv2d(h, w, b, stride, pad)
        if i < last:
            h = leaky_relu(h, d.slope)
        features.append(h)
    return h, features


class ResolutionDiscriminator(Module):
    """2-D conv stack over a linear-magnitude spectrogram laid out as (frames, bins)."""

    # (kernel, stride, pad) per hidden layer
    LAYOUT = (((3, 9), (1, 1), (1, 4)), ((3, 9), (1, 2), (1, 4)), ((3, 9), (1, 2), (1, 4)), ((3, 3), (1, 1), (1, 1)))

    def __init__(self, fft_size: int, window_size: int, hop: int, channels: int = 8, slope: float = 0.1,
                 rng=None, prefix: str = ""):
        super().__init__()
        self.fft_size, self.window_size, self.hop = fft_size, window_size, hop
        self.slope = slope
        self.prefix = prefix or f"mrd{fft_size}."
        self.layers = []
        c_in = 1
        for kernel, stride, pad in self.LAYOUT:
            self._add(c_in, channels, kernel, stride, pad, rng)
            c_in = channels
        self._add(c_in, 1, (3, 3), (1, 1), (1, 1), rng)

    def _add(self, c_in, c_out, kernel, stride, pad, rng):
        i = len(self.layers)
        fan_in = c_in * kernel[0] * kernel[1]
        w = self._param(f"{self.prefix}conv{i}.w", (c_out, c_in) + kernel, fan_in, rng)
        b = self._param(f"{self.prefix}conv{i}.b", (c_out,), fan_in, rng)
        self.layers.append((w, b, stride, pad))

    def __call__(self, x):
        return resolution_disc_forward(self, x)


def resolution_disc_forward(d: ResolutionDiscriminator, x: DiffArray):
    batch, _, n = x.shape
    if n < d.window_size:
        raise ContractError(f"resolution discriminator needs at least {d.window_size} samples, got {n}")
    mag = stft_magnitude_diff(x.reshape(batch, n), d.fft_size, d.window_size, d.hop)
    h = mag.reshape(batch, 1, mag.shape[1], mag.shape[2])
    features = []
    last = len(d.layers) - 1
    for i, (w, b, stride, pad) in enumerate(d.layers):
        h = conv2d(h, w, b, stride, pad)
        if i < last:
            h = leaky_relu(h, d.slope)
        features.append(h)
    return h, features


class DiscriminatorEnsemble(Module):
    """Period members (ascending period) followed by resolution members (ascending FFT size)."""

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.members: list[Module] = []
        for p in config.periods:
            self.members.append(PeriodDiscriminator(p, config.period_channels, config.slope, rng))
        for fft, win, hop in config.resolutions:
            self.members.append(ResolutionDiscriminator(fft, win, hop, config.resolution_channels, config.slope, rng))
        for m in self.members:
            self.params.update(m.params)

    def __len__(self):
        return len(self.members)

    def __call__(self, x):
        return ensemble_forward(self, x)


def ensemble_forward(e: DiscriminatorEnsemble, x: DiffArray) -> list:
    """List of ``(score_map, features)``, one per member, in fixed member order."""
    return [m(x) for m in e.members]


# checkpoint format ---------------------------------------------------------------

MAGIC = b"MSGC"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``MSGC | u32 version | u32 header_len | JSON header | float32 payloads``.

    The header gains a ``tensors`` list of ``{name, shape}`` giving payload order.
    """
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; tensors come back as float64 arrays."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    tensors = {}
    offset = 12 + hlen
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(shape)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header, tensors


def generator_config_from_dict(d: dict) -> GeneratorConfig:
    return GeneratorConfig(**d)


def discriminator_config_from_dict(d: dict) -> DiscriminatorConfig:
    return DiscriminatorConfig(**d)


def load_generator(path) -> tuple[Generator, dict]:
    """Rebuild the generator stored in a checkpoint."""
    header, tensors = load_checkpoint(path)
    try:
        cfg = generator_config_from_dict(header["generator"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: header has no generator config") from exc
    g = Generator(cfg, np.random.default_rng(0))
    g.load_state({k[len("G/"):]: v for k, v in tensors.items() if k.startswith("G/")})
    return g, header


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
