import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soundgood.diffarray import (
    ContractError,
    DiffArray,
    Tape,
    backward,
    check_parameter_gradients,
    conv2d,
    leaky_relu,
)
from soundgood import model
from soundgood.model import (
    CheckpointError,
    DiscriminatorConfig,
    DiscriminatorEnsemble,
    Generator,
    GeneratorConfig,
    PeriodDiscriminator,
    ResolutionDiscriminator,
    fold_by_period,
    load_checkpoint,
    load_generator,
    save_checkpoint,
)


def toy_generator(seed=0):
    return Generator(GeneratorConfig.toy(), np.random.default_rng(seed))


def wave(n, batch=1, seed=0):
    return DiffArray(np.random.default_rng(seed).normal(size=(batch, 1, n)) * 0.3)


@settings(max_examples=12, deadline=None)
@given(st.integers(256, 32000))
def test_generator_preserves_length(n):
    g = toy_generator()
    assert g(wave(n)).shape == (1, 1, n)


def test_generator_length_below_minimum():
    with pytest.raises(ContractError, match="at least 16"):
        toy_generator()(wave(15))


def test_generator_zero_weights_give_zero_output():
    g = toy_generator()
    g.load_state({k: np.zeros(p.shape) for k, p in g.params.items()})
    assert np.all(g(wave(1000)).values == 0.0)


def test_generator_parameter_count_depends_only_on_config():
    a, b = toy_generator(0), toy_generator(1)
    assert a.num_parameters() == b.num_parameters() == 961
    assert Generator(GeneratorConfig(depth=3, base_channels=4), np.random.default_rng(0)).num_parameters() > 961


def test_generator_config_invariants():
    with pytest.raises(ContractError):
        GeneratorConfig(depth=0)
    with pytest.raises(ContractError):
        GeneratorConfig(kernel=2, stride=4)
    with pytest.raises(ContractError):
        GeneratorConfig(kernel=7, stride=4)


def test_generator_gradients_toy(monkeypatch):
    g = toy_generator(1)
    x = wave(256, seed=3)
    h = 1e-6

    # the check is only meaningful away from ReLU kinks: record the smallest
    # pre-activation magnitude and require it to dwarf the probe step
    margins = []
    relu = model.relu
    monkeypatch.setattr(model, "relu", lambda a: margins.append(np.min(np.abs(a.values))) or relu(a))
    g(x)
    assert min(margins) > 1000 * h

    def loss():
        return g(x).square().mean()

    errs = check_parameter_gradients(loss, g.params.values(), h=h, max_coords=8, seed=1)
    assert max(errs.values()) < 1e-4, errs


def test_determinism():
    a, b = toy_generator(7), toy_generator(7)
    for k in a.params:
        assert np.array_equal(a.params[k].values, b.params[k].values)
    x = wave(4000)
    assert np.array_equal(a(x).values, b(x).values)
    da = DiscriminatorEnsemble(DiscriminatorConfig.toy(), np.random.default_rng(2))
    db = DiscriminatorEnsemble(DiscriminatorConfig.toy(), np.random.default_rng(2))
    for (sa, _), (sb, _) in zip(da(x), db(x)):
        assert np.array_equal(sa.values, sb.values)


def test_fold_by_period_shapes():
    assert fold_by_period(wave(16000), 2).shape == (1, 1, 8000, 2)
    x = wave(15999)
    folded = fold_by_period(x, 2)
    assert folded.shape == (1, 1, 8000, 2)
    # reflect padding: the appended sample mirrors the one before the last
    assert folded.values[0, 0, -1, 1] == x.values[0, 0, -2]


def test_period_disc_features():
    d = PeriodDiscriminator(3, (4, 8), rng=np.random.default_rng(0))
    score, feats = d(wave(3000, batch=2))
    assert len(feats) == len(d.layers) == 4
    assert feats[-1] is score and score.shape[:2] == (2, 1) and score.shape[-1] == 3


def test_period_disc_too_short():
    d = PeriodDiscriminator(5, (4,), rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        d(wave(4))


def test_resolution_disc_frames_and_zero_input():
    d = ResolutionDiscriminator(512, 512, 128, channels=4, rng=np.random.default_rng(0))
    score, feats = d(wave(16000))
    assert feats[0].shape[2] == 126
    assert len(feats) == len(d.layers)
    # zero input gives an all-zero spectrogram, so only the biases shape the score
    zs, _ = d(DiffArray(np.zeros((1, 1, 16000))))
    hd = DiffArray(np.zeros((1, 1, 126, 257)))
    for i, (w, b, s, p) in enumerate(d.layers):
        hd = conv2d(hd, w, b, s, p)
        if i < len(d.layers) - 1:
            hd = leaky_relu(hd, 0.1)
    assert np.array_equal(zs.values, hd.values)
    # with zero kernels the score is exactly the last bias everywhere
    d.load_state({k: (np.zeros(v.shape) if k.endswith(".w") else v.values) for k, v in d.params.items()})
    zs, _ = d(wave(16000))
    assert np.all(zs.values == d.layers[-1][1].values[0])


def test_ensemble_size_and_order():
    paper = DiscriminatorEnsemble(DiscriminatorConfig(), np.random.default_rng(0))
    assert len(paper) == 8
    assert [m.period for m in paper.members[:5]] == [2, 3, 5, 7, 11]
    assert [m.fft_size for m in paper.members[5:]] == [512, 1024, 2048]
    toy = DiscriminatorEnsemble(DiscriminatorConfig(periods=(3,), resolutions=((512, 512, 128),)),
                                np.random.default_rng(0))
    assert len(toy(wave(4000))) == 2
    shuffled = DiscriminatorConfig(periods=(11, 2, 5), resolutions=((2048, 2048, 512), (512, 512, 128)))
    assert shuffled.periods == (2, 5, 11) and shuffled.resolutions[0][0] == 512


def test_ensemble_gradient_flow():
    g = toy_generator()
    d = DiscriminatorEnsemble(DiscriminatorConfig.toy(), np.random.default_rng(1))
    with Tape() as tape:
        out = d(g(wave(4096, batch=2)))
        loss = None
        for score, feats in out:
            term = (score - 1.0).square().mean() + sum((f.abs().mean() for f in feats[1:]), feats[0].abs().mean())
            loss = term if loss is None else loss + term
    backward(loss, tape)
    for k, p in {**g.params, **d.params}.items():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, k


def test_checkpoint_round_trip(tmp_path):
    g = toy_generator(5)
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, {"generator": {"depth": 2, "base_channels": 4, "kernel": 8, "stride": 4, "growth": 2},
                           "step": 3}, {f"G/{k}": p.values for k, p in g.params.items()})
    g2, header = load_generator(path)
    assert header["step"] == 3
    x = wave(5000)
    assert np.array_equal(g(x).values, g2(x).values)
    blob = path.read_bytes()
    assert blob[:4] == b"MSGC" and struct.unpack("<I", blob[4:8])[0] == 1


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {}, {"a": np.ones(3)})
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:4]) + struct.pack("<I", 2) + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:-2]))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
