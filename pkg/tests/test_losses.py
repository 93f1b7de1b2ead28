import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from soundgood import losses
from soundgood.diffarray import ContractError, DiffArray, Tape, backward, check_parameter_gradients
from soundgood.losses import (
    LossBalancer,
    MelLossConfig,
    balance_weights,
    discriminator_adv_loss,
    feature_matching_loss,
    generator_adv_loss,
    generator_objective,
    multiscale_mel_loss,
)
from soundgood.model import DiscriminatorConfig, DiscriminatorEnsemble, Generator, GeneratorConfig


def full(value, shape=(2, 1, 5, 3)):
    return DiffArray(np.full(shape, float(value)))


# adversarial terms -------------------------------------------------------------


def test_generator_adv_examples():
    assert generator_adv_loss([full(1), full(1, (2, 1, 7))]).item() == 0.0
    assert generator_adv_loss([full(0), full(0, (3, 4))]).item() == 1.0
    assert generator_adv_loss([full(1), full(0)]).item() == 0.5
    with pytest.raises(ContractError):
        generator_adv_loss([])


def test_discriminator_adv_examples():
    assert discriminator_adv_loss([full(1)], [full(0)]).item() == 0.0
    assert discriminator_adv_loss([full(0)], [full(1)]).item() == 2.0
    assert discriminator_adv_loss([full(0.5)], [full(0.5)]).item() == 0.5
    # summed over members
    assert discriminator_adv_loss([full(0), full(0)], [full(1), full(1)]).item() == 4.0
    with pytest.raises(ContractError):
        discriminator_adv_loss([full(0)], [])


score_maps = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6)),
                    elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(score_maps, score_maps)
def test_adversarial_losses_nonnegative(a, b):
    assert generator_adv_loss([DiffArray(a), DiffArray(b)]).item() >= 0
    assert discriminator_adv_loss([DiffArray(a)], [DiffArray(b)]).item() >= 0


# feature matching ---------------------------------------------------------------


def test_feature_matching_examples():
    rng = np.random.default_rng(0)
    real = [[DiffArray(rng.normal(size=(2, 3, 4))), DiffArray(rng.normal(size=(2, 1, 9)))]]
    assert feature_matching_loss(real, real).item() == 0.0
    shifted = [[DiffArray(f.values + 1.0) for f in real[0]]]
    assert feature_matching_loss(real, shifted).item() == pytest.approx(1.0, abs=1e-15)
    two = [[DiffArray(np.zeros((4,))), DiffArray(np.zeros((4,)))]]
    fake = [[DiffArray(np.zeros((4,))), DiffArray(np.full((4,), 2.0))]]
    assert feature_matching_loss(two, fake).item() == 1.0


def test_feature_matching_detaches_real_branch():
    r = DiffArray(np.ones((3,)), requires_grad=True)
    f = DiffArray(np.zeros((3,)), requires_grad=True)
    with Tape() as tape:
        loss = feature_matching_loss([[r]], [[f]])
    backward(loss, tape)
    assert r.grad is None
    assert np.allclose(f.grad, -1.0 / 3)


def test_feature_matching_shape_errors():
    a = [[DiffArray(np.zeros((2, 3)))]]
    with pytest.raises(ContractError):
        feature_matching_loss(a, [[DiffArray(np.zeros((2, 4)))]])
    with pytest.raises(ContractError):
        feature_matching_loss(a, [[DiffArray(np.zeros((2, 3))), DiffArray(np.zeros(1))]])
    with pytest.raises(ContractError):
        feature_matching_loss(a, [])


# mel ---------------------------------------------------------------------------


def signal(n=8192, seed=0):
    return np.random.default_rng(seed).normal(size=(2, n)) * 0.1


def test_mel_identity_and_symmetry():
    a, b = signal(seed=1), signal(seed=2)
    assert multiscale_mel_loss(a, a).item() == 0.0
    assert multiscale_mel_loss(a, b).item() == multiscale_mel_loss(b, a).item()
    assert multiscale_mel_loss(a, b).item() > 0


def test_mel_averages_scales(monkeypatch):
    offsets = {512: 0.3, 1024: 0.6, 2048: 0.9}

    def fake_log_mel(x, fft, win, hop, n_mels, eps, sr):
        base = np.zeros((x.shape[0], 4, n_mels))
        return DiffArray(base + (offsets[fft] if x.values[0, 0] > 0 else 0.0))

    monkeypatch.setattr(losses, "log_mel", fake_log_mel)
    est, ref = np.ones((1, 4096)), -np.ones((1, 4096))
    assert multiscale_mel_loss(est, ref).item() == pytest.approx(0.6, abs=1e-15)


def test_mel_length_mismatch():
    with pytest.raises(ContractError, match="mismatch"):
        multiscale_mel_loss(np.zeros((1, 4096)), np.zeros((1, 4097)))


def test_mel_shift_invariance():
    # compact support with silence margins wider than the largest window, so a
    # one-hop shift of the coarsest scale only relabels frames
    rng = np.random.default_rng(3)
    n, hop = 16384, 512
    a, b = np.zeros((1, n)), np.zeros((1, n))
    a[0, 4096:8192] = rng.normal(size=4096)
    b[0, 4096:8192] = a[0, 4096:8192] + 0.3 * rng.normal(size=4096)
    shift = lambda x: np.roll(x, hop, axis=-1)
    cfg = MelLossConfig()
    assert abs(multiscale_mel_loss(shift(a), shift(b), cfg).item() - multiscale_mel_loss(a, b, cfg).item()) < 1e-6


def test_mel_uses_batch_of_waveforms():
    a = signal()
    assert multiscale_mel_loss(a[:, None, :], a[:, None, :]).item() == 0.0


# balancing ----------------------------------------------------------------------


def test_balance_weights_examples():
    assert np.allclose(balance_weights([2, 0.5, 1]), [0.5, 2, 1])
    assert np.array_equal(balance_weights([1, 1, 1]), [1, 1, 1])
    with pytest.warns(UserWarning, match="zero mean"):
        w = balance_weights([0.0, 1.0, 2.0])
    assert w[0] == 1e6


def streams(rng, means, n):
    # +-20% multiplicative noise: the calibration mean then has ~0.2% standard error
    return np.asarray(means) * rng.uniform(0.8, 1.2, size=(n, len(means)))


def test_balancer_calibrates_and_freezes():
    rng = np.random.default_rng(0)
    bal = LossBalancer(window=1000)
    calib = streams(rng, [10, 1, 0.1], 1000)
    for i, v in enumerate(calib):
        assert bal.weights.as_tuple() == (1.0, 1.0, 1.0)
        assert not bal.frozen
        bal.observe(v)
        assert bal.frozen == (i == 999)
    w = np.array(bal.weights.as_tuple())
    assert np.allclose((calib * w).mean(axis=0), 1.0, rtol=0, atol=1e-12)
    after = streams(rng, [10, 1, 0.1], 5000)
    assert np.all(np.abs((after * w).mean(axis=0) - 1.0) < 0.01)


def test_frozen_weights_never_change():
    bal = LossBalancer(window=5)
    for _ in range(5):
        bal.observe([3.0, 2.0, 1.0])
    snapshot = repr(bal.weights.to_dict()).encode()
    for v in np.random.default_rng(1).uniform(0, 100, size=(100, 3)):
        bal.observe(v)
        assert repr(bal.weights.to_dict()).encode() == snapshot


def test_balancer_zero_term_warns():
    bal = LossBalancer(window=3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for _ in range(3):
            bal.observe([1.0, 0.0, 2.0])
    assert any("zero mean" in str(c.message) for c in caught)
    assert bal.weights.w_fm == 1e6


# composite objective -------------------------------------------------------------


def toy_models(seed=0):
    g = Generator(GeneratorConfig.toy(), np.random.default_rng([seed, 1]))
    d = DiscriminatorEnsemble(DiscriminatorConfig.toy(), np.random.default_rng([seed, 2]))
    d.set_requires_grad(False)
    return g, d


def test_generator_objective_gradient():
    g, d = toy_models(0)
    rng = np.random.default_rng(5)
    x = DiffArray(rng.normal(size=(1, 1, 2048)) * 0.3)
    s = DiffArray(rng.normal(size=(1, 1, 2048)) * 0.3)

    def loss():
        return generator_objective(g(x), s, d, (1.0, 2.0, 0.5))[0]

    errs = check_parameter_gradients(loss, g.params.values(), h=1e-6, max_coords=3, seed=2)
    assert max(errs.values()) < 1e-3, errs
