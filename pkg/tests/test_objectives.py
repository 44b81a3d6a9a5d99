import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import fd_relative_error, randomize_
from sdtts.config import LossWeights
from sdtts.objectives import (
    LossReport,
    NonFiniteLoss,
    PatchDiscriminator,
    loss_adv_d,
    loss_adv_g,
    loss_cyc,
    loss_kl,
    loss_pred,
    loss_rec,
    total_loss,
)


def _rand(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def cyc_oracle(e_hat, e):
    """Plain scalar evaluation of the cyclic contrastive loss."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    b = len(e)

    def cos(x, y):
        return float(x @ y / (math.sqrt(x @ x) * math.sqrt(y @ y)))

    total = 0.0
    for i in range(b):
        num = math.exp(cos(e_hat[i], e[i]))
        den = sum(math.exp(cos(e_hat[i], e[j])) for j in range(b) if j != i)
        total += -math.log(num / den)
    return total / b


# reconstruction ----------------------------------------------------------------


def test_rec_identity_and_offset():
    mel = _rand(20, 8)
    assert float(loss_rec(mel, mel)) == 0.0
    assert float(loss_rec(mel + 0.5, mel)) == pytest.approx(0.5, abs=1e-12)


def test_rec_matches_scalar_loop():
    a, b = _rand(13, 7, seed=1, dtype=torch.float32), _rand(13, 7, seed=2, dtype=torch.float32)
    acc = 0.0
    for i in range(13):
        for j in range(7):
            acc += abs(float(a[i, j]) - float(b[i, j]))
    assert abs(float(loss_rec(a, b)) - acc / (13 * 7)) < 1e-6


def test_rec_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        loss_rec(torch.zeros(3, 4), torch.zeros(4, 3))


def test_rec_mask_ignores_padding():
    a, b = _rand(2, 6, 3, seed=3), _rand(2, 6, 3, seed=4)
    mask = torch.tensor([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=torch.bool)
    b2 = b.clone()
    b2[0, 4:] = 1e6
    assert float(loss_rec(a, b, mask)) != float(loss_rec(a, b))
    assert float(loss_rec(a, b2, mask)) == float(loss_rec(a, b, mask))


# KL ----------------------------------------------------------------------------


def test_kl_closed_form_cases():
    z = torch.zeros(4, 8)
    assert float(loss_kl(z, z)) == 0.0
    assert float(loss_kl(torch.ones(4, 8), z)) == pytest.approx(0.5, abs=1e-7)


def test_kl_monte_carlo():
    mu = torch.tensor([1.0, -0.5, 2.0, 0.0], dtype=torch.float64)
    logvar = torch.tensor([0.5, -1.0, 0.3, -2.0], dtype=torch.float64)
    n = 1_000_000
    g = torch.Generator().manual_seed(0)
    std = torch.exp(0.5 * logvar)
    z = mu + std * torch.randn(n, 4, generator=g, dtype=torch.float64)
    log_q = -0.5 * (((z - mu) / std) ** 2 + logvar + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    mc = float((log_q - log_p).mean())
    closed = float(loss_kl(mu[None], logvar[None]))
    assert abs(closed - mc) / closed < 0.01


def test_kl_gradient_fd():
    mu, logvar = _rand(3, 5, seed=1).requires_grad_(), _rand(3, 5, seed=2).requires_grad_()
    assert fd_relative_error(lambda: loss_kl(mu, logvar), [mu, logvar]) < 1e-5


# discriminator -----------------------------------------------------------------


@pytest.fixture
def disc():
    torch.manual_seed(0)
    return PatchDiscriminator(channels=4, n_layers=3)


def test_disc_time_doubling(disc):
    a = disc(torch.randn(32, 16))
    b = disc(torch.randn(64, 16))
    assert b.shape[0] == 2 * a.shape[0] and b.shape[1] == a.shape[1]
    assert a.shape == (32 // 8, 16 // 8)


def test_disc_deterministic(disc):
    x = torch.randn(2, 24, 16)
    assert torch.equal(disc(x), disc(x))


def test_disc_rejects_small_input(disc):
    with pytest.raises(ValueError, match="receptive field"):
        disc(torch.randn(7, 16))
    with pytest.raises(ValueError):
        disc(torch.randn(32, 4))


def test_disc_input_gradient_fd(disc):
    randomize_(disc, seed=1, scale=0.3)
    disc.double()
    x = _rand(16, 16, seed=5).requires_grad_()
    w = _rand(2, 2, seed=6)
    assert fd_relative_error(lambda: (disc(x) * w).sum(), [x], n_probe=40) < 1e-5


# LSGAN -------------------------------------------------------------------------


def test_lsgan_cases():
    ones, zeros = torch.ones(3, 4), torch.zeros(3, 4)
    assert float(loss_adv_d(ones, zeros)) == 0.0
    assert float(loss_adv_g(ones)) == 0.0
    assert float(loss_adv_g(zeros)) == 1.0


@settings(max_examples=50, deadline=None)
@given(
    real=arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
    fake=arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
)
def test_lsgan_non_negative(real, fake):
    assert float(loss_adv_d(torch.from_numpy(real), torch.from_numpy(fake))) >= 0
    assert float(loss_adv_g(torch.from_numpy(fake))) >= 0


def test_lsgan_gradient_fd():
    real, fake = _rand(2, 3, 4, seed=1).requires_grad_(), _rand(2, 3, 4, seed=2).requires_grad_()
    assert fd_relative_error(lambda: loss_adv_d(real, fake), [real, fake]) < 1e-5
    assert fd_relative_error(lambda: loss_adv_g(fake), [fake]) < 1e-5


# prediction --------------------------------------------------------------------


def test_pred_cases():
    t = _rand(9)
    assert float(loss_pred(t, t)) == 0.0
    assert float(loss_pred(t + 1, t)) == pytest.approx(1.0, abs=1e-12)


def test_pred_matches_scalar_loop():
    p, t = _rand(11, seed=1, dtype=torch.float32), _rand(11, seed=2, dtype=torch.float32)
    ref = sum((float(a) - float(b)) ** 2 for a, b in zip(p, t)) / 11
    assert abs(float(loss_pred(p, t)) - ref) < 1e-6


def test_pred_length_mismatch():
    with pytest.raises(ValueError):
        loss_pred(torch.zeros(3), torch.zeros(4))


def test_pred_gradient_fd():
    p = _rand(2, 5, seed=3).requires_grad_()
    t = _rand(2, 5, seed=4)
    assert fd_relative_error(lambda: loss_pred(p, t), [p]) < 1e-5


# cyclic contrastive ------------------------------------------------------------


def test_cyc_orthonormal_pair():
    e = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert abs(float(loss_cyc(e, e)) - (-1.0)) < 1e-7


def test_cyc_identical_embeddings():
    e = torch.ones(2, 2, dtype=torch.float64)
    assert abs(float(loss_cyc(e, e))) < 1e-7


def test_cyc_matches_oracle():
    for seed in range(20):
        b = 2 + seed % 4
        e_hat, e = _rand(b, 6, seed=seed), _rand(b, 6, seed=100 + seed)
        assert abs(float(loss_cyc(e_hat, e)) - cyc_oracle(e_hat, e)) < 1e-6


def test_cyc_can_be_negative_and_positive_variant_cannot():
    e = torch.eye(3, dtype=torch.float64)
    assert float(loss_cyc(e, e)) < 0
    assert float(loss_cyc(e, e, include_positive=True)) > 0


def test_cyc_errors():
    with pytest.raises(ValueError, match="B >= 2"):
        loss_cyc(torch.ones(1, 3), torch.ones(1, 3))
    e = torch.ones(3, 2)
    z = e.clone()
    z[1] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        loss_cyc(z, e)
    with pytest.raises(ValueError, match="zero-norm"):
        loss_cyc(e, z)


def test_cyc_gradient_fd():
    e_hat = _rand(4, 8, seed=1).requires_grad_()
    e = _rand(4, 8, seed=2)
    assert fd_relative_error(lambda: loss_cyc(e_hat, e), [e_hat], n_probe=32) < 1e-4


def test_cyc_gradient_fd_float32():
    e_hat = _rand(4, 8, seed=3, dtype=torch.float32).requires_grad_()
    e = _rand(4, 8, seed=4, dtype=torch.float32)
    assert fd_relative_error(lambda: loss_cyc(e_hat, e), [e_hat], h=1e-2) < 1e-3


@settings(max_examples=30, deadline=None)
@given(k=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_cyc_scale_invariant(k, seed):
    e_hat, e = _rand(3, 5, seed=seed), _rand(3, 5, seed=seed + 1)
    assert float(loss_cyc(k * e_hat, e)) == pytest.approx(float(loss_cyc(e_hat, e)), abs=1e-12)
    assert float(loss_cyc(e_hat, k * e)) == pytest.approx(float(loss_cyc(e_hat, e)), abs=1e-12)


# permutation consistency -------------------------------------------------------


def test_losses_permutation_consistent():
    perm = torch.tensor([2, 0, 3, 1])
    a, b = _rand(4, 6, 5, seed=1), _rand(4, 6, 5, seed=2)
    mask = _rand(4, 6, seed=3) > 0
    cases = [
        (loss_rec, (a, b, mask)),
        (loss_kl, (a, b, mask)),
        (loss_pred, (a[..., 0], b[..., 0], mask)),
        (loss_adv_d, (a, b)),
        (loss_adv_g, (a,)),
        (loss_cyc, (a[:, 0], b[:, 0])),
    ]
    for fn, args in cases:
        permuted = [x[perm] for x in args]
        assert float(fn(*permuted)) == pytest.approx(float(fn(*args)), abs=1e-12), fn.__name__


# aggregation -------------------------------------------------------------------


def _components(seed=0):
    rng = np.random.default_rng(seed)
    names = ["rec", "kl", "adv_g", "pred_duration", "pred_pitch", "pred_energy", "cyc"]
    return {n: torch.tensor(float(rng.uniform(-1, 3)), dtype=torch.float64) for n in names}


def test_total_all_zero_weights():
    w = LossWeights(**{k: 0.0 for k in LossWeights().__dict__})
    total, report = total_loss(_components(), w)
    assert float(total) == 0.0 and report.total == 0.0


@pytest.mark.parametrize("name, field", [("rec", "rec"), ("adv_g", "adv"), ("cyc", "cyc"), ("pred_pitch", "pred_pitch")])
def test_total_single_weight(name, field):
    w = LossWeights(**{k: (1.0 if k == field else 0.0) for k in LossWeights().__dict__})
    comps = _components(1)
    total, report = total_loss(comps, w)
    assert float(total) == float(comps[name])
    assert getattr(report, name) == float(comps[name])


def test_total_unit_weights_is_plain_sum():
    comps = _components(2)
    total, report = total_loss(comps, LossWeights())
    assert abs(float(total) - math.fsum(float(v) for v in comps.values())) < 1e-7
    assert isinstance(report, LossReport)


def test_total_ignores_discriminator_term():
    comps = _components(3)
    base, _ = total_loss(comps, LossWeights())
    total, report = total_loss({**comps, "adv_d": torch.tensor(5.0)}, LossWeights())
    assert float(total) == float(base) and report.adv_d == 5.0


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_total_rejects_non_finite(bad):
    comps = _components()
    comps["kl"] = torch.tensor(bad)
    with pytest.raises(NonFiniteLoss, match="'kl'") as info:
        total_loss(comps, LossWeights())
    assert info.value.component == "kl"


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(rec=-1.0)
