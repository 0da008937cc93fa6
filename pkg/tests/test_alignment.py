import math

import numpy as np
import pytest
import torch

from oracles import spearman_bruteforce
from styleam.alignment import (
    discriminator_bce,
    quality_l2,
    relaxation_flag,
    relaxed_discriminator_bce,
    total_loss,
)
from styleam.errors import InputError

t = torch.tensor


def test_bce_symmetric_midpoint():
    assert discriminator_bce(t([0.5]), t([0.5])).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert 2 * math.log(2) == pytest.approx(1.3863, abs=1e-4)


def test_bce_hand_value():
    # -log(1 - 0.2) - log(0.8)
    assert discriminator_bce(t([0.2]), t([0.8])).item() == pytest.approx(-2 * math.log(0.8), abs=1e-6)
    assert -2 * math.log(0.8) == pytest.approx(0.4463, abs=1e-4)


def test_bce_positive_inside_interval():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, tt = rng.uniform(1e-3, 1 - 1e-3, size=(2, 4))
        assert discriminator_bce(t(s), t(tt)).item() > 0


def test_bce_empty_batch():
    with pytest.raises(InputError):
        discriminator_bce(t([]), t([0.5]))


def test_relaxed_hand_values():
    # h=0: 1 - |0.8 - 0| = 0.2 ; h=1: 1 - |0.8 - 1| = 0.8
    v0 = relaxed_discriminator_bce(t([0.8], dtype=torch.float64), t([0.5], dtype=torch.float64), 0).item()
    v1 = relaxed_discriminator_bce(t([0.8], dtype=torch.float64), t([0.5], dtype=torch.float64), 1).item()
    assert v0 == pytest.approx(-math.log(0.2) - math.log(0.5), abs=1e-6)
    assert v1 == pytest.approx(-math.log(0.8) - math.log(0.5), abs=1e-6)
    assert v0 == pytest.approx(2.3026, abs=1e-4)
    assert v1 == pytest.approx(0.9163, abs=1e-4)


def test_relaxed_h0_reduces_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s = t(rng.uniform(0, 1, size=5))
        tt = t(rng.uniform(0, 1, size=3))
        assert torch.equal(relaxed_discriminator_bce(s, tt, 0), discriminator_bce(s, tt))


def test_relaxed_rejects_bad_flag():
    with pytest.raises(InputError):
        relaxed_discriminator_bce(t([0.5]), t([0.5]), 2)


def test_losses_finite_at_extremes():
    for s, tt in ((0.0, 0.0), (1.0, 1.0), (0.0, 1.0), (1.0, 0.0)):
        for h in (0, 1):
            assert math.isfinite(relaxed_discriminator_bce(t([s]), t([tt]), h).item())


def test_flag_cases():
    assert relaxation_flag([1, 2, 3, 4], [1, 2, 3, 4], 0.9) == (0, 1.0)
    h, rho = relaxation_flag([4, 3, 2, 1], [1, 2, 3, 4], 0.9)
    assert (h, rho) == (1, -1.0)
    h, rho = relaxation_flag([1, 3, 2, 4], [1, 2, 3, 4], 0.9)
    assert h == 1 and rho == pytest.approx(0.8, abs=1e-12)


def test_flag_degenerate_batches_relax(caplog):
    assert relaxation_flag([1.0, 2.0], [1.0, 2.0], 0.0) == (1, None)
    assert relaxation_flag([1.0, 1.0, 1.0], [1.0, 2.0, 3.0], 0.0) == (1, None)
    assert "relaxing" in caplog.text


def test_flag_agrees_with_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(3, 40))
        p = rng.integers(0, 6, size=n).astype(float)  # ties on purpose
        y = rng.normal(size=n)
        tau = float(rng.uniform(-1, 1))
        if np.ptp(p) == 0:
            continue
        rho = spearman_bruteforce(p, y)
        h, got = relaxation_flag(p, y, tau)
        assert got == pytest.approx(rho, abs=1e-10)
        assert h == (0 if rho > tau else 1)


def test_quality_l2():
    assert quality_l2(t([1.0, 2.0]), t([1.0, 2.0])).item() == 0
    assert quality_l2(t([1.0, 2.0]), t([3.0, 2.0])).item() == 1.0
    p, y = t([0.3, 2.0, 4.0]), t([1.0, 1.0, 1.0])
    for k in (0.0, 0.5, 3.0):
        assert quality_l2(y + k * (p - y), y).item() == pytest.approx(k * quality_l2(p, y).item(), rel=1e-6)
    with pytest.raises(InputError):
        quality_l2(t([1.0]), t([1.0, 2.0]))


def test_total_loss():
    assert total_loss(1.0, 0.5, 2.0) == 2.0
    assert total_loss(1.0, 0.5, 0.0) == 1.0
    with pytest.raises(InputError):
        total_loss(1.0, 0.5, -1.0)
