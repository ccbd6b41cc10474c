import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diorvit import autodiff as ad
from diorvit.autodiff import Tensor
from diorvit.losses import (LossConfig, LossError, cross_entropy, cross_entropy_logits, differential_loss,
                            loss_curve_csv, loss_curve_table, nad, ordinal_ce, regression_loss, total_loss)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# ----------------------------------------------------------- cross entropy

def test_ce_one_hot_is_zero(f64):
    assert cross_entropy([1, 3], T([[1.0, 0, 0], [0, 0, 1.0]])).item() == 0.0


def test_ce_uniform(f64):
    assert abs(cross_entropy([2], T([[0.25] * 4])).item() - 1.386294) < 1e-6


def test_ce_point_one(f64):
    assert abs(cross_entropy([1], T([[0.1, 0.9]])).item() - 2.302585) < 1e-6


def test_ce_zero_probability_raises(f64):
    with pytest.raises(ad.NumericDomainError):
        cross_entropy([1], T([[0.0, 1.0]]))


def test_ce_matches_brute_force(f64, rng):
    for _ in range(100):
        n, c = rng.integers(1, 8), rng.integers(2, 6)
        p = rng.dirichlet(np.ones(c), size=n) + 0.0
        y = rng.integers(1, c + 1, size=n)
        oracle = -sum(math.log(p[k, y[k] - 1]) for k in range(n)) / n
        assert cross_entropy(y, T(p)).item() == pytest.approx(oracle, rel=1e-12)


def test_ce_logits_path_agrees(f64, rng):
    z = rng.normal(size=(6, 4))
    y = rng.integers(1, 5, size=6)
    a = cross_entropy(y, ad.softmax(T(z), axis=-1)).item()
    b = cross_entropy_logits(y, T(z)).item()
    assert abs(a - b) < 1e-12


# -------------------------------------------------------------------- nad

def nad_formula(d, K, eps):
    u = min(abs(d), 2 * K)
    return -math.log(1 - u / (2 * K + eps))


def test_nad_exact_is_zero(f64):
    assert nad([0, 2, -1], T([0, 2, -1]), 3).item() == 0.0


def test_nad_unit_distance(f64):
    assert abs(nad([0], T([1.0]), 3, 1e-5).item() - 0.182321) < 1e-6


@pytest.mark.parametrize("d", [6.0, 6.5, 100.0])
def test_nad_clamped_maximum(f64, d):
    assert abs(nad([0], T([d]), 3, 1e-5).item() - 13.3047) < 1e-3


def test_nad_grid_matches_formula(f64):
    for K in (1, 2, 3):
        for d in np.linspace(0, 2 * K, 1000):
            got = nad([1], T([1 - d]), K, 1e-5).item()
            assert abs(got - nad_formula(d, K, 1e-5)) < 1e-6


def test_nad_gradient(f64, rng):
    for _ in range(50):
        r = rng.integers(-3, 4, size=5).astype(float)
        r_hat = T(r + rng.uniform(-5, 5, size=5), grad=True)
        gaps = np.abs(r - r_hat.data)
        if np.any(gaps < 1e-3) or np.any(np.abs(gaps - 6) < 1e-3):
            continue
        assert ad.grad_check(lambda: nad(r, r_hat, 3), r_hat, 1e-6) < 1e-5


def test_nad_swap_invariance(f64, rng):
    r = rng.integers(-3, 4, size=8)
    r_hat = rng.normal(size=8) * 2
    assert nad(r, T(r_hat), 3).item() == nad(-r, T(-r_hat), 3).item()


def test_nad_empty():
    with pytest.raises(LossError):
        nad([], T([]), 3)


@settings(max_examples=50)
@given(st.floats(0, 5.99), st.floats(0.001, 0.5))
def test_nad_strictly_increasing(d, delta):
    with ad.default_dtype(np.float64):
        a = nad([0], T([d]), 3).item()
        b = nad([0], T([min(d + delta, 6.0)]), 3).item()
    assert b > a >= 0


# ------------------------------------------------------ other pair losses

def test_regression_losses():
    assert regression_loss([1], T([1.0]), "mse").item() == 0.0
    assert regression_loss([1], T([1.0]), "mae").item() == 0.0
    assert regression_loss([2], T([0.0]), "mse").item() == 4.0
    assert regression_loss([2], T([0.0]), "mae").item() == 2.0


def test_ordinal_ce_known_value(f64):
    assert abs(ordinal_ce([0], T([0.0]), 1).item() - 0.551445) < 1e-6
    assert abs(ordinal_ce([0], T([0.0]), 1).item() + math.log(1 / (1 + 2 * math.exp(-1)))) < 1e-12


def test_ordinal_ce_grid_oracle(f64):
    K = 3
    for r in range(-K, K + 1):
        for r_hat in np.linspace(-5, 5, 41):
            logits = np.array([-abs(r_hat - v) for v in range(-K, K + 1)])
            oracle = -(logits[r + K] - math.log(np.exp(logits).sum()))
            assert abs(ordinal_ce([r], T([r_hat]), K).item() - oracle) < 1e-12


def test_ordinal_ce_monotone_toward_wrong_side(f64):
    vals = [ordinal_ce([1], T([x]), 3).item() for x in np.linspace(1, -20, 200)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


def test_ordinal_ce_rejects_out_of_range():
    with pytest.raises(LossError):
        ordinal_ce([4], T([0.0]), 3)


def test_combined_kind(f64):
    cfg = LossConfig(diff_loss_kind="mse+ce_o")
    got = differential_loss([1], T([0.0]), cfg).item()
    assert got == pytest.approx(1.0 + ordinal_ce([1], T([0.0]), 3).item())
    assert differential_loss([1], T([0.0]), LossConfig(diff_loss_kind="none")) is None


def test_total_loss():
    assert total_loss(1.0, 0.0, 6.5) == 1.0
    assert total_loss(0.0, 0.2, 6.5) == pytest.approx(1.3)
    assert total_loss(0.7, 123.0, 0.0) == 0.7


def test_bad_loss_config():
    with pytest.raises(LossError):
        LossConfig(diff_loss_kind="huber")
    with pytest.raises(LossError):
        LossConfig(lam=-1)


# ------------------------------------------------------------ loss curves

def test_loss_curve_rows_and_zero_row():
    rows = loss_curve_table(K=3)
    assert len(rows) == 1201
    mid = rows[600]
    assert mid[0] == 0.0 and mid[1] == 0.0 and mid[2] == 0.0 and mid[4] == 0.0
    assert mid[3] == pytest.approx(ordinal_ce([0], T([0.0]), 3).item())


def test_loss_curve_csv_format():
    text = loss_curve_csv(loss_curve_table(K=1, step=0.5))
    lines = text.splitlines()
    assert lines[0] == "d,mse,mae,ce_o,nad"
    assert len(lines) == 1 + 9
    assert "-0.000000" not in text
