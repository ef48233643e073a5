import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from gradmark import autodiff as ad
from gradmark.watermark import (
    KeyMaterialError,
    VerificationPolicy,
    WatermarkKey,
    audit_key,
    ber,
    besr,
    decode,
    embedding_loss,
    error_threshold,
    generate_key_from_message,
    generate_key_random,
    null_false_positive_rate,
    null_tail,
    verify,
)


def threshold_oracle(n, tau):
    """Independent route: scan the float binomial cdf from scipy."""
    eta = -1
    for k in range(n + 1):
        if binom.cdf(k, n, 0.5) < tau:
            eta = k
    return eta


@pytest.mark.parametrize("n,eta", [(16, 2), (32, 7), (64, 20)])
def test_threshold_values(n, eta):
    assert error_threshold(n, 3e-3) == eta
    assert threshold_oracle(n, 3e-3) == eta


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 128), st.sampled_from([1e-4, 1e-3, 3e-3, 0.01, 0.05]))
def test_threshold_is_the_largest_significant_error_count(n, tau):
    eta = error_threshold(n, tau)
    assert null_tail(n, eta) < tau
    assert null_tail(n, eta + 1) >= tau or eta == n


def test_threshold_monotone_in_tau():
    for n in (16, 32, 64):
        assert error_threshold(n, 1e-4) <= error_threshold(n, 3e-3) <= error_threshold(n, 0.05)


def test_null_tail_exact():
    assert null_tail(4, 1) * 16 == 5
    assert null_tail(10, -1) == 0


def test_random_key_serialization_round_trip(tmp_path):
    key = generate_key_random(16, 40, 100, 10, seed=3)
    path = tmp_path / "k.json"
    key.save(path)
    again = WatermarkKey.load(path)
    assert again == key
    d = json.loads(path.read_text())
    assert d["N"] == 16 and len(d["carrier_indices"]) == 40 and len(d["b"]) == 16


def test_key_invariants():
    key = generate_key_random(32, 50, 200, 5, seed=0)
    assert len(set(key.carriers.tolist())) == 50
    assert key.carriers.min() >= 0 and key.carriers.max() < 200
    assert np.all(np.abs(key.matrix) <= 1.0)
    assert 0 <= key.target < 5
    assert set(np.unique(key.bits)) <= {0, 1}


def test_message_key_is_deterministic_and_auditable():
    a = generate_key_from_message("ACME", 64, 128, 784, 10)
    b = generate_key_from_message(b"ACME", 64, 128, 784, 10)
    c = generate_key_from_message("ACME2", 64, 128, 784, 10)
    assert a == b
    assert a != c
    assert audit_key(a)
    forged = WatermarkKey(1 - a.bits, a.carriers, a.matrix, a.target, a.input_dim, a.num_classes, a.provenance)
    assert not audit_key(forged)
    assert not audit_key(generate_key_random(8, 4, 10, 2, seed=0))


def test_key_size_validation():
    with pytest.raises(KeyMaterialError):
        generate_key_random(8, 20, 10, 2, seed=0)
    with pytest.raises(KeyMaterialError):
        generate_key_from_message("", 8, 4, 10, 2)


def test_decode_sign_convention():
    key = WatermarkKey(np.array([1, 0, 1]), np.array([0, 1]), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]),
                       0, 4, 2, {"kind": "random", "seed": 0})
    np.testing.assert_array_equal(decode(np.array([0.0, -1.0]), key), [1, 0, 1])


def test_embedding_loss_matches_numpy_bce(rng):
    key = generate_key_random(8, 6, 20, 3, seed=1)
    g = rng.standard_normal(6)
    y = 1 / (1 + np.exp(-(key.matrix @ g)))
    expected = -np.sum(key.bits * np.log(y) + (1 - key.bits) * np.log(1 - y))
    assert embedding_loss(g, key).item() == pytest.approx(expected, rel=1e-12)


def test_embedding_loss_gradient_matches_finite_differences(rng):
    key = generate_key_random(8, 6, 20, 3, seed=1)
    g0 = rng.standard_normal(6)
    gt = ad.Tensor(g0, requires_grad=True)
    (grad,) = ad.grad(embedding_loss(gt, key), [gt])
    err = ad.finite_diff_check(lambda v: embedding_loss(v, key).item(), g0.copy(), 1e-6, grad.data)
    assert err < 1e-7


def test_embedding_loss_decreases_along_descent(rng):
    key = generate_key_random(16, 10, 30, 3, seed=2)
    g = ad.Tensor(rng.standard_normal(10) * 0.01, requires_grad=True)
    before = embedding_loss(g, key).item()
    (d,) = ad.grad(embedding_loss(g, key), [g])
    after = embedding_loss(g.data - 0.01 * d.data, key).item()
    assert after < before


def test_ber_and_besr():
    assert ber([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert besr([1, 0], [1, 0]) == 1.0
    with pytest.raises(ValueError):
        ber([1], [1, 0])


def test_verify_boundary_at_eta():
    key = generate_key_random(16, 16, 16, 2, seed=4)
    # choose G so that margins are the identity's rows: matrix @ g, pick via least squares
    target_bits = key.bits.copy()
    target_bits[:2] ^= 1
    g = np.linalg.lstsq(key.matrix, np.where(target_bits == 1, 1.0, -1.0), rcond=None)[0]
    rep = verify(g, key)
    assert rep.n_error == 2 and rep.eta == 2 and rep.verified
    target_bits[2] ^= 1
    g = np.linalg.lstsq(key.matrix, np.where(target_bits == 1, 1.0, -1.0), rcond=None)[0]
    rep = verify(g, key)
    assert rep.n_error == 3 and not rep.verified
    assert rep.p_value == pytest.approx(float(null_tail(16, 3)))


def test_report_serializes(rng):
    key = generate_key_random(32, 8, 20, 2, seed=0)
    rep = verify(rng.standard_normal(8), key, VerificationPolicy(1e-3), {"mode": "exact"})
    d = rep.to_dict()
    assert json.loads(json.dumps(d))["n_bits"] == 32
    assert d["min_correct"] == 32 - error_threshold(32, 1e-3)


def test_policy_rejects_bad_tau():
    with pytest.raises(ValueError):
        VerificationPolicy(0.0)


def test_null_fpr_monte_carlo_brackets_exact_value():
    est = null_false_positive_rate(16, 20_000, seed=11)
    assert est.ci_low <= est.exact <= est.ci_high
    assert math.isclose(est.exact, 137 / 65536)
