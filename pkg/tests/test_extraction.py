import numpy as np
import pytest

from gradmark.extraction import (
    ExtractionError,
    FunctionOracle,
    ModelOracle,
    blackbox_estimate_gradient,
    extract_watermark,
    oracle_accuracy,
    select_key_samples,
    verify_estimate,
    whitebox_expected_gradient,
)
from gradmark.watermark import decode, generate_key_random


def linear_softmax_oracle(w):
    """p = softmax(W x) over a flat 9-pixel input: the input gradient of -log p_T is W^T (p - e_T)."""

    def fn(x):
        z = w @ x.reshape(-1)
        e = np.exp(z - z.max())
        return e / e.sum()

    return fn


@pytest.fixture
def linear_case(rng):
    w = rng.standard_normal((3, 9))
    key = generate_key_random(16, 5, 9, 3, seed=8)
    samples = rng.uniform(0.2, 0.8, size=(4, 3, 3, 1))

    def true_mean_gradient():
        total = np.zeros(9)
        for x in samples:
            p = linear_softmax_oracle(w)(x)
            e = np.zeros(3)
            e[key.target] = 1.0
            total += w.T @ (p - e)
        return (total / len(samples))[key.carriers]

    return w, key, samples, true_mean_gradient()


def test_forward_difference_converges_at_first_order(linear_case):
    w, key, samples, truth = linear_case
    errors = []
    for h in (1e-2, 1e-3):
        oracle = FunctionOracle(linear_softmax_oracle(w), 3, (3, 3, 1))
        est = blackbox_estimate_gradient(oracle, key, samples, h)
        errors.append(np.abs(est.values - truth).max())
    assert errors[1] < errors[0] / 5
    # |d2J/dx_c^2| = Var_p(w[:, c]) <= max w^2, so the remainder is at most h/2 * max w^2
    assert errors[1] <= 0.5e-3 * np.max(w**2)


def test_query_count_is_s_times_carriers_plus_one(linear_case):
    w, key, samples, _ = linear_case
    oracle = FunctionOracle(linear_softmax_oracle(w), 3, (3, 3, 1))
    est = blackbox_estimate_gradient(oracle, key, samples, 1e-4)
    assert oracle.queries == est.query_count == len(samples) * (key.carrier_size + 1)
    assert est.extraction_meta() == {"mode": "zeroth_order", "s": 4, "h": 1e-4, "query_count": 24}


def test_boundary_carriers_are_counted(linear_case):
    w, key, samples, _ = linear_case
    est = blackbox_estimate_gradient(FunctionOracle(linear_softmax_oracle(w), 3, (3, 3, 1)), key, np.ones((2, 3, 3, 1)), 0.1)
    assert est.meta["boundary"] == 2 * key.carrier_size


def test_blackbox_matches_whitebox_on_a_model(blob_models, blobs, blob_key):
    _, marked = blob_models
    samples = select_key_samples(blobs[0], blob_key, 10)
    wb = whitebox_expected_gradient(marked, blob_key, samples)
    bb = blackbox_estimate_gradient(ModelOracle(marked), blob_key, samples, 1e-5)
    np.testing.assert_allclose(bb.values, wb.values, rtol=1e-3, atol=1e-5)
    np.testing.assert_array_equal(extract_watermark(bb, blob_key), decode(wb.values, blob_key))
    assert verify_estimate(bb, blob_key).verified


def test_samples_must_be_from_target_class(blobs, blob_key, blob_models):
    other = (blob_key.target + 1) % 4
    x = blobs[0].images[blobs[0].labels == other][:3]
    with pytest.raises(ExtractionError, match="target class"):
        whitebox_expected_gradient(blob_models[1], blob_key, x, labels=np.full(3, other))


def test_oracle_failure_reports_partial_count(linear_case):
    w, key, samples, _ = linear_case
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 8:
            raise ConnectionError("gone")
        return linear_softmax_oracle(w)(x)

    with pytest.raises(ExtractionError) as info:
        blackbox_estimate_gradient(FunctionOracle(flaky, 3, (3, 3, 1)), key, samples, 1e-3)
    assert info.value.queries == key.carrier_size + 1


def test_bad_arguments(linear_case):
    w, key, samples, _ = linear_case
    oracle = FunctionOracle(linear_softmax_oracle(w), 3, (3, 3, 1))
    with pytest.raises(ValueError):
        blackbox_estimate_gradient(oracle, key, samples, 0.0)
    with pytest.raises(ExtractionError):
        blackbox_estimate_gradient(oracle, key, samples[:0], 1e-3)


def test_select_key_samples_is_seeded(blobs, blob_key):
    a = select_key_samples(blobs[0], blob_key, 5, seed=1)
    b = select_key_samples(blobs[0], blob_key, 5, seed=1)
    np.testing.assert_array_equal(a, b)
    assert len(select_key_samples(blobs[0], blob_key, 10_000)) == np.sum(blobs[0].labels == blob_key.target)


def test_oracle_accuracy_matches_model_accuracy(blob_models, blobs):
    oracle = ModelOracle(blob_models[0])
    assert oracle_accuracy(oracle, blobs[1]) == blob_models[0].accuracy(blobs[1])
    assert oracle.queries == len(blobs[1])
