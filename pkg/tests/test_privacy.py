import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfedsim.model import ModelUpdate
from dpfedsim.privacy import PrivacyLedger, PrivacySpec, add_noise, calibrate_sigma, clip
from dpfedsim.rng import substream


def _update(values):
    return ModelUpdate(delta=np.asarray(values, dtype=np.float64), node_id=0, episode=1)


def test_clip_noop_below_threshold():
    u = _update([0.3, 0.4])  # norm 0.5
    out = clip(u, 1.0)
    assert np.array_equal(out.delta, u.delta)


def test_clip_scales_to_threshold():
    u = _update([0.0, 2.0])
    out = clip(u, 1.0)
    assert np.allclose(out.delta, [0.0, 1.0])
    assert np.linalg.norm(out.delta) == pytest.approx(1.0)


def test_clip_matches_formula_oracle():
    rng = substream(1, "clip")
    values = rng.normal(0, 2, size=10)
    u = _update(values)
    out = clip(u, 0.7)
    norm = math.sqrt(sum(v * v for v in values))  # independent norm routine
    scale = max(1.0, norm / 0.7)
    assert np.allclose(out.delta, values / scale, rtol=0, atol=0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.01, 10))
@settings(max_examples=100, deadline=None)
def test_clip_idempotent_and_bounded(values, c):
    u = _update(values)
    once = clip(u, c)
    twice = clip(once, c)
    assert np.allclose(once.delta, twice.delta, rtol=1e-15, atol=1e-15)
    assert np.linalg.norm(once.delta) <= c * (1 + 1e-12)
    if np.linalg.norm(u.delta) >= c:
        assert np.linalg.norm(once.delta) == pytest.approx(c, rel=1e-12)


def test_calibrate_inversion_fixture():
    # delta chosen so 2 ln(1.25/delta) = 1
    delta = 1.25 * math.exp(-0.5)
    assert calibrate_sigma(1.0, delta, 1.0) == pytest.approx(1.0, rel=1e-12)


def test_calibrate_reference_value():
    # independent high-precision evaluation of sqrt(2 ln 1250)/0.7
    expected = math.sqrt(2.0 * math.log(1250.0)) / 0.7
    assert calibrate_sigma(0.7, 0.001, 1.0) == pytest.approx(expected, abs=1e-12)
    assert round(calibrate_sigma(0.7, 0.001, 1.0), 4) == 5.3950


def test_calibrate_homogeneity():
    base = calibrate_sigma(1.0, 0.01, 1.0)
    assert calibrate_sigma(1.0, 0.01, 2.0) == pytest.approx(2 * base)
    assert calibrate_sigma(2.0, 0.01, 1.0) == pytest.approx(base / 2)


def test_calibrate_monotone_in_epsilon_and_sensitivity():
    eps = np.linspace(0.1, 3.0, 12)
    sigmas = [calibrate_sigma(e, 0.001, 1.0) for e in eps]
    assert all(a > b for a, b in zip(sigmas, sigmas[1:]))
    sens = np.linspace(0.1, 3.0, 12)
    sigmas = [calibrate_sigma(1.0, 0.001, s) for s in sens]
    assert all(a < b for a, b in zip(sigmas, sigmas[1:]))


def test_calibrate_rejects_bad_delta():
    with pytest.raises(ValueError):
        calibrate_sigma(1.0, 1.25, 1.0)
    with pytest.raises(ValueError):
        calibrate_sigma(1.0, 0.0, 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        PrivacySpec(epsilon=0.0)
    with pytest.raises(ValueError):
        PrivacySpec(epsilon=1.0, delta=1.0)
    with pytest.raises(ValueError):
        PrivacySpec(epsilon=1.0, clip_c=0.0)


def test_add_noise_zero_sigma_identity():
    # epsilon so large the noise std underflows practical effect
    spec = PrivacySpec(epsilon=1e300, delta=0.001, clip_c=1.0)
    u = _update([0.1, 0.2, 0.3])
    out = add_noise(u, spec, substream(0, "n"))
    assert np.allclose(out.delta, u.delta, atol=1e-290)


def test_add_noise_replay_identical():
    spec = PrivacySpec(epsilon=0.7, delta=0.001, clip_c=1.0)
    u = _update([0.1] * 5)
    a = add_noise(u, spec, substream(3, "n", 1))
    b = add_noise(u, spec, substream(3, "n", 1))
    assert np.array_equal(a.delta, b.delta)


def test_add_noise_moments():
    spec = PrivacySpec(epsilon=0.7, delta=0.001, clip_c=1.0)
    rng = substream(9, "moments")
    n = 10**5
    draws = spec.noise_std * rng.standard_normal(n)  # same law as the mechanism
    base = _update([0.0])
    # statistical estimator oracle on actual mechanism draws
    mech = np.array([add_noise(base, spec, substream(9, "m", i)).delta[0] for i in range(2000)])
    s = spec.noise_std
    assert abs(mech.mean()) < 4 * s / math.sqrt(len(mech))
    assert abs(draws.var() - s * s) < 0.05 * s * s


def test_ledger_zero_delta_never_stops():
    ledger = PrivacyLedger(stop_threshold=0.5)
    spec = PrivacySpec(epsilon=1.0, delta=1e-300, clip_c=1.0)
    for _ in range(100):
        assert ledger.account(spec) == "continue"


def test_ledger_stops_at_third_episode():
    # product expansion oracle: 1 - (1 - 0.001)^3 = 0.002997001 > 0.0025
    ledger = PrivacyLedger(stop_threshold=0.0025)
    spec = PrivacySpec(epsilon=1.0, delta=0.001, clip_c=1.0)
    assert ledger.account(spec) == "continue"
    assert ledger.account(spec) == "continue"
    assert ledger.account(spec) == "stop"
    assert ledger.cumulative_delta == pytest.approx(1 - (1 - 0.001) ** 3, rel=1e-12)


def test_ledger_boundary_is_strict():
    ledger = PrivacyLedger(stop_threshold=0.001)
    spec = PrivacySpec(epsilon=1.0, delta=0.001, clip_c=1.0)
    # one episode reaches exactly the threshold: continue (strict >)
    assert ledger.account(spec) == "continue"
    assert ledger.cumulative_delta == 0.001


def test_ledger_monotone_and_order_independent():
    deltas = [0.001, 0.003, 0.0005, 0.002]
    specs = [PrivacySpec(epsilon=1.0, delta=d, clip_c=1.0) for d in deltas]
    ledger = PrivacyLedger(stop_threshold=1.0)
    seen = []
    for s in specs:
        ledger.account(s)
        seen.append(ledger.cumulative_delta)
    assert all(a <= b for a, b in zip(seen, seen[1:]))
    assert seen[-1] >= max(deltas)

    reverse = PrivacyLedger(stop_threshold=1.0)
    for s in reversed(specs):
        reverse.account(s)
    assert abs(reverse.cumulative_delta - ledger.cumulative_delta) < 1e-12
