import math
import sys
import os
import random
import numpy as np
import pytest
# Append the directory containing the package to Python's path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))
from hieravg import bounds, core
from hieravg.bounds import BoundInputs, PowerLawSchedule

# Data for tests

example = BoundInputs(L=1.0, M=1.0, M_G=1.0, F1_minus_Fstar=1.0, gamma=0.1, B=2, P=4, S=1, K1=1, K2=2, N=50, T=100)
desk = BoundInputs(L=1.0, M=0.5, M_G=2.0, F1_minus_Fstar=3.0, gamma=0.005, B=1, P=16, S=4, K1=4, K2=32, N=100)
large_workers = BoundInputs(L=1.0, M=0.2, M_G=1.0, F1_minus_Fstar=2.0, gamma=0.1, B=1, P=128, S=4, K1=1, K2=4,
                            N=1000)


def test_theorem1_example():
    report = bounds.theorem1_bound(example)
    assert report.value == pytest.approx(0.3725, rel=1e-12)
    assert report.terms == pytest.approx((0.2, 0.0125, 0.16), rel=1e-12)
    assert report.condition_ok


def test_theorem1_vanishing_sources():
    report = bounds.theorem1_bound(example.with_(M=0.0, M_G=0.0, F1_minus_Fstar=0.0))
    assert report.value == 0.0


def test_theorem1_condition_flagged():
    report = bounds.theorem1_bound(example.with_(gamma=2.0))
    assert not report.condition_ok
    assert report.conditions[0][2] == pytest.approx(-1.0)
    assert math.isfinite(report.value)


def test_theorem1_rate_doubling():
    inputs = example.with_(P=4, B=1)
    first = bounds.theorem1_rate_bound(inputs, 4096)
    second = bounds.theorem1_rate_bound(inputs, 8192)
    assert second.value / first.value == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    closed_form = (2 * 1.0 + 4 * 1.0 * 1.0 + 1.0 * 1.0) / math.sqrt(4 * 1 * 4096)
    assert first.value == pytest.approx(closed_form, rel=1e-12)


def test_rate_bound_matches_schedule():
    gamma, k2_raw, _ = core.theorem1_schedule(4096, 4, 1)
    inputs = example.with_(P=4, B=1, gamma=gamma, K2=k2_raw)
    assert bounds.theorem1_bound(inputs, T=4096).value == pytest.approx(
        bounds.theorem1_rate_bound(inputs, 4096).value, rel=1e-12)


def test_local_bracket():
    assert bounds.local_bracket(4, 32, 4) == 1197
    assert bounds.local_bracket(1, 1, 4) == 0
    assert bounds.local_bracket(1, 1, 1) == 0


def test_theorem2_drift_vanishes_without_local_steps():
    report = bounds.theorem2_bound(desk.with_(K1=1, K2=1))
    assert report.terms[2] == 0.0


def test_theorem2_reproduces_kavg():
    for K in (1, 2, 8, 32):
        for S in (1, 4):
            inputs = desk.with_(K1=K, K2=K, S=S)
            assert bounds.theorem2_bound(inputs).value == pytest.approx(bounds.kavg_bound(inputs).value, rel=1e-12)
    inputs = desk.with_(K1=1, S=1)
    assert bounds.theorem2_bound(inputs).value == bounds.theorem2_bound(desk.with_(K1=32)).value


def test_theorem2_condition_examples():
    ok, slack = bounds.theorem2_condition(desk.with_(gamma=0.0))
    assert ok and slack == 1.0
    ok, slack = bounds.theorem2_condition(desk.with_(L=1.0, gamma=0.01, K2=10, K1=2))
    assert ok
    assert slack == pytest.approx(0.8956, abs=1e-12)
    ok, slack = bounds.theorem2_condition(desk.with_(L=1.0, gamma=0.5, K2=10, K1=2))
    assert not ok
    assert slack < -5


def test_theorem2_flags_conditions():
    report = bounds.theorem2_bound(desk.with_(gamma=0.5))
    assert not report.condition_ok
    names = [name for name, _, _ in report.conditions]
    assert names == ['step_size_interval', 'delta_in_unit_interval']


def test_delta_grad_w_range():
    with pytest.raises(core.InvalidHyperParameter):
        desk.with_(delta_grad_w=-0.1)
    with pytest.raises(core.InvalidHyperParameter):
        desk.with_(delta_grad_w=32 * 31 / 2)
    assert desk.with_(delta_grad_w=3.0).delta == pytest.approx(4 * desk.delta)


def test_theorem1_zero_step_flagged():
    report = bounds.theorem1_bound(example.with_(gamma=0.0))
    assert not report.condition_ok
    assert report.terms[0] == math.inf
    assert report.value == math.inf


def test_theorem2_unit_interval_at_large_step():
    inputs = example.with_(K1=1, K2=1, gamma=1.0)
    assert bounds.theorem2_condition(inputs) == (True, 1.0)
    report = bounds.theorem2_bound(inputs)
    assert report.value == math.inf
    assert [ok for _, ok, _ in report.conditions] == [True, False]
    assert not bounds.kavg_bound(example.with_(gamma=1.0), K=1).condition_ok
    assert bounds.kavg_bound(example.with_(gamma=1.0), K=1).value == math.inf


def test_bounds_table_flags_nonpositive_denominators():
    df = bounds.bounds_table(example.with_(gamma=1.0), K1_grid=[1], K2_grid=[1, 2, 3, 4])
    assert df['K2'].tolist() == [1, 2, 3, 4]
    assert df['bound_value'].iloc[0] == math.inf
    assert np.isfinite(df['bound_value'].iloc[1:]).all()
    assert not df['condition_ok'].any()


def test_theorem3_constant_schedule_ratio():
    inputs = desk.with_(N=200)
    fixed = bounds.theorem2_bound(inputs)
    weighted = bounds.theorem3_bound([(inputs.gamma, inputs.B)] * 200, inputs)
    assert weighted.value / fixed.value == pytest.approx((32 - inputs.delta) / 31, rel=1e-12)


def test_theorem3_single_round():
    inputs = desk.with_(N=1)
    gamma, B, K2 = inputs.gamma, inputs.B, inputs.K2
    weight = (K2 - 1) * gamma
    expected = (2 * inputs.F1_minus_Fstar / weight
                + inputs.L * inputs.M * K2 ** 2 * gamma ** 2 / (inputs.P * B) / weight
                + inputs.L ** 2 * inputs.M * K2 * gamma ** 3 / (12 * B) / weight * 1197)
    assert bounds.theorem3_bound([(gamma, B)], inputs).value == pytest.approx(expected, rel=1e-12)


def test_theorem3_degenerate_interval():
    report = bounds.theorem3_bound([(0.01, 1)], desk.with_(K1=1, K2=1))
    assert report.value == math.inf
    assert not report.condition_ok
    with pytest.raises(core.InvalidHyperParameter):
        bounds.theorem3_bound([], desk)


def test_theorem3_decays_with_growing_batches():
    schedule = PowerLawSchedule(gamma0=0.1, a=0.5, batch0=1, b=0.5)
    assert all(bounds.schedule_convergence_check(schedule))
    inputs = desk.with_(K1=2, K2=4, S=4)
    short = bounds.theorem3_bound(schedule.entries(100), inputs)
    long = bounds.theorem3_bound(schedule.entries(10_000), inputs)
    assert short.condition_ok and long.condition_ok
    assert long.value < 0.25 * short.value


def test_power_law_entries():
    entries = PowerLawSchedule(0.1, 1.0, 1, 1.0).entries(3)
    assert [b for _, b in entries] == [1, 2, 3]
    assert [g for g, _ in entries] == pytest.approx([0.1, 0.05, 0.1 / 3])
    assert PowerLawSchedule(0.2, 0.5, 1, 0.5).entries(4)[3] == (0.1, 2)


def test_schedule_convergence_check():
    assert tuple(bounds.schedule_convergence_check(PowerLawSchedule(0.1, 0.5, 1, 0.5))) == (True, True, True)
    assert not bounds.schedule_convergence_check(PowerLawSchedule(0.1, 1.1)).step_sum_diverges
    assert tuple(bounds.schedule_convergence_check(PowerLawSchedule(0.1, 0.0))) == (True, False, False)
    with pytest.raises(bounds.UnsupportedScheduleFamily):
        bounds.schedule_convergence_check([(0.1, 1), (0.05, 2)])


def test_advisor_no_noise_recommends_longer_interval():
    report = bounds.k2_advisor(desk.with_(M=0.0, K1=1), T=10_000)
    assert report.condition
    assert report.b2_below_b1
    assert report.argmin > 1


def test_advisor_no_gap_keeps_interval_one():
    report = bounds.k2_advisor(desk.with_(F1_minus_Fstar=0.0, K1=1, gamma=0.01), T=10_000)
    assert not report.condition
    assert report.argmin == 1
    assert report.curve.columns.tolist() == ['K2', 'f', 'g', 'B']
    assert len(report.curve) == bounds.DEFAULT_K2_MAX


def _random_inputs(rng):
    while True:
        K2 = rng.randint(1, 64)
        L = 10 ** rng.uniform(-1, 1)
        gamma = 10 ** rng.uniform(-4, 0) / L
        inputs = BoundInputs(L=L, M=10 ** rng.uniform(-6, 1), M_G=1.0, F1_minus_Fstar=10 ** rng.uniform(-2, 3),
                             gamma=gamma, B=rng.randint(1, 64), P=rng.choice([1, 4, 16, 64]),
                             S=rng.choice([1, 2, 4]), K1=1, K2=K2, N=10 ** rng.randint(1, 4))
        if bounds.theorem2_condition(inputs)[0] and 0.0 < inputs.delta < 1.0:
            return inputs


def test_advisor_consistency():
    rng = random.Random(9)
    holding = 0
    for _ in range(1000):
        inputs = _random_inputs(rng)
        report = bounds.k2_advisor(inputs)
        if report.condition:
            holding += 1
            assert report.b2_below_b1
            assert report.argmin > 1
    assert holding > 0


def test_k1_bracket():
    assert bounds.k1_bracket(1, 32, 1).value == bounds.k1_bracket(32, 32, 1).value == 31 * 126
    assert bounds.k1_bracket(5, 32, 1).derivative == 0
    values = [bounds.k1_bracket(K1, 32, 4).value for K1 in (2, 4, 8)]
    assert values[0] < values[1] < values[2]
    assert bounds.k1_bracket(4, 32, 4).increasing
    assert bounds.k1_bracket(32, 32, 4).value == 31 * 126
    with pytest.raises(core.InvalidHyperParameter):
        bounds.k1_bracket(8, 4, 2)


def test_comparison_polynomial():
    assert bounds.comparison_polynomial(2, 0.0) == -2.25
    assert abs(bounds.comparison_root() - 0.606) < 0.01
    assert bounds.comparison_polynomial(2, 0.606) == pytest.approx(0.0, abs=1e-2)


@pytest.mark.parametrize('delta', [0.1, 0.5, 0.9])
def test_hier_beats_kavg_grid(delta):
    for K in range(2, 65):
        for a in np.round(np.arange(0.0, 0.61, 0.1), 1):
            report = bounds.compare_with_kavg(large_workers, K, float(a), delta=delta)
            assert report.regime_ok
            assert report.H < report.chi
            assert report.hier_faster
            assert report.F < 0


def test_compare_warns_outside_regime():
    with pytest.warns(UserWarning):
        report = bounds.compare_with_kavg(large_workers.with_(P=4), 8, 0.5)
    assert not report.regime_ok
    with pytest.raises(core.InvalidHyperParameter):
        bounds.compare_with_kavg(large_workers, 8, 1.5)


def test_advisor_with_delta_above_one():
    report = bounds.k2_advisor(example.with_(gamma=1.0, K1=1), K2_max=8)
    assert not report.condition
    assert math.isnan(report.lhs)
    assert report.curve['B'].iloc[0] == math.inf
    assert report.argmin > 1


def test_compare_with_nonpositive_denominator():
    report = bounds.compare_with_kavg(large_workers, 1, 0.0, delta=1.0)
    assert report.chi == math.inf
    assert report.chi_untruncated == math.inf


def test_theorem2_monotone_in_K1_and_S():
    by_K1 = [bounds.theorem2_bound(desk.with_(K1=K1)).value for K1 in (2, 4, 8, 16)]
    assert all(a <= b for a, b in zip(by_K1, by_K1[1:]))
    by_S = [bounds.theorem2_bound(desk.with_(S=S)).value for S in (1, 2, 4, 8)]
    assert all(a >= b for a, b in zip(by_S, by_S[1:]))


def test_monotone_on_random_inputs():
    rng = random.Random(21)
    for _ in range(200):
        inputs = _random_inputs(rng).with_(K2=32, S=4)
        by_K1 = [bounds.theorem2_bound(inputs.with_(K1=K1)).value for K1 in range(2, 33)]
        assert all(a <= b for a, b in zip(by_K1, by_K1[1:]))
        by_S = [bounds.theorem2_bound(inputs.with_(K1=4, S=S)).value for S in (1, 2, 4, 8, 16)]
        assert all(a >= b for a, b in zip(by_S, by_S[1:]))


def test_terms_sum_and_finite():
    rng = random.Random(5)
    for _ in range(200):
        inputs = _random_inputs(rng)
        for report in (bounds.theorem1_bound(inputs), bounds.theorem2_bound(inputs)):
            assert math.isclose(sum(report.terms), report.value, rel_tol=4 * np.finfo(float).eps)
            if report.condition_ok:
                assert math.isfinite(report.value)
                assert report.value >= 0


def test_bounds_table():
    df = bounds.bounds_table(desk, K1_grid=[1, 2, 4], K2_grid=[2, 4], S_grid=[1, 4])
    assert df.columns.tolist() == bounds.BOUND_COLUMNS
    assert len(df) == 2 * 2 + 2 * 2 + 1 * 2
    assert (df['theorem'] == 'round_fixed').all()
    one_to_sixteen = bounds.bounds_table(desk, K1_grid=[1], K2_grid=list(range(1, 17)))
    assert len(one_to_sixteen) == 16
    assert one_to_sixteen['condition_ok'].dtype == bool
