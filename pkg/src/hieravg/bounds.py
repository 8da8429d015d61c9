import itertools
import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from hieravg.core import InvalidHyperParameter

logger = logging.getLogger(__name__)

# Group size of the hierarchical side in the K-AVG comparison
COMPARISON_GROUP_SIZE = 4
# L*gamma*P below this is outside the regime where the variance term is negligible
LARGE_WORKER_REGIME = 10.0
DEFAULT_K2_MAX = 64

BOUND_COLUMNS = ['K1', 'K2', 'S', 'bound_value', 'term1', 'term2', 'term3', 'condition_ok', 'theorem']


class UnsupportedScheduleFamily(ValueError):
    """The schedule is not a power-law family that can be decided analytically."""


@dataclass(frozen=True)
class BoundInputs:
    """
    Everything the bound formulas consume.

    ``T`` defaults to ``N * K2``. ``delta_grad_w`` is the intermediate-gradient
    constant of the fixed-step bound, admitted in [0, max(0, K2(K2-1)/2 - 1)].
    """
    L: float
    M: float
    M_G: float
    F1_minus_Fstar: float
    gamma: float
    B: int
    P: int
    S: int
    K1: int
    K2: float
    N: float
    T: Optional[float] = None
    delta_grad_w: float = 0.0

    def __post_init__(self):
        if self.T is None:
            object.__setattr__(self, 'T', self.N * self.K2)
        upper = max(0.0, self.K2 * (self.K2 - 1) / 2 - 1)
        if not 0.0 <= self.delta_grad_w <= upper:
            raise InvalidHyperParameter(f"delta_grad_w={self.delta_grad_w} outside [0, {upper}] for K2={self.K2}")

    @property
    def delta(self):
        """L^2 gamma^2 (1 + delta_grad_w)."""
        return self.L ** 2 * self.gamma ** 2 * (1.0 + self.delta_grad_w)

    @classmethod
    def from_params(cls, constants, params, delta_grad_w=0.0):
        """Build inputs from objective constants and the first round of a validated configuration."""
        gamma, B = params.schedule.at(1)
        return cls(L=constants.L, M=constants.M, M_G=constants.M_G, F1_minus_Fstar=constants.F1_minus_Fstar,
                   gamma=gamma, B=B, P=params.P, S=params.S, K1=params.K1, K2=params.K2, N=params.N,
                   T=params.N * params.K2, delta_grad_w=delta_grad_w)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class BoundReport:
    """Bound value, its (initial gap, variance, drift) terms, and (name, satisfied, slack) conditions."""
    value: float
    terms: Tuple[float, float, float]
    conditions: Tuple[Tuple[str, bool, float], ...]

    @property
    def condition_ok(self):
        return all(ok for _, ok, _ in self.conditions)

    def as_row(self, **extra):
        row = dict(extra)
        row.update({'bound_value': self.value, 'term1': self.terms[0], 'term2': self.terms[1],
                    'term3': self.terms[2], 'condition_ok': self.condition_ok})
        return row


def _report(terms, conditions):
    terms = tuple(float(t) for t in terms)
    return BoundReport(value=terms[0] + terms[1] + terms[2], terms=terms, conditions=tuple(conditions))


def local_bracket(K1, K2, S):
    """(K2-K1)(4K2+K1-3)/S + (K1-1)(3K2+K1-2), the drift factor shared by the fixed-step bounds."""
    return (K2 - K1) * (4 * K2 + K1 - 3) / S + (K1 - 1) * (3 * K2 + K1 - 2)


def _ratio(numerator, denominator):
    return numerator / denominator if denominator > 0 else math.inf


def _theorem1_terms(inputs, gamma, K2, T):
    L, M = inputs.L, inputs.M
    gap = _ratio(2.0 * inputs.F1_minus_Fstar, gamma * T)
    variance = L * gamma * M / (inputs.P * inputs.B)
    drift = 4.0 * L ** 2 * gamma ** 2 * K2 ** 2 * inputs.M_G ** 2
    lg = L * gamma
    return _report((gap, variance, drift), [('step_size', 0.0 < lg <= 1.0, min(lg, 1.0 - lg))])


def theorem1_bound(inputs, T=None):
    """
    Bound on the step-averaged squared gradient norm for constant step and batch size.

    2(F1 - F*)/(gamma T) + L gamma M/(P B) + 4 L^2 gamma^2 K2^2 M_G^2, valid when
    0 < L gamma <= 1. A violated condition is flagged, never raised.

    Args:
        inputs (BoundInputs): Bound inputs.
        T (int, optional): Step horizon. Defaults to ``inputs.T``.

    Returns:
        BoundReport: Value, terms and the step-size condition.
    """
    T = inputs.T if T is None else T
    return _theorem1_terms(inputs, inputs.gamma, inputs.K2, T)


def theorem1_rate_bound(inputs, T):
    """
    The fixed-step bound at gamma = sqrt(PB/T) and the real-valued K2 = T^(1/4)/(PB)^(3/4).

    Equals (2(F1 - F*) + 4 L^2 M_G^2 + L M) / sqrt(P B T).
    """
    PB = inputs.P * inputs.B
    gamma = math.sqrt(PB / T)
    K2 = T ** 0.25 / PB ** 0.75
    return _theorem1_terms(inputs, gamma, K2, T)


def theorem2_condition(inputs):
    """
    Step-size condition of the fixed-step round bound.

    Returns:
        tuple: ``(satisfied, slack)`` with slack
        1 - L^2 gamma^2 (K2(K2-1)/2 - 1 - delta_grad_w) - L gamma K2.
    """
    lg = inputs.L * inputs.gamma
    slack = 1.0 - lg ** 2 * (inputs.K2 * (inputs.K2 - 1) / 2 - 1 - inputs.delta_grad_w) - lg * inputs.K2
    return slack >= 0.0, slack


def _delta_condition(delta):
    return ('delta_in_unit_interval', 0.0 < delta < 1.0, min(delta, 1.0 - delta))


def theorem2_bound(inputs, N=None):
    """
    Bound on the round-averaged squared gradient norm for constant step and batch size.

    When K2 - delta or gamma is not positive the terms are infinite and the
    delta condition reports the failure.

    Args:
        inputs (BoundInputs): Bound inputs.
        N (float, optional): Number of rounds. Defaults to ``inputs.N``.

    Returns:
        BoundReport: Value, terms and the step-size and delta conditions.
    """
    N = inputs.N if N is None else N
    L, M, gamma, B, K2 = inputs.L, inputs.M, inputs.gamma, inputs.B, inputs.K2
    delta = inputs.delta
    denom = K2 - delta
    ok, slack = theorem2_condition(inputs)
    conditions = [('step_size_interval', ok, slack), _delta_condition(delta)]
    if denom <= 0 or gamma <= 0:
        return _report((math.inf, math.inf, math.inf), conditions)
    gap = 2.0 * inputs.F1_minus_Fstar / (N * denom * gamma)
    variance = L * gamma * M * K2 ** 2 / (inputs.P * B * denom)
    drift = L ** 2 * gamma ** 2 * M * K2 / (12.0 * B * denom) * local_bracket(inputs.K1, K2, inputs.S)
    return _report((gap, variance, drift), conditions)


def kavg_bound(inputs, N=None, K=None):
    """
    Round bound of plain K-step averaging, written in its own closed form.

    The drift term is L^2 gamma^2 M K(K-1)(2K-1) / (6B(K - delta)).
    """
    N = inputs.N if N is None else N
    K = inputs.K2 if K is None else K
    L, M, gamma, B = inputs.L, inputs.M, inputs.gamma, inputs.B
    delta = inputs.delta
    ok, slack = theorem2_condition(inputs.with_(K2=K, K1=K))
    conditions = [('step_size_interval', ok, slack), _delta_condition(delta)]
    if K - delta <= 0 or gamma <= 0:
        return _report((math.inf, math.inf, math.inf), conditions)
    gap = 2.0 * inputs.F1_minus_Fstar / (N * (K - delta) * gamma)
    variance = L * gamma * M * K ** 2 / (inputs.P * B * (K - delta))
    drift = L ** 2 * gamma ** 2 * M * K * (K - 1) * (2 * K - 1) / (6.0 * B * (K - delta))
    return _report((gap, variance, drift), conditions)


def theorem3_bound(schedules, inputs):
    """
    Weighted round bound for per-round step sizes and batch sizes.

    Round j is weighted by gamma_j / sum(gamma). The denominators use (K2 - 1), so
    K2 = 1 is reported as a failed condition with an infinite value.

    Args:
        schedules (list of tuple): ``(gamma_j, B_j)`` per round.
        inputs (BoundInputs): Supplies L, M, gap, P, S, K1, K2 and delta_grad_w.

    Returns:
        BoundReport: Value, terms and the per-round step-size condition (worst slack).
    """
    if not schedules:
        raise InvalidHyperParameter("theorem3_bound needs at least one (gamma, B) entry")
    gammas = np.array([g for g, _ in schedules], dtype=np.float64)
    batches = np.array([b for _, b in schedules], dtype=np.float64)
    L, M, K2 = inputs.L, inputs.M, inputs.K2

    slacks = [theorem2_condition(inputs.with_(gamma=float(g)))[1] for g in gammas]
    worst = min(slacks)
    conditions = [('step_size_interval', worst >= 0.0, worst), ('nondegenerate_interval', K2 > 1, K2 - 1)]
    if K2 <= 1:
        return _report((math.inf, math.inf, math.inf), conditions)

    weight = (K2 - 1) * gammas.sum()
    gap = 2.0 * inputs.F1_minus_Fstar / weight
    variance = np.sum(L * M * K2 ** 2 * gammas ** 2 / (inputs.P * batches)) / weight
    drift = np.sum(L ** 2 * M * K2 * gammas ** 3 / (12.0 * batches)) / weight * local_bracket(inputs.K1, K2, inputs.S)
    return _report((gap, variance, drift), conditions)


@dataclass(frozen=True)
class PowerLawSchedule:
    """gamma_j = gamma0 * j^(-a) and B_j = ceil(batch0 * j^b) for rounds j = 1, 2, ..."""
    gamma0: float
    a: float
    batch0: float = 1.0
    b: float = 0.0

    def entries(self, N):
        return [(self.gamma0 * j ** -self.a, int(math.ceil(self.batch0 * j ** self.b))) for j in range(1, N + 1)]


class ScheduleCheck(NamedTuple):
    step_sum_diverges: bool
    variance_sum_converges: bool
    drift_sum_converges: bool


def schedule_convergence_check(schedule):
    """
    Decide the three series conditions for a power-law schedule.

    sum gamma_j diverges iff a <= 1; sum gamma_j^2/B_j converges iff 2a + b > 1;
    sum gamma_j^3/B_j converges iff 3a + b > 1.

    Raises:
        UnsupportedScheduleFamily: For anything other than a PowerLawSchedule.
    """
    if not isinstance(schedule, PowerLawSchedule):
        raise UnsupportedScheduleFamily(f"Only PowerLawSchedule can be decided, got {type(schedule).__name__}")
    a, b = schedule.a, schedule.b
    return ScheduleCheck(a <= 1.0, 2 * a + b > 1.0, 3 * a + b > 1.0)


@dataclass
class AdvisorReport:
    condition: bool
    lhs: float
    rhs: float
    b2_below_b1: bool
    argmin: int
    curve: pd.DataFrame


def advisor_curve(inputs, T=None, K2_max=DEFAULT_K2_MAX):
    """
    B(K2) = (alpha + beta K2 + eta f(min(K1, K2), K2, S)) * K2 / (K2 - delta) over K2 = 1..K2_max.
    Intervals with K2 <= delta get B = inf.

    alpha = 2(F1 - F*)/(T gamma), beta = L gamma M/(P B), eta = L^2 gamma^2 M/(12 B).
    """
    T = inputs.T if T is None else T
    L, M, gamma, B = inputs.L, inputs.M, inputs.gamma, inputs.B
    alpha = _ratio(2.0 * inputs.F1_minus_Fstar, T * gamma)
    beta = L * gamma * M / (inputs.P * B)
    eta = L ** 2 * gamma ** 2 * M / (12.0 * B)
    delta = inputs.delta
    rows = []
    for K2 in range(1, K2_max + 1):
        f = alpha + beta * K2 + eta * local_bracket(min(inputs.K1, K2), K2, inputs.S)
        g = _ratio(K2, K2 - delta)
        rows.append({'K2': K2, 'f': f, 'g': g, 'B': f * g if math.isfinite(g) else math.inf})
    return pd.DataFrame(rows)


def k2_advisor(inputs, T=None, K2_max=DEFAULT_K2_MAX):
    """
    Decide whether a global interval above 1 is expected to train faster at fixed T.

    The sufficient condition is
    delta (F1 - F*)/(T gamma (1 - delta)) > 2 L gamma M/(P B) + L^2 gamma^2 M/(B S).
    The report also carries the brute-force argmin of B(K2) over 1..K2_max and
    whether B(2) < B(1).

    Args:
        inputs (BoundInputs): Bound inputs; K1 and S are held fixed.
        T (int, optional): Step horizon. Defaults to ``inputs.T``.
        K2_max (int, optional): Largest K2 evaluated. Defaults to 64.

    Returns:
        AdvisorReport: Condition sides, verdict and the B(K2) curve.
    """
    T = inputs.T if T is None else T
    L, M, gamma, B, S = inputs.L, inputs.M, inputs.gamma, inputs.B, inputs.S
    delta = inputs.delta
    rhs = 2.0 * L * gamma * M / (inputs.P * B) + L ** 2 * gamma ** 2 * M / (B * S)
    if 0.0 < delta < 1.0 and gamma > 0:
        lhs = delta * inputs.F1_minus_Fstar / (T * gamma * (1.0 - delta))
    else:
        logger.warning("delta=%.4g outside (0, 1): the K2 > 1 condition does not apply", delta)
        lhs = math.nan
    curve = advisor_curve(inputs, T, K2_max)
    values = curve['B'].to_numpy()
    argmin = int(curve['K2'].iloc[int(np.argmin(values))])
    b2_below_b1 = bool(len(values) > 1 and values[1] < values[0])
    return AdvisorReport(condition=bool(lhs > rhs), lhs=lhs, rhs=rhs, b2_below_b1=b2_below_b1,
                         argmin=argmin, curve=curve)


class K1Bracket(NamedTuple):
    value: float
    derivative: float
    increasing: bool


def k1_bracket(K1, K2, S):
    """
    The drift bracket as a function of K1, with its derivative (S-1)(3K2+2K1-3)/S.

    The bracket is increasing in K1 for S > 1 and constant for S = 1.
    """
    if not 1 <= K1 <= K2 or S < 1:
        raise InvalidHyperParameter(f"k1_bracket needs 1 <= K1 <= K2 and S >= 1, got K1={K1} K2={K2} S={S}")
    derivative = (S - 1) * (3 * K2 + 2 * K1 - 3) / S
    return K1Bracket(local_bracket(K1, K2, S), derivative, derivative > 0)


def comparison_polynomial(K, a):
    """f1 - f2 of the K-AVG comparison in units of L^2 gamma^2 M/(6B)."""
    c = 1.0 + a
    return (c * K - 1) * (2 * c * K - 1) / 4.0 - (K - 1) * (2 * K - 1)


def comparison_root():
    """The inflation a in [0, 1] at which the comparison polynomial vanishes at K = 2."""
    return optimize.brentq(lambda a: comparison_polynomial(2, a), 0.0, 1.0)


@dataclass
class ComparisonReport:
    K: float
    a: float
    f1: float
    g1: float
    f2: float
    g2: float
    H: float
    chi: float
    H_untruncated: float
    chi_untruncated: float
    F: float
    regime_ok: bool

    @property
    def hier_faster(self):
        return self.H < self.chi


def _untruncated(alpha, beta, eta12, K1, K2, S, delta):
    return (alpha + beta * K2 + eta12 * local_bracket(K1, K2, S)) * _ratio(K2, K2 - delta)


def compare_with_kavg(inputs, K, a=0.0, delta=None):
    """
    Compare the hierarchical bound (K2=(1+a)K, K1=1, S=4) with K-AVG at interval K.

    H = f1*g1 and chi = f2*g2 drop the variance term, which the large-worker
    regime (L gamma P >> 1) makes negligible; a warning is raised when
    L gamma P < 10. The untruncated forms keep it.

    Args:
        inputs (BoundInputs): Supplies L, M, gap, gamma, B, P and T.
        K (float): K-AVG averaging interval.
        a (float, optional): Interval inflation in [0, 1]. Defaults to 0.
        delta (float, optional): Overrides ``inputs.delta``.

    Returns:
        ComparisonReport: f1, g1, f2, g2, H, chi, their untruncated forms and F(K).
    """
    if not 0.0 <= a <= 1.0:
        raise InvalidHyperParameter(f"inflation a must lie in [0, 1], got {a}")
    L, M, gamma, B = inputs.L, inputs.M, inputs.gamma, inputs.B
    delta = inputs.delta if delta is None else delta
    regime = L * gamma * inputs.P
    if regime < LARGE_WORKER_REGIME:
        warnings.warn(f"L*gamma*P={regime:.4g} < {LARGE_WORKER_REGIME}: the variance term is not negligible")

    c = 1.0 + a
    alpha = _ratio(2.0 * inputs.F1_minus_Fstar, inputs.T * gamma)
    eta6 = L ** 2 * gamma ** 2 * M / (6.0 * B)
    f1 = alpha + eta6 * (c * K - 1) * (2 * c * K - 1) / 4.0
    g1 = _ratio(c * K, c * K - delta)
    f2 = alpha + eta6 * (K - 1) * (2 * K - 1)
    g2 = _ratio(K, K - delta)

    beta = L * gamma * M / (inputs.P * B)
    H_full = _untruncated(alpha, beta, eta6 / 2.0, 1, c * K, COMPARISON_GROUP_SIZE, delta)
    chi_full = _untruncated(alpha, beta, eta6 / 2.0, 1, K, 1, delta)
    return ComparisonReport(K=K, a=a, f1=f1, g1=g1, f2=f2, g2=g2, H=f1 * g1, chi=f2 * g2,
                            H_untruncated=H_full, chi_untruncated=chi_full,
                            F=comparison_polynomial(K, a), regime_ok=regime >= LARGE_WORKER_REGIME)


def bounds_table(inputs, K1_grid=None, K2_grid=None, S_grid=None):
    """
    Fixed-step round bounds over a grid of (K1, K2, S) at the fixed horizon ``inputs.T``.

    Combinations with K1 > K2 are skipped; ``delta_grad_w`` is clipped to each
    row's admissible range.

    Returns:
        pandas.DataFrame: One row per grid point, columns ``BOUND_COLUMNS``.
    """
    K1_grid = [inputs.K1] if K1_grid is None else K1_grid
    K2_grid = [inputs.K2] if K2_grid is None else K2_grid
    S_grid = [inputs.S] if S_grid is None else S_grid
    rows = []
    for K1, K2, S in itertools.product(K1_grid, K2_grid, S_grid):
        if K1 > K2:
            logger.debug("skipping K1=%s > K2=%s", K1, K2)
            continue
        limit = max(0.0, K2 * (K2 - 1) / 2 - 1)
        point = inputs.with_(K1=K1, K2=K2, S=S, N=inputs.T / K2, delta_grad_w=min(inputs.delta_grad_w, limit))
        rows.append(theorem2_bound(point).as_row(K1=K1, K2=K2, S=S, theorem='round_fixed'))
    return pd.DataFrame(rows, columns=BOUND_COLUMNS)
