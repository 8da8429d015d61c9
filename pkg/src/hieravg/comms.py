import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import pandas as pd

from hieravg import bounds

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 8

DEFAULT_COSTS = {
    'local_latency': 50e-6,
    'local_bandwidth': 50e9,
    'global_latency': 500e-6,
    'global_bandwidth': 5e9,
}


class MismatchedBudget(ValueError):
    """Two configurations compared side by side process different step totals."""


@dataclass(frozen=True)
class CommLedger:
    """Reduction counts of one run, with the vector size and participants they move."""
    n_local: int
    n_global: int
    d: int
    P: int
    S: int

    @property
    def costed_local(self):
        """Local reductions that move data; singleton groups have nothing to exchange."""
        return 0 if self.S == 1 else self.n_local

    @property
    def bytes_local(self):
        return self.n_local * BYTES_PER_VALUE * self.d * self.P

    @property
    def bytes_global(self):
        return self.n_global * BYTES_PER_VALUE * self.d * self.P


def _affine_time(latency, bandwidth, d):
    return latency + BYTES_PER_VALUE * d / bandwidth


@dataclass(frozen=True)
class CostModel:
    """
    Latency plus bandwidth cost of one reduction of a d-vector.

    Bandwidths are in bytes per second; ``math.inf`` removes the bandwidth term.
    """
    local_latency: float = DEFAULT_COSTS['local_latency']
    local_bandwidth: float = DEFAULT_COSTS['local_bandwidth']
    global_latency: float = DEFAULT_COSTS['global_latency']
    global_bandwidth: float = DEFAULT_COSTS['global_bandwidth']

    def __post_init__(self):
        if self.local_latency < 0 or self.global_latency < 0:
            raise ValueError("latencies must be >= 0")
        if not self.local_bandwidth > 0 or not self.global_bandwidth > 0:
            raise ValueError("bandwidths must be > 0")

    @classmethod
    def default(cls):
        return cls(**DEFAULT_COSTS)

    @classmethod
    def zero(cls):
        return cls(0.0, math.inf, 0.0, math.inf)

    def t_local(self, d):
        return _affine_time(self.local_latency, self.local_bandwidth, d)

    def t_global(self, d):
        return _affine_time(self.global_latency, self.global_bandwidth, d)


def count_reductions(params):
    """
    Closed-form reduction counts of a configuration.

    n_global = N and n_local = N*beta, or N*(beta - 1) when the local average that
    precedes each global average is elided. In relaxed mode beta is ceil(K2/K1).

    Args:
        params (ValidatedParams): Validated configuration.

    Returns:
        CommLedger: The counts.
    """
    per_round = params.beta - 1 if params.elide_redundant_local_avg else params.beta
    return CommLedger(n_local=params.N * per_round, n_global=params.N, d=params.d, P=params.P, S=params.S)


def modeled_time(ledger, model, d=None):
    """
    Modeled communication time costed_local*t_local(d) + n_global*t_global(d).

    ``costed_local`` equals n_local except for singleton groups, whose local
    reductions move no data and cost nothing.

    Args:
        ledger (CommLedger): Reduction counts.
        model (CostModel): Cost coefficients.
        d (int, optional): Vector dimension. Defaults to ``ledger.d``.

    Returns:
        float: Seconds.
    """
    d = ledger.d if d is None else d
    return ledger.costed_local * model.t_local(d) + ledger.n_global * model.t_global(d)


def crossover_ratio(ledger_hier, ledger_kavg):
    """
    Smallest t_global/t_local ratio above which the hierarchical ledger is cheaper.

    Returns 0 when it has no more costed local reductions and fewer global ones,
    and ``inf`` when it never wins.
    """
    saved_global = ledger_kavg.n_global - ledger_hier.n_global
    extra_local = ledger_hier.costed_local - ledger_kavg.costed_local
    if saved_global <= 0:
        return math.inf
    return max(0.0, extra_local / saved_global)


@dataclass
class TradeoffReport:
    ledger_hier: CommLedger
    ledger_kavg: CommLedger
    time_hier: float
    time_kavg: float
    crossover: float
    comparison: Optional[bounds.ComparisonReport] = None

    def to_frame(self):
        rows = []
        for label, ledger, seconds in (('hier_avg', self.ledger_hier, self.time_hier),
                                       ('k_avg', self.ledger_kavg, self.time_kavg)):
            rows.append({'algorithm': label, 'n_local_reductions': ledger.n_local,
                         'n_global_reductions': ledger.n_global, 'bytes_local': ledger.bytes_local,
                         'bytes_global': ledger.bytes_global, 'modeled_time': seconds})
        df = pd.DataFrame(rows)
        df['crossover_ratio'] = self.crossover
        if self.comparison is not None:
            df['bound'] = [self.comparison.H, self.comparison.chi]
            df['bound_untruncated'] = [self.comparison.H_untruncated, self.comparison.chi_untruncated]
        return df

    def summary(self):
        lines = [
            f"Hier-AVG: {self.ledger_hier.n_local} local / {self.ledger_hier.n_global} global reductions, "
            f"modeled {self.time_hier:.6g} s",
            f"K-AVG:    {self.ledger_kavg.n_local} local / {self.ledger_kavg.n_global} global reductions, "
            f"modeled {self.time_kavg:.6g} s",
            f"Hier-AVG communicates less when t_global/t_local > {self.crossover:.6g}",
        ]
        if self.comparison is not None:
            verdict = 'lower' if self.comparison.hier_faster else 'not lower'
            lines.append(f"Hier-AVG bound {self.comparison.H:.6g} vs K-AVG {self.comparison.chi:.6g} ({verdict})")
        return '\n'.join(lines)


def comm_tradeoff_report(params_hier, params_kavg, model, d=None, constants=None, delta_grad_w=0.0):
    """
    Side-by-side reduction ledgers, modeled times and bound comparison.

    Args:
        params_hier (ValidatedParams): Hierarchical configuration.
        params_kavg (ValidatedParams): K-AVG configuration (S=1, K1=K2=K).
        model (CostModel): Cost coefficients.
        d (int, optional): Vector dimension. Defaults to ``params_hier.d``.
        constants (ObjectiveConstants, optional): When given, the bound comparison
            is added with a = K2/K - 1. It needs K1 = 1 and S = 4 on the
            hierarchical side and is skipped otherwise.
        delta_grad_w (float, optional): Proof constant passed to the comparison. Defaults to 0.

    Returns:
        TradeoffReport: The report.

    Raises:
        MismatchedBudget: If the two configurations process different step totals.
    """
    if params_hier.T != params_kavg.T:
        raise MismatchedBudget(f"Hier-AVG runs T={params_hier.T} steps but K-AVG runs T={params_kavg.T}")
    d = params_hier.d if d is None else d
    ledger_hier = count_reductions(params_hier)
    ledger_kavg = count_reductions(params_kavg)
    time = functools.partial(modeled_time, model=model, d=d)

    comparison = None
    K = params_kavg.K2
    a = params_hier.K2 / K - 1.0
    if constants is not None and not 0.0 <= a <= 1.0:
        logger.warning("K2=%d is not within [K, 2K] of K=%d; bound comparison skipped", params_hier.K2, K)
    elif constants is not None and (params_hier.K1 != 1 or params_hier.S != bounds.COMPARISON_GROUP_SIZE):
        logger.warning("bound comparison needs K1=1 and S=%d, got K1=%d S=%d; skipped",
                       bounds.COMPARISON_GROUP_SIZE, params_hier.K1, params_hier.S)
    elif constants is not None:
        root = bounds.comparison_root()
        if a > root:
            logger.warning("a=%.4g exceeds %.4g: the lower hierarchical bound is not guaranteed", a, root)
        inputs = bounds.BoundInputs.from_params(constants, params_kavg, delta_grad_w=delta_grad_w)
        comparison = bounds.compare_with_kavg(inputs, K, a)

    report = TradeoffReport(ledger_hier=ledger_hier, ledger_kavg=ledger_kavg,
                            time_hier=time(ledger_hier), time_kavg=time(ledger_kavg),
                            crossover=crossover_ratio(ledger_hier, ledger_kavg), comparison=comparison)
    logger.info("tradeoff: hier %.6g s vs kavg %.6g s", report.time_hier, report.time_kavg)
    return report
