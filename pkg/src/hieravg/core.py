import bisect
import math
import numbers
import warnings
from dataclasses import dataclass, fields, replace
from typing import Dict, Optional, Tuple


class NonDividingGroupSize(ValueError):
    """The local group size S does not divide the worker count P."""


class IntervalOrder(ValueError):
    """The local averaging interval K1 exceeds the global interval K2."""


class NonIntegerBeta(ValueError):
    """K1 does not divide K2 while strict mode is on."""


class EmptySchedule(ValueError):
    """A step size or batch size schedule has no entries."""


class ScheduleCoverage(ValueError):
    """A schedule does not cover rounds 1..N contiguously."""


class InvalidHyperParameter(ValueError):
    """A scalar hyperparameter is outside its admissible range."""


class DegenerateHorizon(ValueError):
    """The step horizon T is too short for the requested schedule."""


@dataclass(frozen=True)
class HyperParams:
    """
    Full configuration of one hierarchical averaging run.

    Schedules are tuples of ``(start_round, value)`` pairs. Rounds are numbered
    from 1 and each entry stays in force until the next entry's start round.

    Args:
        P (int): Number of workers.
        S (int): Local group size.
        K1 (int): Local averaging interval in SGD steps.
        K2 (int): Global averaging interval in SGD steps.
        N (int): Number of global rounds.
        d (int): Parameter dimension.
        gamma_schedule (tuple): ``(start_round, step size)`` pairs.
        batch_schedule (tuple): ``(start_round, batch size)`` pairs.
        seed (int): Seed of the sampling streams.
        strict (bool): Require K1 to divide K2. Defaults to True.
        diminishing (bool): Require the step size to be non-increasing. Defaults to False.
        elide_redundant_local_avg (bool): Skip the local average that directly
            precedes each global average. Defaults to False.
    """
    P: int
    S: int
    K1: int
    K2: int
    N: int
    d: int
    gamma_schedule: Tuple[Tuple[int, float], ...] = ((1, 0.01),)
    batch_schedule: Tuple[Tuple[int, int], ...] = ((1, 1),)
    seed: int = 0
    strict: bool = True
    diminishing: bool = False
    elide_redundant_local_avg: bool = False


@dataclass(frozen=True)
class Schedule:
    """Merged step size and batch size schedule, one ``(start_round, gamma, B)`` per change point."""
    entries: Tuple[Tuple[int, float, int], ...]

    def at(self, n):
        """
        Look up the step size and batch size in force during round n.

        Args:
            n (int): Round number, starting at 1.

        Returns:
            tuple: ``(gamma, B)``.
        """
        starts = [entry[0] for entry in self.entries]
        idx = bisect.bisect_right(starts, n) - 1
        if idx < 0:
            raise ScheduleCoverage(f"Round {n} precedes the first schedule entry (start {starts[0]})")
        _, gamma, batch = self.entries[idx]
        return gamma, batch

    def per_round(self, N):
        """Expand the schedule to one ``(gamma, B)`` pair per round 1..N."""
        return [self.at(n) for n in range(1, N + 1)]


@dataclass(frozen=True)
class GroupTopology:
    """Assignment of workers to local groups of equal size; ``assignment[j]`` is worker j's group."""
    assignment: Tuple[int, ...]
    S: int
    n_groups: int

    def as_dict(self) -> Dict[int, int]:
        return dict(enumerate(self.assignment))

    def members(self, group):
        """Workers of ``group`` in ascending index order."""
        return [j for j, g in enumerate(self.assignment) if g == group]

    def groups(self):
        """All groups as lists of worker indices, ordered by group index."""
        return [self.members(g) for g in range(self.n_groups)]


@dataclass(frozen=True)
class ValidatedParams(HyperParams):
    """
    HyperParams that passed validation, plus the quantities derived from them.

    ``beta`` is the number of local blocks per round. In relaxed mode it is
    ``ceil(K2 / K1)`` and the last block is truncated to ``K2 mod K1`` steps.
    """
    beta: int = 0
    schedule: Optional[Schedule] = None
    topology: Optional[GroupTopology] = None

    @property
    def T(self):
        return self.N * self.K2

    @property
    def segment_lengths(self):
        """Lengths of the local SGD segments of one round."""
        full, rest = divmod(self.K2, self.K1)
        return (self.K1,) * full + ((rest,) if rest else ())


def _check_positive_int(name, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise InvalidHyperParameter(f"{name} must be an integer >= {minimum}, got {value!r}")


def _lookup(pairs, n):
    starts = [start for start, _ in pairs]
    return pairs[bisect.bisect_right(starts, n) - 1][1]


def _merge_schedules(gamma_schedule, batch_schedule, N, diminishing):
    if not gamma_schedule:
        raise EmptySchedule("gamma_schedule has no entries")
    if not batch_schedule:
        raise EmptySchedule("batch_schedule has no entries")

    for label, schedule in (('gamma_schedule', gamma_schedule), ('batch_schedule', batch_schedule)):
        starts = [int(start) for start, _ in schedule]
        if starts[0] != 1:
            raise ScheduleCoverage(f"{label} must start at round 1, starts at {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScheduleCoverage(f"{label} start rounds must be strictly increasing, got {starts}")
        if starts[-1] > N:
            raise ScheduleCoverage(f"{label} has an entry starting at round {starts[-1]} beyond N={N}")

    for start, gamma in gamma_schedule:
        if not gamma > 0 or not math.isfinite(gamma):
            raise InvalidHyperParameter(f"step size must be > 0, got {gamma!r} at round {start}")
    for start, batch in batch_schedule:
        if isinstance(batch, bool) or int(batch) != batch or batch < 1:
            raise InvalidHyperParameter(f"batch size must be an integer >= 1, got {batch!r} at round {start}")

    change_points = sorted({s for s, _ in gamma_schedule} | {s for s, _ in batch_schedule})
    entries = tuple((n, _lookup(gamma_schedule, n), int(_lookup(batch_schedule, n))) for n in change_points)

    if diminishing:
        steps = [gamma for _, gamma, _ in entries]
        if any(b > a for a, b in zip(steps, steps[1:])):
            raise InvalidHyperParameter(f"diminishing mode needs a non-increasing step size, got {steps}")
    return Schedule(entries)


def make_contiguous_topology(P, S):
    """
    Assign worker j to group floor(j / S).

    Args:
        P (int): Number of workers.
        S (int): Group size.

    Returns:
        GroupTopology: Contiguous blocks of S workers.

    Raises:
        NonDividingGroupSize: If S does not divide P or S is outside 1..P.
    """
    if S < 1 or S > P or P % S != 0:
        raise NonDividingGroupSize(f"S={S} must divide P={P} with 1 <= S <= P")
    assignment = tuple(j // S for j in range(P))
    return GroupTopology(assignment=assignment, S=S, n_groups=P // S)


def validate(raw):
    """
    Check a configuration and derive beta, the merged schedule and the topology.

    Validating an already validated configuration returns an equal object.

    Args:
        raw (HyperParams): Configuration to check.

    Returns:
        ValidatedParams: The configuration with derived quantities attached.

    Raises:
        NonDividingGroupSize: If S does not divide P.
        IntervalOrder: If K1 > K2.
        NonIntegerBeta: If strict mode is on and K1 does not divide K2.
        EmptySchedule: If a schedule is empty.
        ScheduleCoverage: If a schedule does not cover rounds 1..N.
        InvalidHyperParameter: For out-of-range scalars.
    """
    base = {f.name: getattr(raw, f.name) for f in fields(HyperParams)}
    base['gamma_schedule'] = tuple((int(s), float(g)) for s, g in base['gamma_schedule'])
    base['batch_schedule'] = tuple((int(s), b) for s, b in base['batch_schedule'])

    for name in ('P', 'S', 'K1', 'K2', 'N', 'd'):
        _check_positive_int(name, base[name])
    _check_positive_int('seed', base['seed'], minimum=0)

    topology = make_contiguous_topology(base['P'], base['S'])
    if base['K1'] > base['K2']:
        raise IntervalOrder(f"K1={base['K1']} must not exceed K2={base['K2']}")
    if base['K2'] % base['K1'] != 0:
        if base['strict']:
            raise NonIntegerBeta(f"K1={base['K1']} does not divide K2={base['K2']} in strict mode")
        warnings.warn(f"K1={base['K1']} does not divide K2={base['K2']}; the last local segment "
                      f"of each round is truncated to {base['K2'] % base['K1']} steps")

    schedule = _merge_schedules(base['gamma_schedule'], base['batch_schedule'], base['N'], base['diminishing'])
    base['batch_schedule'] = tuple((s, int(b)) for s, b in base['batch_schedule'])
    beta = -(-base['K2'] // base['K1'])
    return ValidatedParams(**base, beta=beta, schedule=schedule, topology=topology)


def with_overrides(params, **changes):
    """Return ``params`` with fields replaced and validated again."""
    raw = HyperParams(**{f.name: getattr(params, f.name) for f in fields(HyperParams)})
    return validate(replace(raw, **changes))


def theorem1_schedule(T, P, B):
    """
    Constant step size and global interval that balance the fixed-step rate bound.

    gamma = sqrt(PB/T) and K2 = T^(1/4) / (PB)^(3/4). The real-valued interval is
    returned next to its rounding so callers can see the discretization error.

    Args:
        T (int): Total number of SGD steps.
        P (int): Number of workers.
        B (int): Batch size.

    Returns:
        tuple: ``(gamma, K2_raw, K2_rounded)``.

    Raises:
        DegenerateHorizon: If T < P*B.
    """
    if T < P * B:
        raise DegenerateHorizon(f"T={T} must be at least P*B={P * B}")
    gamma = math.sqrt(P * B / T)
    k2_raw = T ** 0.25 / (P * B) ** 0.75
    k2_rounded = max(1, int(round(k2_raw)))
    return gamma, k2_raw, k2_rounded
