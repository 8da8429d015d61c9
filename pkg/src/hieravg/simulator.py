import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from hieravg import objectives
from hieravg.comms import CommLedger
from hieravg.core import InvalidHyperParameter
from hieravg.objectives import DimensionMismatch

logger = logging.getLogger(__name__)


class EmptyGroup(ValueError):
    """An averaging operation received no workers."""


class MissingDriftSeries(ValueError):
    """A run was executed without drift recording."""


@dataclass(frozen=True, eq=False)
class WorkerState:
    """One worker: its index, parameters, and sampling cursor (seed, steps taken)."""
    j: int
    w: np.ndarray
    steps_taken: int = 0
    seed: int = 0


@dataclass
class TrajectoryMetrics:
    """
    Gradient-norm and loss series of one run.

    ``per_step_grad_norm_sq[i]`` is ``||grad F(w_bar_t)||^2`` at step
    ``per_step_index[i]``, where w_bar_t is the all-worker mean before step t.
    ``per_round_*[n-1]`` belong to the synchronized point of round n.
    Drift arrays have shape (N, K2) and are indexed by in-round step offset.
    """
    per_step_index: np.ndarray
    per_step_grad_norm_sq: np.ndarray
    per_round_grad_norm_sq: np.ndarray
    per_round_loss: np.ndarray
    per_round_local_reductions: np.ndarray
    per_round_global_reductions: np.ndarray
    drift: Optional[np.ndarray] = None
    drift_max: Optional[np.ndarray] = None
    worker_grad_norm_sq: Optional[np.ndarray] = None


@dataclass
class RunResult:
    """Outcome of one run: the final synchronized parameters, metrics and reduction ledger."""
    w_final: np.ndarray
    metrics: TrajectoryMetrics
    ledger: CommLedger
    T: int
    final_loss: float
    final_grad_norm_sq: float
    params: object = field(default=None, repr=False)


def canonical_mean(vectors):
    """Arithmetic mean, summed sequentially in the given order and divided once."""
    total = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        total = total + v
    return total / len(vectors)


def _sgd_step(spec, w, seed, j, t, gamma, B):
    gsum = objectives.minibatch_gradient_sum(spec, w, seed, j, t, B)
    return w - (gamma / B) * gsum


def _segment(worker, spec, gamma, B, steps, clock):
    w = worker.w
    trace = []
    for i in range(steps):
        trace.append(w)
        w = _sgd_step(spec, w, worker.seed, worker.j, clock + i, gamma, B)
    return replace(worker, w=w, steps_taken=worker.steps_taken + steps), trace


def local_sgd_segment(worker, spec, gamma, B, steps, clock):
    """
    Run ``steps`` consecutive mini-batch SGD steps on one worker.

    Step i uses the samples keyed by (seed, j, clock + i); all B gradients of a
    step are evaluated at the pre-step parameters.

    Args:
        worker (WorkerState): The worker.
        spec (ObjectiveSpec): The objective.
        gamma (float): Step size.
        B (int): Batch size.
        steps (int): Number of SGD steps, at least 1.
        clock (int): Global index of the first step.

    Returns:
        WorkerState: The advanced worker.

    Raises:
        DimensionMismatch: If the worker's parameters do not match ``spec.d``.
    """
    if steps < 1:
        raise InvalidHyperParameter(f"steps must be >= 1, got {steps}")
    return _segment(worker, spec, gamma, B, steps, clock)[0]


def local_average(group):
    """
    Replace every member's parameters by the group mean.

    The mean is summed in ascending worker index.

    Args:
        group (list of WorkerState): Members of one local group.

    Returns:
        list of WorkerState: The synchronized members, in ascending index order.

    Raises:
        EmptyGroup: If ``group`` is empty.
        DimensionMismatch: If members have different dimensions.
    """
    if not group:
        raise EmptyGroup("local_average needs at least one worker")
    ordered = sorted(group, key=lambda worker: worker.j)
    if len({worker.w.shape for worker in ordered}) != 1:
        raise DimensionMismatch("group members have different parameter dimensions")
    mean = canonical_mean([worker.w for worker in ordered])
    return [replace(worker, w=mean.copy()) for worker in ordered]


def global_average(workers):
    """
    Average all workers in ascending index order and synchronize them.

    Args:
        workers (list of WorkerState): All P workers.

    Returns:
        tuple: ``(w_tilde, workers)`` with every worker set to ``w_tilde``.
    """
    if not workers:
        raise EmptyGroup("global_average needs at least one worker")
    ordered = sorted(workers, key=lambda worker: worker.j)
    w_tilde = canonical_mean([worker.w for worker in ordered])
    return w_tilde, [replace(worker, w=w_tilde.copy()) for worker in ordered]


class _MetricsCollector:
    """Observes the worker snapshots at every step barrier; never feeds back into the dynamics."""

    def __init__(self, params, spec, stride=1, record_drift=False):
        self.params = params
        self.spec = spec
        self.stride = max(1, int(stride))
        self.record_drift = record_drift
        self.step_index = []
        self.step_values = []
        self.round_grad = []
        self.round_loss = []
        self.round_local = []
        self.round_global = []
        shape = (params.N, params.K2)
        self.drift = np.zeros(shape) if record_drift else None
        self.drift_max = np.zeros(shape) if record_drift else None
        self.worker_grad = np.zeros(shape) if record_drift else None
        self.w_tilde = None
        self.round = 0

    def start_round(self, n, w_tilde):
        self.round = n
        self.w_tilde = w_tilde
        grad = objectives.full_gradient(self.spec, w_tilde)
        self.round_grad.append(float(grad @ grad))
        self.round_loss.append(objectives.loss(self.spec, w_tilde))

    def end_round(self, n_local, n_global):
        self.round_local.append(n_local)
        self.round_global.append(n_global)

    def observe(self, t, offset, snapshot):
        if t % self.stride == 0:
            # workers are synchronized at offset 0
            w_bar = self.w_tilde if offset == 0 else canonical_mean(snapshot)
            grad = objectives.full_gradient(self.spec, w_bar)
            self.step_index.append(t)
            self.step_values.append(float(grad @ grad))
        if self.record_drift:
            n = self.round - 1
            gaps = [float((w - self.w_tilde) @ (w - self.w_tilde)) for w in snapshot]
            norms = []
            for w in snapshot:
                grad = objectives.full_gradient(self.spec, w)
                norms.append(float(grad @ grad))
            self.drift[n, offset] = sum(gaps) / len(gaps)
            self.drift_max[n, offset] = max(gaps)
            self.worker_grad[n, offset] = sum(norms) / len(norms)

    def finish(self):
        return TrajectoryMetrics(
            per_step_index=np.asarray(self.step_index, dtype=np.int64),
            per_step_grad_norm_sq=np.asarray(self.step_values, dtype=np.float64),
            per_round_grad_norm_sq=np.asarray(self.round_grad, dtype=np.float64),
            per_round_loss=np.asarray(self.round_loss, dtype=np.float64),
            per_round_local_reductions=np.asarray(self.round_local, dtype=np.int64),
            per_round_global_reductions=np.asarray(self.round_global, dtype=np.int64),
            drift=self.drift,
            drift_max=self.drift_max,
            worker_grad_norm_sq=self.worker_grad,
        )


def _initial_point(params, spec, w0):
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (params.d,) or spec.d != params.d:
        raise DimensionMismatch(f"w0 has shape {w0.shape}, objective d={spec.d}, params d={params.d}")
    return w0


def _finish(params, spec, w_tilde, collector, n_local, n_global):
    grad = objectives.full_gradient(spec, w_tilde)
    ledger = CommLedger(n_local=n_local, n_global=n_global, d=params.d, P=params.P, S=params.S)
    return RunResult(w_final=w_tilde, metrics=collector.finish(), ledger=ledger, T=params.N * params.K2,
                     final_loss=objectives.loss(spec, w_tilde), final_grad_norm_sq=float(grad @ grad),
                     params=params)


def _local_reductions_per_round(params):
    return params.beta - 1 if params.elide_redundant_local_avg else params.beta


def run_hier_avg(params, spec, w0, threads=1, metric_stride=1, record_drift=False):
    """
    Execute hierarchical averaging SGD.

    Each of the N rounds runs beta blocks of (local SGD segment, local average)
    followed by one global average. Workers of a segment may run on parallel
    threads; the output is bitwise identical to :func:`sequential_oracle`.

    The last local average of a round is executed and counted unless
    ``params.elide_redundant_local_avg`` is set. The global mean is taken over the
    segment-end parameters; with equal group sizes it equals the mean of the
    group means.

    Args:
        params (ValidatedParams): Validated configuration.
        spec (ObjectiveSpec): The objective.
        w0 (array-like): Initial parameters.
        threads (int, optional): Worker threads per segment. Defaults to 1.
        metric_stride (int, optional): Record the per-step metric every this many steps. Defaults to 1.
        record_drift (bool, optional): Record the per-offset drift series. Defaults to False.

    Returns:
        RunResult: Final parameters, metrics and reduction ledger.
    """
    w_tilde = _initial_point(params, spec, w0)
    groups = params.topology.groups()
    workers = [WorkerState(j=j, w=w_tilde.copy(), seed=params.seed) for j in range(params.P)]
    collector = _MetricsCollector(params, spec, metric_stride, record_drift)
    n_local = n_global = 0
    logger.info("hier-avg run: P=%d S=%d K1=%d K2=%d N=%d threads=%d",
                params.P, params.S, params.K1, params.K2, params.N, threads)

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for n in range(1, params.N + 1):
            gamma, B = params.schedule.at(n)
            collector.start_round(n, w_tilde)
            round_local = 0
            offset = 0
            clock = (n - 1) * params.K2
            segments = params.segment_lengths
            for b, steps in enumerate(segments):
                def advance(worker, steps=steps, clock=clock + offset):
                    return _segment(worker, spec, gamma, B, steps, clock)

                outcomes = list(executor.map(advance, workers)) if executor else [advance(w) for w in workers]
                workers = [state for state, _ in outcomes]
                for i in range(steps):
                    collector.observe(clock + offset + i, offset + i, [trace[i] for _, trace in outcomes])
                offset += steps

                segment_end = workers
                last = b == len(segments) - 1
                if not (last and params.elide_redundant_local_avg):
                    synced = []
                    for members in groups:
                        synced.extend(local_average([workers[j] for j in members]))
                    workers = sorted(synced, key=lambda worker: worker.j)
                    round_local += 1
                if last:
                    # the local average above is counted, the global mean reads segment_end;
                    # equal group sizes make the two means equal
                    w_tilde, workers = global_average(segment_end)
            n_local += round_local
            n_global += 1
            collector.end_round(round_local, 1)
            logger.debug("round %d/%d done, |grad|^2=%g", n, params.N, collector.round_grad[-1])
    finally:
        if executor:
            executor.shutdown()

    result = _finish(params, spec, w_tilde, collector, n_local, n_global)
    logger.info("hier-avg run done: final loss %g", result.final_loss)
    return result


def sequential_oracle(params, spec, w0, metric_stride=1, record_drift=False):
    """
    Single-threaded reference of :func:`run_hier_avg`.

    Steps are executed step-major: at each global step every worker advances
    once, in ascending index order. Averages happen at the same step counts and
    in the same canonical order as the parallel engine.
    """
    w_tilde = _initial_point(params, spec, w0)
    groups = params.topology.groups()
    ws = [w_tilde.copy() for _ in range(params.P)]
    collector = _MetricsCollector(params, spec, metric_stride, record_drift)
    n_local = n_global = 0
    boundaries = np.cumsum(params.segment_lengths)
    per_round = _local_reductions_per_round(params)

    for n in range(1, params.N + 1):
        gamma, B = params.schedule.at(n)
        collector.start_round(n, w_tilde)
        for offset in range(params.K2):
            t = (n - 1) * params.K2 + offset
            collector.observe(t, offset, list(ws))
            for j in range(params.P):
                ws[j] = _sgd_step(spec, ws[j], params.seed, j, t, gamma, B)
            if offset + 1 in boundaries and offset + 1 < params.K2:
                for members in groups:
                    mean = canonical_mean([ws[j] for j in members])
                    for j in members:
                        ws[j] = mean.copy()
        w_tilde = canonical_mean(ws)
        ws = [w_tilde.copy() for _ in range(params.P)]
        n_local += per_round
        n_global += 1
        collector.end_round(per_round, 1)

    return _finish(params, spec, w_tilde, collector, n_local, n_global)


def kavg_reference(params, spec, w0, K=None):
    """
    Plain K-step averaging SGD: every worker runs K steps, then all are averaged.

    Only per-round metrics are recorded. Uses the sample keys of the
    hierarchical engine so trajectories can be compared bitwise.
    """
    K = params.K2 if K is None else K
    w_tilde = _initial_point(params, spec, w0)
    collector = _MetricsCollector(replace(params, K2=K), spec)
    for n in range(1, params.N + 1):
        gamma, B = params.schedule.at(n)
        collector.start_round(n, w_tilde)
        ends = []
        for j in range(params.P):
            w = w_tilde
            for k in range(K):
                gsum = objectives.minibatch_gradient_sum(spec, w, params.seed, j, (n - 1) * K + k, B)
                w = w - (gamma / B) * gsum
            ends.append(w)
        w_tilde = canonical_mean(ends)
        collector.end_round(0, 1)
    grad = objectives.full_gradient(spec, w_tilde)
    ledger = CommLedger(n_local=0, n_global=params.N, d=params.d, P=params.P, S=1)
    return RunResult(w_final=w_tilde, metrics=collector.finish(), ledger=ledger, T=params.N * K,
                     final_loss=objectives.loss(spec, w_tilde), final_grad_norm_sq=float(grad @ grad),
                     params=params)


def minibatch_sgd_reference(params, spec, w0):
    """
    Synchronous parallel mini-batch SGD with effective batch P*B.

    Each step averages the P per-shard updates of the shared parameters.
    Returns the final parameters.
    """
    w = _initial_point(params, spec, w0)
    for t in range(params.N * params.K2):
        gamma, B = params.schedule.at(t // params.K2 + 1)
        updates = []
        for j in range(params.P):
            gsum = objectives.minibatch_gradient_sum(spec, w, params.seed, j, t, B)
            updates.append(w - (gamma / B) * gsum)
        w = canonical_mean(updates)
    return w


def drift_diagnostic(results, constants):
    """
    Compare measured parameter drift with its per-offset upper bound.

    For in-round offset o = K1*eta + t the bound is
    (gamma^2 M / B) * o * (t + K1*eta / S) + gamma^2 * o * sum_{k<=o} g_k,
    where g_k is the measured mean squared worker gradient norm at offset k.
    Both sides are averaged over rounds and over all given runs.

    Args:
        results (RunResult or list of RunResult): Runs recorded with ``record_drift=True``.
        constants (ObjectiveConstants): Constants supplying M.

    Returns:
        pandas.DataFrame: Columns eta, t, measured, bound, violated.

    Raises:
        MissingDriftSeries: If any run lacks the drift series.
    """
    if isinstance(results, RunResult):
        results = [results]
    measured_sum = None
    bound_sum = None
    count = 0
    for result in results:
        metrics = result.metrics
        if metrics.drift is None or metrics.worker_grad_norm_sq is None:
            raise MissingDriftSeries("run was executed without record_drift=True")
        params = result.params
        K1, K2, S = params.K1, params.K2, params.S
        offsets = np.arange(K2)
        eta, t = np.divmod(offsets, K1)
        for n in range(params.N):
            gamma, B = params.schedule.at(n + 1)
            cumulative = np.cumsum(metrics.worker_grad_norm_sq[n])
            bound = (gamma ** 2 * constants.M / B) * offsets * (t + K1 * eta / S) + gamma ** 2 * offsets * cumulative
            measured_sum = metrics.drift[n].copy() if measured_sum is None else measured_sum + metrics.drift[n]
            bound_sum = bound if bound_sum is None else bound_sum + bound
            count += 1

    measured = measured_sum / count
    bound = bound_sum / count
    return pd.DataFrame({'eta': eta, 't': t, 'measured': measured, 'bound': bound,
                         'violated': measured > bound})
