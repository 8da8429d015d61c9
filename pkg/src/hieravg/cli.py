import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

import pandas as pd

from hieravg import bounds, comms, metrics, simulator, transform
from hieravg.core import InvalidHyperParameter, with_overrides

logger = logging.getLogger(__name__)

OUT_DIR_ENV = 'HIERAVG_OUT_DIR'
DEFAULT_OUT_DIR = 'hieravg_out'
DEFAULT_MAX_RUNS = 10_000
SWEEP_AXES = ('K1', 'K2', 'S', 'P', 'gamma', 'B', 'seed')
SUMMARY_VALUES = ('final_loss', 'final_grad_norm_sq', 'theorem2_metric')


@dataclass(frozen=True)
class ExperimentPlan:
    """A base configuration, sweep axes and replicate count; replicates vary only the seed."""
    base_config: str
    axes: Dict[str, List] = field(default_factory=dict)
    replicates: int = 1
    output_dir: str = ''
    max_runs: int = DEFAULT_MAX_RUNS

    def __post_init__(self):
        unknown = set(self.axes) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"Unsupported sweep axes {sorted(unknown)}, expected a subset of {SWEEP_AXES}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.n_runs > self.max_runs:
            raise ValueError(f"plan expands to {self.n_runs} runs, above the cap of {self.max_runs}")

    @property
    def n_runs(self):
        count = self.replicates
        for values in self.axes.values():
            count *= len(values)
        return count

    def points(self):
        """Grid points as override dicts, in Cartesian-product order."""
        names = list(self.axes)
        return [dict(zip(names, values)) for values in itertools.product(*(self.axes[n] for n in names))]


def _point_overrides(point):
    overrides = {k: point[k] for k in ('K1', 'K2', 'S', 'P', 'seed') if k in point}
    if 'gamma' in point:
        overrides['gamma_schedule'] = ((1, float(point['gamma'])),)
    if 'B' in point:
        overrides['batch_schedule'] = ((1, int(point['B'])),)
    return overrides


def _clip_delta(params, delta_grad_w):
    return min(delta_grad_w, max(0.0, params.K2 * (params.K2 - 1) / 2 - 1))


def run_bounds(params, constants, delta_grad_w=0.0):
    """bounds.csv rows of a run: constant-step, fixed-step round and weighted round bounds."""
    inputs = bounds.BoundInputs.from_params(constants, params, delta_grad_w=_clip_delta(params, delta_grad_w))
    key = {'K1': params.K1, 'K2': params.K2, 'S': params.S}
    rows = [
        bounds.theorem1_bound(inputs).as_row(**key, theorem='step_fixed'),
        bounds.theorem2_bound(inputs).as_row(**key, theorem='round_fixed'),
        bounds.theorem3_bound(params.schedule.per_round(params.N), inputs).as_row(**key, theorem='round_weighted'),
    ]
    return pd.DataFrame(rows, columns=bounds.BOUND_COLUMNS)


def execute(cfg, params, out_dir, threads=1, metric_stride=None, delta_grad_w=None):
    """Run one validated configuration and write its CSV artifacts into ``out_dir``."""
    spec = transform.convert_objective(cfg)
    w0 = transform.convert_initial_point(cfg, params.d)
    options = cfg.get('metrics') or {}
    stride = metric_stride or options.get('stride', 1)
    if delta_grad_w is None:
        delta_grad_w = (cfg.get('bounds') or {}).get('delta_grad_w', 0.0)
    constants = transform.convert_constants(cfg, spec, w0)
    result = simulator.run_hier_avg(params, spec, w0, threads=threads, metric_stride=stride,
                                    record_drift=bool(options.get('drift', False)))
    bounds_df = run_bounds(params, constants, delta_grad_w)
    transform.write_run(result, out_dir, constants=constants, bounds_df=bounds_df)
    return result, bounds_df


def run_single(config_path, out_dir, seeds=None, threads=1, metric_stride=None,
               elide_redundant_local_avg=None, delta_grad_w=None):
    """
    Execute one configuration, once per seed, and write per_round/per_step/drift/bounds CSVs.

    Returns:
        int: Exit status, 0 on success.
    """
    cfg = transform.open_config(config_path)
    seeds = seeds or [None]
    for seed in seeds:
        params = transform.convert_hyperparams(cfg, seed=seed, elide_redundant_local_avg=elide_redundant_local_avg)
        target = out_dir if len(seeds) == 1 else os.path.join(out_dir, f'seed_{params.seed}')
        result, _ = execute(cfg, params, target, threads, metric_stride, delta_grad_w)
        logger.info("run seed=%d written to %s (final loss %g)", params.seed, target, result.final_loss)
    return 0


def open_plan(plan_path, out_dir=None):
    """Read a sweep plan; ``base_config`` is resolved relative to the plan file."""
    raw = transform.open_config(plan_path)
    base = raw['base_config']
    if not os.path.isabs(base):
        base = os.path.join(os.path.dirname(os.path.abspath(plan_path)), base)
    return ExperimentPlan(base_config=base, axes=raw.get('axes') or {}, replicates=int(raw.get('replicates', 1)),
                          output_dir=out_dir or raw.get('output_dir') or DEFAULT_OUT_DIR,
                          max_runs=int(raw.get('max_runs', DEFAULT_MAX_RUNS)))


def _sweep_task(cfg, index, point, seed, out_dir, threads, metric_stride, elide, delta_grad_w):
    row = {'point': index, 'seed': seed, **{f'axis_{k}': v for k, v in point.items()}}
    target = os.path.join(out_dir, f'point_{index:04d}', f'seed_{seed}')
    try:
        overrides = _point_overrides(point)
        overrides['seed'] = seed
        params = transform.convert_hyperparams(cfg, elide_redundant_local_avg=elide, **overrides)
        result, bounds_df = execute(cfg, params, target, threads, metric_stride, delta_grad_w)
    except (ValueError, OSError) as e:
        logger.warning("point %d seed %d failed: %s: %s", index, seed, type(e).__name__, e)
        row.update({'status': 'failed', 'error': f'{type(e).__name__}: {e}'})
        return row
    row.update({'status': 'ok', 'error': '', 'P': params.P, 'S': params.S, 'K1': params.K1, 'K2': params.K2,
                'N': params.N})
    row.update(metrics.run_summary(result).iloc[0].to_dict())
    fixed = bounds_df[bounds_df['theorem'] == 'round_fixed'].iloc[0]
    row.update({'bound_value': fixed['bound_value'], 'bound_condition_ok': fixed['condition_ok']})
    logger.info("point %d seed %d done", index, seed)
    return row


def run_sweep(plan_path, out_dir=None, seeds=None, threads=1, jobs=1, metric_stride=None,
              elide_redundant_local_avg=None, delta_grad_w=None):
    """
    Run every grid point of a plan for every replicate seed.

    Failed runs do not stop the sweep; they are listed in summary.csv and make
    the exit status nonzero.

    Returns:
        int: Exit status, 0 iff every run completed.
    """
    plan = open_plan(plan_path, out_dir)
    cfg = transform.open_config(plan.base_config)
    base_seed = int(cfg['hyperparams'].get('seed', 0))
    points = plan.points()
    tasks = []
    for index, point in enumerate(points):
        if 'seed' in point:
            point_seeds = [int(point['seed']) + r for r in range(plan.replicates)]
        else:
            point_seeds = seeds or [base_seed + r for r in range(plan.replicates)]
        tasks.extend((index, point, seed) for seed in point_seeds)
    logger.info("sweep: %d points, %d runs", len(points), len(tasks))

    def task(args):
        index, point, seed = args
        return _sweep_task(cfg, index, point, seed, plan.output_dir, threads, metric_stride,
                           elide_redundant_local_avg, delta_grad_w)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        rows = list(executor.map(task, tasks))

    os.makedirs(plan.output_dir, exist_ok=True)
    summary = pd.DataFrame(rows)
    transform.write_csv(summary, os.path.join(plan.output_dir, 'summary.csv'))
    completed = summary[summary['status'] == 'ok']
    if len(completed):
        stats = metrics.replicate_summary(completed, value_cols=SUMMARY_VALUES)
        transform.write_csv(stats, os.path.join(plan.output_dir, 'summary_stats.csv'))
    failures = len(summary) - len(completed)
    if failures:
        print(f"{failures} of {len(summary)} runs failed, see summary.csv", file=sys.stderr)
        return 1
    return 0


def bounds_command(config_path, out_dir, delta_grad_w=None):
    """
    Tabulate the fixed-step round bound over the configured grids, plus the K2 advisor curve.

    Rows whose conditions fail are flagged, not dropped.
    """
    cfg = transform.open_config(config_path)
    params = transform.convert_hyperparams(cfg)
    spec = transform.convert_objective(cfg)
    w0 = transform.convert_initial_point(cfg, params.d)
    constants = transform.convert_constants(cfg, spec, w0)
    options = cfg.get('bounds') or {}
    if delta_grad_w is None:
        delta_grad_w = options.get('delta_grad_w', 0.0)
    inputs = bounds.BoundInputs.from_params(constants, params, delta_grad_w=_clip_delta(params, delta_grad_w))
    table = bounds.bounds_table(inputs, options.get('K1_grid'), options.get('K2_grid'), options.get('S_grid'))
    advisor = bounds.k2_advisor(inputs, K2_max=int(options.get('K2_max', bounds.DEFAULT_K2_MAX)))

    os.makedirs(out_dir, exist_ok=True)
    transform.write_csv(table, os.path.join(out_dir, 'bounds.csv'))
    transform.write_csv(advisor.curve, os.path.join(out_dir, 'advisor.csv'))
    verdict = 'K2 > 1 recommended' if advisor.condition else 'no K2 > 1 guarantee'
    print(f"{len(table)} bound rows written; advisor: {verdict}, argmin K2 = {advisor.argmin}")
    return 0


def _kavg_schedule(pairs, K2, K):
    """Move schedule change points from rounds of K2 steps to K-AVG rounds of K steps."""
    rescaled = []
    for start, value in pairs:
        step = (start - 1) * K2
        if step % K:
            raise InvalidHyperParameter(f"schedule entry at round {start} begins at step {step}, "
                                        f"inside a K-AVG round of {K} steps")
        rescaled.append((step // K + 1, value))
    return tuple(rescaled)


def compare_kavg_command(config_path, out_dir, elide_redundant_local_avg=None, delta_grad_w=None):
    """Compare the configured hierarchical run with K-AVG at the ``kavg.K`` interval over the same steps."""
    cfg = transform.open_config(config_path)
    params = transform.convert_hyperparams(cfg, elide_redundant_local_avg=elide_redundant_local_avg)
    K = int(cfg['kavg']['K'])
    params_kavg = with_overrides(params, S=1, K1=K, K2=K, N=max(1, params.T // K), elide_redundant_local_avg=False,
                                 gamma_schedule=_kavg_schedule(params.gamma_schedule, params.K2, K),
                                 batch_schedule=_kavg_schedule(params.batch_schedule, params.K2, K))
    spec = transform.convert_objective(cfg)
    w0 = transform.convert_initial_point(cfg, params.d)
    constants = transform.convert_constants(cfg, spec, w0)
    if delta_grad_w is None:
        delta_grad_w = (cfg.get('bounds') or {}).get('delta_grad_w', 0.0)
    report = comms.comm_tradeoff_report(params, params_kavg, transform.convert_cost_model(cfg),
                                        constants=constants, delta_grad_w=_clip_delta(params_kavg, delta_grad_w))
    os.makedirs(out_dir, exist_ok=True)
    transform.write_csv(report.to_frame(), os.path.join(out_dir, 'tradeoff.csv'))
    print(report.summary())
    return 0


def _seed_list(text):
    return [int(s) for s in text.split(',') if s.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog='hieravg', description='Hierarchical averaging SGD simulator and bounds')
    parser.add_argument('--log-level', default='WARNING', help='logging level (default: WARNING)')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', required=True, help='JSON config (sweep: plan) file')
        p.add_argument('--out', default=None, help=f'output directory (default: ${OUT_DIR_ENV} or {DEFAULT_OUT_DIR})')
        p.add_argument('--elide-redundant-local-avg', action='store_true', default=None,
                       help='skip the local average that directly precedes each global average')
        p.add_argument('--delta-grad-w', type=float, default=None, help='intermediate-gradient bound constant')

    run = sub.add_parser('run', help='execute one configuration')
    sweep = sub.add_parser('sweep', help='execute a parameter sweep plan')
    for p in (run, sweep):
        common(p)
        p.add_argument('--seeds', type=_seed_list, default=None, help='comma-separated seeds')
        p.add_argument('--threads', type=int, default=1, help='worker threads per run')
        p.add_argument('--metric-stride', type=int, default=None, help='record the per-step metric every n steps')
    sweep.add_argument('--jobs', type=int, default=1, help='grid runs executed concurrently')
    common(sub.add_parser('bounds', help='tabulate convergence bounds'))
    common(sub.add_parser('compare-kavg', help='compare communication and bounds with K-AVG'))
    return parser


def main(argv=None):
    """Command-line entry point; returns the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    out_dir = args.out or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR
    try:
        if args.command == 'run':
            return run_single(args.config, out_dir, args.seeds, args.threads, args.metric_stride,
                              args.elide_redundant_local_avg, args.delta_grad_w)
        if args.command == 'sweep':
            return run_sweep(args.config, args.out or os.environ.get(OUT_DIR_ENV), args.seeds, args.threads,
                             args.jobs, args.metric_stride, args.elide_redundant_local_avg, args.delta_grad_w)
        if args.command == 'bounds':
            return bounds_command(args.config, out_dir, args.delta_grad_w)
        return compare_kavg_command(args.config, out_dir, args.elide_redundant_local_avg, args.delta_grad_w)
    except (ValueError, OSError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except KeyError as e:
        print(f"MissingConfigKey: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
