import warnings

import numpy as np
import pandas as pd
from scipy import stats

from hieravg import simulator

PER_ROUND_COLUMNS = ['round', 'grad_norm_sq', 'loss', 'n_local_reductions', 'n_global_reductions']
PER_STEP_COLUMNS = ['step', 'grad_norm_sq']
DRIFT_COLUMNS = ['eta', 't', 'measured', 'bound']


def per_round_frame(result):
    """
    Per-round table of a run.

    Args:
        result (RunResult): A finished run.

    Returns:
        pandas.DataFrame: One row per round, columns ``PER_ROUND_COLUMNS``.
    """
    m = result.metrics
    return pd.DataFrame({
        'round': np.arange(1, len(m.per_round_grad_norm_sq) + 1),
        'grad_norm_sq': m.per_round_grad_norm_sq,
        'loss': m.per_round_loss,
        'n_local_reductions': m.per_round_local_reductions,
        'n_global_reductions': m.per_round_global_reductions,
    }, columns=PER_ROUND_COLUMNS)


def per_step_frame(result):
    """
    Per-step table of the all-worker mean's squared gradient norm.

    Args:
        result (RunResult): A finished run.

    Returns:
        pandas.DataFrame: One row per recorded step, columns ``PER_STEP_COLUMNS``.
    """
    m = result.metrics
    return pd.DataFrame({'step': m.per_step_index, 'grad_norm_sq': m.per_step_grad_norm_sq},
                        columns=PER_STEP_COLUMNS)


def drift_frame(results, constants):
    """Drift table (eta, t, measured, bound) averaged over the given runs."""
    return simulator.drift_diagnostic(results, constants)[DRIFT_COLUMNS]


def theorem1_metric(result):
    """
    (1/T) sum_t ||grad F(w_bar_t)||^2 over the recorded steps.

    Warns when the per-step series was subsampled, since the mean then only
    approximates the full sum.
    """
    m = result.metrics
    if len(m.per_step_grad_norm_sq) != result.T:
        warnings.warn(f"per-step series has {len(m.per_step_grad_norm_sq)} of {result.T} steps")
    return float(np.mean(m.per_step_grad_norm_sq))


def theorem2_metric(result):
    """(1/N) sum_n ||grad F(w_tilde_n)||^2."""
    return float(np.mean(result.metrics.per_round_grad_norm_sq))


def run_summary(result):
    """
    Final-round metrics and ledger counts of one run.

    Args:
        result (RunResult): A finished run.

    Returns:
        pandas.DataFrame: A single-row DataFrame.
    """
    results = {
        'T': result.T,
        'final_loss': result.final_loss,
        'final_grad_norm_sq': result.final_grad_norm_sq,
        'theorem2_metric': theorem2_metric(result),
        'n_local_reductions': result.ledger.n_local,
        'n_global_reductions': result.ledger.n_global,
    }
    if len(result.metrics.per_step_grad_norm_sq):
        results['theorem1_metric'] = float(np.mean(result.metrics.per_step_grad_norm_sq))
    return pd.DataFrame([results])


def replicate_summary(df, value_cols=('final_loss',), group_col='point'):
    """
    Mean and standard error of replicate values.

    Args:
        df (pandas.DataFrame): One row per run.
        value_cols (sequence of str, optional): Columns to summarise. Defaults to ('final_loss',).
        group_col (str, optional): Column identifying the grid point. Defaults to 'point'.

    Returns:
        pandas.DataFrame: ``<col>_mean``, ``<col>_sem`` and ``n_replicates``, one row
        per grid point when ``group_col`` is present.
    """
    def run(group):
        results = {'n_replicates': len(group)}
        for col in value_cols:
            values = group[col].astype(float)
            results[f'{col}_mean'] = values.mean()
            results[f'{col}_sem'] = stats.sem(values) if len(values) > 1 else np.nan
        return pd.Series(results)

    if group_col in df.columns:
        results = df.groupby(group_col).apply(run, include_groups=False).reset_index()
    else:
        results = pd.DataFrame([run(df)])
    return results


def trend_test(lower, higher, paired=True):
    """
    One-sided test that ``lower`` has a smaller mean than ``higher``.

    Paired (matched seeds) samples use a paired t-test, otherwise Welch's test.

    Args:
        lower (array-like): Values expected to be smaller.
        higher (array-like): Values expected to be larger.
        paired (bool, optional): Whether entries are matched by seed. Defaults to True.

    Returns:
        pandas.DataFrame: A single row with both means, the statistic and the p-value.
    """
    lower = np.asarray(lower, dtype=np.float64)
    higher = np.asarray(higher, dtype=np.float64)
    if paired:
        test = stats.ttest_rel(lower, higher, alternative='less')
    else:
        test = stats.ttest_ind(lower, higher, equal_var=False, alternative='less')
    return pd.DataFrame([{'mean_lower': lower.mean(), 'mean_higher': higher.mean(),
                          'statistic': float(test.statistic), 'pvalue': float(test.pvalue)}])
