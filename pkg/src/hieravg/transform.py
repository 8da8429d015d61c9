import json
import logging
import os

import numpy as np

from hieravg import metrics, objectives
from hieravg.comms import CostModel
from hieravg.core import HyperParams, InvalidHyperParameter, validate
from hieravg.objectives import ObjectiveConstants, ObjectiveSpec

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def open_config(filepath):
    """
    Read a JSON configuration document.

    Args:
        filepath (str): The path to the file.

    Returns:
        dict: The parsed document.

    Raises:
        ValueError: If the file is not valid JSON or not an object.
    """
    with open(filepath) as handle:
        try:
            cfg = json.load(handle)
        except json.JSONDecodeError as e:
            raise ValueError(f"{filepath} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError(f"{filepath} must contain a JSON object at the top level")
    return cfg


def _pairs(value):
    return tuple((int(start), item) for start, item in value)


def convert_hyperparams(cfg, **overrides):
    """
    Build validated hyperparameters from the ``hyperparams`` section.

    Keyword overrides replace file values; ``None`` overrides are ignored.

    Returns:
        ValidatedParams: The validated configuration.
    """
    section = dict(cfg['hyperparams'])
    section.update({k: v for k, v in overrides.items() if v is not None})
    if 'gamma_schedule' in section:
        section['gamma_schedule'] = _pairs(section['gamma_schedule'])
    if 'batch_schedule' in section:
        section['batch_schedule'] = _pairs(section['batch_schedule'])
    try:
        raw = HyperParams(**section)
    except TypeError as e:
        raise InvalidHyperParameter(f"hyperparams section: {e}") from e
    return validate(raw)


def convert_objective(cfg):
    """Build the ObjectiveSpec of the ``objective`` section; list fields become tuples."""
    section = dict(cfg['objective'])
    for key in ('spectrum', 'w_star'):
        if section.get(key) is not None:
            section[key] = tuple(float(v) for v in section[key])
    try:
        return ObjectiveSpec(**section)
    except TypeError as e:
        raise objectives.InvalidObjective(f"objective section: {e}") from e


def convert_initial_point(cfg, d):
    """
    The initial parameters of the ``w0`` entry.

    A scalar is an offset added to the objective's minimizer (or the origin); a
    list is taken as the point itself. Defaults to an offset of 1.
    """
    value = cfg.get('w0', 1.0)
    if isinstance(value, (list, tuple)):
        return np.asarray(value, dtype=np.float64)
    spec = cfg.get('objective', {})
    center = np.zeros(d) if spec.get('w_star') is None else np.asarray(spec['w_star'], dtype=np.float64)
    return center + float(value)


def convert_constants(cfg, spec, w0):
    """
    Objective constants: computed from ``spec`` and overridden by the ``constants`` section.
    """
    section = cfg.get('constants') or {}
    keys = ('L', 'M', 'M_G', 'F_star', 'F1_minus_Fstar')
    if all(k in section for k in keys):
        return ObjectiveConstants(**{k: float(section[k]) for k in keys},
                                  estimated=bool(section.get('estimated', False)))
    computed = objectives.constants(spec, w0=w0)
    values = {k: getattr(computed, k) for k in keys}
    values.update({k: float(v) for k, v in section.items() if k in keys})
    return ObjectiveConstants(**values, estimated=computed.estimated)


def convert_cost_model(cfg):
    """The CostModel of the ``cost_model`` section, falling back to the documented defaults."""
    return CostModel(**(cfg.get('cost_model') or {}))


def write_csv(df, filepath):
    """Write a DataFrame without index, floats with 17 significant digits."""
    df.to_csv(filepath, index=False, float_format=FLOAT_FORMAT)
    logger.debug("wrote %s (%d rows)", filepath, len(df))


def write_run(result, out_dir, constants=None, bounds_df=None):
    """
    Write the CSV artifacts of one run into ``out_dir``.

    Files: per_round.csv, per_step.csv, drift.csv (when recorded, needs
    ``constants``) and bounds.csv (when ``bounds_df`` is given).

    Returns:
        list of str: The written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    tables = [('per_round.csv', metrics.per_round_frame(result)),
              ('per_step.csv', metrics.per_step_frame(result))]
    if result.metrics.drift is not None and constants is not None:
        tables.append(('drift.csv', metrics.drift_frame(result, constants)))
    if bounds_df is not None:
        tables.append(('bounds.csv', bounds_df))
    for name, df in tables:
        path = os.path.join(out_dir, name)
        write_csv(df, path)
        written.append(path)
    return written
