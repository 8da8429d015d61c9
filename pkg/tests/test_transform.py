import json
import sys
import os
from unittest.mock import patch
import numpy as np
import pandas as pd
import pytest
# Append the directory containing the package to Python's path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))
from hieravg import core, objectives, simulator, transform
from hieravg.comms import CostModel

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'test_data')
RUN_CONFIG = os.path.join(DATA_DIR, 'run_config.json')
LOGISTIC_CONFIG = os.path.join(DATA_DIR, 'logistic_config.json')


def test_open_config():
    cfg = transform.open_config(RUN_CONFIG)
    assert cfg['hyperparams']['P'] == 4
    assert cfg['objective']['kind'] == 'NoisyQuadratic'


def test_open_config_errors(tmp_path):
    broken = tmp_path / 'broken.json'
    broken.write_text('{"hyperparams": ')
    with pytest.raises(ValueError):
        transform.open_config(str(broken))
    listing = tmp_path / 'list.json'
    listing.write_text('[1, 2]')
    with pytest.raises(ValueError):
        transform.open_config(str(listing))
    with pytest.raises(OSError):
        transform.open_config(str(tmp_path / 'missing.json'))


def test_convert_hyperparams():
    cfg = transform.open_config(RUN_CONFIG)
    params = transform.convert_hyperparams(cfg)
    assert isinstance(params, core.ValidatedParams)
    assert (params.P, params.S, params.K1, params.K2, params.N, params.d) == (4, 2, 2, 4, 5, 4)
    assert params.schedule.per_round(5) == [(0.05, 2)] * 3 + [(0.02, 2)] * 2
    assert params.seed == 3
    overridden = transform.convert_hyperparams(cfg, seed=9, elide_redundant_local_avg=None)
    assert overridden.seed == 9
    assert not overridden.elide_redundant_local_avg


def test_convert_hyperparams_errors():
    cfg = transform.open_config(RUN_CONFIG)
    with pytest.raises(core.NonDividingGroupSize):
        transform.convert_hyperparams(cfg, S=3)
    cfg['hyperparams']['momentum'] = 0.9
    with pytest.raises(core.InvalidHyperParameter):
        transform.convert_hyperparams(cfg)


def test_convert_objective():
    spec = transform.convert_objective(transform.open_config(RUN_CONFIG))
    assert spec == objectives.ObjectiveSpec(kind='NoisyQuadratic', d=4, sigma=0.2, spectrum=(1.0, 2.0, 3.0, 4.0))
    with pytest.raises(objectives.InvalidObjective):
        transform.convert_objective({'objective': {'kind': 'NoisyQuadratic', 'd': 2, 'radius': 1}})


def test_convert_initial_point():
    assert transform.convert_initial_point({}, 3).tolist() == [1.0, 1.0, 1.0]
    shifted = {'w0': 0.5, 'objective': {'w_star': [1.0, -1.0]}}
    assert transform.convert_initial_point(shifted, 2).tolist() == [1.5, -0.5]
    assert transform.convert_initial_point({'w0': [0.1, 0.2]}, 2).tolist() == [0.1, 0.2]


def test_convert_constants_computed_and_overridden():
    cfg = transform.open_config(RUN_CONFIG)
    spec = transform.convert_objective(cfg)
    w0 = transform.convert_initial_point(cfg, 4)
    computed = transform.convert_constants(cfg, spec, w0)
    assert computed.L == 4.0
    assert computed.M == pytest.approx(4 * 0.04)
    assert computed.F1_minus_Fstar == 5.0
    cfg['constants'] = {'L': 8.0}
    assert transform.convert_constants(cfg, spec, w0).L == 8.0


@patch('hieravg.objectives.constants')
def test_convert_constants_skips_estimation(mock_constants):
    cfg = transform.open_config(LOGISTIC_CONFIG)
    spec = transform.convert_objective(cfg)
    c = transform.convert_constants(cfg, spec, np.zeros(3))
    mock_constants.assert_not_called()
    assert (c.L, c.M, c.M_G, c.F_star, c.F1_minus_Fstar) == (1.0, 0.5, 1.0, 0.1, 0.6)
    assert not c.estimated


def test_convert_cost_model():
    assert transform.convert_cost_model({}) == CostModel.default()
    model = transform.convert_cost_model(transform.open_config(RUN_CONFIG))
    assert model.local_latency == 0.001
    assert model.global_bandwidth == 1e8


def test_write_csv_full_precision(tmp_path):
    path = tmp_path / 'values.csv'
    df = pd.DataFrame({'step': [0, 1], 'value': [0.1, 1 / 3]})
    transform.write_csv(df, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == 'step,value'
    assert lines[1] == '0,0.10000000000000001'
    back = pd.read_csv(path, float_precision='round_trip')
    assert back['value'].tolist() == [0.1, 1 / 3]


def test_write_run(tmp_path):
    cfg = transform.open_config(RUN_CONFIG)
    params = transform.convert_hyperparams(cfg)
    spec = transform.convert_objective(cfg)
    w0 = transform.convert_initial_point(cfg, params.d)
    result = simulator.run_hier_avg(params, spec, w0, record_drift=True)
    written = transform.write_run(result, str(tmp_path), constants=objectives.constants(spec))
    assert sorted(os.path.basename(p) for p in written) == ['drift.csv', 'per_round.csv', 'per_step.csv']
    assert len(pd.read_csv(tmp_path / 'per_round.csv')) == params.N
    assert len(pd.read_csv(tmp_path / 'per_step.csv')) == params.T
    assert len(pd.read_csv(tmp_path / 'drift.csv')) == params.K2

    without_drift = simulator.run_hier_avg(params, spec, w0)
    out = tmp_path / 'plain'
    written = transform.write_run(without_drift, str(out), bounds_df=pd.DataFrame({'bound_value': [1.0]}))
    assert sorted(os.path.basename(p) for p in written) == ['bounds.csv', 'per_round.csv', 'per_step.csv']


def test_config_document_round_trip(tmp_path):
    cfg = transform.open_config(RUN_CONFIG)
    path = tmp_path / 'copy.json'
    path.write_text(json.dumps(cfg))
    assert transform.convert_hyperparams(transform.open_config(str(path))) == transform.convert_hyperparams(cfg)
