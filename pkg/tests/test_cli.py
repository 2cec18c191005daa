import json

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from phhmm.cli import app

runner = CliRunner()


def _simulate(out, *extra):
    return runner.invoke(app, [
        'simulate', str(out), '--case', '1.1', '--seed', '5',
        '--individuals', '6', '--transitions', '30', *extra
    ])


@pytest.fixture()
def simulated(tmp_path):
    out = tmp_path / 'sim'
    result = _simulate(out)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture()
def fitted(tmp_path, simulated):
    out = tmp_path / 'fit'
    result = runner.invoke(app, [
        'fit', str(simulated / 'chains.csv'), str(out), '--tol', '1e6'])
    assert result.exit_code == 0, result.output
    return out


def test_simulate_writes_chains_labels_and_manifest(simulated):
    chains = pd.read_csv(simulated / 'chains.csv', dtype={'individual_id': str})
    assert list(chains.columns) == ['individual_id', 't', 'y', 'x_1', 'x_2']
    assert chains['individual_id'].nunique() == 6
    labels = pd.read_csv(simulated / 'labels.csv')
    assert set(labels['state']) <= {1, 2}
    manifest = json.loads((simulated / 'manifest.json').read_text())
    assert manifest['command'] == 'simulate'
    assert manifest['seed'] == 5
    assert len(manifest['artifacts']) == 2


def test_simulate_is_reproducible(tmp_path, simulated):
    again = tmp_path / 'again'
    assert _simulate(again).exit_code == 0
    for name in ('chains.csv', 'labels.csv'):
        assert (again / name).read_bytes() == (simulated / name).read_bytes()


def test_simulate_from_settings_file(tmp_path):
    settings = tmp_path / 'settings.json'
    settings.write_text(json.dumps({
        'mode': 'discrete',
        'beta1': [-2.0, -1.0],
        'beta2': [-2.0, 1.0],
        'mu1': 6.0,
        'mu2': 0.5,
    }))
    out = tmp_path / 'sim'
    result = runner.invoke(app, [
        'simulate', str(out), '--config', str(settings),
        '--individuals', '2', '--transitions', '5'])
    assert result.exit_code == 0, result.output
    chains = pd.read_csv(out / 'chains.csv')
    assert list(chains['t'][:6]) == [0, 1, 2, 3, 4, 5]


@pytest.mark.parametrize('args', [
    pytest.param(['--case', '9.9'], id='unknown-case'),
    pytest.param([], id='no-case'),
    pytest.param(['--transitions', '0', '--case', '1.1'], id='no-transitions'),
])
def test_simulate_rejects_bad_input(tmp_path, args):
    result = runner.invoke(app, ['simulate', str(tmp_path / 'x'), *args])
    assert result.exit_code == 1


def test_fit_exports_estimates(fitted):
    document = json.loads((fitted / 'params.json').read_text())
    assert document['method'] == 'ph'
    assert document['n_states'] == 2
    assert len(document['chain_ids']) == 6
    decoded = pd.read_csv(fitted / 'decoded.csv')
    assert list(decoded.columns) == [
        'chain_id', 'record', 'state', 'p_1', 'p_2']
    manifest = json.loads((fitted / 'manifest.json').read_text())
    assert manifest['config']['method'] == 'ph'
    assert manifest['config']['pooled'] is True


def test_unpooled_fit_writes_one_directory_per_chain(tmp_path, simulated):
    out = tmp_path / 'unpooled'
    result = runner.invoke(app, [
        'fit', str(simulated / 'chains.csv'), str(out), '--unpooled',
        '--method', 'dt', '--tol', '1e6'])
    assert result.exit_code == 0, result.output
    written = {path.name for path in out.iterdir() if path.is_dir()}
    assert written
    assert written <= {f'{index:04d}' for index in range(6)}
    for name in written:
        assert (out / name / 'params.json').exists()


def test_fit_that_does_not_converge_exits_with_two(tmp_path, simulated):
    result = runner.invoke(app, [
        'fit', str(simulated / 'chains.csv'), str(tmp_path / 'fit'),
        '--tol', '1e-12', '--max-iters', '1'])
    assert result.exit_code == 2
    assert (tmp_path / 'fit' / 'params.json').exists()


def test_fit_of_missing_file_exits_with_one(tmp_path):
    result = runner.invoke(app, [
        'fit', str(tmp_path / 'missing.csv'), str(tmp_path / 'fit')])
    assert result.exit_code == 1


def test_fit_of_malformed_file_reports_row(tmp_path):
    chains = tmp_path / 'chains.csv'
    chains.write_text('individual_id,t,y,x_1\na,0,1,1\na,1,-1,1\n')
    result = runner.invoke(app, ['fit', str(chains), str(tmp_path / 'fit')])
    assert result.exit_code == 1
    assert 'row 3' in result.output


@pytest.mark.parametrize('algorithm', ['map', 'viterbi'])
def test_decode_with_exported_fit(tmp_path, simulated, fitted, algorithm):
    out = tmp_path / 'decoded' / 'states.csv'
    result = runner.invoke(app, [
        'decode', '--fit', str(fitted), '--chains',
        str(simulated / 'chains.csv'), '--out', str(out),
        '--algorithm', algorithm])
    assert result.exit_code == 0, result.output
    decoded = pd.read_csv(out)
    assert len(decoded) == 6 * 31
    assert set(decoded['state']) <= {1, 2}
    assert (out.parent / 'manifest.json').exists()


def test_decode_rejects_mismatched_covariates(tmp_path, fitted):
    chains = tmp_path / 'other.csv'
    chains.write_text('individual_id,t,y,x_1\na,0,1,1\na,1,4,1\n')
    result = runner.invoke(app, [
        'decode', '--fit', str(fitted), '--chains', str(chains),
        '--out', str(tmp_path / 'states.csv')])
    assert result.exit_code == 1


def test_replicate_single_run_has_no_standard_error(tmp_path):
    out = tmp_path / 'table'
    result = runner.invoke(app, [
        'replicate', str(out), '--table', '2', '--replicates', '1',
        '--case', '1.3', '--individuals', '3', '--transitions', '15',
        '--max-iters', '3'])
    assert result.exit_code == 0, result.output
    raw = pd.read_csv(out / 'raw.csv')
    assert list(raw['method']) == ['PMM', 'DT-HMM', 'CT-HMM', 'PH-HMM']
    table = pd.read_csv(out / 'table2.csv')
    assert list(table['method']) == ['PMM', 'DT-HMM', 'CT-HMM', 'PH-HMM']
    assert table['mu_1 se'].isna().all()
    assert (table['mu_1 true'] == 10.0).all()


def test_replicate_rejects_unknown_case(tmp_path):
    result = runner.invoke(app, [
        'replicate', str(tmp_path / 'table'), '--case', '7.1',
        '--replicates', '1'])
    assert result.exit_code == 1


def test_fit_of_collinear_covariates_exits_with_one(tmp_path):
    rows = ['individual_id,t,y,x_1,x_2']
    counts = [12, 0, 1] * 10
    rows += [f'a,{t},{y},1,2' for t, y in enumerate(counts)]
    chains = tmp_path / 'chains.csv'
    chains.write_text('\n'.join(rows) + '\n')
    result = runner.invoke(app, ['fit', str(chains), str(tmp_path / 'fit')])
    assert result.exit_code == 1
    assert isinstance(result.exception, SystemExit)


def test_simulate_records_covariate_timing(tmp_path):
    out = tmp_path / 'start'
    result = _simulate(out, '--covariate-timing', 'start')
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['config']['covariate_timing'] == 'start'
    chains = pd.read_csv(out / 'chains.csv', dtype={'individual_id': str})
    first = chains[chains['individual_id'] == '0000']
    previous = np.sin(2 * np.pi * first['t'].to_numpy()[:-1] / 24)
    np.testing.assert_allclose(first['x_2'].to_numpy()[1:], previous)
