"""Command-line interface for simulating, fitting and decoding PH-HMMs

Every command writes a ``manifest.json`` next to its outputs. Exit codes:
0 on success, 1 for bad input, 2 when a fit does not converge.

"""

import contextlib
import dataclasses
import datetime as dt
import json
import typing
from pathlib import Path

import numpy as np
import typer

from .constants import (
    METHOD_TRANSITION_MODE,
    CovariateTiming,
    DecodeAlgorithm,
    EventTimeMode,
    Method,
    RandomEffects,
)
from .exceptions import (
    ConfigurationError,
    NonConvergenceError,
    PhHmmError,
)
from .model import (
    ModelParams,
    assign_random_effects,
)
from . import (
    __version__,
    dataio,
    em,
    estep,
    replicate as replication,
    simulate as simulation,
    utils,
)

_help_intro = 'Fit proportional hazards hidden Markov models'

app = typer.Typer(
    short_help=_help_intro,
    help=(
        f'{_help_intro} - simulate the study cases, fit PMM, DT-HMM, CT-HMM '
        f'and PH-HMM to chain files, decode latent states and replicate '
        f'the simulation tables.'
    )
)

EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2
MANIFEST_FILE = 'manifest.json'
CHAINS_FILE = 'chains.csv'
LABELS_FILE = 'labels.csv'
RAW_FILE = 'raw.csv'

config = utils.load_config()


@app.callback()
def main(
        verbose: bool = typer.Option(
            False, '--verbose', '-v', help='Log debug messages'),
):
    utils.configure_logging(
        'DEBUG' if verbose else config['logging']['level'])


@contextlib.contextmanager
def _input_errors():
    try:
        yield
    except NonConvergenceError as err:
        typer.echo(f'Error: {err}', err=True)
        raise typer.Exit(code=EXIT_NOT_CONVERGED)
    except (PhHmmError, OSError, json.JSONDecodeError) as err:
        typer.echo(f'Error: {err}', err=True)
        raise typer.Exit(code=EXIT_INPUT_ERROR)


def _snapshot(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (Method, EventTimeMode, RandomEffects,
                          DecodeAlgorithm)):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_snapshot(item) for item in value]
    return value


def write_manifest(
        out: Path,
        command: str,
        options: typing.Dict,
        started: dt.datetime,
        artifacts: typing.Iterable[Path],
        seed: typing.Optional[int] = None,
) -> Path:
    """Record the command, its options and its outputs"""
    manifest = {
        'command': command,
        'config': {key: _snapshot(value) for key, value in options.items()},
        'seed': seed,
        'started': started.isoformat(),
        'finished': dt.datetime.now(dt.timezone.utc).isoformat(),
        'artifacts': sorted(str(path) for path in artifacts),
        'version': __version__,
    }
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def _now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def _simulation_config(
        case: typing.Optional[str],
        config_file: typing.Optional[Path],
        seed: int,
        individuals: int,
        transitions: int,
        covariate_timing: typing.Optional[CovariateTiming] = None,
) -> simulation.SimConfig:
    if (case is None) == (config_file is None):
        raise ConfigurationError('Pass exactly one of --case or --config')
    if case is not None:
        return simulation.get_case(
            case,
            seed=seed,
            n_individuals=individuals,
            n_transitions=transitions,
            covariate_timing=covariate_timing or CovariateTiming.END,
        )
    values = json.loads(config_file.read_text())
    known = {field.name for field in dataclasses.fields(simulation.SimConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(
            f'Unknown simulation settings in {config_file}: '
            f'{", ".join(unknown)}'
        )
    values.update(
        seed=seed, n_individuals=individuals, n_transitions=transitions)
    if covariate_timing is not None:
        values['covariate_timing'] = covariate_timing
    for key in ('beta1', 'beta2'):
        if key in values:
            values[key] = tuple(values[key])
    try:
        return simulation.SimConfig(**values)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f'Invalid simulation settings: {err}')


@app.command()
def simulate(
        out: Path,
        case: typing.Optional[str] = typer.Option(
            None, help='Study case, from 1.1 to 4.3'),
        config_file: typing.Optional[Path] = typer.Option(
            None, '--config', help='JSON file with simulation settings'),
        seed: int = config['replicate'].getint('seed'),
        individuals: int = config['replicate'].getint('individuals'),
        transitions: int = config['replicate'].getint('transitions'),
        covariate_timing: typing.Optional[CovariateTiming] = typer.Option(
            None, help='Record covariates at the start or end of a sojourn'),
):
    """Simulate chains and their true state labels"""
    started = _now()
    with _input_errors():
        sim_config = _simulation_config(
            case, config_file, seed, individuals, transitions,
            covariate_timing)
        out.mkdir(parents=True, exist_ok=True)
        typer.echo(
            f'Simulating {individuals} chain(s) with {transitions} '
            f'transition(s) each...'
        )
        chains, labels = simulation.simulate_chains(sim_config)
        chains_path = dataio.write_chains(chains, out / CHAINS_FILE)
        labels_path = dataio.write_labels(chains, labels, out / LABELS_FILE)
        write_manifest(
            out,
            'simulate',
            {
                'case': case,
                'config': config_file,
                'individuals': individuals,
                'transitions': transitions,
                'mode': sim_config.mode.value,
                'covariate_timing': sim_config.covariate_timing.value,
            },
            started,
            [chains_path, labels_path],
            seed=seed,
        )
    typer.echo('Done!')


@app.command()
def fit(
        chains: Path,
        out: Path,
        method: Method = Method.PH,
        mode: EventTimeMode = EventTimeMode.HETEROGENEOUS,
        random_effects: typing.Optional[RandomEffects] = typer.Option(
            None, help='Rebuild random-effect indicators'),
        pooled: bool = typer.Option(
            True, '--pooled/--unpooled', help='One model for all chains'),
        n_states: int = config['em'].getint('n_states'),
        tol: float = config['em'].getfloat('tol'),
        max_iters: int = config['em'].getint('max_iters'),
        gap_split_hours: float = config['io'].getfloat('gap_split_hours'),
):
    """Fit a model to a chain file and export the estimates"""
    started = _now()
    with _input_errors():
        loaded = dataio.load_chains(chains, mode, gap_split_hours)
        em_config = em.EmConfig.from_config(
            config,
            method=method,
            random_effects=random_effects,
            n_states=n_states,
            tol=tol,
            max_iters=max_iters,
        )
        typer.echo(
            f'Fitting {method.value} to {len(loaded)} chain(s)...')
        out.mkdir(parents=True, exist_ok=True)
        artifacts = []
        if pooled:
            result = em.fit_em(loaded, em_config)
            artifacts.extend(dataio.export_fit(result, out).values())
            converged = result.converged
            for flag in result.flags:
                typer.echo(f'Warning: {flag}', err=True)
        else:
            fits = em.fit_individuals(loaded, em_config)
            for chain_id, result in fits.results.items():
                artifacts.extend(
                    dataio.export_fit(result, out / chain_id).values())
            for chain_id, reason in fits.failures.items():
                typer.echo(f'Chain {chain_id!r} failed: {reason}', err=True)
            converged = bool(fits.results) and all(
                result.converged for result in fits.results.values())
        write_manifest(
            out,
            'fit',
            {
                'chains': chains,
                'method': method,
                'mode': mode,
                'random_effects': random_effects,
                'pooled': pooled,
                'n_states': n_states,
                'tol': tol,
                'max_iters': max_iters,
                'gap_split_hours': gap_split_hours,
            },
            started,
            artifacts,
        )
    if not converged:
        typer.echo('Fit did not converge', err=True)
        raise typer.Exit(code=EXIT_NOT_CONVERGED)
    typer.echo('Done!')


def _decoding_params(fitted: dataio.LoadedFit, chain_ids) -> ModelParams:
    params = fitted.params
    if list(chain_ids) == fitted.chain_ids:
        return params
    return ModelParams(
        states=params.states,
        delta0=params.delta0.mean(axis=0, keepdims=True),
    )


@app.command()
def decode(
        fit_dir: Path = typer.Option(..., '--fit', help='Exported fit'),
        chains: Path = typer.Option(..., help='Chain file to decode'),
        out: Path = typer.Option(..., help='CSV file for the decoded states'),
        algorithm: DecodeAlgorithm = DecodeAlgorithm.MAP,
        mode: EventTimeMode = EventTimeMode.HETEROGENEOUS,
        random_effects: typing.Optional[RandomEffects] = None,
        gap_split_hours: float = config['io'].getfloat('gap_split_hours'),
):
    """Decode latent states of chains with a previously exported fit"""
    started = _now()
    with _input_errors():
        fitted = dataio.load_fit(fit_dir)
        loaded = dataio.load_chains(chains, mode, gap_split_hours)
        if random_effects is not None:
            loaded = assign_random_effects(loaded, random_effects)
        if loaded[0].p != fitted.params.p or loaded[0].q != fitted.params.q:
            raise ConfigurationError(
                f'Chains have {loaded[0].p} covariate(s) and '
                f'{loaded[0].q} random-effect column(s), the fit expects '
                f'{fitted.params.p} and {fitted.params.q}'
            )
        params = _decoding_params(fitted, [chain.id for chain in loaded])
        transition_mode = METHOD_TRANSITION_MODE[fitted.method]
        decoded, posteriors = [], []
        for index, chain in enumerate(loaded):
            fb = estep.forward_backward(
                chain, params, transition_mode, chain_index=index)
            posteriors.append(fb.u)
            if algorithm == DecodeAlgorithm.VITERBI:
                decoded.append(em.viterbi_decode(
                    chain, params, transition_mode, chain_index=index))
            else:
                decoded.append(em.map_decode(fb.u))
        out.parent.mkdir(parents=True, exist_ok=True)
        dataio.posterior_frame(
            [chain.id for chain in loaded],
            decoded,
            posteriors,
            params.n_states,
        ).to_csv(out, index=False, float_format='%.17g')
        write_manifest(
            out.parent,
            'decode',
            {
                'fit': fit_dir,
                'chains': chains,
                'algorithm': algorithm,
                'mode': mode,
                'random_effects': random_effects,
            },
            started,
            [out],
        )
    typer.echo(
        f'Decoded {sum(len(labels) for labels in decoded)} record(s)')


@app.command(name='replicate')
def replicate_tables(
        out: Path,
        table: int = typer.Option(1, min=1, max=3),
        replicates: int = config['replicate'].getint('replicates'),
        jobs: int = config['replicate'].getint('jobs'),
        seed: int = config['replicate'].getint('seed'),
        cases: typing.Optional[typing.List[str]] = typer.Option(
            None, '--case', help='Restrict to these cases'),
        individuals: int = config['replicate'].getint('individuals'),
        transitions: int = config['replicate'].getint('transitions'),
        tol: float = config['em'].getfloat('tol'),
        max_iters: int = config['em'].getint('max_iters'),
        covariate_timing: CovariateTiming = typer.Option(
            CovariateTiming.END,
            help='Record covariates at the start or end of a sojourn'),
):
    """Rerun the simulation study and summarise it as a results table"""
    started = _now()
    with _input_errors():
        tasks = replication.build_tasks(
            replicates,
            seed,
            cases=cases,
            n_individuals=individuals,
            n_transitions=transitions,
            em_config=em.EmConfig.from_config(
                config, tol=tol, max_iters=max_iters),
            covariate_timing=covariate_timing,
        )
        out.mkdir(parents=True, exist_ok=True)
        typer.echo(
            f'Running {len(tasks)} replicate(s) with {jobs} worker(s)...')
        with typer.progressbar(length=len(tasks)) as progress:
            raw = replication.run_replicates(
                tasks, jobs, progress=lambda task: progress.update(1))
        raw_path = out / RAW_FILE
        raw.to_csv(raw_path, index=False, float_format='%.17g')
        table_path = out / f'table{table}.csv'
        replication.summarize(raw, table).to_csv(
            table_path, index=False, float_format='%.6g')
        write_manifest(
            out,
            'replicate',
            {
                'table': table,
                'replicates': replicates,
                'jobs': jobs,
                'cases': cases,
                'individuals': individuals,
                'transitions': transitions,
                'tol': tol,
                'max_iters': max_iters,
                'covariate_timing': covariate_timing.value,
            },
            started,
            [raw_path, table_path],
            seed=seed,
        )
    failures = int(np.count_nonzero(raw['error'] != ''))
    if failures:
        typer.echo(f'{failures} fit(s) failed, see {raw_path}', err=True)
    typer.echo('Done!')
