"""Reading and writing chains and fitted models

Chain files are CSV with one row per record::

    individual_id,t,y,x_1,...,x_p[,z_index]

Rows of an individual are sorted by ``t`` (hours). Gaps longer than
``gap_split_hours`` end a chain; the pieces are named ``<id>#1``,
``<id>#2``... and keep the individual id for random effects.

A fit is exported to a directory holding ``params.json``, ``decoded.csv``
and ``loglik.csv``.

"""

import dataclasses
import json
import logging
import math
import typing
from pathlib import Path

import numpy as np
import pandas as pd

from .constants import (
    GAP_SPLIT_HOURS,
    SCHEMA_VERSION,
    EventTimeMode,
    Method,
)
from .exceptions import (
    DomainError,
    SchemaError,
)
from .model import (
    Chain,
    ModelParams,
    StateModel,
)

logger = logging.getLogger(__name__)

ID_COLUMN = 'individual_id'
TIME_COLUMN = 't'
COUNT_COLUMN = 'y'
Z_COLUMN = 'z_index'
PARAMS_FILE = 'params.json'
DECODED_FILE = 'decoded.csv'
LOGLIK_FILE = 'loglik.csv'
# spacing tolerance for discrete chains
UNIT_SPACING_TOL = 1e-9


def _file_row(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _covariate_columns(columns: typing.Sequence[str]) -> typing.List[str]:
    found = []
    for column in columns:
        if column.startswith('x_'):
            try:
                found.append((int(column[2:]), column))
            except ValueError:
                raise SchemaError(f'Unexpected covariate column {column!r}')
    found.sort()
    if [position for position, _ in found] != list(
            range(1, len(found) + 1)):
        raise SchemaError(
            'Covariate columns must be named x_1, x_2, ... without gaps')
    return [column for _, column in found]


def _numeric(frame: pd.DataFrame, column: str, allow_missing=False):
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = values.isna() & ~(frame[column].isna() & allow_missing)
    if bad.any():
        index = bad.to_numpy().nonzero()[0][0]
        raise SchemaError(
            f'column {column!r} holds a non-numeric value '
            f'{frame[column].iloc[index]!r}',
            row=_file_row(index)
        )
    return values


def read_chain_frame(path: typing.Union[str, Path]) -> pd.DataFrame:
    """Load and validate a chain file, keeping file row numbers"""
    try:
        frame = pd.read_csv(
            path, dtype={ID_COLUMN: str}, float_precision='round_trip')
    except pd.errors.EmptyDataError:
        raise SchemaError(f'{path} is empty')
    missing = [
        column for column in (ID_COLUMN, TIME_COLUMN, COUNT_COLUMN)
        if column not in frame.columns
    ]
    if missing:
        raise SchemaError(f'{path} lacks column(s) {", ".join(missing)}')
    covariates = _covariate_columns(frame.columns)
    if not covariates:
        raise SchemaError(f'{path} has no covariate columns')
    if frame[ID_COLUMN].isna().any():
        index = frame[ID_COLUMN].isna().to_numpy().nonzero()[0][0]
        raise SchemaError('missing individual id', row=_file_row(index))
    frame[TIME_COLUMN] = _numeric(frame, TIME_COLUMN)
    counts = _numeric(frame, COUNT_COLUMN)
    bad_counts = (counts < 0) | (counts != np.round(counts))
    if bad_counts.any():
        index = bad_counts.to_numpy().nonzero()[0][0]
        raise SchemaError(
            f'count {counts.iloc[index]!r} is not a non-negative integer',
            row=_file_row(index)
        )
    frame[COUNT_COLUMN] = counts.astype(np.int64)
    for column in covariates:
        frame[column] = _numeric(frame, column)
    if Z_COLUMN in frame.columns:
        z_index = _numeric(frame, Z_COLUMN, allow_missing=True)
        bad_z = z_index.notna() & (
            (z_index < 0) | (z_index != np.round(z_index)))
        if bad_z.any():
            index = bad_z.to_numpy().nonzero()[0][0]
            raise SchemaError(
                f'z_index {z_index.iloc[index]!r} is not a non-negative '
                f'integer',
                row=_file_row(index)
            )
        frame[Z_COLUMN] = z_index
    frame['_row'] = np.arange(len(frame)) + 2
    return frame


def _check_times(times: np.ndarray, rows: np.ndarray, individual: str):
    steps = np.diff(times)
    duplicated = np.flatnonzero(steps == 0)
    if duplicated.size:
        raise SchemaError(
            f'duplicate timestamp {times[duplicated[0] + 1]} for individual '
            f'{individual!r}',
            row=int(rows[duplicated[0] + 1])
        )
    unsorted = np.flatnonzero(steps < 0)
    if unsorted.size:
        raise SchemaError(
            f'timestamps of individual {individual!r} are not sorted',
            row=int(rows[unsorted[0] + 1])
        )


def split_at_gaps(
        times: np.ndarray,
        gap_split_hours: float = GAP_SPLIT_HOURS,
) -> typing.List[slice]:
    """Slices of consecutive records separated by at most the gap limit"""
    breaks = np.flatnonzero(np.diff(times) > gap_split_hours) + 1
    bounds = [0, *breaks.tolist(), len(times)]
    return [slice(start, stop) for start, stop in zip(bounds, bounds[1:])]


def load_chains(
        path: typing.Union[str, Path],
        mode: EventTimeMode = EventTimeMode.HETEROGENEOUS,
        gap_split_hours: float = GAP_SPLIT_HOURS,
        q: typing.Optional[int] = None,
) -> typing.List[Chain]:
    """Build chains from a CSV file

    In heterogeneous mode gaps up to ``gap_split_hours`` are absorbed into
    the sojourn times. Discrete mode also requires unit spacing inside every
    chain. ``q`` fixes the number of random-effect columns; by default it is
    one more than the largest ``z_index`` in the file.

    """

    mode = EventTimeMode(mode)
    frame = read_chain_frame(path)
    covariates = _covariate_columns(frame.columns)
    has_z = Z_COLUMN in frame.columns and frame[Z_COLUMN].notna().any()
    if has_z and q is None:
        q = int(frame[Z_COLUMN].max()) + 1
    if has_z and frame[Z_COLUMN].max() >= q:
        index = (frame[Z_COLUMN] >= q).to_numpy().nonzero()[0][0]
        raise SchemaError(
            f'z_index must be below {q}', row=_file_row(index))
    chains = []
    for individual, group in frame.groupby(ID_COLUMN, sort=False):
        times = group[TIME_COLUMN].to_numpy(dtype=float)
        rows = group['_row'].to_numpy()
        _check_times(times, rows, individual)
        pieces = split_at_gaps(times, gap_split_hours)
        if len(pieces) > 1:
            logger.info(
                'Individual %r split into %d chains at gaps over %gh',
                individual, len(pieces), gap_split_hours
            )
        for number, piece in enumerate(pieces, start=1):
            part = group.iloc[piece]
            part_times = times[piece]
            if mode == EventTimeMode.DISCRETE:
                off_grid = np.flatnonzero(
                    np.abs(np.diff(part_times) - 1.0) > UNIT_SPACING_TOL)
                if off_grid.size:
                    raise SchemaError(
                        f'discrete chains need unit spacing, individual '
                        f'{individual!r} steps by '
                        f'{np.diff(part_times)[off_grid[0]]:g}',
                        row=int(rows[piece][off_grid[0] + 1])
                    )
            z = None
            if has_z:
                z = np.zeros((len(part), q))
                z_index = part[Z_COLUMN].to_numpy()
                present = ~np.isnan(z_index)
                z[np.flatnonzero(present), z_index[present].astype(int)] = 1.0
            chain_name = individual if len(pieces) == 1 \
                else f'{individual}#{number}'
            try:
                chains.append(Chain(
                    id=chain_name,
                    times=part_times,
                    y=part[COUNT_COLUMN].to_numpy(),
                    x=part[covariates].to_numpy(dtype=float),
                    z=z,
                    individual=individual,
                ))
            except DomainError as err:
                raise SchemaError(str(err), row=int(rows[piece][0]))
    if not chains:
        raise SchemaError(f'{path} holds no records')
    return chains


def chains_frame(chains: typing.Sequence[Chain]) -> pd.DataFrame:
    frames = []
    for chain in chains:
        frame = pd.DataFrame({
            ID_COLUMN: chain.individual,
            TIME_COLUMN: chain.times,
            COUNT_COLUMN: chain.y,
        })
        for column in range(chain.p):
            frame[f'x_{column + 1}'] = chain.x[:, column]
        if chain.q:
            z_index = pd.Series(
                np.argmax(chain.z, axis=1), dtype='Int64')
            z_index[~chain.z.any(axis=1)] = pd.NA
            frame[Z_COLUMN] = z_index
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def write_chains(chains: typing.Sequence[Chain], path) -> Path:
    path = Path(path)
    chains_frame(chains).to_csv(path, index=False, float_format='%.17g')
    return path


def write_labels(
        chains: typing.Sequence[Chain],
        labels: typing.Sequence[np.ndarray],
        path,
) -> Path:
    """True state of every record, numbered from 1"""
    path = Path(path)
    frame = pd.concat([
        pd.DataFrame({
            'chain_id': chain.id,
            'record': np.arange(chain.times.size),
            TIME_COLUMN: chain.times,
            'state': np.asarray(label) + 1,
        }) for chain, label in zip(chains, labels)
    ], ignore_index=True) if chains else pd.DataFrame(
        columns=['chain_id', 'record', TIME_COLUMN, 'state'])
    frame.to_csv(path, index=False, float_format='%.17g')
    return path


def read_labels(path) -> typing.Dict[str, np.ndarray]:
    frame = pd.read_csv(path, dtype={'chain_id': str})
    return {
        chain: group.sort_values('record')['state'].to_numpy() - 1
        for chain, group in frame.groupby('chain_id', sort=False)
    }


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def params_document(result) -> typing.Dict:
    params = result.params
    states = []
    for index, state in enumerate(params.states):
        document = {
            'mu': state.mu,
            'beta': state.beta,
            'se': result.se[index] if result.se else None,
        }
        if state.b is not None:
            document['b'] = state.b
            document['sigma2'] = state.sigma2
        states.append(document)
    return _jsonable({
        'schema_version': SCHEMA_VERSION,
        'method': Method(result.method).value,
        'n_states': params.n_states,
        'p': params.p,
        'q': params.q,
        'delta0': params.delta0,
        'states': states,
        'chain_ids': list(result.chain_ids),
        'converged': bool(result.converged),
        'iterations': int(result.iterations),
        'log_lik': result.log_lik,
        'flags': list(result.flags),
    })


def posterior_frame(
        chain_ids: typing.Sequence[str],
        decoded: typing.Sequence[np.ndarray],
        posteriors: typing.Sequence[np.ndarray],
        n_states: int,
) -> pd.DataFrame:
    columns = ['chain_id', 'record', 'state'] + [
        f'p_{state + 1}' for state in range(n_states)]
    frames = []
    for chain, labels, u in zip(chain_ids, decoded, posteriors):
        frame = pd.DataFrame({
            'chain_id': chain,
            'record': np.arange(len(labels)),
            'state': np.asarray(labels) + 1,
        })
        for state in range(n_states):
            frame[f'p_{state + 1}'] = np.asarray(u)[:, state]
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]


def export_fit(result, path) -> typing.Dict[str, Path]:
    """Write a fitted model to ``path``, creating the directory"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params_path = path / PARAMS_FILE
    params_path.write_text(
        json.dumps(params_document(result), indent=2, sort_keys=True) + '\n')
    decoded_path = path / DECODED_FILE
    posterior_frame(
        result.chain_ids,
        result.decoded,
        [post.u for post in result.posterior],
        result.params.n_states,
    ).to_csv(decoded_path, index=False, float_format='%.17g')
    loglik_path = path / LOGLIK_FILE
    pd.DataFrame({
        'iteration': np.arange(len(result.loglik_trace), dtype=int),
        'log_lik': result.loglik_trace,
    }).to_csv(loglik_path, index=False, float_format='%.17g')
    return {
        'params': params_path,
        'decoded': decoded_path,
        'loglik': loglik_path,
    }


@dataclasses.dataclass
class LoadedFit:
    method: Method
    params: ModelParams
    se: typing.List[np.ndarray]
    chain_ids: typing.List[str]
    converged: bool
    iterations: int
    log_lik: typing.Optional[float]
    flags: typing.List[str]


def _array(value) -> np.ndarray:
    return np.array(
        [np.nan if item is None else item for item in np.ravel(
            np.array(value, dtype=object))],
        dtype=float
    ).reshape(np.shape(np.array(value, dtype=object)))


def load_fit(path) -> LoadedFit:
    path = Path(path)
    params_path = path / PARAMS_FILE if path.is_dir() else path
    try:
        document = json.loads(params_path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f'{params_path} is not valid JSON: {err}')
    version = document.get('schema_version')
    if version != SCHEMA_VERSION:
        raise SchemaError(
            f'{params_path} has schema version {version!r}, expected '
            f'{SCHEMA_VERSION}'
        )
    try:
        states = [
            StateModel(
                beta=np.array(state['beta'], dtype=float),
                mu=state['mu'],
                b=None if state.get('b') is None else np.array(
                    state['b'], dtype=float),
                sigma2=None if state.get('sigma2') is None else np.array(
                    state['sigma2'], dtype=float),
            ) for state in document['states']
        ]
        params = ModelParams(
            states=states, delta0=np.array(document['delta0'], dtype=float))
    except (KeyError, TypeError) as err:
        raise SchemaError(f'{params_path} is missing parameters: {err}')
    se = [
        _array(state['se']) for state in document['states']
        if state.get('se') is not None
    ]
    return LoadedFit(
        method=Method(document['method']),
        params=params,
        se=se,
        chain_ids=list(document.get('chain_ids', [])),
        converged=bool(document.get('converged', False)),
        iterations=int(document.get('iterations', 0)),
        log_lik=document.get('log_lik'),
        flags=list(document.get('flags', [])),
    )
