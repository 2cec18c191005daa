"""Replication of the simulation study

Every replicate simulates one data set per case and fits it with each
method. Replicate ``r`` uses seed ``seed + r``, so results do not depend on
the number of workers.

"""

import concurrent.futures
import dataclasses
import logging
import typing

import numpy as np
import pandas as pd

from .constants import (
    DEFAULT_N_INDIVIDUALS,
    DEFAULT_N_TRANSITIONS,
    METHOD_LABELS,
    CovariateTiming,
    Method,
)
from .exceptions import (
    DomainError,
    PhHmmError,
)
from . import (
    em,
    simulate,
)

logger = logging.getLogger(__name__)

METHODS = (Method.PMM, Method.DT, Method.CT, Method.PH)
CASE_IDS = tuple(config.case_id for config in simulate.case_catalog())
PARAMETERS = ('mu_1', 'beta_10', 'beta_11', 'mu_2', 'beta_20', 'beta_21')
TABLE_PARAMETERS = {
    2: ('mu_1', 'beta_10', 'beta_11'),
    3: ('mu_2', 'beta_20', 'beta_21'),
}


@dataclasses.dataclass(frozen=True)
class ReplicateTask:
    case_id: str
    replicate: int
    seed: int
    n_individuals: int = DEFAULT_N_INDIVIDUALS
    n_transitions: int = DEFAULT_N_TRANSITIONS
    methods: typing.Tuple[Method, ...] = METHODS
    em_config: em.EmConfig = em.EmConfig()
    covariate_timing: CovariateTiming = CovariateTiming.END


def true_parameters(config: simulate.SimConfig) -> typing.Dict[str, float]:
    return {
        'mu_1': config.mu1,
        'beta_10': config.beta1[0],
        'beta_11': config.beta1[1],
        'mu_2': config.mu2,
        'beta_20': config.beta2[0],
        'beta_21': config.beta2[1],
    }


def _estimates(result: em.FitResult) -> typing.Dict[str, float]:
    params = result.params
    return {
        'mu_1': params.states[0].mu,
        'beta_10': params.states[0].beta[0, 0],
        'beta_11': params.states[0].beta[0, 1],
        'mu_2': params.states[1].mu,
        'beta_20': params.states[1].beta[0, 0],
        'beta_21': params.states[1].beta[0, 1],
    }


def run_replicate(task: ReplicateTask) -> typing.List[typing.Dict]:
    """Simulate one data set and fit it with every requested method"""
    config = simulate.get_case(
        task.case_id,
        seed=task.seed,
        n_individuals=task.n_individuals,
        n_transitions=task.n_transitions,
        covariate_timing=task.covariate_timing,
    )
    chains, labels = simulate.simulate_chains(config)
    rows = []
    for method in task.methods:
        row = {
            'case': task.case_id,
            'replicate': task.replicate,
            'seed': task.seed,
            'method': METHOD_LABELS[Method(method)],
        }
        fit_config = dataclasses.replace(
            task.em_config, method=Method(method), compute_se=False)
        try:
            result = em.fit_em(chains, fit_config)
        except PhHmmError as err:
            logger.warning(
                'Case %s replicate %d, %s failed: %s',
                task.case_id, task.replicate, row['method'], err
            )
            row.update({name: np.nan for name in PARAMETERS})
            row.update(
                accuracy=np.nan, converged=False, iterations=0,
                error=str(err)
            )
        else:
            row.update(_estimates(result))
            row.update(
                accuracy=em.accuracy(labels, result.decoded),
                converged=result.converged,
                iterations=result.iterations,
                error='',
            )
        rows.append(row)
    return rows


def build_tasks(
        replicates: int,
        seed: int,
        cases: typing.Optional[typing.Sequence[str]] = None,
        methods: typing.Sequence[Method] = METHODS,
        n_individuals: int = DEFAULT_N_INDIVIDUALS,
        n_transitions: int = DEFAULT_N_TRANSITIONS,
        em_config: em.EmConfig = em.EmConfig(),
        covariate_timing: CovariateTiming = CovariateTiming.END,
) -> typing.List[ReplicateTask]:
    cases = list(CASE_IDS if not cases else cases)
    unknown = [case for case in cases if case not in CASE_IDS]
    if unknown:
        raise DomainError(f'Unknown simulation case(s): {", ".join(unknown)}')
    if replicates < 1:
        raise DomainError('At least one replicate is needed')
    return [
        ReplicateTask(
            case_id=case,
            replicate=replicate,
            seed=seed + replicate,
            n_individuals=n_individuals,
            n_transitions=n_transitions,
            methods=tuple(Method(method) for method in methods),
            em_config=em_config,
            covariate_timing=CovariateTiming(covariate_timing),
        ) for case in cases for replicate in range(replicates)
    ]


def run_replicates(
        tasks: typing.Sequence[ReplicateTask],
        jobs: int = 1,
        progress: typing.Optional[typing.Callable[[ReplicateTask], None]] = None,
) -> pd.DataFrame:
    """Raw per-replicate results, one row per (case, replicate, method)"""
    rows = []
    if jobs <= 1:
        for task in tasks:
            rows.extend(run_replicate(task))
            if progress is not None:
                progress(task)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(run_replicate, task): task for task in tasks}
            for future in concurrent.futures.as_completed(futures):
                rows.extend(future.result())
                if progress is not None:
                    progress(futures[future])
    frame = pd.DataFrame(rows)
    order = {case: index for index, case in enumerate(CASE_IDS)}
    method_order = {
        METHOD_LABELS[method]: index for index, method in enumerate(METHODS)}
    frame = frame.assign(
        _case=frame['case'].map(order),
        _method=frame['method'].map(method_order),
    ).sort_values(['_case', 'replicate', '_method'])
    return frame.drop(columns=['_case', '_method']).reset_index(drop=True)


def _empirical_se(values: pd.Series) -> float:
    values = values.dropna()
    if values.size < 2:
        return np.nan
    return float(values.std(ddof=1))


def accuracy_table(raw: pd.DataFrame) -> pd.DataFrame:
    """Mean accuracy and empirical SE, cases by methods"""
    grouped = raw.groupby(['case', 'method'], sort=False)['accuracy']
    summary = pd.DataFrame({
        'mean': grouped.mean(),
        'se': grouped.apply(_empirical_se),
    }).unstack('method')
    summary.columns = [
        f'{method} {stat}' for stat, method in summary.columns]
    methods = [
        METHOD_LABELS[method] for method in METHODS
        if METHOD_LABELS[method] in raw['method'].unique()
    ]
    columns = [
        f'{method} {stat}' for method in methods for stat in ('mean', 'se')]
    return summary[columns].reset_index()


def parameter_table(raw: pd.DataFrame, table: int) -> pd.DataFrame:
    """Mean estimate, empirical SE and MSE of one state's parameters"""
    try:
        names = TABLE_PARAMETERS[table]
    except KeyError:
        raise DomainError(f'No parameter table {table}')
    truths = {
        case: true_parameters(simulate.get_case(case))
        for case in raw['case'].unique()
    }
    rows = []
    for (case, method), group in raw.groupby(['case', 'method'], sort=False):
        row = {'case': case, 'method': method}
        for name in names:
            truth = truths[case][name]
            estimates = group[name].dropna()
            row[f'{name} true'] = truth
            row[f'{name} est'] = estimates.mean()
            row[f'{name} se'] = _empirical_se(estimates)
            row[f'{name} mse'] = float(np.mean((estimates - truth) ** 2)) \
                if estimates.size else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def summarize(raw: pd.DataFrame, table: int) -> pd.DataFrame:
    if table == 1:
        return accuracy_table(raw)
    return parameter_table(raw, table)
