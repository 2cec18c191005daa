import itertools
import typing

import numpy as np
import pytest
from scipy import stats

from phhmm.model import (
    Chain,
    ModelParams,
    StateModel,
    chain_transition_matrices,
)
from phhmm.utils import load_config


class EnumeratedPosteriors(typing.NamedTuple):
    log_lik: float
    u: np.ndarray
    w: np.ndarray
    best_path: np.ndarray


def enumerate_paths(
        chain: Chain,
        params: ModelParams,
        mode,
        chain_index: int = 0,
) -> EnumeratedPosteriors:
    """Brute-force posteriors by summing over every latent path"""
    gammas = chain_transition_matrices(chain, params, mode)
    emissions = stats.poisson.pmf(
        chain.y[:, None], params.mus[None, :])
    initial = params.initial_distribution(chain_index)
    n_records, n_states = emissions.shape
    total = 0.0
    u = np.zeros((n_records, n_states))
    w = np.zeros((n_records - 1, n_states, n_states))
    best, best_path = -1.0, None
    for path in itertools.product(range(n_states), repeat=n_records):
        prob = initial[path[0]] * emissions[0, path[0]]
        for j in range(1, n_records):
            prob *= gammas[j - 1, path[j - 1], path[j]] * emissions[
                j, path[j]]
        total += prob
        for j, state in enumerate(path):
            u[j, state] += prob
        for j in range(1, n_records):
            w[j - 1, path[j - 1], path[j]] += prob
        if prob > best:
            best, best_path = prob, np.array(path)
    return EnumeratedPosteriors(
        log_lik=float(np.log(total)),
        u=u / total,
        w=w / total,
        best_path=best_path,
    )


def make_chain(
        rng: np.random.Generator,
        n_records: int,
        mus=(6.0, 1.0),
        p: int = 2,
        q: int = 0,
        chain_id: str = 'c',
        discrete: bool = False,
) -> Chain:
    if discrete:
        times = np.arange(n_records, dtype=float)
    else:
        times = np.concatenate([[0.0], np.cumsum(
            rng.uniform(0.2, 3.0, size=n_records - 1))])
    x = np.column_stack(
        [np.ones(n_records), rng.normal(size=(n_records, p - 1))])
    states = rng.integers(len(mus), size=n_records)
    y = rng.poisson(np.asarray(mus)[states])
    z = None
    if q:
        z = np.eye(q)[rng.integers(q, size=n_records)]
    return Chain(id=chain_id, times=times, y=y, x=x, z=z)


def make_params(
        rng: np.random.Generator,
        n_states: int = 2,
        p: int = 2,
        mus=None,
        q: int = 0,
) -> ModelParams:
    mus = np.sort(rng.uniform(0.5, 8.0, size=n_states))[::-1] \
        if mus is None else np.asarray(mus, dtype=float)
    states = []
    for state in range(n_states):
        beta = rng.normal(scale=0.8, size=(n_states - 1, p))
        b = sigma2 = None
        if q:
            b = rng.normal(scale=0.3, size=(n_states - 1, q))
            sigma2 = np.full(n_states - 1, 0.5)
        states.append(StateModel(beta=beta, mu=mus[state], b=b, sigma2=sigma2))
    delta0 = rng.dirichlet(np.ones(n_states))
    return ModelParams(states=states, delta0=delta0)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture()
def two_state_params():
    return ModelParams(
        states=[
            StateModel(beta=[[-1.0, 0.5]], mu=8.0),
            StateModel(beta=[[-1.5, -0.5]], mu=1.0),
        ],
        delta0=[0.5, 0.5],
    )


@pytest.fixture()
def simple_chain():
    return Chain(
        id='simple',
        times=[0.0, 1.0, 2.5, 3.0, 5.0],
        y=[7, 9, 0, 1, 8],
        x=np.column_stack([np.ones(5), [0.0, 0.3, -0.2, 0.8, -1.0]]),
    )


@pytest.fixture()
def chain_factory(rng):
    def factory(n_records, **kwargs):
        return make_chain(rng, n_records, **kwargs)
    return factory


@pytest.fixture()
def params_factory(rng):
    def factory(**kwargs):
        return make_params(rng, **kwargs)
    return factory


@pytest.fixture()
def path_oracle():
    return enumerate_paths


@pytest.fixture(scope='session')
def phhmm_config():
    return load_config(paths=[], environment={})
