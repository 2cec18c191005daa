"""Synthetic alternating recurrent-event chains with Poisson emissions

Every individual draws from its own PCG64 stream derived from the base seed
and the individual index, so chains can be generated in any order or in
parallel and still replay bit for bit. Transition draws and emission draws
use separate child streams.

"""

import dataclasses
import logging
import typing

import numpy as np
from scipy import special

from .constants import (
    DEFAULT_N_INDIVIDUALS,
    DEFAULT_N_TRANSITIONS,
    HOURS_PER_DAY,
    CovariateTiming,
    SimulationMode,
)
from .exceptions import DomainError
from .model import (
    Chain,
    exit_destinations,
)

logger = logging.getLogger(__name__)

TRANSITION_STREAM = 0
EMISSION_STREAM = 1
TRAIT_STREAM = 2


@dataclasses.dataclass(frozen=True)
class SimConfig:
    mode: SimulationMode
    beta1: typing.Tuple[float, float]
    beta2: typing.Tuple[float, float]
    mu1: float
    mu2: float
    h_max: typing.Optional[float] = None
    n_transitions: int = DEFAULT_N_TRANSITIONS
    n_individuals: int = DEFAULT_N_INDIVIDUALS
    seed: int = 0
    case_id: typing.Optional[str] = None
    covariate_timing: CovariateTiming = CovariateTiming.END

    def __post_init__(self):
        object.__setattr__(self, 'mode', SimulationMode(self.mode))
        object.__setattr__(
            self, 'covariate_timing', CovariateTiming(self.covariate_timing))
        if self.mode == SimulationMode.SURVIVAL and not (
                self.h_max is not None and self.h_max > 0):
            raise DomainError('Survival simulations need h_max > 0')
        if self.n_transitions < 1:
            raise DomainError('At least one transition per chain is needed')
        if self.n_individuals < 1:
            raise DomainError('At least one individual is needed')
        if self.mu1 < 0 or self.mu2 < 0:
            raise DomainError('Emission means must be non-negative')

    @property
    def betas(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2], dtype=float)

    @property
    def mus(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2], dtype=float)


def individual_rng(
        seed: int,
        individual_id: int,
        stream: int = TRANSITION_STREAM,
) -> np.random.Generator:
    sequence = np.random.SeedSequence(
        entropy=seed, spawn_key=(int(individual_id), stream))
    return np.random.Generator(np.random.PCG64(sequence))


def diurnal_covariates(t) -> np.ndarray:
    """Rows ``[1, sin(2 pi t / 24)]``"""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.column_stack(
        [np.ones_like(t), np.sin(2 * np.pi * t / HOURS_PER_DAY)])


def simulate_emissions(states, mus, rng) -> np.ndarray:
    """Independent Poisson counts with the mean of each record's state

    ``rng`` may be a generator or a seed.

    """

    mus = np.asarray(mus, dtype=float)
    if np.any(mus < 0):
        raise DomainError('Emission means must be non-negative')
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    return rng.poisson(mus[np.asarray(states, dtype=int)])


def chain_id(individual_id: int) -> str:
    return f'{individual_id:04d}'


def _finish_chain(config, individual_id, times, x, labels):
    labels = np.asarray(labels, dtype=int)
    ys = simulate_emissions(
        labels,
        config.mus,
        individual_rng(config.seed, individual_id, EMISSION_STREAM),
    )
    chain = Chain(
        id=chain_id(individual_id),
        times=np.asarray(times),
        y=ys,
        x=np.asarray(x),
    )
    return chain, labels


def _recorded_covariates(
        timing: CovariateTiming,
        start_covariates: np.ndarray,
        covariate_fn: typing.Callable[..., np.ndarray],
        t: float,
        *args,
) -> np.ndarray:
    if CovariateTiming(timing) == CovariateTiming.START:
        return start_covariates
    return covariate_fn(t, *args)[0]


def simulate_survival_chain(
        config: SimConfig,
        individual_id: int,
) -> typing.Tuple[Chain, np.ndarray]:
    """Alternating exponential sojourns censored by U(0, h_max) draws

    Each step draws ``v ~ Exp(lambda_s)`` then ``r ~ U(0, h_max]``,
    advances by ``min(v, r)`` and flips the state iff ``v <= r``. Labels
    hold the state at each record. The hazard uses x at the sojourn start;
    with ``CovariateTiming.END`` the record carries x at the new timestamp.

    """

    if config.mode != SimulationMode.SURVIVAL:
        raise DomainError('Configuration is not a survival simulation')
    rng = individual_rng(config.seed, individual_id)
    betas = config.betas
    state = int(rng.integers(2))
    t = 0.0
    times, labels = [t], [state]
    rows = [diurnal_covariates(t)[0]]
    for _ in range(config.n_transitions):
        covariates = diurnal_covariates(t)[0]
        rate = np.exp(covariates @ betas[state])
        sojourn = rng.exponential(1.0 / rate)
        censoring = config.h_max * (1.0 - rng.random())
        step = min(sojourn, censoring)
        t += step
        if sojourn <= censoring:
            state = 1 - state
        times.append(t)
        labels.append(state)
        rows.append(_recorded_covariates(
            config.covariate_timing, covariates, diurnal_covariates, t))
    return _finish_chain(config, individual_id, times, rows, labels)


def simulate_discrete_chain(
        config: SimConfig,
        individual_id: int,
) -> typing.Tuple[Chain, np.ndarray]:
    """Unit steps with transitions drawn Bernoulli(expit(eta_s(t + 1)))"""
    if config.mode != SimulationMode.DISCRETE:
        raise DomainError('Configuration is not a discrete simulation')
    rng = individual_rng(config.seed, individual_id)
    betas = config.betas
    state = int(rng.integers(2))
    times = np.arange(config.n_transitions + 1, dtype=float)
    x = diurnal_covariates(times)
    labels = [state]
    for j in range(1, config.n_transitions + 1):
        if rng.random() < special.expit(x[j] @ betas[state]):
            state = 1 - state
        labels.append(state)
    return _finish_chain(config, individual_id, times, x, labels)


def simulate_chain(config: SimConfig, individual_id: int):
    if config.mode == SimulationMode.SURVIVAL:
        return simulate_survival_chain(config, individual_id)
    return simulate_discrete_chain(config, individual_id)


def simulate_chains(
        config: SimConfig,
) -> typing.Tuple[typing.List[Chain], typing.List[np.ndarray]]:
    chains, labels = [], []
    for individual_id in range(config.n_individuals):
        chain, truth = simulate_chain(config, individual_id)
        chains.append(chain)
        labels.append(truth)
    return chains, labels


def first_exit_times(
        rates,
        size: int,
        rng: np.random.Generator,
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Times and indices of the first of several competing exponential exits"""
    rates = np.asarray(rates, dtype=float)
    if np.any(rates <= 0):
        raise DomainError('Exit rates must be positive')
    draws = rng.exponential(1.0 / rates, size=(size, rates.size))
    winners = np.argmin(draws, axis=1)
    return draws[np.arange(size), winners], winners


def simulate_multistate_chain(
        betas: np.ndarray,
        mus,
        h_max: float,
        n_transitions: int,
        seed: int,
        individual_id: int,
        covariate_timing: CovariateTiming = CovariateTiming.END,
) -> typing.Tuple[Chain, np.ndarray]:
    """K-state survival chain with competing exponential exits

    ``betas`` has shape (K, K-1, 2): one diurnal coefficient pair per exit,
    exits ordered by destination.

    """

    betas = np.asarray(betas, dtype=float)
    n_states = betas.shape[0]
    if h_max <= 0:
        raise DomainError('h_max must be positive')
    rng = individual_rng(seed, individual_id)
    state = int(rng.integers(n_states))
    t = 0.0
    times, labels = [t], [state]
    rows = [diurnal_covariates(t)[0]]
    for _ in range(n_transitions):
        covariates = diurnal_covariates(t)[0]
        rates = np.exp(betas[state] @ covariates)
        sojourn, winner = first_exit_times(rates, 1, rng)
        censoring = h_max * (1.0 - rng.random())
        t += min(sojourn[0], censoring)
        if sojourn[0] <= censoring:
            state = exit_destinations(state, n_states)[int(winner[0])]
        times.append(t)
        labels.append(state)
        rows.append(_recorded_covariates(
            covariate_timing, covariates, diurnal_covariates, t))
    labels = np.asarray(labels)
    ys = simulate_emissions(
        labels, mus, individual_rng(seed, individual_id, EMISSION_STREAM))
    chain = Chain(id=chain_id(individual_id), times=times, y=ys, x=rows)
    return chain, labels


@dataclasses.dataclass(frozen=True)
class PopulationSimConfig:
    """Population design with sex and OS interactions of the diurnal term

    ``betas`` rows hold ``[intercept, x, x * sex, x * os]`` per state and
    ``sigma2`` the per-state variance of the individual random intercepts.

    """

    betas: typing.Tuple[typing.Tuple[float, ...], ...]
    sigma2: typing.Tuple[float, float]
    mu1: float
    mu2: float
    h_max: float = 10.0
    n_transitions: int = DEFAULT_N_TRANSITIONS
    n_individuals: int = DEFAULT_N_INDIVIDUALS
    seed: int = 0
    covariate_timing: CovariateTiming = CovariateTiming.END


def population_covariates(t, sex: int, os_flag: int) -> np.ndarray:
    base = diurnal_covariates(t)
    diurnal = base[:, 1]
    return np.column_stack(
        [base[:, 0], diurnal, diurnal * sex, diurnal * os_flag])


def simulate_population_chains(
        config: PopulationSimConfig,
) -> typing.Tuple[typing.List[Chain], typing.List[np.ndarray], np.ndarray]:
    """Chains, true labels and the true random intercepts (2, I)"""
    betas = np.asarray(config.betas, dtype=float)
    traits_rng = individual_rng(config.seed, 0, TRAIT_STREAM)
    n_individuals = config.n_individuals
    sexes = traits_rng.integers(2, size=n_individuals)
    os_flags = traits_rng.integers(2, size=n_individuals)
    intercepts = traits_rng.normal(
        scale=np.sqrt(np.asarray(config.sigma2, dtype=float))[:, None],
        size=(2, n_individuals),
    )
    chains, all_labels = [], []
    for individual_id in range(n_individuals):
        rng = individual_rng(config.seed, individual_id)
        sex, os_flag = int(sexes[individual_id]), int(os_flags[individual_id])
        state = int(rng.integers(2))
        t = 0.0
        times, labels = [t], [state]
        rows = [population_covariates(t, sex, os_flag)[0]]
        for _ in range(config.n_transitions):
            covariates = population_covariates(t, sex, os_flag)[0]
            rate = np.exp(
                covariates @ betas[state] + intercepts[state, individual_id])
            sojourn = rng.exponential(1.0 / rate)
            censoring = config.h_max * (1.0 - rng.random())
            t += min(sojourn, censoring)
            if sojourn <= censoring:
                state = 1 - state
            times.append(t)
            labels.append(state)
            rows.append(_recorded_covariates(
                config.covariate_timing,
                covariates,
                population_covariates,
                t,
                sex,
                os_flag,
            ))
        labels = np.asarray(labels)
        ys = simulate_emissions(
            labels,
            [config.mu1, config.mu2],
            individual_rng(config.seed, individual_id, EMISSION_STREAM),
        )
        z = np.zeros((len(times), n_individuals))
        z[:, individual_id] = 1.0
        chains.append(Chain(
            id=chain_id(individual_id), times=times, y=ys, x=rows, z=z))
        all_labels.append(labels)
    return chains, all_labels, intercepts


_CASE_PARAMETERS = {
    1: ((-3.0, -1.0), (-3.0, 1.0), 10.0, 1.0),
    2: ((-2.0, -5.0), (-2.0, 5.0), 10.0, 1.0),
    3: ((-3.0, -1.0), (-3.0, 1.0), 5.0, 1.0),
    4: ((-2.0, -5.0), (-2.0, 5.0), 5.0, 1.0),
}

_CASE_DESIGNS = {
    1: (SimulationMode.SURVIVAL, 10.0),
    2: (SimulationMode.SURVIVAL, 1.0),
    3: (SimulationMode.DISCRETE, None),
}


def case_catalog(
        seed: int = 0,
        n_individuals: int = DEFAULT_N_INDIVIDUALS,
        n_transitions: int = DEFAULT_N_TRANSITIONS,
        covariate_timing: CovariateTiming = CovariateTiming.END,
) -> typing.List[SimConfig]:
    """The twelve simulation cases, ids ``'1.1'`` to ``'4.3'``"""
    result = []
    for group, (beta1, beta2, mu1, mu2) in _CASE_PARAMETERS.items():
        for design, (mode, h_max) in _CASE_DESIGNS.items():
            result.append(SimConfig(
                mode=mode,
                beta1=beta1,
                beta2=beta2,
                mu1=mu1,
                mu2=mu2,
                h_max=h_max,
                n_transitions=n_transitions,
                n_individuals=n_individuals,
                seed=seed,
                case_id=f'{group}.{design}',
                covariate_timing=covariate_timing,
            ))
    return result


def get_case(case_id: str, **kwargs) -> SimConfig:
    for config in case_catalog(**kwargs):
        if config.case_id == case_id:
            return config
    raise DomainError(f'Unknown simulation case {case_id!r}')
