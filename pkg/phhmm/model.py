"""Model mathematics and domain types shared by every estimator

Transition rates out of a state follow an exponential proportional hazards
model, ``lambda = exp(eta)``. In PH and DT modes the transition matrix is the
normalised hazard ``f / (f + S) = expit(eta)`` (multinomial for three or more
states), which does not depend on the elapsed time: delta only enters the
M-step likelihood. CT mode exponentiates the generator scaled by delta.

"""

import dataclasses
import logging
import typing

import numpy as np
from scipy import linalg, special

from .constants import (
    ETA_CLAMP,
    HOURS_PER_DAY,
    RandomEffects,
    TransitionMode,
)
from .exceptions import (
    ConfigurationError,
    DomainError,
)

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class Diagnostics:
    clamped: int = 0


def clamp_eta(
        eta,
        diagnostics: typing.Optional[Diagnostics] = None
) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(np.isnan(eta)):
        raise DomainError('Linear predictor contains NaN')
    clamped = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    n_clamped = int(np.count_nonzero(clamped != eta))
    if n_clamped:
        logger.warning(
            'Clamped %d linear predictor(s) to [-%s, %s]',
            n_clamped, ETA_CLAMP, ETA_CLAMP
        )
        if diagnostics is not None:
            diagnostics.clamped += n_clamped
    return clamped


def _as_result(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def hazard(eta, diagnostics: typing.Optional[Diagnostics] = None):
    """Transition rate ``exp(eta)`` with the linear predictor clamped"""
    return _as_result(np.exp(clamp_eta(eta, diagnostics)))


def exp_density(delta, lam):
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(delta <= 0):
        raise DomainError(f'Elapsed time must be positive, got {delta!r}')
    if np.any(lam <= 0):
        raise DomainError(f'Rate must be positive, got {lam!r}')
    return _as_result(lam * np.exp(-lam * delta))


def exp_survival(delta, lam):
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(delta <= 0):
        raise DomainError(f'Elapsed time must be positive, got {delta!r}')
    if np.any(lam < 0):
        raise DomainError(f'Rate must be non-negative, got {lam!r}')
    return _as_result(np.exp(-lam * delta))


def exit_destinations(state: int, n_states: int) -> typing.List[int]:
    """Destination states of the exit models of ``state``, in order"""
    return [r for r in range(n_states) if r != state]


def exit_index(origin: int, destination: int) -> int:
    if origin == destination:
        raise ValueError('A state has no exit model towards itself')
    return destination if destination < origin else destination - 1


def _generators(rates: np.ndarray) -> np.ndarray:
    n, n_states, _ = rates.shape
    generator = np.zeros((n, n_states, n_states))
    for state in range(n_states):
        generator[:, state, exit_destinations(state, n_states)] = (
            rates[:, state, :])
        generator[:, state, state] = -rates[:, state, :].sum(axis=1)
    return generator


def _two_state_expm(generator: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Closed form ``I + (1 - exp(-s delta)) / s * Q`` with s = q12 + q21"""
    total = generator[:, 0, 1] + generator[:, 1, 0]
    factor = -np.expm1(-total * delta) / total
    return np.eye(2)[None, :, :] + factor[:, None, None] * generator


def transition_matrices(
        etas: np.ndarray,
        mode: TransitionMode,
        delta=1.0,
        diagnostics: typing.Optional[Diagnostics] = None,
) -> np.ndarray:
    """Stack of transition matrices for exit predictors of shape (n, K, K-1)"""
    etas = clamp_eta(etas, diagnostics)
    if etas.ndim != 3 or etas.shape[2] != etas.shape[1] - 1:
        raise ValueError(
            f'Expected exit predictors of shape (n, K, K-1), got '
            f'{etas.shape}'
        )
    n, n_states, _ = etas.shape
    mode = TransitionMode(mode)
    if mode in (TransitionMode.PH, TransitionMode.DT):
        logits = np.zeros((n, n_states, n_states))
        for state in range(n_states):
            logits[:, state, exit_destinations(state, n_states)] = (
                etas[:, state, :])
        return special.softmax(logits, axis=2)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (n,))
    if np.any(delta <= 0):
        raise DomainError('Elapsed time must be positive in CT mode')
    generator = _generators(np.exp(etas))
    if n_states == 2:
        return _two_state_expm(generator, delta)
    return np.stack([
        linalg.expm(generator[j] * delta[j]) for j in range(n)
    ]) if n else np.zeros((0, n_states, n_states))


def transition_matrix(
        etas,
        mode: TransitionMode,
        delta: float = 1.0,
        diagnostics: typing.Optional[Diagnostics] = None,
) -> np.ndarray:
    """K x K transition matrix from per-state exit linear predictors

    For two states ``etas`` may be given as ``(eta_1, eta_2)``; otherwise it
    holds one row of K-1 exit predictors per origin state.

    """

    etas = np.asarray(etas, dtype=float)
    if etas.ndim == 1:
        etas = etas.reshape(-1, 1)
    return transition_matrices(
        etas[None, :, :], mode, np.array([delta]), diagnostics)[0]


def ct_generator(rates) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    if rates.ndim == 1:
        rates = rates.reshape(-1, 1)
    return _generators(rates[None, :, :])[0]


def _penalty_terms(etas) -> np.ndarray:
    lam = np.exp(clamp_eta(etas))
    # x - log1p(x) loses all precision for small x
    series = lam ** 2 / 2 - lam ** 3 / 3 + lam ** 4 / 4
    return np.where(lam < 1e-4, series, lam - np.log1p(lam))


def ph_penalty(etas, weights=None) -> float:
    """Gap between the PH and logistic negative log-likelihoods

    ``sum(w * (exp(eta) - log(1 + exp(eta))))``, positive and convex.

    """

    terms = _penalty_terms(np.ravel(np.asarray(etas, dtype=float)))
    if weights is not None:
        terms = terms * np.ravel(np.asarray(weights, dtype=float))
    return float(np.sum(terms))


@dataclasses.dataclass
class PenaltyHessianCheck:
    is_psd: bool
    omega: np.ndarray
    hessian: np.ndarray
    min_eigenvalue: float


def penalty_hessian_check(design, beta) -> PenaltyHessianCheck:
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    if design.shape[0] == 0:
        raise ValueError('Design must have at least one row')
    lam = np.exp(clamp_eta(design @ np.atleast_1d(beta)))
    omega = lam * (1.0 - (1.0 + lam) ** -2)
    hessian = design.T @ (omega[:, None] * design)
    min_eigenvalue = float(linalg.eigvalsh(hessian).min())
    return PenaltyHessianCheck(
        is_psd=min_eigenvalue >= -1e-10,
        omega=omega,
        hessian=hessian,
        min_eigenvalue=min_eigenvalue,
    )


@dataclasses.dataclass(frozen=True)
class ObservationRecord:
    t: float
    delta: float
    x: np.ndarray
    z: np.ndarray
    y: int


@dataclasses.dataclass
class Chain:
    """One individual's time-ordered records

    Row 0 is the anchor record at ``t_i0``: it carries ``y0`` and its
    covariates are never used. Rows 1..n are the transition records.

    """

    id: str
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: typing.Optional[np.ndarray] = None
    individual: typing.Optional[str] = None

    def __post_init__(self):
        self.id = str(self.id)
        if self.individual is None:
            self.individual = self.id
        self.times = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.y).ravel()
        if y.size and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DomainError(
                f'Chain {self.id!r}: counts must be non-negative integers')
        self.y = y.astype(np.int64)
        n_rows = self.times.size
        if n_rows == 0:
            raise DomainError(f'Chain {self.id!r} has no records')
        self.x = np.asarray(self.x, dtype=float).reshape(n_rows, -1)
        if self.z is None:
            self.z = np.zeros((n_rows, 0))
        self.z = np.asarray(self.z, dtype=float).reshape(n_rows, -1)
        if self.y.size != n_rows:
            raise DomainError(
                f'Chain {self.id!r}: {self.y.size} counts for {n_rows} '
                f'timestamps'
            )
        if np.any(np.diff(self.times) <= 0):
            raise DomainError(
                f'Chain {self.id!r}: timestamps must be strictly increasing')
        if self.q:
            nonzero = np.count_nonzero(self.z, axis=1)
            if np.any(nonzero > 1) or np.any(
                    (self.z != 0) & (self.z != 1)):
                raise DomainError(
                    f'Chain {self.id!r}: random-effect indicators must be '
                    f'one-hot or all zero'
                )

    @property
    def n_transitions(self) -> int:
        return self.times.size - 1

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def y0(self) -> int:
        return int(self.y[0])

    @property
    def design(self) -> np.ndarray:
        return self.x[1:]

    @property
    def random_design(self) -> np.ndarray:
        return self.z[1:]

    @property
    def records(self) -> typing.List[ObservationRecord]:
        delta = self.delta
        return [
            ObservationRecord(
                t=float(self.times[j]),
                delta=float(delta[j - 1]),
                x=self.x[j],
                z=self.z[j],
                y=int(self.y[j]),
            ) for j in range(1, self.times.size)
        ]


@dataclasses.dataclass
class StateModel:
    """Parameters of one latent state

    ``beta`` holds one row of coefficients per exit model (a single row for
    two states), ordered by destination state. ``b`` and ``sigma2`` follow
    the same layout and are absent without random effects.

    """

    beta: np.ndarray
    mu: float
    b: typing.Optional[np.ndarray] = None
    sigma2: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.mu = float(self.mu)
        if self.mu < 0 or not np.isfinite(self.mu):
            raise DomainError(f'Emission mean must be >= 0, got {self.mu}')
        if self.b is not None:
            b = np.asarray(self.b, dtype=float)
            b = b.reshape(self.beta.shape[0], -1)
            self.b = b if b.shape[1] else None
        if self.b is None:
            self.sigma2 = None
        else:
            sigma2 = np.ones(self.beta.shape[0]) if self.sigma2 is None \
                else np.asarray(self.sigma2, dtype=float).ravel()
            if sigma2.size == 1:
                sigma2 = np.repeat(sigma2, self.beta.shape[0])
            if np.any(sigma2 <= 0):
                raise DomainError('Random-intercept variances must be > 0')
            self.sigma2 = sigma2

    @property
    def n_exits(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def q(self) -> int:
        return 0 if self.b is None else self.b.shape[1]


@dataclasses.dataclass
class ModelParams:
    states: typing.List[StateModel]
    delta0: np.ndarray

    def __post_init__(self):
        n_states = len(self.states)
        if n_states < 2:
            raise DomainError('At least two states are required')
        for state in self.states:
            if state.n_exits != n_states - 1:
                raise DomainError(
                    f'Each state needs {n_states - 1} exit model(s), got '
                    f'{state.n_exits}'
                )
        if len({(s.p, s.q) for s in self.states}) != 1:
            raise DomainError('States disagree on covariate dimensions')
        delta0 = np.atleast_2d(np.asarray(self.delta0, dtype=float))
        if delta0.shape[1] != n_states:
            raise DomainError(
                f'Initial distributions must have {n_states} entries')
        if np.any(delta0 < 0) or np.any(
                np.abs(delta0.sum(axis=1) - 1.0) > 1e-12):
            raise DomainError(
                'Initial distributions must be probability vectors')
        self.delta0 = delta0

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def p(self) -> int:
        return self.states[0].p

    @property
    def q(self) -> int:
        return self.states[0].q

    @property
    def mus(self) -> np.ndarray:
        return np.array([s.mu for s in self.states])

    @property
    def betas(self) -> np.ndarray:
        return np.stack([s.beta for s in self.states])

    def initial_distribution(self, chain_index: int) -> np.ndarray:
        if self.delta0.shape[0] == 1:
            return self.delta0[0]
        return self.delta0[chain_index]

    def exit_predictors(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Linear predictors of shape (n, K, K-1) for covariate rows"""
        if x.shape[1] != self.p:
            raise ConfigurationError(
                f'Chain has {x.shape[1]} covariates, model expects {self.p}')
        etas = np.einsum('np,kep->nke', x, self.betas)
        if self.q:
            if z.shape[1] != self.q:
                raise ConfigurationError(
                    f'Chain has {z.shape[1]} random-effect columns, model '
                    f'expects {self.q}'
                )
            bs = np.stack([s.b for s in self.states])
            etas = etas + np.einsum('nq,keq->nke', z, bs)
        return etas

    def vector(self) -> np.ndarray:
        """Parameters entering the L1 convergence distance

        Coefficients, emission means and variances; random intercepts and
        initial distributions are excluded.

        """

        parts = []
        for state in self.states:
            parts.append(state.beta.ravel())
            parts.append([state.mu])
            if state.sigma2 is not None:
                parts.append(state.sigma2)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def sorted_by_mu(self) -> 'ModelParams':
        """Relabel states by decreasing emission mean"""
        order = np.argsort(-self.mus, kind='stable')
        if np.array_equal(order, np.arange(self.n_states)):
            return self
        return self.permuted(order)

    def permuted(self, order: typing.Sequence[int]) -> 'ModelParams':
        """New state ``i`` is old state ``order[i]``"""
        order = list(order)
        n_states = self.n_states
        states = []
        for new_origin, old_origin in enumerate(order):
            old = self.states[old_origin]
            rows = [
                exit_index(old_origin, order[new_destination])
                for new_destination in exit_destinations(new_origin, n_states)
            ]
            states.append(StateModel(
                beta=old.beta[rows],
                mu=old.mu,
                b=None if old.b is None else old.b[rows],
                sigma2=None if old.sigma2 is None else old.sigma2[rows],
            ))
        return ModelParams(states=states, delta0=self.delta0[:, order])


@dataclasses.dataclass
class PosteriorWeights:
    """Posterior state probabilities of one chain

    ``w[j - 1]`` is the joint posterior of the states at records ``j - 1``
    and ``j``; ``u[j]`` is the marginal posterior at record ``j``.

    """

    w: np.ndarray
    u: np.ndarray

    @property
    def n_states(self) -> int:
        return self.u.shape[1]


def linear_predictors(chain: Chain, params: ModelParams) -> np.ndarray:
    return params.exit_predictors(chain.design, chain.random_design)


def chain_transition_matrices(
        chain: Chain,
        params: ModelParams,
        mode: TransitionMode,
        diagnostics: typing.Optional[Diagnostics] = None,
) -> np.ndarray:
    return transition_matrices(
        linear_predictors(chain, params), mode, chain.delta, diagnostics)


def assign_random_effects(
        chains: typing.Sequence[Chain],
        kind: RandomEffects,
) -> typing.List[Chain]:
    """Rebuild random-effect indicators of every chain

    ``hour`` toggles one of 24 hour-of-day intercepts from each timestamp;
    ``individual`` toggles one intercept per individual, shared by chains
    split from the same individual.

    """

    kind = RandomEffects(kind)
    result = []
    if kind == RandomEffects.NONE:
        for chain in chains:
            result.append(dataclasses.replace(
                chain, z=np.zeros((chain.times.size, 0))))
    elif kind == RandomEffects.HOUR_OF_DAY:
        for chain in chains:
            hours = np.floor(chain.times).astype(int) % HOURS_PER_DAY
            result.append(dataclasses.replace(
                chain, z=np.eye(HOURS_PER_DAY)[hours]))
    else:
        individuals = sorted({chain.individual for chain in chains})
        lookup = {name: index for index, name in enumerate(individuals)}
        for chain in chains:
            z = np.zeros((chain.times.size, len(individuals)))
            z[:, lookup[chain.individual]] = 1.0
            result.append(dataclasses.replace(chain, z=z))
    return result
