"""M-step updates for the emission means and the transition models"""

import dataclasses
import logging
import typing

import numpy as np
from scipy import (
    optimize,
    special,
)

from .constants import (
    Method,
    TransitionMode,
)
from .exceptions import (
    ConfigurationError,
    NonConvergenceError,
    StarvationError,
)
from .model import (
    Chain,
    ModelParams,
    PosteriorWeights,
    StateModel,
    clamp_eta,
    exit_destinations,
    transition_matrices,
)
from . import regression

logger = logging.getLogger(__name__)

STARVATION_WEIGHT = 1e-8


def fit_poisson_mixture(
        u: np.ndarray,
        ys: np.ndarray,
        iteration: typing.Optional[int] = None,
) -> np.ndarray:
    """Posterior-weighted mean count of each state"""
    u = np.asarray(u, dtype=float)
    ys = np.asarray(ys, dtype=float)
    totals = u.sum(axis=0)
    for state, total in enumerate(totals):
        if total < STARVATION_WEIGHT:
            raise StarvationError(state, float(total), iteration)
    return (u * ys[:, None]).sum(axis=0) / totals


def augment(
        chain: Chain,
        w: np.ndarray,
        state: int,
        destination: typing.Optional[int] = None,
        weight_floor: float = 1e-12,
        chain_index: int = 0,
) -> regression.AugmentedRows:
    """Event and censored copies of every record for one exit model

    The event copy carries the posterior of moving from ``state`` to
    ``destination``; the censored copy carries the posterior of every other
    outcome from ``state``. Rows below ``weight_floor`` are dropped.

    """

    n_states = w.shape[1]
    if destination is None:
        if n_states != 2:
            raise ValueError(
                'A destination state is needed with more than two states')
        destination = 1 - state
    outcomes = w[:, state, :]
    event_weight = outcomes[:, destination]
    censored_weight = np.delete(outcomes, destination, axis=1).sum(axis=1)
    n_records = w.shape[0]
    weight = np.column_stack([event_weight, censored_weight]).ravel()
    keep = weight >= weight_floor
    return regression.AugmentedRows(
        x=np.repeat(chain.design, 2, axis=0)[keep],
        z=np.repeat(chain.random_design, 2, axis=0)[keep],
        delta=np.repeat(chain.delta, 2)[keep],
        is_event=np.tile([True, False], n_records)[keep],
        weight=weight[keep],
        chain=np.full(2 * n_records, chain_index)[keep],
        record=np.repeat(np.arange(1, n_records + 1), 2)[keep],
    )


def augment_all(
        chains: typing.Sequence[Chain],
        posteriors: typing.Sequence[PosteriorWeights],
        state: int,
        destination: typing.Optional[int] = None,
        weight_floor: float = 1e-12,
) -> regression.AugmentedRows:
    parts = [
        augment(chain, post.w, state, destination, weight_floor, index)
        for index, (chain, post) in enumerate(zip(chains, posteriors))
    ]
    return regression.AugmentedRows.concatenate(parts)


def expected_transition_loglik(
        x: np.ndarray,
        z: np.ndarray,
        w: np.ndarray,
        state: int,
        model: StateModel,
) -> float:
    """``sum(w_sr * log Gamma_sr)`` over the exits of one origin state

    ``Gamma`` is the normalised (PH and DT) transition matrix, so this is the
    transition part of the expected complete-data log-likelihood.

    """

    n_states = w.shape[1]
    etas = x @ np.atleast_2d(model.beta).T
    if model.b is not None and z.shape[1]:
        etas = etas + z @ np.atleast_2d(model.b).T
    logits = np.zeros((x.shape[0], n_states))
    logits[:, exit_destinations(state, n_states)] = clamp_eta(etas)
    return float(np.sum(
        w[:, state, :] * special.log_softmax(logits, axis=1)))


def _blend(previous: StateModel, proposal: StateModel, step: float):
    beta = previous.beta + step * (proposal.beta - previous.beta)
    b = proposal.b
    if b is not None:
        start = np.zeros_like(b) if previous.b is None else previous.b
        b = start + step * (b - start)
    return dataclasses.replace(proposal, beta=beta, b=b)


def guard_step(
        x: np.ndarray,
        z: np.ndarray,
        w: np.ndarray,
        state: int,
        previous: StateModel,
        proposal: StateModel,
        max_halvings: int = 30,
) -> typing.Tuple[StateModel, typing.Optional[int]]:
    """Halve the step from ``previous`` towards ``proposal`` until the
    expected transition log-likelihood does not drop

    Returns the accepted model and the number of halvings, or ``previous``
    and ``None`` when every shortened step still lowers the objective.

    """

    baseline = expected_transition_loglik(x, z, w, state, previous)
    for halving in range(max_halvings + 1):
        candidate = proposal if halving == 0 else _blend(
            previous, proposal, 0.5 ** halving)
        if expected_transition_loglik(x, z, w, state, candidate) >= baseline:
            return candidate, halving
    return _blend(previous, proposal, 0.0), None


@dataclasses.dataclass
class CtFit:
    beta: np.ndarray
    log_lik: float
    iterations: int
    converged: bool


def _ct_etas(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (x @ beta.T)[:, :, None]


def ct_expected_loglik(beta, x, delta, w) -> float:
    """``sum(w_qr * log Gamma_qr)`` under a two-state generator"""
    beta = np.asarray(beta, dtype=float).reshape(2, -1)
    gammas = transition_matrices(
        _ct_etas(beta, x), TransitionMode.CT, delta)
    return float(np.sum(w * np.log(np.maximum(gammas, 1e-300))))


def fit_ct_generator(
        x: np.ndarray,
        delta: np.ndarray,
        w: np.ndarray,
        beta0: typing.Optional[np.ndarray] = None,
        max_iter: int = 200,
) -> CtFit:
    """Two-state generator with ``q_12 = exp(x'beta_1)``, ``q_21 = exp(x'beta_2)``

    Maximised by BFGS on numerical gradients of the closed-form matrix
    exponential.

    """

    x = np.asarray(x, dtype=float)
    p = x.shape[1]
    start = np.zeros(2 * p) if beta0 is None else np.ravel(beta0)

    def objective(flat):
        return -ct_expected_loglik(flat, x, delta, w)

    result = optimize.minimize(
        objective, start, method='BFGS', options={'maxiter': max_iter})
    if not result.success:
        if result.nit >= max_iter:
            raise NonConvergenceError(
                f'Generator fit did not converge after {max_iter} iterations',
                [(result.nit, -result.fun)]
            )
        logger.warning('Generator fit stopped early: %s', result.message)
    return CtFit(
        beta=result.x.reshape(2, p),
        log_lik=float(-result.fun),
        iterations=int(result.nit),
        converged=bool(result.success),
    )


@dataclasses.dataclass(frozen=True)
class MStepControl:
    newton: regression.NewtonControl = regression.NewtonControl()
    frailty: regression.FrailtyControl = regression.FrailtyControl()
    weight_floor: float = 1e-12
    ct_max_iter: int = 200
    # PH steps that lower the expected transition log-likelihood are halved
    guard_steps: bool = False


@dataclasses.dataclass
class ExitFit:
    """Fitted transition model for one (origin, destination) pair"""

    state: int
    destination: int
    beta: np.ndarray
    b: typing.Optional[np.ndarray] = None
    sigma2: typing.Optional[float] = None
    converged: bool = True
    separated: bool = False
    at_floor: bool = False
    rows: typing.Optional[regression.AugmentedRows] = None
    family: str = regression.PH.name


@dataclasses.dataclass
class MStepResult:
    states: typing.List[StateModel]
    fits: typing.Dict[typing.Tuple[int, int], ExitFit]
    flags: typing.List[str] = dataclasses.field(default_factory=list)


def _fit_exit(
        rows: regression.AugmentedRows,
        family: regression.ExponentialFamily,
        previous: StateModel,
        exit_row: int,
        control: MStepControl,
) -> typing.Tuple[np.ndarray, typing.Optional[np.ndarray],
                  typing.Optional[float], bool, bool, bool]:
    beta0 = previous.beta[exit_row]
    if rows.q:
        b0 = None if previous.b is None else previous.b[exit_row]
        sigma2_0 = None if previous.sigma2 is None \
            else float(previous.sigma2[exit_row])
        fit = regression.fit_weighted_glm_frailty(
            rows,
            family,
            control.frailty,
            control.newton,
            beta0=beta0,
            b0=b0,
            sigma2_0=sigma2_0,
        )
        return fit.beta, fit.b, fit.sigma2, fit.converged, False, fit.at_floor
    fit = regression.fit_weighted_glm(rows, family, control.newton, beta0)
    return fit.beta, None, None, fit.converged, fit.separated, False


def maximize_transitions(
        chains: typing.Sequence[Chain],
        posteriors: typing.Sequence[PosteriorWeights],
        params: ModelParams,
        method: Method,
        control: MStepControl = MStepControl(),
) -> MStepResult:
    """Refit every exit model from the transition posteriors"""
    method = Method(method)
    n_states = params.n_states
    fits = {}
    flags = []
    if method == Method.CT:
        if n_states != 2:
            raise ConfigurationError('CT-HMM supports two states only')
        if params.q:
            raise ConfigurationError('CT-HMM does not take random effects')
        x = np.vstack([chain.design for chain in chains])
        delta = np.concatenate([chain.delta for chain in chains])
        w = np.concatenate([post.w for post in posteriors])
        fit = fit_ct_generator(
            x, delta, w, params.betas[:, 0, :], control.ct_max_iter)
        if not fit.converged:
            flags.append('generator fit did not converge')
        states = []
        for state in range(2):
            fits[(state, 1 - state)] = ExitFit(
                state, 1 - state, fit.beta[state], converged=fit.converged,
                family='ct')
            states.append(StateModel(
                beta=fit.beta[state:state + 1], mu=params.states[state].mu))
        return MStepResult(states=states, fits=fits, flags=flags)
    if method == Method.DT and n_states > 2:
        if params.q:
            raise ConfigurationError(
                'DT-HMM with more than two states does not take random '
                'effects'
            )
        x = np.vstack([chain.design for chain in chains])
        w = np.concatenate([post.w for post in posteriors])
        states = []
        for state in range(n_states):
            destinations = exit_destinations(state, n_states)
            weights = w[:, state, [state] + destinations]
            fit = regression.fit_weighted_multinomial(
                x, weights, control.newton, params.states[state].beta)
            if fit.separated:
                flags.append(f'separation in exits of state {state + 1}')
            for index, destination in enumerate(destinations):
                fits[(state, destination)] = ExitFit(
                    state, destination, fit.beta[index],
                    converged=fit.converged, separated=fit.separated,
                    family='multinomial'
                )
            states.append(StateModel(
                beta=fit.beta, mu=params.states[state].mu))
        return MStepResult(states=states, fits=fits, flags=flags)
    family = regression.LOGISTIC if method == Method.DT else regression.PH
    guarded = control.guard_steps and family is regression.PH
    if guarded:
        x = np.vstack([chain.design for chain in chains])
        z = np.vstack([chain.random_design for chain in chains])
        w = np.concatenate([post.w for post in posteriors])
    states = []
    for state in range(n_states):
        previous = params.states[state]
        betas, bs, sigma2s = [], [], []
        for index, destination in enumerate(
                exit_destinations(state, n_states)):
            rows = augment_all(
                chains, posteriors, state, destination, control.weight_floor)
            beta, b, sigma2, converged, separated, at_floor = _fit_exit(
                rows, family, previous, index, control)
            label = f'{state + 1}->{destination + 1}'
            if separated:
                flags.append(f'separation in exit {label}')
            if at_floor:
                flags.append(f'variance at floor in exit {label}')
            if not converged and not separated:
                flags.append(f'exit {label} did not converge')
            fits[(state, destination)] = ExitFit(
                state=state,
                destination=destination,
                beta=beta,
                b=b,
                sigma2=sigma2,
                converged=converged,
                separated=separated,
                at_floor=at_floor,
                rows=rows,
                family=family.name,
            )
            betas.append(beta)
            bs.append(b)
            sigma2s.append(sigma2)
        proposal = StateModel(
            beta=np.stack(betas),
            mu=previous.mu,
            b=None if bs[0] is None else np.stack(bs),
            sigma2=None if sigma2s[0] is None else np.array(sigma2s),
        )
        if guarded:
            proposal, halvings = guard_step(
                x, z, w, state, previous, proposal,
                control.newton.max_halvings
            )
            if halvings is None:
                logger.info(
                    'Transition step of state %d lowers the expected '
                    'log-likelihood, keeping the previous coefficients',
                    state + 1
                )
            elif halvings:
                logger.debug(
                    'Transition step of state %d halved %d time(s)',
                    state + 1, halvings
                )
            for index, destination in enumerate(
                    exit_destinations(state, n_states)):
                fits[(state, destination)].beta = proposal.beta[index]
                if proposal.b is not None:
                    fits[(state, destination)].b = proposal.b[index]
        states.append(proposal)
    return MStepResult(states=states, fits=fits, flags=flags)


def maximize(
        chains: typing.Sequence[Chain],
        posteriors: typing.Sequence[PosteriorWeights],
        params: ModelParams,
        method: Method,
        delta0: np.ndarray,
        control: MStepControl = MStepControl(),
        iteration: typing.Optional[int] = None,
) -> typing.Tuple[ModelParams, MStepResult]:
    """Full M-step: emission means, transition models and initial states"""
    u = np.vstack([post.u for post in posteriors])
    ys = np.concatenate([chain.y for chain in chains])
    mus = fit_poisson_mixture(u, ys, iteration)
    result = maximize_transitions(chains, posteriors, params, method, control)
    states = [
        dataclasses.replace(state, mu=float(mu))
        for state, mu in zip(result.states, mus)
    ]
    return ModelParams(states=states, delta0=delta0), result
