"""Estimators: Poisson mixture MAP, DT-HMM, CT-HMM and PH-HMM

Every HMM fit starts from the Poisson mixture MAP labels, then alternates
forward-backward and the weighted M-step until the L1 change of
(beta, mu, sigma2) drops to the tolerance. States are relabelled by
decreasing emission mean after every M-step.

"""

import dataclasses
import logging
import typing
from configparser import ConfigParser

import numpy as np
from scipy import special

from .constants import (
    METHOD_TRANSITION_MODE,
    Method,
    RandomEffects,
    TransitionMode,
)
from .estep import (
    e_step,
    emission_log_probs,
    update_delta,
)
from .exceptions import (
    ConfigurationError,
    DegenerateEmissionError,
    DegenerateMixtureError,
    DomainError,
    PhHmmError,
    SingularDesignError,
)
from .model import (
    Chain,
    Diagnostics,
    ModelParams,
    PosteriorWeights,
    StateModel,
    assign_random_effects,
    chain_transition_matrices,
)
from . import (
    inference,
    mstep,
    regression,
)

logger = logging.getLogger(__name__)

DELTA_FLOOR = 1e-6
MIXTURE_COLLAPSE_GAP = 1e-6


@dataclasses.dataclass(frozen=True)
class EmConfig:
    method: Method = Method.PH
    tol: float = 1e-4
    max_iters: int = 500
    pooled: bool = True
    random_effects: typing.Optional[RandomEffects] = None
    n_states: int = 2
    weight_floor: float = 1e-12
    monotone_tol: float = 1e-8
    laplace_monotone_tol: float = 1e-3
    newton: regression.NewtonControl = regression.NewtonControl()
    frailty: regression.FrailtyControl = regression.FrailtyControl()
    ct_max_iter: int = 200
    compute_se: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'method', Method(self.method))
        if self.random_effects is not None:
            object.__setattr__(
                self, 'random_effects', RandomEffects(self.random_effects))
        if not self.tol > 0:
            raise ConfigurationError(f'tol must be positive, got {self.tol}')
        if self.max_iters < 1:
            raise ConfigurationError('max_iters must be at least 1')
        if self.n_states < 2:
            raise ConfigurationError('At least two states are required')
        if self.method == Method.CT and self.n_states != 2:
            raise ConfigurationError('CT-HMM supports two states only')
        if self.method == Method.CT and self.random_effects not in (
                None, RandomEffects.NONE):
            raise ConfigurationError('CT-HMM does not take random effects')

    @classmethod
    def from_config(cls, config: ConfigParser, **overrides) -> 'EmConfig':
        """Build from the ``[em]``, ``[newton]``, ``[frailty]`` and ``[ct]``
        sections, with keyword overrides taking precedence"""
        values = {
            'tol': config.getfloat('em', 'tol'),
            'max_iters': config.getint('em', 'max_iters'),
            'n_states': config.getint('em', 'n_states'),
            'weight_floor': config.getfloat('em', 'weight_floor'),
            'monotone_tol': config.getfloat('em', 'monotone_tol'),
            'laplace_monotone_tol': config.getfloat(
                'em', 'laplace_monotone_tol'),
            'newton': regression.NewtonControl(
                max_iter=config.getint('newton', 'max_iter'),
                tol=config.getfloat('newton', 'tol'),
                max_halvings=config.getint('newton', 'max_halvings'),
                separation_norm=config.getfloat('newton', 'separation_norm'),
            ),
            'frailty': regression.FrailtyControl(
                sigma2_floor=config.getfloat('frailty', 'sigma2_floor'),
                sigma2_init=config.getfloat('frailty', 'sigma2_init'),
                max_outer_iter=config.getint('frailty', 'max_outer_iter'),
                inner_tol=config.getfloat('frailty', 'inner_tol'),
            ),
            'ct_max_iter': config.getint('ct', 'max_iter'),
        }
        values.update(
            {key: value for key, value in overrides.items()
             if value is not None}
        )
        return cls(**values)

    @property
    def mstep_control(self) -> mstep.MStepControl:
        return mstep.MStepControl(
            newton=self.newton,
            frailty=self.frailty,
            weight_floor=self.weight_floor,
            ct_max_iter=self.ct_max_iter,
            guard_steps=True,
        )


@dataclasses.dataclass
class FitResult:
    method: Method
    params: ModelParams
    loglik_trace: typing.List[float]
    se: typing.List[np.ndarray]
    posterior: typing.List[PosteriorWeights]
    decoded: typing.List[np.ndarray]
    iterations: int
    converged: bool
    chain_ids: typing.List[str] = dataclasses.field(default_factory=list)
    distance_trace: typing.List[float] = dataclasses.field(
        default_factory=list)
    flags: typing.List[str] = dataclasses.field(default_factory=list)
    clamped: int = 0

    @property
    def log_lik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float('nan')

    @property
    def mode(self) -> TransitionMode:
        return METHOD_TRANSITION_MODE[self.method]


@dataclasses.dataclass
class PoissonMixture:
    mus: np.ndarray
    weights: np.ndarray
    responsibilities: np.ndarray
    log_lik: float
    iterations: int
    converged: bool


def _rank_split(ys: np.ndarray, n_states: int) -> np.ndarray:
    """Labels by count rank, state 0 holding the largest counts"""
    order = np.argsort(ys, kind='stable')
    labels = np.empty(ys.size, dtype=int)
    labels[order] = n_states - 1 - (
        np.arange(ys.size) * n_states // max(ys.size, 1))
    return labels


def poisson_mixture_em(
        ys,
        n_states: int = 2,
        tol: float = 1e-8,
        max_iters: int = 500,
) -> PoissonMixture:
    """EM for a Poisson mixture, components sorted by decreasing mean"""
    ys = np.asarray(ys, dtype=float)
    labels = _rank_split(ys, n_states)
    mus = np.array([
        ys[labels == state].mean() if np.any(labels == state) else 0.0
        for state in range(n_states)
    ])
    weights = np.full(n_states, 1.0 / n_states)
    converged = False
    iteration = 0
    log_lik = -np.inf
    responsibilities = np.eye(n_states)[labels]
    for iteration in range(1, max_iters + 1):
        joint = np.log(weights)[None, :] + emission_log_probs(ys, mus)
        log_norm = special.logsumexp(joint, axis=1)
        log_lik = float(log_norm.sum())
        responsibilities = np.exp(joint - log_norm[:, None])
        totals = responsibilities.sum(axis=0)
        if np.any(totals < mstep.STARVATION_WEIGHT):
            raise DegenerateMixtureError(
                'A mixture component lost all its weight')
        new_mus = responsibilities.T @ ys / totals
        new_weights = totals / ys.size
        change = np.abs(new_mus - mus).sum() + np.abs(
            new_weights - weights).sum()
        mus, weights = new_mus, new_weights
        if change <= tol:
            converged = True
            break
    order = np.argsort(-mus, kind='stable')
    mus, weights = mus[order], weights[order]
    responsibilities = responsibilities[:, order]
    if np.any(np.abs(np.diff(mus)) < MIXTURE_COLLAPSE_GAP):
        raise DegenerateMixtureError(
            f'Mixture components collapsed onto means {mus.tolist()}')
    return PoissonMixture(
        mus=mus,
        weights=weights,
        responsibilities=responsibilities,
        log_lik=log_lik,
        iterations=iteration,
        converged=converged,
    )


def _split(values: np.ndarray, chains: typing.Sequence[Chain]):
    bounds = np.cumsum([chain.times.size for chain in chains])[:-1]
    return np.split(values, bounds)


def hard_posteriors(labels: np.ndarray, n_states: int) -> PosteriorWeights:
    one_hot = np.eye(n_states)[labels]
    w = one_hot[:-1, :, None] * one_hot[1:, None, :]
    return PosteriorWeights(w=w, u=one_hot)


def _strip_random_effects(chains):
    return [dataclasses.replace(chain, z=None) for chain in chains]


def _initial_delta(responsibilities, chains) -> np.ndarray:
    rows = np.stack([r[0] for r in _split(responsibilities, chains)])
    rows = np.maximum(rows, DELTA_FLOOR)
    return rows / rows.sum(axis=1, keepdims=True)


def _hard_label_params(
        chains: typing.Sequence[Chain],
        labels: typing.Sequence[np.ndarray],
        mus: np.ndarray,
        delta0: np.ndarray,
        transition_method: Method,
        config: EmConfig,
) -> typing.Tuple[ModelParams, mstep.MStepResult,
                  typing.List[PosteriorWeights], typing.List[str]]:
    """Fixed-effect transition fits on hard labels"""
    n_states = mus.size
    p = chains[0].p
    flags = []
    start = ModelParams(
        states=[
            StateModel(beta=np.zeros((n_states - 1, p)), mu=mu)
            for mu in mus
        ],
        delta0=delta0,
    )
    stripped = _strip_random_effects(chains)
    posteriors = [hard_posteriors(l, n_states) for l in labels]
    try:
        result = mstep.maximize_transitions(
            stripped, posteriors, start, transition_method,
            dataclasses.replace(config.mstep_control, guard_steps=False)
        )
    except SingularDesignError as err:
        logger.warning('Hard-label transition fit failed: %s', err)
        flags.append(f'hard-label transition fit failed: {err}')
        return start, mstep.MStepResult(start.states, {}), posteriors, flags
    flags.extend(result.flags)
    states = [
        dataclasses.replace(state, mu=float(mu))
        for state, mu in zip(result.states, mus)
    ]
    return ModelParams(states, delta0), result, posteriors, flags


def map_decode(u: np.ndarray) -> np.ndarray:
    """Per-record argmax of the posteriors, ties going to the lower state"""
    return np.argmax(np.asarray(u), axis=1)


def viterbi_decode(
        chain: Chain,
        params: ModelParams,
        mode: TransitionMode,
        chain_index: int = 0,
) -> np.ndarray:
    """Most probable state path, computed in log space"""
    gammas = chain_transition_matrices(chain, params, mode)
    log_emissions = emission_log_probs(chain.y, params.mus)
    with np.errstate(divide='ignore'):
        log_gammas = np.log(gammas)
        score = np.log(params.initial_distribution(chain_index)) + \
            log_emissions[0]
    n_records, n_states = log_emissions.shape
    pointers = np.zeros((n_records, n_states), dtype=int)
    for j in range(1, n_records):
        candidates = score[:, None] + log_gammas[j - 1]
        pointers[j] = np.argmax(candidates, axis=0)
        score = candidates[pointers[j], np.arange(n_states)] + \
            log_emissions[j]
    if np.all(np.isneginf(score)):
        raise DegenerateEmissionError(n_records - 1, chain.id)
    path = np.empty(n_records, dtype=int)
    path[-1] = int(np.argmax(score))
    for j in range(n_records - 1, 0, -1):
        path[j - 1] = pointers[j, path[j]]
    return path


def accuracy(true_labels, decoded) -> float:
    """Fraction of matching labels; both sequences use the mean-ordered
    labelling (state 0 has the largest emission mean)"""
    if isinstance(true_labels, (list, tuple)) and true_labels and \
            np.ndim(true_labels[0]) > 0:
        true_labels = np.concatenate(true_labels)
        decoded = np.concatenate(decoded)
    true_labels = np.asarray(true_labels)
    decoded = np.asarray(decoded)
    if true_labels.shape != decoded.shape:
        raise ValueError(
            f'Label sequences differ in length: {true_labels.size} vs '
            f'{decoded.size}'
        )
    if true_labels.size == 0:
        raise ValueError('Cannot score empty label sequences')
    return float(np.mean(true_labels == decoded))


def _check_chains(chains: typing.Sequence[Chain]):
    if not chains:
        raise DomainError('At least one chain is required')
    dims = {(chain.p, chain.q) for chain in chains}
    if len(dims) != 1:
        raise ConfigurationError(
            f'Chains disagree on covariate dimensions: {sorted(dims)}')


def pmm_transition_method(chains: typing.Sequence[Chain]) -> Method:
    """Logistic exits for unit-spaced chains, exponential PH otherwise"""
    discrete = all(np.all(chain.delta == 1.0) for chain in chains)
    return Method.DT if discrete else Method.PH


def fit_pmm(
        chains: typing.Sequence[Chain],
        config: EmConfig = EmConfig(method=Method.PMM),
        transition_method: typing.Optional[Method] = None,
) -> FitResult:
    """Two-step estimator: Poisson mixture, MAP labels, hard-label fits

    Transition models are fitted with fixed effects only, by default with
    the model matching the event-time mode of the chains.

    """

    chains = list(chains)
    _check_chains(chains)
    if transition_method is None:
        transition_method = pmm_transition_method(chains)
    transition_method = Method(transition_method)
    ys = np.concatenate([chain.y for chain in chains])
    mixture = poisson_mixture_em(ys, config.n_states)
    labels = _split(map_decode(mixture.responsibilities), chains)
    delta0 = _initial_delta(mixture.responsibilities, chains)
    params, result, hard, flags = _hard_label_params(
        chains, labels, mixture.mus, delta0, transition_method, config)
    se = []
    if config.compute_se:
        se = inference.fit_standard_errors(
            _strip_random_effects(chains), hard, params, transition_method,
            result, config.mstep_control
        )
    posterior = [
        PosteriorWeights(w=h.w, u=r)
        for h, r in zip(hard, _split(mixture.responsibilities, chains))
    ]
    return FitResult(
        method=Method.PMM,
        params=params,
        loglik_trace=[mixture.log_lik],
        se=se,
        posterior=posterior,
        decoded=labels,
        iterations=mixture.iterations,
        converged=mixture.converged,
        chain_ids=[chain.id for chain in chains],
        flags=flags,
    )


def _initial_params(
        chains: typing.Sequence[Chain],
        config: EmConfig,
        flags: typing.List[str],
) -> ModelParams:
    ys = np.concatenate([chain.y for chain in chains])
    n_states = config.n_states
    try:
        mixture = poisson_mixture_em(ys, n_states)
        responsibilities = mixture.responsibilities
        mus = mixture.mus
    except DegenerateMixtureError as err:
        logger.warning('%s; falling back to a count-rank split', err)
        flags.append('mixture collapse at initialisation, rank split used')
        rank_labels = _rank_split(ys, n_states)
        responsibilities = np.eye(n_states)[rank_labels]
        mus = np.array([
            ys[rank_labels == state].mean() for state in range(n_states)])
    labels = _split(map_decode(responsibilities), chains)
    delta0 = _initial_delta(responsibilities, chains)
    params, _, _, fit_flags = _hard_label_params(
        chains, labels, mus, delta0, config.method, config)
    flags.extend(fit_flags)
    q = chains[0].q
    if not q:
        return params
    states = [
        dataclasses.replace(
            state,
            b=np.zeros((n_states - 1, q)),
            sigma2=np.full(n_states - 1, config.frailty.sigma2_init),
        ) for state in params.states
    ]
    return ModelParams(states, params.delta0)


def parameter_distance(old: ModelParams, new: ModelParams) -> float:
    return float(np.abs(new.vector() - old.vector()).sum())


def _check_monotone(
        trace: typing.Sequence[float],
        tolerance: float,
        flags: typing.List[str],
):
    drops = np.diff(np.asarray(trace))
    worst = float(drops.min()) if drops.size else 0.0
    if worst < -tolerance:
        logger.warning(
            'Log-likelihood decreased by %.3g during EM', -worst)
        flags.append(f'log-likelihood decreased by {-worst:.3g}')


def fit_em(
        chains: typing.Sequence[Chain],
        config: EmConfig = EmConfig(),
) -> FitResult:
    chains = list(chains)
    if config.random_effects is not None:
        chains = assign_random_effects(chains, config.random_effects)
    _check_chains(chains)
    if not config.pooled and len(chains) > 1:
        raise ConfigurationError(
            'Unpooled fits take a single chain; use fit_individuals')
    if config.method == Method.PMM:
        return fit_pmm(chains, config)
    if config.method == Method.CT and chains[0].q:
        raise ConfigurationError('CT-HMM does not take random effects')
    if config.method == Method.DT and config.n_states > 2 and chains[0].q:
        raise ConfigurationError(
            'DT-HMM with more than two states does not take random effects')
    mode = METHOD_TRANSITION_MODE[config.method]
    control = config.mstep_control
    flags = []
    diagnostics = Diagnostics()
    params = _initial_params(chains, config, flags)
    trace, distances = [], []
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iters + 1):
        expectation = e_step(chains, params, mode, diagnostics)
        trace.append(expectation.log_lik)
        delta0 = update_delta(expectation.results)
        new_params, result = mstep.maximize(
            chains, expectation.posteriors, params, config.method, delta0,
            control, iteration
        )
        for flag in result.flags:
            if flag not in flags:
                flags.append(flag)
        new_params = new_params.sorted_by_mu()
        distance = parameter_distance(params, new_params)
        distances.append(distance)
        params = new_params
        logger.debug(
            'EM iteration %d: log-lik %.6f, change %.3g',
            iteration, trace[-1], distance
        )
        if distance <= config.tol:
            converged = True
            break
    if not converged:
        logger.warning(
            'EM stopped after %d iterations without converging',
            config.max_iters
        )
        flags.append(f'not converged after {config.max_iters} iterations')
    final = e_step(chains, params, mode, diagnostics)
    trace.append(final.log_lik)
    monotone_tol = config.laplace_monotone_tol if chains[0].q \
        else config.monotone_tol
    _check_monotone(trace, monotone_tol, flags)
    se = []
    if config.compute_se:
        try:
            se = inference.fit_standard_errors(
                chains, final.posteriors, params, config.method, None,
                control
            )
        except PhHmmError as err:
            logger.warning('Standard errors unavailable: %s', err)
            flags.append(f'standard errors unavailable: {err}')
    if diagnostics.clamped:
        flags.append(f'{diagnostics.clamped} linear predictor(s) clamped')
    return FitResult(
        method=config.method,
        params=params,
        loglik_trace=trace,
        se=se,
        posterior=final.posteriors,
        decoded=[map_decode(post.u) for post in final.posteriors],
        iterations=iteration,
        converged=converged,
        chain_ids=[chain.id for chain in chains],
        distance_trace=distances,
        flags=flags,
        clamped=diagnostics.clamped,
    )


@dataclasses.dataclass
class IndividualFits:
    results: typing.Dict[str, FitResult]
    failures: typing.Dict[str, str]


def fit_individuals(
        chains: typing.Sequence[Chain],
        config: EmConfig = EmConfig(),
) -> IndividualFits:
    """One unpooled model per chain; failing chains are reported, not
    raised"""
    results, failures = {}, {}
    single = dataclasses.replace(config, pooled=True)
    for chain in chains:
        try:
            results[chain.id] = fit_em([chain], single)
        except PhHmmError as err:
            logger.warning('Fit of chain %r failed: %s', chain.id, err)
            failures[chain.id] = str(err)
    return IndividualFits(results=results, failures=failures)
