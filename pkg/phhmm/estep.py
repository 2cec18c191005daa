"""Scaled forward-backward recursions

Forward vectors are normalised at every record and the normalisers are
accumulated on the log scale. Emission probabilities are rescaled per record
by their largest entry before entering the recursion, so posteriors are
unaffected by the size of the counts.

"""

import dataclasses
import logging
import typing

import numpy as np
from scipy import special

from .constants import TransitionMode
from .exceptions import (
    DegenerateEmissionError,
    DomainError,
)
from .model import (
    Chain,
    Diagnostics,
    ModelParams,
    PosteriorWeights,
    chain_transition_matrices,
)

logger = logging.getLogger(__name__)


def emission_log_probs(ys, mus) -> np.ndarray:
    """Poisson log-pmf of each count under each state, shape (n, K)"""
    ys = np.atleast_1d(np.asarray(ys))
    mus = np.asarray(mus, dtype=float)
    if np.any(ys < 0):
        raise DomainError('Counts must be non-negative')
    if np.any(mus < 0):
        raise DomainError('Emission means must be non-negative')
    ys = ys.astype(float)[:, None]
    return special.xlogy(ys, mus[None, :]) - mus[None, :] - special.gammaln(
        ys + 1.0)


def emission_matrix(y: int, mus) -> np.ndarray:
    log_probs = emission_log_probs([y], mus)[0]
    if np.all(np.isneginf(log_probs)):
        raise DegenerateEmissionError()
    return np.diag(np.exp(log_probs))


@dataclasses.dataclass
class ForwardBackwardResult:
    """Scaled recursions of one chain

    ``alpha[j]`` sums to one. ``backward[j]`` is the backward vector divided
    by the product of the normalisers after ``j`` and ``nu[j]`` folds in the
    emission at ``j``, so that ``backward[j - 1] = gammas[j - 1] @ nu[j]``.

    """

    alpha: np.ndarray
    nu: np.ndarray
    backward: np.ndarray
    gammas: np.ndarray
    scale_factors: np.ndarray
    offsets: np.ndarray
    log_lik: float

    @property
    def n_records(self) -> int:
        return self.alpha.shape[0]

    @property
    def u(self) -> np.ndarray:
        u = self.alpha * self.backward
        return u / u.sum(axis=1, keepdims=True)

    def likelihood_identity(self) -> np.ndarray:
        """``log(alpha_j' Gamma_(j+1) nu_(j+1))`` after unscaling, per record

        Every entry equals the chain log-likelihood.

        """

        inner = np.einsum(
            'jq,jqr,jr->j', self.alpha[:-1], self.gammas, self.nu[1:])
        return np.log(inner) + self.log_lik


def forward_backward(
        chain: Chain,
        params: ModelParams,
        mode: TransitionMode,
        chain_index: int = 0,
        diagnostics: typing.Optional[Diagnostics] = None,
        initial: typing.Optional[np.ndarray] = None,
) -> ForwardBackwardResult:
    initial = params.initial_distribution(chain_index) if initial is None \
        else np.asarray(initial, dtype=float)
    gammas = chain_transition_matrices(chain, params, mode, diagnostics)
    log_probs = emission_log_probs(chain.y, params.mus)
    offsets = log_probs.max(axis=1)
    degenerate = np.flatnonzero(np.isneginf(offsets))
    if degenerate.size:
        raise DegenerateEmissionError(int(degenerate[0]), chain.id)
    emissions = np.exp(log_probs - offsets[:, None])
    n_records, n_states = emissions.shape
    alpha = np.empty((n_records, n_states))
    scale_factors = np.empty(n_records)
    current = initial * emissions[0]
    for j in range(n_records):
        if j > 0:
            current = (alpha[j - 1] @ gammas[j - 1]) * emissions[j]
        total = current.sum()
        if not total > 0:
            raise DegenerateEmissionError(j, chain.id)
        scale_factors[j] = total
        alpha[j] = current / total
    backward = np.ones((n_records, n_states))
    nu = np.empty((n_records, n_states))
    nu[-1] = emissions[-1] / scale_factors[-1]
    for j in range(n_records - 1, 0, -1):
        backward[j - 1] = gammas[j - 1] @ nu[j]
        nu[j - 1] = emissions[j - 1] * backward[j - 1] / scale_factors[j - 1]
    log_lik = float(np.log(scale_factors).sum() + offsets.sum())
    return ForwardBackwardResult(
        alpha=alpha,
        nu=nu,
        backward=backward,
        gammas=gammas,
        scale_factors=scale_factors,
        offsets=offsets,
        log_lik=log_lik,
    )


def transition_posteriors(fb: ForwardBackwardResult) -> PosteriorWeights:
    """Joint and marginal state posteriors from the scaled recursions"""
    w = fb.alpha[:-1, :, None] * fb.gammas * fb.nu[1:, None, :]
    totals = w.sum(axis=(1, 2), keepdims=True)
    if w.shape[0]:
        w = w / totals
    return PosteriorWeights(w=w, u=fb.u)


def multinomial_estep_weight(lambdas) -> np.ndarray:
    """Shares of staying and of moving to each destination

    Returns ``[1, lambda_1, ..., lambda_m] / (1 + sum(lambda))``.

    """

    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if np.any(lambdas < 0):
        raise DomainError('Transition rates must be non-negative')
    shares = np.concatenate([[1.0], lambdas])
    return shares / shares.sum()


def update_delta(results: typing.Sequence[ForwardBackwardResult]) -> np.ndarray:
    """New initial distributions, one row per chain

    ``delta_i`` is proportional to ``(delta_i P(t_i0)) * (Gamma(t_i1) nu(t_i1))``
    which is the posterior of the state at the anchor record.

    """

    return np.stack([fb.u[0] for fb in results])


@dataclasses.dataclass
class EStepResult:
    results: typing.List[ForwardBackwardResult]
    posteriors: typing.List[PosteriorWeights]

    @property
    def log_lik(self) -> float:
        return float(sum(fb.log_lik for fb in self.results))


def e_step(
        chains: typing.Sequence[Chain],
        params: ModelParams,
        mode: TransitionMode,
        diagnostics: typing.Optional[Diagnostics] = None,
) -> EStepResult:
    """Run the recursions over every chain; chains are independent"""
    results = [
        forward_backward(chain, params, mode, index, diagnostics)
        for index, chain in enumerate(chains)
    ]
    return EStepResult(
        results=results,
        posteriors=[transition_posteriors(fb) for fb in results],
    )
