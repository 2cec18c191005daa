"""Observed information, asymptotic standard errors and shrinkage checks

For a weighted exponential-family fit with random intercepts the observed
information of ``(beta, b)`` is

    U' diag(w * psi''(eta)) U + diag(0, I / sigma2)

where ``U`` stacks the fixed and random-effect columns of every augmented
row. Standard errors are reported for ``beta`` only.

"""

import dataclasses
import logging
import typing

import numpy as np
import pandas as pd
from scipy import linalg

from .constants import Method
from .exceptions import SingularInformationError
from .model import (
    Chain,
    ModelParams,
    PosteriorWeights,
    exit_destinations,
    ph_penalty,
)
from . import (
    mstep,
    regression,
)

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


@dataclasses.dataclass
class InformationMatrix:
    matrix: np.ndarray
    beta_block_inverse: np.ndarray
    p: int
    condition_number: float


def invert_information(matrix: np.ndarray) -> typing.Tuple[np.ndarray, float]:
    matrix = 0.5 * (matrix + matrix.T)
    condition_number = float(np.linalg.cond(matrix))
    if condition_number > CONDITION_LIMIT:
        logger.warning(
            'Information matrix is ill-conditioned (condition number %.3g)',
            condition_number
        )
    try:
        factor = linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        eigenvalues, eigenvectors = linalg.eigh(matrix)
        raise SingularInformationError(
            f'Information matrix is not positive definite (smallest '
            f'eigenvalue {eigenvalues[0]:.3g})',
            direction=eigenvectors[:, 0],
        )
    inverse = linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return inverse, condition_number


def information_from_matrix(
        matrix,
        p: typing.Optional[int] = None,
) -> InformationMatrix:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    p = matrix.shape[0] if p is None else p
    inverse, condition_number = invert_information(matrix)
    return InformationMatrix(
        matrix=matrix,
        beta_block_inverse=inverse[:p, :p],
        p=p,
        condition_number=condition_number,
    )


def observed_information(
        rows: regression.AugmentedRows,
        fit,
        family: regression.ExponentialFamily = regression.PH,
) -> InformationMatrix:
    """Information of ``(beta, b)`` at a fitted exit model

    ``fit`` needs ``beta`` and may carry ``b`` and ``sigma2``.

    """

    beta = np.atleast_1d(np.asarray(fit.beta, dtype=float))
    b = getattr(fit, 'b', None)
    sigma2 = getattr(fit, 'sigma2', None)
    p = beta.size
    if b is not None and rows.q:
        design = rows.design
        eta = rows.x @ beta + rows.z @ np.asarray(b, dtype=float)
    else:
        design = rows.x
        eta = rows.x @ beta
    curvature = regression.curvature_terms(rows, family, eta)
    matrix = design.T @ (curvature[:, None] * design)
    if design.shape[1] > p:
        matrix[p:, p:] += np.eye(design.shape[1] - p) / float(sigma2)
    return information_from_matrix(matrix, p)


def asymptotic_se(info) -> np.ndarray:
    """Square roots of the beta block of the inverse information"""
    if not isinstance(info, InformationMatrix):
        info = information_from_matrix(info)
    variances = np.diag(info.beta_block_inverse)
    if np.any(variances < 0):
        raise SingularInformationError(
            'Negative variance estimate, the fit is not at a maximum')
    return np.sqrt(variances)


def numerical_hessian(
        fun: typing.Callable[[np.ndarray], float],
        x,
        h: float = 1e-5,
) -> np.ndarray:
    """Central-difference Hessian"""
    x = np.asarray(x, dtype=float)
    size = x.size
    hessian = np.empty((size, size))
    steps = np.eye(size) * h
    for i in range(size):
        for j in range(i, size):
            value = (
                fun(x + steps[i] + steps[j])
                - fun(x + steps[i] - steps[j])
                - fun(x - steps[i] + steps[j])
                + fun(x - steps[i] - steps[j])
            ) / (4 * h * h)
            hessian[i, j] = hessian[j, i] = value
    return hessian


@dataclasses.dataclass
class ExitEstimate:
    beta: np.ndarray
    b: typing.Optional[np.ndarray] = None
    sigma2: typing.Optional[float] = None


def _safe_se(info_builder, size: int, label: str) -> np.ndarray:
    try:
        return asymptotic_se(info_builder())
    except SingularInformationError as err:
        logger.warning('No standard errors for %s: %s', label, err)
        return np.full(size, np.nan)


def fit_standard_errors(
        chains: typing.Sequence[Chain],
        posteriors: typing.Sequence[PosteriorWeights],
        params: ModelParams,
        method: Method,
        result: typing.Optional[mstep.MStepResult] = None,
        control: mstep.MStepControl = mstep.MStepControl(),
) -> typing.List[np.ndarray]:
    """Standard errors of every exit model, one (K-1, p) array per state

    PH and DT fits use the observed information of their weighted
    likelihood; CT fits use a finite-difference Hessian of the expected
    complete-data log-likelihood.

    """

    method = Method(method)
    n_states, p = params.n_states, params.p
    if method == Method.CT:
        x = np.vstack([chain.design for chain in chains])
        delta = np.concatenate([chain.delta for chain in chains])
        w = np.concatenate([post.w for post in posteriors])
        flat = params.betas[:, 0, :].ravel()
        hessian = numerical_hessian(
            lambda beta: mstep.ct_expected_loglik(beta, x, delta, w), flat)
        se = _safe_se(
            lambda: information_from_matrix(-hessian), 2 * p, 'CT generator')
        return [se[state * p:(state + 1) * p][None, :] for state in range(2)]
    if method == Method.DT and n_states > 2:
        x = np.vstack([chain.design for chain in chains])
        w = np.concatenate([post.w for post in posteriors])
        result_se = []
        for state in range(n_states):
            weights = w[:, state, [state] + exit_destinations(
                state, n_states)]
            beta = params.states[state].beta
            _, _, information = regression.multinomial_derivatives(
                x, weights, beta)
            se = _safe_se(
                lambda: information_from_matrix(information),
                beta.size, f'exits of state {state + 1}'
            )
            result_se.append(se.reshape(beta.shape))
        return result_se
    family = regression.LOGISTIC if method == Method.DT else regression.PH
    result_se = []
    for state in range(n_states):
        state_model = params.states[state]
        rows_se = []
        for index, destination in enumerate(
                exit_destinations(state, n_states)):
            fitted = None if result is None else result.fits.get(
                (state, destination))
            if fitted is not None and fitted.rows is not None:
                rows = fitted.rows
            else:
                rows = mstep.augment_all(
                    chains, posteriors, state, destination,
                    control.weight_floor
                )
            estimate = ExitEstimate(
                beta=state_model.beta[index],
                b=None if state_model.b is None else state_model.b[index],
                sigma2=None if state_model.sigma2 is None else float(
                    state_model.sigma2[index]),
            )
            rows_se.append(_safe_se(
                lambda: observed_information(rows, estimate, family),
                p, f'exit {state + 1}->{destination + 1}'
            ))
        result_se.append(np.stack(rows_se))
    return result_se


@dataclasses.dataclass
class ShrinkageReport:
    logistic_beta: np.ndarray
    ph_beta: np.ndarray
    penalty: float
    identity_residual: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'coefficient': [f'beta_{i}' for i in range(self.ph_beta.size)],
            'logistic': self.logistic_beta,
            'ph': self.ph_beta,
        })


def shrinkage_report(
        rows: regression.AugmentedRows,
        control: regression.NewtonControl = regression.NewtonControl(),
) -> ShrinkageReport:
    """Fit logistic and exponential PH models to the same discrete rows

    The penalty and the objective identity are evaluated at the PH
    estimate.

    """

    logistic = regression.fit_weighted_logistic(rows, control)
    ph = regression.fit_weighted_exp_ph(rows, control)
    eta = rows.x @ ph.beta
    return ShrinkageReport(
        logistic_beta=logistic.beta,
        ph_beta=ph.beta,
        penalty=ph_penalty(eta, rows.weight),
        identity_residual=regression.objective_identity_residual(
            rows, ph.beta),
    )
