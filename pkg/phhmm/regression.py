"""Weighted regression fits on augmented survival rows

Every fit maximises a weighted exponential-family log-likelihood

    sum(w * (e * eta - psi(eta)))

where ``e`` flags event copies, ``psi(eta) = delta * exp(eta)`` for the
exponential proportional hazards model and ``psi(eta) = log(1 + exp(eta))``
for logistic regression. Random intercepts are integrated out with a Laplace
approximation.

"""

import dataclasses
import logging
import typing

import numpy as np
from scipy import (
    linalg,
    optimize,
    special,
)

from .constants import ETA_CLAMP
from .exceptions import (
    NonConvergenceError,
    SingularDesignError,
)
from .model import ph_penalty

logger = logging.getLogger(__name__)


class ExponentialFamily:
    name: str = ''

    def cumulant(self, eta: np.ndarray, exposure: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean(self, eta: np.ndarray, exposure: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def variance(self, eta: np.ndarray, exposure: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f'{self.__class__.__name__}()'


class ProportionalHazardsFamily(ExponentialFamily):
    name = 'ph'

    def cumulant(self, eta, exposure):
        return exposure * np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))

    mean = cumulant
    variance = cumulant


class LogisticFamily(ExponentialFamily):
    name = 'logistic'

    def cumulant(self, eta, exposure):
        return np.logaddexp(0.0, eta)

    def mean(self, eta, exposure):
        return special.expit(eta)

    def variance(self, eta, exposure):
        prob = special.expit(eta)
        return prob * (1.0 - prob)


PH = ProportionalHazardsFamily()
LOGISTIC = LogisticFamily()


@dataclasses.dataclass
class AugmentedRows:
    """Event and censored copies of observation records

    Rows come in (event, censored) pairs per source record unless one of the
    pair fell below the weight floor. ``chain`` and ``record`` locate the
    source record.

    """

    x: np.ndarray
    z: np.ndarray
    delta: np.ndarray
    is_event: np.ndarray
    weight: np.ndarray
    chain: typing.Optional[np.ndarray] = None
    record: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        n_rows = self.x.shape[0]
        if self.z is None:
            self.z = np.zeros((n_rows, 0))
        else:
            self.z = np.asarray(self.z, dtype=float)
            if self.z.ndim != 2:
                self.z = self.z.reshape(n_rows, -1)
        self.delta = np.broadcast_to(
            np.asarray(self.delta, dtype=float), (n_rows,)).copy()
        self.is_event = np.asarray(self.is_event, dtype=bool).reshape(n_rows)
        self.weight = np.asarray(self.weight, dtype=float).reshape(n_rows)
        self.chain = np.zeros(n_rows, dtype=int) if self.chain is None \
            else np.asarray(self.chain, dtype=int).reshape(n_rows)
        self.record = np.zeros(n_rows, dtype=int) if self.record is None \
            else np.asarray(self.record, dtype=int).reshape(n_rows)

    def __len__(self):
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def events(self) -> np.ndarray:
        return self.is_event.astype(float)

    @property
    def design(self) -> np.ndarray:
        """Fixed and random-effect columns side by side"""
        return np.hstack([self.x, self.z])

    @classmethod
    def empty(cls, p: int, q: int = 0) -> 'AugmentedRows':
        return cls(
            x=np.zeros((0, p)),
            z=np.zeros((0, q)),
            delta=np.zeros(0),
            is_event=np.zeros(0, dtype=bool),
            weight=np.zeros(0),
        )

    @classmethod
    def concatenate(
            cls,
            parts: typing.Sequence['AugmentedRows'],
    ) -> 'AugmentedRows':
        if not parts:
            raise ValueError('Nothing to concatenate')
        return cls(
            x=np.vstack([part.x for part in parts]),
            z=np.vstack([part.z for part in parts]),
            delta=np.concatenate([part.delta for part in parts]),
            is_event=np.concatenate([part.is_event for part in parts]),
            weight=np.concatenate([part.weight for part in parts]),
            chain=np.concatenate([part.chain for part in parts]),
            record=np.concatenate([part.record for part in parts]),
        )


def weighted_loglik(
        rows: AugmentedRows,
        family: ExponentialFamily,
        eta: np.ndarray,
) -> float:
    return float(np.sum(
        rows.weight * (rows.events * eta - family.cumulant(eta, rows.delta))))


def score_terms(rows, family, eta) -> np.ndarray:
    return rows.weight * (rows.events - family.mean(eta, rows.delta))


def curvature_terms(rows, family, eta) -> np.ndarray:
    return rows.weight * family.variance(eta, rows.delta)


def objective_identity_residual(rows: AugmentedRows, beta) -> float:
    """``J_PH - J_log - penalty`` for discrete rows, zero up to rounding"""
    eta = rows.x @ np.atleast_1d(beta)
    j_ph = -weighted_loglik(rows, PH, eta)
    j_log = -weighted_loglik(rows, LOGISTIC, eta)
    return j_ph - j_log - ph_penalty(eta, rows.weight)


@dataclasses.dataclass(frozen=True)
class NewtonControl:
    max_iter: int = 100
    tol: float = 1e-10
    max_halvings: int = 30
    separation_norm: typing.Optional[float] = 50.0


@dataclasses.dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    information: np.ndarray
    iterations: int
    converged: bool
    separated: bool = False
    trace: typing.List[typing.Tuple[int, float, float]] = dataclasses.field(
        default_factory=list)


def newton_maximize(
        evaluate: typing.Callable[
            [np.ndarray], typing.Tuple[float, np.ndarray, np.ndarray]],
        start: np.ndarray,
        control: NewtonControl = NewtonControl(),
        what: str = 'model',
) -> NewtonResult:
    """Newton-Raphson with step halving for a concave objective

    ``evaluate`` returns the objective, its gradient and the negative
    Hessian.

    """

    x = np.array(start, dtype=float)
    value, gradient, information = evaluate(x)
    trace = []
    for iteration in range(control.max_iter + 1):
        grad_norm = float(np.max(np.abs(gradient))) if gradient.size else 0.0
        trace.append((iteration, value, grad_norm))
        if grad_norm < control.tol:
            return NewtonResult(
                x, value, gradient, information, iteration, True, trace=trace)
        if iteration == control.max_iter:
            break
        try:
            step = linalg.solve(information, gradient, assume_a='pos')
        except (linalg.LinAlgError, ValueError) as err:
            raise SingularDesignError(
                f'Information matrix of the {what} fit is singular: {err}')
        decrement = float(gradient @ step)
        slack = 64 * np.finfo(float).eps * max(1.0, abs(value))
        scale = 1.0
        for _ in range(control.max_halvings + 1):
            candidate = x + scale * step
            evaluation = evaluate(candidate)
            if evaluation[0] >= value - slack:
                break
            scale /= 2
        else:
            if decrement <= 1e-12 * max(1.0, abs(value)):
                # no measurable ascent left
                return NewtonResult(
                    x, value, gradient, information, iteration, True,
                    trace=trace
                )
            raise NonConvergenceError(
                f'Step halving failed to improve the {what} fit at '
                f'iteration {iteration}',
                trace
            )
        x = candidate
        value, gradient, information = evaluation
        if control.separation_norm is not None and np.max(
                np.abs(x)) > control.separation_norm:
            logger.warning(
                'Coefficients of the %s fit exceed %s in norm, data looks '
                'separated', what, control.separation_norm
            )
            return NewtonResult(
                x, value, gradient, information, iteration + 1, False,
                separated=True, trace=trace
            )
    raise NonConvergenceError(
        f'The {what} fit did not converge after {control.max_iter} '
        f'iterations',
        trace
    )


@dataclasses.dataclass
class GlmFit:
    beta: np.ndarray
    log_lik: float
    gradient: np.ndarray
    information: np.ndarray
    iterations: int
    converged: bool
    separated: bool
    family: str


def _check_design(design: np.ndarray, weight: np.ndarray, what: str):
    active = weight > 0
    if not np.any(active):
        raise SingularDesignError(f'The {what} fit has no positive weights')
    if np.linalg.matrix_rank(design[active]) < design.shape[1]:
        raise SingularDesignError(
            f'Design of the {what} fit is rank deficient')


def fit_weighted_glm(
        rows: AugmentedRows,
        family: ExponentialFamily,
        control: NewtonControl = NewtonControl(),
        beta0: typing.Optional[np.ndarray] = None,
        offset: typing.Optional[np.ndarray] = None,
) -> GlmFit:
    _check_design(rows.x, rows.weight, family.name)
    offset = np.zeros(len(rows)) if offset is None else offset

    def evaluate(beta):
        eta = rows.x @ beta + offset
        gradient = rows.x.T @ score_terms(rows, family, eta)
        information = rows.x.T @ (
            curvature_terms(rows, family, eta)[:, None] * rows.x)
        return weighted_loglik(rows, family, eta), gradient, information

    start = np.zeros(rows.p) if beta0 is None else beta0
    result = newton_maximize(evaluate, start, control, family.name)
    return GlmFit(
        beta=result.x,
        log_lik=result.value,
        gradient=result.gradient,
        information=result.information,
        iterations=result.iterations,
        converged=result.converged,
        separated=result.separated,
        family=family.name,
    )


def fit_weighted_exp_ph(rows, control=NewtonControl(), beta0=None) -> GlmFit:
    """Weighted exponential PH fit, fixed effects only

    For an intercept-only design this gives the occurrence/exposure rate
    ``log(sum(w * e) / sum(w * delta))``.

    """

    return fit_weighted_glm(rows, PH, control, beta0)


def fit_weighted_logistic(rows, control=NewtonControl(), beta0=None):
    return fit_weighted_glm(rows, LOGISTIC, control, beta0)


@dataclasses.dataclass(frozen=True)
class FrailtyControl:
    sigma2_floor: float = 1e-6
    sigma2_init: float = 1.0
    max_outer_iter: int = 200
    inner_tol: float = 1e-8
    inner_max_iter: int = 100


@dataclasses.dataclass
class FrailtyFit:
    beta: np.ndarray
    b: np.ndarray
    sigma2: float
    laplace_loglik: float
    converged: bool
    iterations: int
    at_floor: bool = False
    inner_gradient_norm: float = 0.0
    family: str = PH.name


@dataclasses.dataclass
class PosteriorMode:
    b: np.ndarray
    penalized_loglik: float
    hessian: np.ndarray
    gradient_norm: float
    converged: bool


def posterior_mode(
        rows: AugmentedRows,
        family: ExponentialFamily,
        beta: np.ndarray,
        sigma2: float,
        b0: typing.Optional[np.ndarray] = None,
        control: FrailtyControl = FrailtyControl(),
) -> PosteriorMode:
    """Random intercepts maximising the penalised log-likelihood"""
    fixed = rows.x @ beta
    identity = np.eye(rows.q)

    def evaluate(b):
        eta = fixed + rows.z @ b
        value = weighted_loglik(rows, family, eta) - b @ b / (2 * sigma2)
        gradient = rows.z.T @ score_terms(rows, family, eta) - b / sigma2
        hessian = rows.z.T @ (
            curvature_terms(rows, family, eta)[:, None] * rows.z
        ) + identity / sigma2
        return value, gradient, hessian

    inner_control = NewtonControl(
        max_iter=control.inner_max_iter,
        tol=control.inner_tol * 1e-3,
        separation_norm=None,
    )
    start = np.zeros(rows.q) if b0 is None else b0
    result = newton_maximize(
        evaluate, start, inner_control, 'random intercept')
    grad_norm = float(np.max(np.abs(result.gradient))) if rows.q else 0.0
    return PosteriorMode(
        b=result.x,
        penalized_loglik=result.value,
        hessian=result.information,
        gradient_norm=grad_norm,
        converged=grad_norm < control.inner_tol,
    )


def laplace_log_marginal(
        rows: AugmentedRows,
        family: ExponentialFamily,
        beta: np.ndarray,
        sigma2: float,
        b0: typing.Optional[np.ndarray] = None,
        control: FrailtyControl = FrailtyControl(),
) -> typing.Tuple[float, PosteriorMode]:
    """Laplace approximation of the log-likelihood with b integrated out

    ``h(b_hat) - q/2 log(sigma2) - 1/2 log det(Z'DZ + I/sigma2)``

    """

    mode = posterior_mode(rows, family, beta, sigma2, b0, control)
    factor, _ = linalg.cho_factor(mode.hessian, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(factor)))
    value = (
        mode.penalized_loglik
        - 0.5 * rows.q * np.log(sigma2)
        - 0.5 * log_det
    )
    return float(value), mode


def fit_weighted_glm_frailty(
        rows: AugmentedRows,
        family: ExponentialFamily,
        control: FrailtyControl = FrailtyControl(),
        newton: NewtonControl = NewtonControl(),
        beta0: typing.Optional[np.ndarray] = None,
        b0: typing.Optional[np.ndarray] = None,
        sigma2_0: typing.Optional[float] = None,
        fixed_sigma2: typing.Optional[float] = None,
) -> FrailtyFit:
    """Maximise the Laplace marginal likelihood over beta and log(sigma2)

    The random intercepts are re-solved by Newton at every outer evaluation,
    always from the same start so the outer objective is deterministic.

    """

    if rows.q < 1:
        raise ValueError('Frailty fits need at least one random-effect column')
    _check_design(rows.x, rows.weight, family.name)
    if beta0 is None:
        try:
            beta0 = fit_weighted_glm(rows, family, newton).beta
        except NonConvergenceError:
            beta0 = np.zeros(rows.p)
    b_start = np.zeros(rows.q) if b0 is None else np.asarray(b0, dtype=float)
    log_floor = np.log(control.sigma2_floor)
    p = rows.p

    def unpack(theta):
        if fixed_sigma2 is not None:
            return theta, fixed_sigma2
        return theta[:p], float(np.exp(theta[p]))

    def objective(theta):
        beta, sigma2 = unpack(theta)
        value, _ = laplace_log_marginal(
            rows, family, beta, sigma2, b_start, control)
        return -value

    theta0 = np.asarray(beta0, dtype=float)
    bounds = [(None, None)] * p
    if fixed_sigma2 is None:
        sigma2_start = control.sigma2_init if sigma2_0 is None else sigma2_0
        theta0 = np.append(
            theta0, max(np.log(sigma2_start), log_floor))
        bounds.append((log_floor, None))
    result = optimize.minimize(
        objective,
        theta0,
        method='L-BFGS-B',
        bounds=bounds,
        options={'maxiter': control.max_outer_iter},
    )
    beta, sigma2 = unpack(result.x)
    value, mode = laplace_log_marginal(
        rows, family, beta, sigma2, b_start, control)
    at_floor = fixed_sigma2 is None and result.x[p] <= log_floor + 1e-8
    if at_floor:
        logger.warning(
            'Random-intercept variance reached its floor %s',
            control.sigma2_floor
        )
    converged = mode.converged and bool(result.success)
    if not converged:
        logger.warning(
            'Frailty fit did not converge: %s (inner gradient %.3g)',
            result.message, mode.gradient_norm
        )
    return FrailtyFit(
        beta=np.asarray(beta, dtype=float),
        b=mode.b,
        sigma2=float(sigma2),
        laplace_loglik=value,
        converged=bool(converged),
        iterations=int(result.nit),
        at_floor=bool(at_floor),
        inner_gradient_norm=mode.gradient_norm,
        family=family.name,
    )


def fit_weighted_exp_ph_frailty(rows, control=FrailtyControl(), **kwargs):
    return fit_weighted_glm_frailty(rows, PH, control, **kwargs)


def fit_weighted_logistic_frailty(rows, control=FrailtyControl(), **kwargs):
    return fit_weighted_glm_frailty(rows, LOGISTIC, control, **kwargs)


def multinomial_derivatives(
        x: np.ndarray,
        weights: np.ndarray,
        beta: np.ndarray,
) -> typing.Tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood, gradient and information of the multinomial model

    Parameters are flattened category by category.

    """

    n_other, p = beta.shape
    totals = weights.sum(axis=1)
    logits = np.hstack([np.zeros((x.shape[0], 1)), x @ beta.T])
    probs = special.softmax(logits, axis=1)[:, 1:]
    residual = weights[:, 1:] - totals[:, None] * probs
    gradient = (residual.T @ x).ravel()
    cross = -np.einsum('j,jc,jd->jcd', totals, probs, probs)
    cross[:, np.arange(n_other), np.arange(n_other)] += (
        totals[:, None] * probs)
    information = np.einsum(
        'jcd,jp,jq->cpdq', cross, x, x).reshape(n_other * p, n_other * p)
    value = float(np.sum(weights * special.log_softmax(logits, axis=1)))
    return value, gradient, information


@dataclasses.dataclass
class MultinomialFit:
    beta: np.ndarray
    log_lik: float
    information: np.ndarray
    iterations: int
    converged: bool
    separated: bool


def fit_weighted_multinomial(
        x: np.ndarray,
        weights: np.ndarray,
        control: NewtonControl = NewtonControl(),
        beta0: typing.Optional[np.ndarray] = None,
) -> MultinomialFit:
    """Weighted multinomial logistic fit with category 0 as reference

    ``weights[j, c]`` is the weight of category ``c`` at row ``j``. Returns
    one coefficient row per non-reference category.

    """

    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_other = weights.shape[1] - 1
    p = x.shape[1]
    _check_design(x, weights.sum(axis=1), 'multinomial')

    def evaluate(flat):
        return multinomial_derivatives(x, weights, flat.reshape(n_other, p))

    start = np.zeros(n_other * p) if beta0 is None else np.ravel(beta0)
    result = newton_maximize(evaluate, start, control, 'multinomial')
    return MultinomialFit(
        beta=result.x.reshape(n_other, p),
        log_lik=result.value,
        information=result.information,
        iterations=result.iterations,
        converged=result.converged,
        separated=result.separated,
    )
