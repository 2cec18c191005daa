import numpy as np
import pytest
from scipy import special

from phhmm import regression
from phhmm.exceptions import (
    NonConvergenceError,
    SingularDesignError,
)
from phhmm.model import ph_penalty


def _rows(x, delta, is_event, weight, z=None):
    return regression.AugmentedRows(
        x=x, z=z, delta=delta, is_event=is_event, weight=weight)


def _simulated_rows(rng, n=400, beta=(-1.0, 0.5), discrete=False, q=0,
                    sigma2=0.5):
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    z = None
    eta = x @ np.asarray(beta)
    if q:
        groups = rng.integers(q, size=n)
        z = np.eye(q)[groups]
        eta = eta + rng.normal(scale=np.sqrt(sigma2), size=q)[groups]
    if discrete:
        delta = np.ones(n)
        events = rng.random(n) < special.expit(eta)
    else:
        # exponential exits right-censored at the end of the interval
        interval = rng.uniform(0.5, 3.0, size=n)
        exits = rng.exponential(np.exp(-eta))
        events = exits < interval
        delta = np.minimum(exits, interval)
    weight = rng.uniform(0.2, 1.0, size=n)
    return _rows(x, delta, events, weight, z)


def _numerical_gradient(fun, x, h=1e-6):
    gradient = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        gradient[i] = (fun(x + step) - fun(x - step)) / (2 * h)
    return gradient


def test_intercept_only_ph_fit_is_occurrence_over_exposure():
    rows = _rows(
        x=np.ones(4),
        delta=[1.0, 2.0, 0.5, 1.5],
        is_event=[True, False, True, False],
        weight=[1.0, 1.0, 0.5, 2.0],
    )
    fit = regression.fit_weighted_exp_ph(rows)
    expected = np.log(1.5 / (1.0 + 2.0 + 0.25 + 3.0))
    assert fit.converged
    assert fit.beta[0] == pytest.approx(expected, abs=1e-10)


def test_intercept_only_logistic_fit_is_weighted_logit():
    rows = _rows(
        x=np.ones(3),
        delta=1.0,
        is_event=[True, False, False],
        weight=[1.0, 1.0, 2.0],
    )
    fit = regression.fit_weighted_logistic(rows)
    assert fit.beta[0] == pytest.approx(np.log(1.0 / 3.0), abs=1e-10)


@pytest.mark.parametrize('family', [
    pytest.param(regression.PH, id='ph'),
    pytest.param(regression.LOGISTIC, id='logistic'),
])
def test_analytic_gradient_matches_finite_differences(rng, family):
    rows = _simulated_rows(rng, n=60)
    beta = np.array([-0.7, 0.3])

    def loglik(b):
        return regression.weighted_loglik(rows, family, rows.x @ b)

    analytic = rows.x.T @ regression.score_terms(rows, family, rows.x @ beta)
    numeric = _numerical_gradient(loglik, beta)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_ph_fit_recovers_coefficients(rng):
    rows = _simulated_rows(rng, n=4000, beta=(-1.0, 0.5))
    fit = regression.fit_weighted_exp_ph(rows)
    assert fit.converged
    assert np.max(np.abs(fit.gradient)) < 1e-8
    np.testing.assert_allclose(fit.beta, [-1.0, 0.5], atol=0.2)


def test_rank_deficient_design_raises():
    rows = _rows(
        x=np.column_stack([np.ones(4), 2 * np.ones(4)]),
        delta=1.0,
        is_event=[True, False, True, False],
        weight=np.ones(4),
    )
    with pytest.raises(SingularDesignError):
        regression.fit_weighted_exp_ph(rows)


def test_zero_weights_raise():
    rows = _rows(x=np.ones(2), delta=1.0, is_event=[True, False],
                 weight=[0.0, 0.0])
    with pytest.raises(SingularDesignError):
        regression.fit_weighted_logistic(rows)


def test_separated_logistic_fit_is_flagged():
    x = np.column_stack([np.ones(6), [-0.3, -0.2, -0.1, 0.1, 0.2, 0.3]])
    rows = _rows(x=x, delta=1.0, is_event=x[:, 1] > 0, weight=np.ones(6))
    fit = regression.fit_weighted_logistic(rows)
    assert fit.separated
    assert not fit.converged


def test_no_events_gives_vanishing_hazard():
    rows = _rows(x=np.ones(3), delta=[1.0, 2.0, 3.0],
                 is_event=[False, False, False], weight=np.ones(3))
    fit = regression.fit_weighted_exp_ph(rows)
    assert fit.separated or fit.beta[0] < -20


def test_newton_gives_up_after_max_iter():
    def evaluate(x):
        # Newton moves about one unit per step from x = 8
        return -np.sum(np.cosh(x)), -np.sinh(x), np.diag(np.cosh(x))

    with pytest.raises(NonConvergenceError) as excinfo:
        regression.newton_maximize(
            evaluate, np.array([8.0]),
            regression.NewtonControl(max_iter=2, separation_norm=None))
    assert excinfo.value.trace


def test_objective_identity(rng):
    rows = _simulated_rows(rng, n=80, discrete=True)
    for _ in range(100):
        beta = rng.normal(scale=2.0, size=2)
        j_ph = -regression.weighted_loglik(rows, regression.PH, rows.x @ beta)
        residual = regression.objective_identity_residual(rows, beta)
        assert abs(residual) < 1e-10 * max(1.0, abs(j_ph))


def test_ph_shrinks_slopes_on_low_incidence_data(rng):
    ph_slopes, logistic_slopes = [], []
    for _ in range(100):
        rows = _simulated_rows(
            rng, n=300, beta=(-3.0, rng.uniform(-1.5, 1.5)), discrete=True)
        if not rows.is_event.any() or rows.is_event.all():
            continue
        ph = regression.fit_weighted_exp_ph(rows)
        logistic = regression.fit_weighted_logistic(rows)
        if ph.separated or logistic.separated:
            continue
        ph_slopes.append(abs(ph.beta[1]))
        logistic_slopes.append(abs(logistic.beta[1]))
    ph_slopes = np.array(ph_slopes)
    logistic_slopes = np.array(logistic_slopes)
    assert ph_slopes.size > 50
    assert np.mean(ph_slopes <= logistic_slopes + 1e-8) > 0.95
    assert ph_slopes.mean() < logistic_slopes.mean()


def test_multinomial_gradient_matches_finite_differences(rng):
    x = np.column_stack([np.ones(40), rng.normal(size=40)])
    weights = rng.dirichlet(np.ones(3), size=40)
    beta = rng.normal(size=(2, 2))
    _, gradient, information = regression.multinomial_derivatives(
        x, weights, beta)

    def value(flat):
        return regression.multinomial_derivatives(
            x, weights, flat.reshape(2, 2))[0]

    np.testing.assert_allclose(
        gradient, _numerical_gradient(value, beta.ravel()),
        rtol=1e-6, atol=1e-8)
    hessian = np.column_stack([
        _numerical_gradient(
            lambda flat: regression.multinomial_derivatives(
                x, weights, flat.reshape(2, 2))[1][i], beta.ravel())
        for i in range(4)
    ])
    np.testing.assert_allclose(-hessian, information, rtol=1e-5, atol=1e-7)


def test_multinomial_with_two_categories_is_logistic(rng):
    rows = _simulated_rows(rng, n=200, discrete=True)
    logistic = regression.fit_weighted_logistic(rows)
    weights = np.zeros((len(rows), 2))
    weights[np.arange(len(rows)), rows.is_event.astype(int)] = rows.weight
    multinomial = regression.fit_weighted_multinomial(rows.x, weights)
    np.testing.assert_allclose(multinomial.beta[0], logistic.beta, atol=1e-8)


def test_posterior_mode_solves_penalised_score(rng):
    rows = _simulated_rows(rng, n=300, q=3)
    mode = regression.posterior_mode(
        rows, regression.PH, np.array([-1.0, 0.5]), 0.5)
    assert mode.converged
    assert mode.gradient_norm < 1e-8


def _aghq_log_marginal(rows, family, beta, sigma2, n_nodes=16):
    """Adaptive Gauss-Hermite quadrature, one group at a time"""
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    fixed = rows.x @ beta
    total = 0.0
    for group in range(rows.q):
        member = rows.z[:, group] > 0
        part = regression.AugmentedRows(
            x=np.ones((member.sum(), 1)), z=np.ones((member.sum(), 1)),
            delta=rows.delta[member], is_event=rows.is_event[member],
            weight=rows.weight[member])
        offset = fixed[member]

        def h(b):
            return regression.weighted_loglik(
                part, family, offset + b) - b * b / (2 * sigma2) \
                - 0.5 * np.log(2 * np.pi * sigma2)

        # scalar Newton for the mode of the group
        b = 0.0
        for _ in range(100):
            eta = offset + b
            gradient = np.sum(
                regression.score_terms(part, family, eta)) - b / sigma2
            curvature = np.sum(
                regression.curvature_terms(part, family, eta)) + 1 / sigma2
            b += gradient / curvature
            if abs(gradient) < 1e-12:
                break
        scale = 1 / np.sqrt(curvature)
        points = b + np.sqrt(2) * scale * nodes
        log_terms = np.array([h(point) for point in points]) + nodes ** 2
        total += np.log(np.sqrt(2) * scale) + special.logsumexp(
            log_terms, b=weights)
    return total


@pytest.mark.parametrize('q', [
    pytest.param(1, id='one-group'),
    pytest.param(2, id='two-groups'),
])
def test_laplace_matches_adaptive_quadrature(rng, q):
    rows = _simulated_rows(rng, n=2000 * q, q=q)
    beta = np.array([-1.0, 0.5])
    sigma2 = 0.5
    laplace, _ = regression.laplace_log_marginal(
        rows, regression.PH, beta, sigma2)
    reference = _aghq_log_marginal(rows, regression.PH, beta, sigma2)
    assert laplace == pytest.approx(reference, abs=1e-3)


def test_vanishing_variance_recovers_fixed_effect_fit(rng):
    rows = _simulated_rows(rng, n=500, q=4)
    fixed = regression.fit_weighted_exp_ph(rows)
    frailty = regression.fit_weighted_exp_ph_frailty(
        rows, fixed_sigma2=1e-10)
    np.testing.assert_allclose(frailty.beta, fixed.beta, atol=1e-6)
    np.testing.assert_allclose(frailty.b, 0.0, atol=1e-6)


def test_frailty_fit_estimates_variance(rng):
    rows = _simulated_rows(rng, n=3000, q=20, sigma2=0.8)
    fit = regression.fit_weighted_exp_ph_frailty(rows)
    assert fit.sigma2 > 0.1
    assert not fit.at_floor
    assert fit.inner_gradient_norm < 1e-8


def test_frailty_needs_random_effect_columns(rng):
    rows = _simulated_rows(rng, n=50)
    with pytest.raises(ValueError):
        regression.fit_weighted_exp_ph_frailty(rows)


def test_penalty_identity_uses_row_weights(rng):
    rows = _simulated_rows(rng, n=30, discrete=True)
    beta = np.array([-2.0, 1.0])
    eta = rows.x @ beta
    gap = -regression.weighted_loglik(rows, regression.PH, eta) + \
        regression.weighted_loglik(rows, regression.LOGISTIC, eta)
    assert gap == pytest.approx(ph_penalty(eta, rows.weight), abs=1e-12)


def test_empty_rows_keep_an_empty_random_design():
    rows = _rows(x=np.zeros((0, 2)), z=np.zeros((0, 0)), delta=[],
                 is_event=[], weight=[])
    assert len(rows) == 0
    assert rows.z.shape == (0, 0)
    assert rows.design.shape == (0, 2)


def test_frailty_fit_reports_outer_optimizer_failure(rng, monkeypatch):
    rows = _simulated_rows(rng, n=300, q=3)
    minimize = regression.optimize.minimize

    def stalled(*args, **kwargs):
        result = minimize(*args, **kwargs)
        result.success = False
        result.message = 'ABNORMAL_TERMINATION_IN_LNSRCH'
        return result

    monkeypatch.setattr(regression.optimize, 'minimize', stalled)
    fit = regression.fit_weighted_exp_ph_frailty(rows)
    assert not fit.converged
