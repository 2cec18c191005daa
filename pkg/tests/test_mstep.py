import numpy as np
import pytest
from scipy import (
    optimize,
    special,
)

from phhmm import (
    mstep,
    regression,
)
from phhmm.constants import Method
from phhmm.exceptions import (
    ConfigurationError,
    StarvationError,
)
from phhmm.model import (
    Chain,
    ModelParams,
    PosteriorWeights,
    StateModel,
)


def _chain(n_transitions, step=1.0, p=1, rng=None):
    times = np.arange(n_transitions + 1) * step
    x = np.ones((n_transitions + 1, 1))
    if p > 1:
        x = np.column_stack([x, rng.normal(size=(n_transitions + 1, p - 1))])
    return Chain(id='m', times=times, y=np.zeros(n_transitions + 1), x=x)


def _hard_w(labels, n_states=2):
    labels = np.asarray(labels)
    w = np.zeros((labels.size - 1, n_states, n_states))
    w[np.arange(labels.size - 1), labels[:-1], labels[1:]] = 1.0
    return w


@pytest.mark.parametrize('u, ys, expected', [
    pytest.param([[1, 0], [0, 1]], [4, 0], [4.0, 0.0], id='hard-labels'),
    pytest.param([[0.5, 0.5]] * 3, [1, 2, 6], [3.0, 3.0], id='symmetric'),
    pytest.param([[1, 0], [1, 0]], [4, 0], None, id='starved',
                 marks=pytest.mark.raises(exception=StarvationError)),
])
def test_fit_poisson_mixture(u, ys, expected):
    np.testing.assert_allclose(
        mstep.fit_poisson_mixture(np.array(u, dtype=float), ys), expected)


def test_starvation_names_state_and_iteration():
    with pytest.raises(StarvationError) as excinfo:
        mstep.fit_poisson_mixture(np.array([[1.0, 0.0]]), [3], iteration=7)
    assert excinfo.value.state == 1
    assert excinfo.value.iteration == 7


def test_augment_splits_record_into_event_and_censored_copies():
    chain = _chain(1)
    w = np.array([[[0.3, 0.7], [0.0, 0.0]]])
    rows = mstep.augment(chain, w, state=0)
    np.testing.assert_array_equal(rows.is_event, [True, False])
    np.testing.assert_allclose(rows.weight, [0.7, 0.3])
    np.testing.assert_array_equal(rows.record, [1, 1])


def test_augment_conserves_state_weight(rng):
    chain = _chain(30)
    w = rng.dirichlet(np.ones(4), size=30).reshape(30, 2, 2)
    for state in range(2):
        rows = mstep.augment(chain, w, state)
        assert rows.weight.sum() == pytest.approx(
            w[:, state, :].sum(), abs=1e-10)


def test_augment_of_hard_labels_is_classical_coding():
    labels = [0, 0, 1, 1, 0]
    chain = _chain(4)
    w = _hard_w(labels)
    # weights of one are kept, zeros fall below the floor
    leaving_first = mstep.augment(chain, w, state=0)
    np.testing.assert_array_equal(leaving_first.is_event, [False, True])
    np.testing.assert_array_equal(leaving_first.record, [1, 2])
    leaving_second = mstep.augment(chain, w, state=1)
    np.testing.assert_array_equal(leaving_second.is_event, [False, True])
    np.testing.assert_array_equal(leaving_second.record, [3, 4])


def test_augment_of_absent_state_is_empty():
    chain = _chain(3)
    rows = mstep.augment(chain, _hard_w([1, 1, 1, 1]), state=0)
    assert len(rows) == 0


def test_competing_risk_augmentation(rng):
    chain = _chain(10)
    w = rng.dirichlet(np.ones(9), size=10).reshape(10, 3, 3)
    rows = mstep.augment(chain, w, state=0, destination=2)
    np.testing.assert_allclose(rows.weight[rows.is_event], w[:, 0, 2])
    np.testing.assert_allclose(
        rows.weight[~rows.is_event], w[:, 0, 0] + w[:, 0, 1])


def test_augment_needs_destination_with_three_states():
    with pytest.raises(ValueError):
        mstep.augment(_chain(2), np.zeros((2, 3, 3)), state=0)


def test_ct_generator_is_symmetric_for_symmetric_weights(rng):
    n = 200
    x = np.ones((n, 1))
    delta = rng.uniform(0.5, 2.0, size=n)
    stay, move = rng.uniform(0.2, 1.0, size=(2, n))
    w = np.zeros((n, 2, 2))
    w[:, 0, 0] = w[:, 1, 1] = stay
    w[:, 0, 1] = w[:, 1, 0] = move
    w /= w.sum(axis=(1, 2), keepdims=True)
    fit = mstep.fit_ct_generator(x, delta, w)
    assert fit.beta[0, 0] == pytest.approx(fit.beta[1, 0], abs=1e-4)


def test_ct_generator_approaches_ph_for_short_steps():
    n = 1000
    chain = _chain(n, step=0.01)
    w = np.zeros((n, 2, 2))
    w[: n // 2, 0] = [0.99, 0.01]
    w[n // 2:, 1] = [0.02, 0.98]
    posteriors = [PosteriorWeights(w=w, u=np.zeros((n + 1, 2)))]
    params = ModelParams(
        states=[StateModel(beta=[[0.0]], mu=1.0),
                StateModel(beta=[[0.0]], mu=0.5)],
        delta0=[0.5, 0.5],
    )
    ph = mstep.maximize_transitions([chain], posteriors, params, Method.PH)
    ct = mstep.fit_ct_generator(chain.design, chain.delta, w)
    np.testing.assert_allclose(ph.states[0].beta[0], [0.0], atol=1e-8)
    np.testing.assert_allclose(ph.states[1].beta[0], [np.log(2.0)], atol=1e-8)
    np.testing.assert_allclose(
        ct.beta[:, 0], [ph.states[0].beta[0, 0], ph.states[1].beta[0, 0]],
        atol=0.05)


def test_maximize_matches_direct_fits(rng):
    labels = rng.integers(2, size=301)
    chain = _chain(300, step=1.5, p=2, rng=rng)
    w = _hard_w(labels)
    u = np.eye(2)[labels]
    posteriors = [PosteriorWeights(w=w, u=u)]
    params = ModelParams(
        states=[StateModel(beta=[[0.0, 0.0]], mu=3.0),
                StateModel(beta=[[0.0, 0.0]], mu=1.0)],
        delta0=[0.5, 0.5],
    )
    ys = np.where(labels == 0, 5, 1)
    chain = Chain(id='m', times=chain.times, y=ys, x=chain.x)
    delta0 = np.array([[0.2, 0.8]])
    new_params, result = mstep.maximize(
        [chain], posteriors, params, Method.PH, delta0)
    np.testing.assert_allclose(new_params.mus, [5.0, 1.0])
    np.testing.assert_allclose(new_params.delta0, delta0)
    for state in range(2):
        direct = regression.fit_weighted_exp_ph(mstep.augment(chain, w, state))
        np.testing.assert_allclose(
            new_params.states[state].beta[0], direct.beta, atol=1e-6)
        assert result.fits[(state, 1 - state)].family == 'ph'


def test_dt_maximize_uses_logistic_fits(rng):
    labels = rng.integers(2, size=201)
    chain = _chain(200, p=2, rng=rng)
    w = _hard_w(labels)
    posteriors = [PosteriorWeights(w=w, u=np.eye(2)[labels])]
    params = ModelParams(
        states=[StateModel(beta=[[0.0, 0.0]], mu=3.0),
                StateModel(beta=[[0.0, 0.0]], mu=1.0)],
        delta0=[0.5, 0.5],
    )
    result = mstep.maximize_transitions([chain], posteriors, params, Method.DT)
    direct = regression.fit_weighted_logistic(mstep.augment(chain, w, 0))
    np.testing.assert_allclose(result.states[0].beta[0], direct.beta, atol=1e-6)


def test_three_state_dt_uses_multinomial_fit(rng):
    labels = rng.integers(3, size=301)
    chain = _chain(300, p=2, rng=rng)
    posteriors = [PosteriorWeights(
        w=_hard_w(labels, 3), u=np.eye(3)[labels])]
    params = ModelParams(
        states=[StateModel(beta=np.zeros((2, 2)), mu=mu)
                for mu in (5.0, 2.0, 0.5)],
        delta0=np.full(3, 1 / 3),
    )
    result = mstep.maximize_transitions([chain], posteriors, params, Method.DT)
    assert all(state.beta.shape == (2, 2) for state in result.states)
    assert {fit.family for fit in result.fits.values()} == {'multinomial'}
    assert len(result.fits) == 6


def test_ct_needs_two_states():
    params = ModelParams(
        states=[StateModel(beta=np.zeros((2, 1)), mu=mu)
                for mu in (5.0, 2.0, 0.5)],
        delta0=np.full(3, 1 / 3),
    )
    chain = _chain(3)
    posteriors = [PosteriorWeights(
        w=np.full((3, 3, 3), 1 / 9), u=np.full((4, 3), 1 / 3))]
    with pytest.raises(ConfigurationError):
        mstep.maximize_transitions([chain], posteriors, params, Method.CT)


def test_augment_of_absent_state_has_empty_random_design():
    rows = mstep.augment(_chain(3), _hard_w([1, 1, 1, 1]), state=0)
    assert rows.z.shape == (0, 0)
    assert rows.design.shape == (0, 1)


def test_expected_transition_loglik_of_two_states(rng):
    x = np.column_stack([np.ones(20), rng.normal(size=20)])
    w = rng.dirichlet(np.ones(4), size=20).reshape(20, 2, 2)
    model = StateModel(beta=[[-0.5, 1.2]], mu=1.0)
    eta = x @ model.beta[0]
    expected = np.sum(
        w[:, 0, 1] * np.log(special.expit(eta))
        + w[:, 0, 0] * np.log(special.expit(-eta)))
    actual = mstep.expected_transition_loglik(
        x, np.zeros((20, 0)), w, 0, model)
    assert actual == pytest.approx(expected, rel=1e-12)


def _guard_weights(move_share, n=10):
    w = np.zeros((n, 2, 2))
    w[:, 0, 1] = move_share
    w[:, 0, 0] = 1.0 - move_share
    return w


@pytest.mark.parametrize('move_share, target, expected_halvings, expected', [
    pytest.param(1.0, 3.0, 0, 3.0, id='improving-step-kept'),
    pytest.param(0.5, 4.0, 2, 0.25, id='overshoot-halved'),
    pytest.param(0.0, 3.0, None, -1.0, id='worse-step-rejected'),
])
def test_guard_step(move_share, target, expected_halvings, expected):
    n = 10
    x = np.ones((n, 1))
    previous = StateModel(beta=[[-1.0]], mu=1.0)
    proposal = StateModel(beta=[[target]], mu=1.0)
    accepted, halvings = mstep.guard_step(
        x, np.zeros((n, 0)), _guard_weights(move_share, n), 0,
        previous, proposal)
    assert halvings == expected_halvings
    np.testing.assert_allclose(accepted.beta, [[expected]])


def test_guarded_maximize_never_lowers_expected_loglik(rng):
    n = 300
    chain = _chain(n, step=4.0, p=2, rng=rng)
    w = rng.dirichlet([8.0, 1.0, 1.0, 8.0], size=n).reshape(n, 2, 2)
    from_first = w[:, 0].sum(axis=1)
    w[:, 0, 1] = 0.45 * from_first
    w[:, 0, 0] = 0.55 * from_first
    posteriors = [PosteriorWeights(w=w, u=np.full((n + 1, 2), 0.5))]
    params = ModelParams(
        states=[StateModel(beta=[[-0.2, 0.1]], mu=3.0),
                StateModel(beta=[[-1.0, 0.0]], mu=1.0)],
        delta0=[0.5, 0.5],
    )
    control = mstep.MStepControl(guard_steps=True)
    result = mstep.maximize_transitions(
        [chain], posteriors, params, Method.PH, control)
    z = np.zeros((n, 0))
    for state in range(2):
        before = mstep.expected_transition_loglik(
            chain.design, z, w, state, params.states[state])
        after = mstep.expected_transition_loglik(
            chain.design, z, w, state, result.states[state])
        assert after >= before
        np.testing.assert_allclose(
            result.fits[(state, 1 - state)].beta, result.states[state].beta[0])


def test_ct_generator_reports_optimizer_failure(monkeypatch):
    n = 50
    x = np.ones((n, 1))
    w = np.zeros((n, 2, 2))
    w[:, 0, 0] = w[:, 1, 1] = 0.5

    def stalled(objective, start, **kwargs):
        return optimize.OptimizeResult(
            x=np.asarray(start, dtype=float),
            fun=objective(start),
            nit=3,
            success=False,
            message='Desired error not necessarily achieved',
        )

    monkeypatch.setattr(mstep.optimize, 'minimize', stalled)
    fit = mstep.fit_ct_generator(x, np.ones(n), w, max_iter=50)
    assert not fit.converged
    assert fit.iterations == 3
