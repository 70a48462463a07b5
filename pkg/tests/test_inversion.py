import numpy as np
import pytest

from conftest import three_region_model
from expotime.expmact import SolveLedger, eval_family_on_pencil
from expotime.inversion import (CGLSConvergenceError, ForwardMap, RankDeficientError, cgls,
                                forward, gauss_newton, jacobian, jtv_actions)
from expotime.models import (ParamModel, build_diffusion_pencil, make_observation,
                             split_param_model)


@pytest.fixture(scope="module")
def setup(small_family):
    spec, regions = three_region_model(61)
    obs = make_observation(spec, "point", 30).stack(make_observation(spec, "point", 40))
    pencil = build_diffusion_pencil(spec, obs)
    pm = split_param_model(spec, regions)
    return ForwardMap(small_family, pm, pencil.K, obs.Q, pencil.f, pencil.bandwidth), pm, pencil


def test_forward_matches_pencil_evaluation(setup):
    fm, pm, pencil = setup
    snaps = eval_family_on_pencil(fm.family, pencil).observe(pencil.Q)
    # flattened in (time, source, observation) order
    np.testing.assert_allclose(forward(fm, pm.m), snaps.columns.T.ravel(), rtol=1e-12)


def test_jacobian_against_finite_differences(setup):
    fm, pm, _ = setup
    m = pm.m + 0.1
    J = jacobian(fm, m)
    assert J.J.shape == (fm.n_data, 3) and J.time_block(0).shape == (2, 3)
    h = 1e-5
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (forward(fm, m + e) - forward(fm, m - e)) / (2 * h)
        assert np.max(np.abs(fd - J.J[:, k])) <= 1e-6 * np.max(np.abs(J.J[:, k]))


def test_actions_match_dense_jacobian(setup):
    fm, pm, _ = setup
    J = jacobian(fm, pm.m)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(3), rng.standard_normal(fm.n_data)
    np.testing.assert_allclose(jtv_actions(fm, pm.m, x=x), J.matvec(x), rtol=1e-10,
                               atol=1e-12 * np.abs(J.J).max())
    np.testing.assert_allclose(jtv_actions(fm, pm.m, y=y), J.rmatvec(y), rtol=1e-10)
    with pytest.raises(ValueError):
        jtv_actions(fm, pm.m, x=x, y=y)
    with pytest.raises(ValueError):
        jtv_actions(fm, pm.m, x=np.ones(2))


def test_solve_counts(setup):
    fm, pm, _ = setup
    fm.cache.clear()
    n_rep = fm.shifts.size
    ledger = SolveLedger()
    jacobian(fm, pm.m + 0.3, ledger)
    assert ledger.factorizations == n_rep and ledger.triangular_solves == 2 * n_rep
    before = ledger.snapshot()
    jtv_actions(fm, pm.m + 0.3, x=np.ones(3), ledger=ledger)
    diff = ledger.since(before)
    assert diff["factorizations"] == 0 and diff["triangular_solves"] == 2 * n_rep
    fm.cache.clear()


def test_cgls_matches_lstsq():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((40, 6))
    b = rng.standard_normal(40)
    x, it = cgls(lambda v: A @ v, lambda v: A.T @ v, b, 6)
    np.testing.assert_allclose(x, np.linalg.lstsq(A, b, rcond=None)[0], rtol=1e-9)
    assert it <= 12
    xd, _ = cgls(lambda v: A @ v, lambda v: A.T @ v, b, 6, damp=2.0)
    ref = np.linalg.solve(A.T @ A + 4 * np.eye(6), A.T @ b)
    np.testing.assert_allclose(xd, ref, rtol=1e-9)
    with pytest.raises(CGLSConvergenceError):
        cgls(lambda v: A @ v, lambda v: A.T @ v, b, 6, tol=1e-300, maxit=2)


@pytest.mark.parametrize("mode", ["qr", "cgls"])
def test_gauss_newton_recovers_truth(setup, mode):
    fm, pm, _ = setup
    data = forward(fm, pm.m)
    state = gauss_newton(fm, data, np.full(3, np.log(0.03)), mode=mode, max_iters=20)
    assert state.converged and np.max(np.abs(state.m - pm.m)) < 1e-6
    assert all(b <= a for a, b in zip(state.objective_history, state.objective_history[1:]))
    assert len(state.iterates) == state.iterations + 1


def test_regularization_pulls_toward_reference(setup):
    fm, pm, _ = setup
    data = forward(fm, pm.m)
    scale = np.linalg.norm(data) ** 2
    m_ref = np.full(3, np.log(0.03))
    weak = gauss_newton(fm, data, m_ref, lam=1e-8 * scale, m_ref=m_ref, max_iters=20)
    strong = gauss_newton(fm, data, m_ref, lam=1e2 * scale, m_ref=m_ref, max_iters=20)
    assert np.linalg.norm(strong.m - m_ref) < np.linalg.norm(weak.m - m_ref)
    assert np.max(np.abs(weak.m - pm.m)) < 1e-3


def test_rank_deficient_jacobian(setup):
    fm, pm, pencil = setup
    comps = pm.components
    twin = ParamModel((comps[0] / 2, comps[0] / 2, comps[1] + comps[2]), pm.region_map)
    fm2 = ForwardMap(fm.family, twin, pencil.K, pencil.Q, pencil.f, pencil.bandwidth)
    data = forward(fm2, np.log([0.1, 0.1, 0.02]))
    with pytest.raises(RankDeficientError) as info:
        gauss_newton(fm2, data, np.log([0.05, 0.05, 0.05]), mode="qr")
    assert info.value.rank == 2


def test_input_validation(setup):
    fm, pm, _ = setup
    with pytest.raises(ValueError):
        gauss_newton(fm, np.ones(3), pm.m)
    with pytest.raises(ValueError):
        gauss_newton(fm, forward(fm, pm.m), pm.m, mode="svd")
    with pytest.raises(ValueError):
        ForwardMap(fm.family, pm, fm.K, fm.Q[:, :-1], fm.sources)
