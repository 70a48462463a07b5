"""Small worked cases with known answers, one test per case."""

import numpy as np
import pytest

from conftest import family_on
from expotime.cli import main
from expotime.expmact import (Pencil, SolveLedger, eval_family_on_pencil,
                              eval_single_time_on_pencil, exact_expm_oracle,
                              generalized_eigenvalues, mass_solve, m_norm, m_norm_error)
from expotime.fitting import (SharedPoleFitter, Surrogate, critical_K, degree_table,
                              family_error, fit_single_time_best, minimal_degree,
                              single_time_error)
from expotime.inversion import ForwardMap, forward, gauss_newton, jacobian, jtv_actions
from expotime.models import (MU0, Diffusion1D, ParamModel, build_diffusion_pencil,
                             contiguous_regions, make_observation, split_param_model)
from expotime.ratcore import RationalFamily, eval_scalar, sup_error, uniform_error

HALPHEN = 9.289


def _at_time(base, t):
    return RationalFamily(base.pole_set, [t], [1.0], base.residues, t, base.absolute_term)


# scalar evaluation and error reports

def test_single_pole_toy():
    fam = RationalFamily.from_poles([-1.0], [[1.0]], [1.0], t_scale=1.0)
    assert eval_scalar(fam, 0, 1.0) == 0.5


def test_subdiagonal_family_vanishes_at_infinity(small_family):
    assert np.all(np.abs(small_family.evaluate([1e30])) < 1e-20)


def test_zero_residue_error_is_one():
    fam = RationalFamily.from_poles([-1 + 1j, -1 - 1j], np.zeros((2, 2)), [1.0, 3.0])
    rep = uniform_error(fam)
    np.testing.assert_array_equal(rep.per_time_error, [1.0, 1.0])


def test_single_channel_uniform_equals_sup():
    fam = fit_single_time_best(5)
    assert uniform_error(fam).uniform_error == sup_error(fam, 0)


def test_common_weight_doubles_uniform_error(small_family):
    one = uniform_error(small_family.with_weights(np.ones(small_family.n_channels)))
    two = uniform_error(small_family.with_weights(np.full(small_family.n_channels, 2.0)))
    assert two.uniform_error == 2 * one.uniform_error


@pytest.mark.parametrize("m, bound", [(2, 1.1e-2), (7, 1.1e-6)])
def test_single_time_accuracy(m, bound):
    assert single_time_error(m) <= bound


def test_degree_14_near_asymptotic():
    ratio = single_time_error(14) / (2 * HALPHEN ** -14.5)
    assert 1 / 3 <= ratio <= 3


def test_fit_interpolates_two_point_surrogate():
    fitter = SharedPoleFitter(np.array([1.0]), surrogate=Surrogate(np.array([0.0, 1.0])),
                              ridge=0.0)
    fam = fitter.family(2)
    np.testing.assert_allclose(fam.evaluate([0.0, 1.0])[:, 0], [1.0, np.exp(-1.0)],
                               atol=1e-12)


def test_single_channel_family_approaches_best():
    assert SharedPoleFitter(np.array([1.0])).uniform_error(7) <= 3e-6


@pytest.mark.slow
def test_wide_interval_family_examples():
    fam = family_on(1e3, 28, 1e-3)
    assert abs(eval_scalar(fam, fam.n_channels - 1, 0.0) - 1.0) <= 1e-6
    assert family_error(27, 1e3) <= 1.5e-6
    assert family_error(44, 1e3) < family_error(14, 1e3)


# degree search

@pytest.mark.slow
@pytest.mark.parametrize("tol, ratio, expected, slack", [
    (1e-6, 1e3, 27, 4), (1e-2, 10.0, 5, 2), (1e-6, 1.0, 7, 1)])
def test_minimal_degree_examples(tol, ratio, expected, slack):
    assert abs(minimal_degree(tol, ratio) - expected) <= slack


def test_single_time_column_matches_reference():
    table = degree_table((1e-2, 1e-4, 1e-6, 1e-8, 1e-10), (1.0,))
    for got, ref in zip(table.column(1.0), (2, 4, 7, 9, 11)):
        assert abs(got - ref) <= 1


@pytest.mark.slow
def test_critical_k_ratio_10():
    table = degree_table((1e-2, 1e-4, 1e-6), (1.0, 10.0))
    k = critical_K(table)
    assert k[1.0] is None and abs(k[10.0] - 2.2) <= 0.8


# pencil evaluation

def test_identity_pencil_single_time():
    f = np.array([1.0, -2.0, 0.5, 3.0])
    p = Pencil(np.eye(4), np.eye(4), f)
    for m, tol in ((14, 1.5 * single_time_error(14)), (7, 1.2e-6)):
        snaps = eval_family_on_pencil(_at_time(fit_single_time_best(m), 1.0), p)
        assert np.max(np.abs(snaps.columns[:, 0] - np.exp(-1.0) * f)) <= tol * np.abs(f).max()


def test_diagonal_pencil_within_bound(small_family):
    lam = np.logspace(2, 9, 40)
    p = Pencil(np.diag(lam), np.eye(40), np.ones(40))
    err = m_norm_error(eval_family_on_pencil(small_family, p),
                       exact_expm_oracle(p, small_family.times), p)
    grid = np.concatenate([small_family.default_grid(), lam])
    for j in range(small_family.n_channels):
        assert err[j] <= np.sqrt(40) * sup_error(small_family, j, grid) * (1 + 1e-8)


def test_one_pair_one_channel_factorization():
    base = fit_single_time_best(2)
    ledger = SolveLedger()
    eval_single_time_on_pencil(base, Pencil(np.eye(3), np.eye(3), np.ones(3)), [1.0], ledger)
    assert ledger.factorizations == 1


def test_oracle_trivial_cases():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    M = A @ A.T + 6 * np.eye(6)
    K = np.diag(np.arange(1.0, 7.0))
    p = Pencil(K, M, rng.standard_normal(6))
    np.testing.assert_allclose(exact_expm_oracle(p, [0.0]).columns[:, 0],
                               np.linalg.solve(M, p.f), rtol=1e-10)
    scalar = exact_expm_oracle(Pencil([[2.0]], [[1.0]], [3.0]), [0.5]).columns[0, 0]
    assert scalar == pytest.approx(3 * np.exp(-1.0), rel=1e-14)
    norms = m_norm(p, exact_expm_oracle(p, np.logspace(-2, 2, 20)).columns)
    assert np.all(np.diff(norms) < 0)


def test_m_norm_trivial_cases():
    p = Pencil(np.eye(3), np.eye(3), np.ones(3))
    s = exact_expm_oracle(p, [1.0, 2.0])
    np.testing.assert_array_equal(m_norm_error(s, s, p), [0.0, 0.0])
    x = np.array([[1.0], [2.0], [2.0]])
    assert m_norm(p, x)[0] == pytest.approx(3.0)


# models

def test_two_cell_model_by_hand():
    spec = Diffusion1D(1.0, [1.0, 1.0])
    p = build_diffusion_pencil(spec)
    assert p.K[0, 0] == pytest.approx(4 / MU0) and p.M[0, 0] == pytest.approx(0.5)
    assert generalized_eigenvalues(p)[0] == pytest.approx(8 / MU0)


def test_uniform_spectrum_closed_form():
    spec = Diffusion1D.uniform(80, 0.3, length=7.0)
    k = np.arange(1, 80)
    ref = 2 / (0.3 * spec.h**2 * MU0) * (1 - np.cos(k * np.pi / 80))
    np.testing.assert_allclose(generalized_eigenvalues(build_diffusion_pencil(spec)), ref,
                               rtol=1e-8)


def test_contrast_spreads_spectrum():
    sigma = np.where(np.arange(100) < 50, 1e-8, 1e-1)
    lam = generalized_eigenvalues(build_diffusion_pencil(Diffusion1D(100.0, sigma)))
    assert np.log10(lam.max() / lam.min()) >= 7


def test_mass_reassembly():
    spec = Diffusion1D.uniform(30, 0.02)
    one = split_param_model(spec, np.zeros(30, dtype=int))
    np.testing.assert_array_equal(one.mass(one.m), build_diffusion_pencil(spec).M)
    regions = contiguous_regions(30, 3)
    spec3 = Diffusion1D(100.0, np.array([1e-1, 1e-2, 1e-3])[regions])
    pm = split_param_model(spec3, regions)
    M = build_diffusion_pencil(spec3).M
    assert np.max(np.abs(pm.mass(pm.m) - M)) <= 1e-15 * np.abs(M).max()


def test_one_region_per_cell():
    spec = Diffusion1D.uniform(8, 1.0)
    pm = split_param_model(spec, np.arange(8))
    nnz = [np.count_nonzero(Mk) for Mk in pm.components]
    # lumped nodal mass: end cells touch one node, interior cells two
    assert nnz == [1, 2, 2, 2, 2, 2, 2, 1]
    assert all(np.count_nonzero(Mk - np.diag(np.diag(Mk))) == 0 for Mk in pm.components)


def test_observation_rows():
    spec = Diffusion1D.uniform(201, 0.01)
    point = make_observation(spec, "point", 100).Q[0]
    np.testing.assert_array_equal(point, np.eye(200)[100])
    stencil = make_observation(spec, "derivative_stencil", 120).Q[0]
    assert stencil.sum() == 0.0
    obs = exact_expm_oracle(build_diffusion_pencil(spec), np.logspace(-4, -3, 12)).columns[100]
    assert np.all(np.diff(obs) < 0)


# forward map and inversion

def _uniform_forward(family, sigma=0.01, n_cells=101):
    spec = Diffusion1D.uniform(n_cells, sigma)
    obs = make_observation(spec, "point", 50)
    pencil = build_diffusion_pencil(spec, obs)
    pm = split_param_model(spec, np.zeros(n_cells, dtype=int))
    return ForwardMap(family, pm, pencil.K, obs.Q, pencil.f, pencil.bandwidth), pm, pencil


def test_forward_matches_oracle(small_family):
    fm, pm, pencil = _uniform_forward(small_family)
    ora = exact_expm_oracle(pencil, small_family.times).observe(pencil.Q).columns[0]
    b_norm = m_norm(pencil, mass_solve(pencil, pencil.f))[0]
    # |q^T e| <= |M^{-1/2} q| * |e|_M
    qn = np.sqrt(pencil.Q[0] @ np.linalg.solve(pencil.M, pencil.Q[0]))
    sup = max(sup_error(small_family, j) for j in range(small_family.n_channels))
    assert np.max(np.abs(forward(fm, pm.m) - ora)) <= qn * b_norm * sup * (1 + 1e-8)


def test_conductivity_scaling_is_time_scaling(small_family):
    fm, pm, pencil = _uniform_forward(small_family)
    scaled = forward(fm, pm.m + np.log(10.0))
    ora = exact_expm_oracle(pencil, small_family.times / 10).observe(pencil.Q).columns[0]
    # M scales by 10, so b = M^{-1} f shrinks by 10 as well
    np.testing.assert_allclose(10 * scaled, ora, rtol=0, atol=1e-3 * np.abs(ora).max())


def test_block_source_is_stacked_single_sources(small_family):
    fm, pm, pencil = _uniform_forward(small_family)
    f2 = np.zeros(pencil.n)
    f2[30] = 1.0
    both = ForwardMap(fm.family, pm, fm.K, fm.Q, np.column_stack([pencil.f, f2]))
    a = forward(ForwardMap(fm.family, pm, fm.K, fm.Q, pencil.f), pm.m)
    b = forward(ForwardMap(fm.family, pm, fm.K, fm.Q, f2), pm.m)
    v = forward(both, pm.m).reshape(fm.family.n_channels, 2, 1)
    np.testing.assert_allclose(v[:, 0, 0], a, rtol=1e-13)
    np.testing.assert_allclose(v[:, 1, 0], b, rtol=1e-13)


def test_zero_component_has_zero_column(small_family):
    fm, pm, pencil = _uniform_forward(small_family)
    model = ParamModel((pm.components[0], np.zeros_like(pm.components[0])), pm.region_map)
    fm2 = ForwardMap(fm.family, model, fm.K, fm.Q, pencil.f)
    J = jacobian(fm2, np.array([pm.m[0], 0.0])).J
    assert np.all(J[:, 1] == 0.0) and np.any(J[:, 0] != 0.0)


def test_actions_reproduce_jacobian_columns(small_family):
    fm, pm, _ = _uniform_forward(small_family)
    J = jacobian(fm, pm.m).J
    np.testing.assert_allclose(jtv_actions(fm, pm.m, x=np.ones(1)), J[:, 0], rtol=1e-12,
                               atol=1e-12 * np.abs(J).max())


@pytest.mark.slow
def test_jacobian_factorization_count():
    fam = family_on(1e3, 32, 1e-6)
    fm, pm, _ = _uniform_forward(fam)
    ledger = SolveLedger()
    jacobian(fm, pm.m, ledger)
    assert ledger.factorizations == 16


def test_strong_regularization_pins_reference(small_family):
    fm, pm, _ = _uniform_forward(small_family)
    data = forward(fm, pm.m)
    m_ref = pm.m + 1.0
    state = gauss_newton(fm, data, m_ref, lam=1e12 * (data @ data), m_ref=m_ref, max_iters=5)
    assert np.max(np.abs(state.m - m_ref)) < 1e-6


# command line

@pytest.mark.slow
def test_cli_fit_degree_38(tmp_path):
    out = tmp_path / "fam.json"
    assert main(["fit", "--tmin", "1e-3", "--tmax", "1", "--nchannels", "31",
                 "--degree", "38", "--out", str(out)]) == 0
    assert uniform_error(RationalFamily.load(out)).uniform_error <= 1.5e-6


def test_cli_single_accuracy_row(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["table", "--accuracies", "1e-2", "--ratios", "1", "--out", str(out)]) == 0
    rows = [r for r in out.read_text().splitlines() if not r.startswith("avg")]
    assert rows == ["accuracy,1", "0.01,2"]
