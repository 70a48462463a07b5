import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import eigh

from expotime.expmact import exact_expm_oracle
from expotime.models import (MU0, Diffusion1D, ParamModel, analytic_uniform_eigs,
                             build_diffusion_pencil, cell_mass_components, contiguous_regions,
                             make_observation, split_param_model, stiffness_matrix)


def test_pencil_structure():
    spec = Diffusion1D(10.0, np.linspace(0.01, 0.1, 20), source_node=4)
    p = build_diffusion_pencil(spec)
    h = 0.5
    assert p.n == 19 and p.bandwidth == 1
    assert p.K[0, 0] == pytest.approx(2 / (MU0 * h)) and p.K[0, 1] == pytest.approx(-1 / (MU0 * h))
    np.testing.assert_allclose(np.diag(p.M), h * (spec.sigma[:-1] + spec.sigma[1:]) / 2)
    assert p.f[4] == pytest.approx(1 / h) and np.count_nonzero(p.f) == 1


def test_cell_components_sum_to_mass():
    spec = Diffusion1D(1.0, np.arange(1.0, 7.0))
    C = cell_mass_components(spec)
    assert C.shape == (6, 5)
    np.testing.assert_allclose(spec.sigma @ C, np.diag(build_diffusion_pencil(spec).M))
    assert np.all((C != 0).sum(axis=1) <= 2)


def test_analytic_eigenpairs():
    spec = Diffusion1D.uniform(40, 0.05, length=3.0)
    p = build_diffusion_pencil(spec)
    lam, V = analytic_uniform_eigs(spec)
    ref = eigh(p.K, p.M, eigvals_only=True)
    np.testing.assert_allclose(np.sort(lam), ref, rtol=1e-10)
    np.testing.assert_allclose(V.T @ p.M @ V, np.eye(39), atol=1e-10)
    np.testing.assert_allclose(p.K @ V, p.M @ V * lam, rtol=1e-8, atol=1e-8 * np.abs(p.K).max())


def test_analytic_needs_uniform():
    with pytest.raises(ValueError):
        analytic_uniform_eigs(Diffusion1D(1.0, [1.0, 2.0, 3.0]))


@pytest.mark.parametrize("kwargs", [dict(length=0.0), dict(sigma=[1.0]),
                                    dict(sigma=[1.0, -1.0, 1.0]), dict(source_node=5)])
def test_spec_validation(kwargs):
    args = dict(length=1.0, sigma=[1.0, 1.0, 1.0], source_node=None)
    args.update(kwargs)
    with pytest.raises(ValueError):
        Diffusion1D(**args)


def test_spec_roundtrip():
    spec = Diffusion1D(5.0, [0.1, 0.2, 0.3, 0.4], source_node=1)
    back = Diffusion1D.from_dict(spec.to_dict())
    assert back.length == 5.0 and back.source_node == 1
    np.testing.assert_array_equal(back.sigma, spec.sigma)
    np.testing.assert_allclose(spec.node_position([0, 2]), [1.25, 3.75])


@given(st.integers(3, 200), st.integers(1, 8))
def test_contiguous_regions_partition(n_cells, n_regions):
    n_regions = min(n_regions, n_cells)
    r = contiguous_regions(n_cells, n_regions)
    assert r.shape == (n_cells,) and r[0] == 0 and r[-1] == n_regions - 1
    assert np.all(np.diff(r) >= 0) and set(r) == set(range(n_regions))


def test_split_param_model_reconstructs_mass():
    regions = contiguous_regions(30, 3)
    sigma = np.array([0.2, 0.02, 0.05])[regions]
    spec = Diffusion1D(30.0, sigma)
    pm = split_param_model(spec, regions)
    assert pm.n_params == 3
    np.testing.assert_allclose(pm.m, np.log([0.2, 0.02, 0.05]))
    np.testing.assert_allclose(pm.mass(pm.m), build_diffusion_pencil(spec).M, rtol=1e-14)


def test_split_param_model_nonuniform_region():
    spec = Diffusion1D(1.0, [1.0, 2.0, 3.0, 3.0])
    pm = split_param_model(spec, [0, 0, 1, 1])
    assert pm.m is None
    with pytest.raises(ValueError):
        split_param_model(spec, [0, 0, 2, 2])
    with pytest.raises(ValueError):
        split_param_model(spec, [0, 1])


def test_param_model_validation():
    pm = ParamModel((np.eye(2), np.eye(2)), [0, 1])
    with pytest.raises(ValueError):
        pm.mass([1.0])
    with pytest.raises(ValueError):
        pm.mass([np.nan, 0.0])
    with pytest.raises(ValueError):
        ParamModel((np.eye(2),), [0], m=[1.0, 2.0])


def test_observations():
    spec = Diffusion1D.uniform(10, 1.0, length=10.0)
    obs = make_observation(spec, "point", 3).stack(
        make_observation(spec, "derivative_stencil", 4))
    assert obs.Q.shape == (2, 9) and len(obs.descriptions) == 2
    np.testing.assert_array_equal(obs.Q[1, 3:6], [-0.5, 0.0, 0.5])
    for kind, loc in (("point", 9), ("derivative_stencil", 0), ("flux", 3)):
        with pytest.raises(ValueError):
            make_observation(spec, kind, loc)


def test_transient_decays_and_spreads():
    spec = Diffusion1D.uniform(201, 0.01)
    p = build_diffusion_pencil(spec)
    u = exact_expm_oracle(p, np.logspace(-6, -3, 4)).columns
    peak = u[spec.source_node]
    assert np.all(np.diff(peak) < 0) and np.all(u > -1e-12 * np.abs(u).max())
    stiff = stiffness_matrix(spec)
    np.testing.assert_allclose(stiff, stiff.T)
