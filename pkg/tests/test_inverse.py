import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matscat.core import GridSpec, HermitianPotential, boundary_pair, mnorm
from matscat.direct import ScatteringDataset, scattering_dataset
from matscat.inverse import (
    FKernel,
    IllConditionedRecovery,
    MarchenkoKernel,
    NearSingularSystem,
    TailTooLarge,
    build_F,
    homogeneous_margin,
    marchenko_solve,
    recover_boundary,
    recover_potential,
    run_inverse,
    solve_marchenko,
)
from matscat.validate import roundtrip_report

from oracles import random_hermitian, robin_S, soliton_kernel


def tabulate(fun, grid, n=1):
    """An ``FKernel`` holding ``fun(t)`` on the solver's tabulation."""
    h = grid.h_x / 2
    t = np.arange(int(round(4 * grid.X_max / h)) + 1) * h
    vals = np.asarray(fun(t), dtype=complex).reshape(t.size, n, n)
    return FKernel(t_grid=t, F=vals, bound_part=[], fourier_part=vals)


def exponential_kernel(M, a, x, y):
    """Solution for ``F(t) = M e^{-a t}``: ``-M e^{-a(x+y)} (I + M e^{-2ax} / 2a)^{-1}``."""
    n = M.shape[0]
    return -np.exp(-a * (x + y))[..., None, None] * (M @ np.linalg.inv(np.eye(n) + M * np.exp(-2 * a * x) / (2 * a)))


SMALL = GridSpec(K_max=40.0, n_k=800, X_max=3.0, n_x=151)


# -- F ---------------------------------------------------------------------------------


def test_free_robin_F_vanishes():
    # V = 0: the bound-state term cancels the continuous part exactly
    grid = GridSpec(K_max=40.0, n_k=1600, X_max=10.0, n_x=201)
    data = scattering_dataset(HermitianPotential.zero(1), boundary_pair(np.array([[1j]])), grid)
    assert len(data.bound_states) == 1
    F = build_F(data, grid)
    assert np.max(np.abs(F.bound_part[0][1])) == pytest.approx(2.0, rel=1e-8)
    assert np.max(mnorm(F.F)) <= 1e-4


def test_dirichlet_soliton_F_is_exponential():
    grid = GridSpec(K_max=40.0, n_k=1600, X_max=10.0, n_x=201)
    data = scattering_dataset(HermitianPotential.sech2(1.0), boundary_pair(-np.eye(1)), grid)
    assert data.bound_states == []
    F = build_F(data, grid)
    t = F.t_grid
    sel = t <= 10
    assert np.max(np.abs(F.F[sel, 0, 0] - 2 * np.exp(-t[sel]))) <= 2e-4


def test_bound_state_term_scales_quadratically():
    grid = SMALL
    data = scattering_dataset(HermitianPotential.sech2(1.0), boundary_pair(np.eye(1)), grid)
    k1, C = data.bound_states[0]
    F1 = build_F(data, grid)
    scaled = ScatteringDataset(data.k_grid, data.S, data.U0, [(k1, 3 * C)], data.meta)
    F3 = build_F(scaled, grid)
    diff = F3.F - F1.F
    expected = 8 * np.exp(-k1 * F1.t_grid)[:, None, None] * (C @ C)
    assert np.max(np.abs(diff - expected)) <= 1e-12
    assert np.array_equal(F3.fourier_part, F1.fourier_part)


def test_F_is_hermitian():
    data = scattering_dataset(HermitianPotential.exp_decay(np.array([[1.0, 0.5j], [-0.5j, -1.0]])),
                              boundary_pair(np.diag([1j, -1.0])), SMALL)
    F = build_F(data, SMALL)
    assert np.max(mnorm(F.F - np.conj(np.swapaxes(F.F, 1, 2)))) == 0.0


def test_tail_too_large():
    ks = np.linspace(0.1, 5.0, 50)
    data = ScatteringDataset(ks, np.ones((50, 1, 1)), -np.eye(1))
    with pytest.raises(TailTooLarge):
        build_F(data, SMALL)


def test_non_uniform_k_grid_rejected():
    ks = np.array([0.1, 0.2, 0.4, 0.8])
    data = ScatteringDataset(ks, -np.ones((4, 1, 1)), -np.eye(1))
    with pytest.raises(ValueError):
        build_F(data, SMALL)


# -- Marchenko solver ---------------------------------------------------------------------


@settings(max_examples=12, deadline=None)
@given(c=st.floats(0.1, 3.0), a=st.floats(1.0, 2.5))
def test_scalar_exponential_kernel(c, a):
    # a >= 1 keeps the window truncation error (about e^{-2 a X_max}) below the tolerance
    F = tabulate(lambda t: c * np.exp(-a * t), SMALL)
    kernel = solve_marchenko(F, SMALL)
    err = 0.0
    for r, (x, i) in enumerate(zip(kernel.x_grid, kernel.row_index)):
        y = kernel.t_grid[i:]
        err = max(err, np.max(np.abs(kernel.K[r, i:] - exponential_kernel(np.array([[c]]), a, x, y))))
    assert err <= 2e-4 * c


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_matrix_exponential_kernel(seed):
    rng = np.random.default_rng(seed)
    Z = random_hermitian(rng, 2)
    M = Z @ Z + 0.1 * np.eye(2)
    F = tabulate(lambda t: np.exp(-t)[:, None, None] * M, SMALL, n=2)
    kernel = solve_marchenko(F, SMALL, row_stride=10)
    scale = np.linalg.norm(M, 2)
    for r, (x, i) in enumerate(zip(kernel.x_grid, kernel.row_index)):
        y = kernel.t_grid[i:]
        assert np.max(np.abs(kernel.K[r, i:] - exponential_kernel(M, 1.0, x, y))) <= 2e-4 * scale
    assert np.max(kernel.node_residual) <= 1e-10


def test_single_row_solver_agrees_with_batched_solver():
    F = tabulate(lambda t: 2 * np.exp(-t), SMALL)
    kernel = solve_marchenko(F, SMALL, row_stride=25)
    for r, (x, i) in enumerate(zip(kernel.x_grid, kernel.row_index)):
        row, res = marchenko_solve(F, float(x), SMALL)
        assert np.max(np.abs(row - kernel.K[r, i:])) <= 1e-12
        assert res == pytest.approx(kernel.residual[r], rel=1e-6, abs=1e-14)


def test_soliton_kernel_residuals():
    F = tabulate(lambda t: 2 * np.exp(-t), SMALL)
    kernel = solve_marchenko(F, SMALL)
    assert np.max(kernel.node_residual) <= 1e-10
    assert np.max(kernel.residual) <= 1e-8
    x0 = kernel.t_grid[kernel.row_index[0]:]
    assert np.max(np.abs(kernel.K[0, :, 0, 0] - soliton_kernel(0.0, x0))) <= 1e-4


def test_residual_on_exp_decay_dataset():
    grid = GridSpec()
    H = np.array([[1.0, 0.5], [0.5, -1.0]])
    data = scattering_dataset(HermitianPotential.exp_decay(H), boundary_pair(np.eye(2)), grid)
    kernel = solve_marchenko(build_F(data, grid), grid, row_stride=4)
    assert np.max(kernel.residual) <= 1e-6


def test_under_resolved_grid_warns():
    # near t = 0, F varies on the scale 1/K_max; h_x = 0.05 with K_max = 40 leaves
    # the first row above the residual limit for this dataset, h_x = 0.025 does not
    V, bc = HermitianPotential.sech2(1.0), boundary_pair(np.eye(1))
    coarse = GridSpec(K_max=40.0, n_k=800, X_max=10.0, n_x=201)
    with pytest.warns(UserWarning, match="residual"):
        kernel = solve_marchenko(build_F(scattering_dataset(V, bc, coarse), coarse), coarse)
    assert np.argmax(kernel.residual) == 0
    fine = GridSpec(K_max=40.0, n_k=800, X_max=10.0, n_x=401)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        kernel = solve_marchenko(build_F(scattering_dataset(V, bc, fine), fine), fine)
    assert np.max(kernel.residual) <= 1e-6


def test_near_singular_system():
    # F = -c e^{-t} with c chosen so that I + F_0 has an exact null vector on the nodes
    h, Z = SMALL.h_x, 2 * SMALL.X_max
    nodes = np.arange(int(round(Z / h)) + 1) * h
    w = np.full(nodes.size, h)
    w[0] = w[-1] = h / 2
    c = 1.0 / np.sum(w * np.exp(-2 * nodes))
    F = tabulate(lambda t: -c * np.exp(-t), SMALL)
    assert homogeneous_margin(F, 0.0, SMALL) <= 1e-6
    with pytest.raises(NearSingularSystem):
        marchenko_solve(F, 0.0, SMALL)


def test_homogeneous_margin_of_positive_F_is_at_least_one():
    F = tabulate(lambda t: 2 * np.exp(-t), SMALL)
    for x in (0.0, 1.0, 3.0):
        assert homogeneous_margin(F, x, SMALL) >= 1 - 1e-10


def test_layout_errors():
    F = tabulate(lambda t: np.exp(-t), GridSpec(X_max=3.0, n_x=301))
    with pytest.raises(ValueError, match="step"):
        solve_marchenko(F, SMALL)
    F = tabulate(lambda t: np.exp(-t), SMALL)
    with pytest.raises(ValueError):
        marchenko_solve(F, 0.013, SMALL)


# -- potential and boundary recovery -----------------------------------------------------------


def _closed_form_kernel(h, X):
    x = np.arange(int(round(X / h)) + 1) * h
    t = np.arange(int(round(2 * X / h)) + 1) * h
    K = np.zeros((x.size, t.size, 1, 1))
    for r, xr in enumerate(x):
        K[r, r:, 0, 0] = soliton_kernel(xr, t[r:])
    zeros = np.zeros(x.size)
    return MarchenkoKernel(x_grid=x, row_index=np.arange(x.size), t_grid=t, K=K,
                           residual=zeros, node_residual=zeros, window=2 * X)


def test_recover_potential_from_closed_form_diagonal():
    kernel = _closed_form_kernel(1e-2, 4.0)
    V, anti = recover_potential(kernel, return_residual=True)
    x = kernel.x_grid
    assert np.max(np.abs(V(x)[:, 0, 0] + 2 / np.cosh(x) ** 2)) <= 1e-5
    assert anti == 0.0


def test_recover_boundary_free_robin():
    grid = GridSpec(K_max=40.0, n_k=1600, X_max=10.0, n_x=201)
    U = np.array([[np.exp(1j * 2.0)]])
    data = scattering_dataset(HermitianPotential.zero(1), boundary_pair(U), grid)
    kernel = solve_marchenko(build_F(data, grid), grid, x_max=1.0)
    U_rec, est = recover_boundary(kernel, data, return_estimates=True)
    assert mnorm(U_rec - U) <= 1e-4
    assert est["spread"] <= 1e-3
    assert np.all(est["weights"] > 0)


def test_ill_conditioned_recovery():
    # with K = 0 and S = (k + 1)/(k - 1), G + iG' vanishes at every k
    kernel = _closed_form_kernel(0.05, 1.0)
    kernel.K[:] = 0.0
    ks = np.arange(1, 81) * 0.05
    ks = ks[np.abs(ks - 1) > 1e-9]
    S = ((ks + 1) / (ks - 1))[:, None, None]
    data = ScatteringDataset(ks, S, np.eye(1))
    with pytest.raises(IllConditionedRecovery):
        recover_boundary(kernel, data, k_samples=[0.5, 2.0])


def test_dirichlet_soliton_chain():
    grid = GridSpec(K_max=40.0, n_k=1600, X_max=10.0, n_x=201)
    V, U = HermitianPotential.sech2(1.0), -np.eye(1)
    data = scattering_dataset(V, boundary_pair(U), grid)
    model = run_inverse(data, grid)
    assert np.allclose(model.U_rec, U, atol=1e-12)
    metrics = roundtrip_report((V, U), model, grid, data=data, k_eval=[0.5, 2.0, 10.0])
    assert metrics["potential_error"] <= 1e-3
    assert metrics["scattering_error"] <= 1e-3


# -- diagnostics of the full inverse run ------------------------------------------------------------


def test_inverse_diagnostics(roundtrip_problem):
    d = roundtrip_problem.model.diagnostics
    assert d["max_residual"] <= 1e-6
    assert d["max_node_residual"] <= 1e-10
    assert d["min_margin"] > 0.1
    assert d["anti_hermitian"] <= 1e-3
    assert d["U_spread"] <= 1e-3
    U = roundtrip_problem.model.U_rec
    assert mnorm(U.conj().T @ U - np.eye(2)) <= 1e-12
    V = roundtrip_problem.model.V_rec(np.linspace(0, 20, 41))
    assert np.max(mnorm(V - np.conj(np.swapaxes(V, 1, 2)))) <= 1e-14


def test_recovered_S_matches_robin_closed_form_at_sample_points():
    grid = GridSpec(K_max=40.0, n_k=1600, X_max=10.0, n_x=201)
    alpha = np.pi / 3
    U = np.array([[np.exp(1j * alpha)]])
    data = scattering_dataset(HermitianPotential.zero(1), boundary_pair(U), grid)
    model = run_inverse(data, grid, margin_points=0)
    assert np.max(np.abs(model.V_rec(np.linspace(0, 10, 101)))) <= 1e-3
    from matscat.direct import scattering_matrices
    ks = np.array([0.5, 3.0, 20.0])
    S = scattering_matrices(model.V_rec, boundary_pair(model.U_rec), ks, grid)
    assert np.max(np.abs(S[:, 0, 0] - robin_S(alpha, ks))) <= 1e-3
