"""Forward map: Jost solution, Jost matrix, scattering matrix and bound states.

The Jost solution is obtained by integrating the Schrödinger equation
backwards from ``X_max`` in the modulated variable ``m = e^{-ikx} f``,

    m'' = V m - 2ik m',        m(X) = I,  m'(X) = 0,

which removes the dominant ``e^{ikx}`` phase and keeps the adaptive
Runge-Kutta controller (DOP853) from chasing it.  Many wavenumbers are
integrated as one vectorised system.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import schur

from .core import (
    BoundaryCondition,
    GridSpec,
    HermitianPotential,
    ScatteringError,
    dagger,
    hermitian_part,
    mnorm,
    nullspace_projector,
    psd_inv_sqrt,
)

__all__ = [
    "StepFailure",
    "SingularJostMatrix",
    "ClusterAmbiguity",
    "JostSample",
    "ScatteringDataset",
    "jost_solution",
    "jost_matrix",
    "jost_matrices",
    "scattering_matrix",
    "scattering_matrices",
    "high_energy_limit",
    "find_bound_states",
    "norming_matrix",
    "scattering_dataset",
    "default_kappa_max",
]

RTOL = 1e-10
ATOL = 1e-12
GOLDEN_TOL = 1e-10


class StepFailure(ScatteringError, RuntimeError):
    pass


class SingularJostMatrix(ScatteringError, ArithmeticError):
    pass


class ClusterAmbiguity(ScatteringError, RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class JostSample:
    k: complex
    x_grid: np.ndarray
    f: np.ndarray
    f_prime: np.ndarray


@dataclass(eq=False)
class ScatteringDataset:
    """Scattering data ``{S(k), U0, (k_j, C_j)}`` on a positive k-grid."""

    k_grid: np.ndarray
    S: np.ndarray
    U0: np.ndarray
    bound_states: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k_grid = np.asarray(self.k_grid, dtype=float)
        self.S = np.asarray(self.S, dtype=complex)
        self.U0 = np.asarray(self.U0, dtype=complex)
        if self.S.shape != (len(self.k_grid), self.n, self.n):
            raise ValueError(f"S has shape {self.S.shape}, expected ({len(self.k_grid)}, n, n)")
        self.bound_states = [(float(k), np.asarray(c, dtype=complex)) for k, c in self.bound_states]

    @property
    def n(self) -> int:
        return self.U0.shape[0]

    def S_at(self, k: float) -> np.ndarray:
        """S at a real ``k`` (negative values use ``S(-k) = S(k)^dag``)."""
        idx = int(np.argmin(np.abs(self.k_grid - abs(k))))
        if not math.isclose(self.k_grid[idx], abs(k), rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"k = {k} is not on the dataset grid")
        s = self.S[idx]
        return s if k > 0 else dagger(s)


# ---------------------------------------------------------------------------
# Jost solution


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MM_THREADS", "1")))
    except ValueError:
        return 1


def _integrate(V, ks, X, xs=None, gram=False):
    """Backward integration of the modulated Jost equation for many k at once.

    Returns ``(m, mp, g)`` with shapes ``(b, len(xs), n, n)``; ``g`` is
    ``int_x^X f^dag f dt`` (only when ``gram``), otherwise None.
    """
    ks = np.asarray(ks, dtype=complex).ravel()
    b, n = ks.size, V.n
    if xs is None:
        xs = np.array([0.0])
    xs = np.asarray(xs, dtype=float)
    eye = np.broadcast_to(np.eye(n, dtype=complex), (b, n, n))
    parts = 3 if gram else 2
    y0 = np.zeros((parts, b, n, n), dtype=complex)
    y0[0] = eye
    two_ik = (2j * ks)[:, None, None]
    decay = 2.0 * ks.imag

    def rhs(x, y):
        y = y.reshape(parts, b, n, n)
        m, mp = y[0], y[1]
        out = np.empty_like(y)
        out[0] = mp
        out[1] = V(x) @ m - two_ik * mp
        if gram:
            w = np.exp(-decay * x)[:, None, None]
            out[2] = -w * (dagger(m) @ m)
        return out.ravel()

    order = np.argsort(-xs)
    t_eval = xs[order]
    # solve_ivp requires t_eval inside the span and ordered with it
    t_eval = np.clip(t_eval, 0.0, X)
    sol = solve_ivp(rhs, (X, 0.0), y0.ravel(), method="DOP853", t_eval=t_eval,
                    rtol=RTOL, atol=ATOL)
    if not sol.success:
        raise StepFailure(f"Jost integration failed: {sol.message}")
    ys = sol.y.reshape(parts, b, n, n, len(t_eval))
    ys = np.moveaxis(ys, -1, 2)  # (parts, b, len(xs), n, n)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    ys = ys[:, :, inv]
    return ys[0], ys[1], (ys[2] if gram else None)


def _jost_batch(V, ks, X, xs=None):
    """``f(k, x)`` and ``f'(k, x)`` for every k in ``ks`` at every x in ``xs``."""
    ks = np.asarray(ks, dtype=complex).ravel()
    xs = np.array([0.0]) if xs is None else np.asarray(xs, dtype=float)

    def run(chunk):
        m, mp, _ = _integrate(V, chunk, X, xs)
        ph = np.exp(1j * np.outer(chunk, xs))[:, :, None, None]
        kk = chunk[:, None, None, None]
        return ph * m, ph * (1j * kk * m + mp)

    workers = _workers()
    if workers == 1 or ks.size < 2 * workers:
        return run(ks)
    chunks = np.array_split(ks, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))
    return (np.concatenate([r[0] for r in results]),
            np.concatenate([r[1] for r in results]))


def _check_tail(V, grid):
    tail = V.tail_bound(grid.X_max) if hasattr(V, "tail_bound") else 0.0
    if tail > grid.tol_tail:
        warnings.warn(f"potential tail beyond X_max={grid.X_max} is {tail:.2e} "
                      f"> tol_tail={grid.tol_tail:.1e}", stacklevel=3)


def jost_solution(V: HermitianPotential, k: complex, grid: GridSpec) -> JostSample:
    """Jost solution ``f(k, x)`` and its x-derivative on ``grid.x_grid``."""
    k = complex(k)
    if k.imag < 0:
        raise ValueError("Jost solution requires Im k >= 0")
    _check_tail(V, grid)
    xs = grid.x_grid
    f, fp = _jost_batch(V, [k], grid.X_max, xs)
    return JostSample(k=k, x_grid=xs, f=f[0], f_prime=fp[0])


# ---------------------------------------------------------------------------
# Jost and scattering matrices


def _jost_from_values(bc, f, fp):
    # J(k) = f(-conj k, 0)^dag B - f'(-conj k, 0)^dag A
    return dagger(f) @ bc.B - dagger(fp) @ bc.A


def _jost_scale(bc, f, fp):
    """Reference size for rank decisions on J.

    ``[A; B]`` is an isometry, and ``f``, ``f'`` never vanish together, so the
    norm of the stacked ``[f; f']`` is a scale that does not collapse at a
    zero of ``det J``.
    """
    return np.linalg.norm(np.concatenate([f, fp], axis=-2), 2, axis=(-2, -1))


def _jost_and_scale(V, bc, ks, grid):
    ks = np.asarray(ks, dtype=complex).ravel()
    if np.any(ks.imag < 0):
        raise ValueError("Jost matrix requires Im k >= 0")
    f, fp = _jost_batch(V, -np.conj(ks), grid.X_max)
    f, fp = f[:, 0], fp[:, 0]
    return _jost_from_values(bc, f, fp), _jost_scale(bc, f, fp)


def jost_matrices(V, bc: BoundaryCondition, ks, grid: GridSpec) -> np.ndarray:
    return _jost_and_scale(V, bc, ks, grid)[0]


def jost_matrix(V, bc: BoundaryCondition, k: complex, grid: GridSpec) -> np.ndarray:
    """Jost matrix ``J(k)`` for ``Im k >= 0``."""
    return jost_matrices(V, bc, [k], grid)[0]


def _right_divide(a, b):
    """``a @ inv(b)`` for stacks of matrices."""
    return np.swapaxes(np.linalg.solve(np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2)), -1, -2)


def scattering_matrices(V, bc: BoundaryCondition, ks, grid: GridSpec,
                        return_jost: bool = False):
    """``S(k) = -J(-k) J(k)^{-1}`` on an array of real, non-zero k."""
    ks = np.asarray(ks, dtype=float).ravel()
    if np.any(ks == 0):
        raise ValueError("k = 0 is excluded from every grid")
    _check_tail(V, grid)
    both = np.concatenate([-ks, ks])
    f, fp = _jost_batch(V, both, grid.X_max)
    J_all = _jost_from_values(bc, f[:, 0], fp[:, 0])
    J, J_minus = J_all[: ks.size], J_all[ks.size:]
    cond = np.linalg.cond(J)
    bad = cond > 1e12
    if np.any(bad):
        raise SingularJostMatrix(
            f"Jost matrix nearly singular at k = {ks[bad][0]:.4g} (cond {cond[bad][0]:.2e})")
    S = -_right_divide(J_minus, J)
    if return_jost:
        return S, J, J_minus
    return S


def scattering_matrix(V, bc: BoundaryCondition, k: float, grid: GridSpec) -> np.ndarray:
    if not np.isreal(k) or k <= 0:
        raise ValueError("scattering_matrix needs a positive real k")
    return scattering_matrices(V, bc, [float(k)], grid)[0]


def high_energy_limit(bc: BoundaryCondition, tol: float = 1e-8) -> np.ndarray:
    """High-energy limit ``U0`` of ``S(k)``.

    The (-1)-eigenspace of ``U`` maps to eigenvalue -1 of ``U0``; its
    orthogonal complement maps to +1.
    """
    T, Z = schur(bc.U, output="complex")
    lam = np.diag(T)
    signs = np.where(np.abs(lam + 1) <= tol, -1.0, 1.0)
    U0 = (Z * signs) @ dagger(Z)
    return hermitian_part(U0)


# ---------------------------------------------------------------------------
# bound states


def default_kappa_max(V, bc: BoundaryCondition, X: float = 20.0) -> float:
    """Generous upper bound on bound-state wavenumbers."""
    vmax = V.sup_norm(X) if hasattr(V, "sup_norm") else 0.0
    phases = np.angle(np.linalg.eigvals(bc.U))
    robin = [math.tan(a / 2) for a in phases if 0 < a < math.pi - 1e-6]
    return 2.0 * (math.sqrt(vmax) + max(robin, default=0.0)) + 1.0


def _golden(fun, lo, hi, tol):
    """Golden-section minimisation of a batched scalar function.

    ``fun`` maps an array of points to an array of values; all brackets are
    advanced in lockstep so each iteration costs one batched evaluation.
    """
    invphi = (math.sqrt(5) - 1) / 2
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while np.max(b - a) > tol:
        left = fc < fd
        # left: keep [a, d], old c becomes new d; right: keep [c, b], old d becomes new c
        a, b = np.where(left, a, c), np.where(left, d, b)
        new_c = np.where(left, b - invphi * (b - a), d)
        new_d = np.where(left, c, a + invphi * (b - a))
        probe = np.where(left, new_c, new_d)
        fp = fun(probe)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = new_c, new_d
    return 0.5 * (a + b)


def find_bound_states(V, bc: BoundaryCondition, grid: GridSpec, kappa_max: float | None = None,
                      n_scan: int = 512) -> list[tuple[float, int]]:
    """Bound-state wavenumbers ``k_j`` (``det J(i k_j) = 0``) with multiplicities.

    ``|det J(i kappa)|`` is scanned on a log-spaced grid; each interior local
    minimum is refined by golden-section search on ``|det J|^2`` and kept
    only if ``J(i k_j)`` is numerically rank deficient.
    """
    if kappa_max is None:
        kappa_max = default_kappa_max(V, bc, grid.X_max)
    if kappa_max <= 0:
        raise ValueError("kappa_max must be positive")
    kap = np.geomspace(1e-3 * kappa_max, kappa_max, n_scan)

    def absdet2(kk):
        J = jost_matrices(V, bc, 1j * np.asarray(kk), grid)
        return np.abs(np.linalg.det(J)) ** 2

    d = absdet2(kap)
    idx = [i for i in range(1, n_scan - 1) if d[i] <= d[i - 1] and d[i] <= d[i + 1]]
    if d[-1] < d[-2]:
        idx.append(n_scan - 1)
    if not idx:
        return []
    lo = np.array([kap[i - 1] for i in idx])
    hi = np.array([kap[min(i + 1, n_scan - 1)] for i in idx])
    roots = _golden(absdet2, lo, hi, GOLDEN_TOL)

    found = []
    Js, scales = _jost_and_scale(V, bc, 1j * roots, grid)
    for kappa, J, scale in zip(roots, Js, scales):
        s = np.linalg.svd(J, compute_uv=False)
        thr = grid.tol_rank * scale
        near = (s > thr / 10) & (s < thr * 10)
        deficiency = int(np.sum(s < thr))
        if deficiency == 0:
            continue
        if np.any(near):
            raise ClusterAmbiguity(
                f"singular values of J(i*{kappa:.6g}) straddle the rank threshold: {s}")
        found.append((float(kappa), deficiency))
    found.sort()
    for (k1, _), (k2, _) in zip(found, found[1:]):
        if k2 - k1 < 10 * GOLDEN_TOL:
            raise ClusterAmbiguity(f"bound states {k1} and {k2} are not resolved")
    return found


def norming_matrix(V, bc: BoundaryCondition, k_j: float, grid: GridSpec) -> np.ndarray:
    """Normalization matrix ``C_j`` of the bound state at ``i k_j``.

    ``A = int_0^inf f(ik_j,x)^dag f(ik_j,x) dx`` is integrated alongside the
    Jost equation, with the analytic ``e^{-2 k_j X}/(2 k_j)`` tail added.
    """
    k = 1j * float(k_j)
    m, mp, g = _integrate(V, [k], grid.X_max, gram=True)
    f0 = m[0, 0]
    fp0 = 1j * k * m[0, 0] + mp[0, 0]
    J = _jost_from_values(bc, f0, fp0)
    P, rank_def = nullspace_projector(J, grid.tol_rank * _jost_scale(bc, f0, fp0))
    if rank_def == 0:
        raise ValueError(f"J(i*{k_j}) is not singular; no bound state there")
    n = V.n
    gram = g[0, 0] + math.exp(-2 * k_j * grid.X_max) / (2 * k_j) * np.eye(n)
    gram = hermitian_part(gram)
    eye = np.eye(n)
    C = P @ psd_inv_sqrt(P @ gram @ P + eye - P)
    return hermitian_part(C)


# ---------------------------------------------------------------------------
# aggregation


def scattering_dataset(V, bc: BoundaryCondition, grid: GridSpec,
                       kappa_max: float | None = None) -> ScatteringDataset:
    """Full scattering data of ``(V, U)`` on ``grid.k_grid``."""
    if V.n != bc.n:
        raise ValueError(f"potential is {V.n}x{V.n} but U is {bc.n}x{bc.n}")
    ks = grid.k_grid
    S = scattering_matrices(V, bc, ks, grid)
    U0 = high_energy_limit(bc)
    if kappa_max is None:
        kappa_max = default_kappa_max(V, bc, grid.X_max)
    bound = []
    for kj, _mult in find_bound_states(V, bc, grid, kappa_max):
        bound.append((kj, norming_matrix(V, bc, kj, grid)))
    meta = {"K_max": grid.K_max, "n_k": grid.n_k, "X_max": grid.X_max, "n_x": grid.n_x,
            "tol_rank": grid.tol_rank, "tol_tail": grid.tol_tail, "kappa_max": kappa_max}
    return ScatteringDataset(k_grid=ks, S=S, U0=U0, bound_states=bound, meta=meta)
