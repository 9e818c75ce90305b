"""Inverse map: scattering data -> Marchenko kernel -> potential and boundary matrix.

Pipeline: :func:`build_F` assembles the Marchenko data kernel ``F``,
:func:`solve_marchenko` solves

    K(x, y) + F(x + y) + int_x^Z K(x, t) F(t + y) dt = 0,   x <= y <= Z,

for every row ``x`` of a uniform grid, :func:`recover_potential` reads off
``V(x) = -2 d/dx K(x, x)`` and :func:`recover_boundary` rebuilds ``U`` from
the kernel row at the origin.

The Nyström discretisation uses the composite trapezoid rule on nodes
``t_b = b h``.  All rows share one factorisation: in the weighted variables
the system for row ``x_i`` is the trailing principal block of a single
Hermitian matrix, plus a rank-n correction for the half weight at ``t = x_i``.
A reverse-ordered Cholesky factor ``B = L^dag L`` (``L`` lower triangular)
factors every trailing block at once, so all rows are solved with two
batched triangular solves and a Woodbury step.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sp_fft
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.special import sici

from .core import (
    GridSpec,
    HermitianPotential,
    ScatteringError,
    dagger,
    filon_linear,
    filon_quadratic,
    hermitian_part,
    mnorm,
    polar_unitary,
)
from .direct import ScatteringDataset

__all__ = [
    "TailTooLarge",
    "NearSingularSystem",
    "IllConditionedRecovery",
    "FKernel",
    "MarchenkoKernel",
    "RecoveredModel",
    "build_F",
    "marchenko_solve",
    "solve_marchenko",
    "homogeneous_margin",
    "recover_potential",
    "recover_boundary",
    "run_inverse",
]

log = logging.getLogger(__name__)

COND_LIMIT = 1e10
TAIL_LIMIT = 0.5
TAIL_ORDER = 3
RESIDUAL_LIMIT = 1e-6


class TailTooLarge(ScatteringError, ValueError):
    pass


class NearSingularSystem(ScatteringError, ArithmeticError):
    pass


class IllConditionedRecovery(ScatteringError, ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class FKernel:
    """``F(t)`` tabulated on ``t_j = j * step``.

    ``bound_part`` keeps ``(k_j, C_j^2)`` pairs so the bound-state sum can be
    evaluated analytically; ``fourier_part`` is the tabulated continuous part.
    """

    t_grid: np.ndarray
    F: np.ndarray
    bound_part: list
    fourier_part: np.ndarray

    @property
    def step(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def n(self) -> int:
        return self.F.shape[-1]


@dataclass(eq=False)
class MarchenkoKernel:
    """Kernel rows ``K(x_r, t_b)`` on the shared node grid ``t_b = b h``.

    ``K[r, b]`` is zero for ``t_b < x_r``.  ``residual[r]`` is the largest
    residual of the discrete equation re-evaluated at off-node points.
    """

    x_grid: np.ndarray
    row_index: np.ndarray
    t_grid: np.ndarray
    K: np.ndarray
    residual: np.ndarray
    node_residual: np.ndarray
    window: float

    @property
    def h(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def n(self) -> int:
        return self.K.shape[-1]

    def diagonal(self) -> np.ndarray:
        """``K(x_r, x_r)`` for every row."""
        return self.K[np.arange(len(self.x_grid)), self.row_index]


@dataclass(eq=False)
class RecoveredModel:
    V_rec: HermitianPotential
    U_rec: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# F kernel


def _tail_integrals(K, t, order):
    """``T_m(t) = int_K^inf e^{ikt} k^{-m} dk`` for ``m = 1..order``.

    ``T_1`` is ``E(Kt) = -Ci(Kt) + i (pi/2 - Si(Kt))``; its logarithmic real
    part is dropped at ``t = 0``.  Higher orders follow from integration by
    parts, ``T_m = (e^{iKt} K^{1-m} + it T_{m-1}) / (m - 1)``.
    """
    t = np.asarray(t, dtype=float)
    u = K * t
    T1 = np.empty(t.shape, dtype=complex)
    pos = u > 0
    si, ci = sici(u[pos])
    T1[pos] = -ci + 1j * (np.pi / 2 - si)
    T1[~pos] = 1j * np.pi / 2
    out = [T1]
    phase = np.exp(1j * u)
    for m in range(2, order + 1):
        out.append((phase * K ** (1 - m) + 1j * t * out[-1]) / (m - 1))
    return out


def _tail_coefficients(ks, G, U0, order, fraction=0.25):
    """Least-squares fit of ``S(k) - U0 ~ sum_m S_m k^{-m}`` on the top of the k-grid.

    Unitarity of ``S`` forces ``U0 S_1`` to be anti-Hermitian.  ``S_1`` is
    fitted first and projected onto that set, then the higher coefficients
    are refitted to what remains, so fitting noise cannot leave a spurious
    ``log t`` term in ``F``.
    """
    sel = ks >= ks[-1] * (1 - fraction)
    if sel.sum() < 2 * order:
        sel = np.zeros_like(sel)
        sel[-2 * order:] = True
    kk = ks[sel]
    flat = (kk[:, None] * G[sel].reshape(kk.size, -1))  # k (S - U0)
    design = kk[:, None] ** -np.arange(0, order)[None, :]
    coef, *_ = np.linalg.lstsq(design, flat, rcond=None)
    coef = coef.reshape((order,) + G.shape[1:])
    A = U0 @ coef[0]
    coef[0] = U0 @ (A - dagger(A)) / 2
    if order > 1:
        rest = flat - coef[0].reshape(1, -1)
        higher, *_ = np.linalg.lstsq(design[:, 1:], rest, rcond=None)
        coef[1:] = higher.reshape((order - 1,) + G.shape[1:])
    return coef


def build_F(data: ScatteringDataset, grid: GridSpec, step: float | None = None,
            t_max: float | None = None) -> FKernel:
    """Tabulate ``F(t) = sum_j C_j^2 e^{-k_j t} + F_S(t)``.

    ``F_S(t) = (1/pi) Herm int_0^inf (S(k) - U0) e^{ikt} dk``; the negative-k
    half is folded in through ``S(-k) = S(k)^dag``.  The integral over the
    k-grid uses quadratic-panel Filon weights, with ``S(0)`` extrapolated
    from the first two samples and their mirror images.  Beyond ``K_max`` the integrand is replaced by an
    asymptote ``sum_m S_m k^{-m}`` fitted on the top quarter of the k-grid,
    integrated in closed form (sine/cosine integrals).
    Defaults tabulate on ``[0, 4 X_max]`` with step ``h_x / 2``.
    """
    step = grid.h_x / 2 if step is None else step
    t_max = 4 * grid.X_max if t_max is None else t_max
    nt = int(round(t_max / step)) + 1
    t = step * np.arange(nt)
    n = data.n

    bound = []
    for kj, C in data.bound_states:
        if mnorm(C) == 0:
            warnings.warn(f"dropping bound state at k={kj} with zero normalization matrix",
                          stacklevel=2)
            continue
        bound.append((kj, C @ C))

    ks = data.k_grid
    G = data.S - data.U0
    if ks.size:
        hk = ks[1] - ks[0] if ks.size > 1 else ks[0]
        if not np.allclose(np.diff(ks), hk, rtol=1e-9, atol=0):
            raise ValueError("build_F needs a uniform k-grid")
        gap = mnorm(G[-1])
        if gap > TAIL_LIMIT:
            raise TailTooLarge(f"|S(K_max) - U0| = {gap:.3f} > {TAIL_LIMIT}; raise K_max")
        if ks.size >= 2 and math.isclose(ks[0], hk, rel_tol=1e-9):
            # G(-k) = G(k)^dag, so a cubic through k = -2h..2h fixes G(0)
            G0 = (2 / 3) * (G[0] + dagger(G[0])) - (1 / 6) * (G[1] + dagger(G[1]))
            integral = filon_quadratic(np.concatenate([G0[None], G]), 0.0, hk, t)
        else:
            # grid does not start one step from the origin: hold S(k_1) on [0, k_1]
            integral = filon_quadratic(G, ks[0], hk, t)
            k1 = ks[0]
            tt = np.where(t > 0, t, 1.0)
            cell = np.where(t > 0, (np.exp(1j * k1 * t) - 1) / (1j * tt), k1)
            integral += cell[:, None, None] * G[0]
        if ks.size >= 4 * TAIL_ORDER:
            coef = _tail_coefficients(ks, G, data.U0, TAIL_ORDER)
        else:
            coef = (ks[-1] * G[-1])[None]
        for Tm, Sm in zip(_tail_integrals(ks[-1], t, coef.shape[0]), coef):
            integral += Tm[:, None, None] * Sm
        FS = hermitian_part(integral) / np.pi
    else:
        FS = np.zeros((nt, n, n), dtype=complex)

    F = FS.copy()
    for kj, C2 in bound:
        F += np.exp(-kj * t)[:, None, None] * C2
    return FKernel(t_grid=t, F=hermitian_part(F), bound_part=bound, fourier_part=FS)


# ---------------------------------------------------------------------------
# Nyström system


def _layout(F: FKernel, grid: GridSpec, window: float | None):
    h = grid.h_x
    if not math.isclose(2 * F.step, h, rel_tol=1e-9):
        raise ValueError(f"F is tabulated with step {F.step}; the solver needs h/2 = {h / 2}")
    Z = 2 * grid.X_max if window is None else window
    M = int(round(Z / h))
    if not math.isclose(M * h, Z, rel_tol=1e-9):
        raise ValueError("window must be a multiple of the grid step")
    if F.F.shape[0] < 4 * M + 1:
        raise ValueError(f"F must be tabulated out to {2 * Z}")
    return h, M


def _weights(M, h):
    w = np.full(M + 1, h)
    w[-1] = h / 2
    return w


def _hankel(Fh, lo, M, n, dtype):
    """Blocks ``G_ab = F((a+b) h)^T`` for ``a, b in lo..M`` as a square matrix."""
    idx = np.arange(lo, M + 1)
    blocks = np.swapaxes(Fh[idx[:, None] + idx[None, :]], -1, -2)  # (m, m, n, n)
    m = idx.size
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3)).reshape(m * n, m * n).astype(dtype)


def _dtype_for(F):
    return float if np.max(np.abs(F.F.imag), initial=0.0) == 0.0 else complex


def _table(F, dtype):
    """``F`` on the solver nodes (every other tabulated point) in the working dtype."""
    Fh = F.F[::2]
    return Fh.real.copy() if dtype is float else Fh


def _row_system(F: FKernel, i: int, M: int, h: float):
    """Dense ``(I + G W) X = -R`` for the row whose lower limit is node ``i``."""
    n = F.n
    dtype = _dtype_for(F)
    Fh = _table(F, dtype)
    w = _weights(M, h)[i:].copy()
    w[0] = h / 2
    G = _hankel(Fh, i, M, n, dtype)
    A = np.eye(G.shape[0], dtype=dtype) + G * np.repeat(w, n)[None, :]
    R = np.swapaxes(Fh[i + np.arange(i, M + 1)], -1, -2).reshape(-1, n).astype(dtype)
    return A, R, w


def marchenko_solve(F: FKernel, x: float, grid: GridSpec, window: float | None = None):
    """Solve one Marchenko row by a dense LU factorisation.

    Returns ``(K_row, residual)`` where ``K_row[j] = K(x, x + j h)`` on the
    nodes up to the window end.  Raises :class:`NearSingularSystem` when the
    Nyström matrix has condition number above 1e10.
    """
    h, M = _layout(F, grid, window)
    i = int(round(x / h))
    if not math.isclose(i * h, x, rel_tol=1e-9, abs_tol=1e-12) or i >= M:
        raise ValueError(f"x = {x} must be a grid node below the window end")
    n = F.n
    A, R, w = _row_system(F, i, M, h)
    lu = sla.lu_factor(A)
    anorm = np.linalg.norm(A, 1)
    gecon = sla.lapack.get_lapack_funcs("gecon", (lu[0],))
    rcond, _ = gecon(lu[0], anorm, norm="1")
    if rcond * COND_LIMIT < 1:
        raise NearSingularSystem(f"Nyström matrix at x={x} has condition ~{1 / rcond:.2e}")
    X = sla.lu_solve(lu, -R)
    K_row = np.swapaxes(X.reshape(M + 1 - i, n, n), -1, -2)
    K_full = np.zeros((1, M + 1, n, n), dtype=K_row.dtype)
    K_full[0, i:] = K_row
    res = _offnode_residual(F, K_full, np.array([i]), M, h)
    return K_row, float(res[0])


def homogeneous_margin(F: FKernel, x: float, grid: GridSpec, window: float | None = None) -> float:
    """Smallest singular value of the Nyström operator ``I + F_x`` at row ``x``.

    Computed on the weighted (discrete-L2) symmetrisation
    ``I + W^{1/2} G W^{1/2}``, which is similar to the Nyström matrix and is
    the discrete counterpart of the self-adjoint operator on ``L2(x, Z)``.
    """
    h, M = _layout(F, grid, window)
    i = int(round(x / h))
    A, _, w = _row_system(F, i, M, h)
    n = F.n
    sq = np.sqrt(np.repeat(w, n))
    eye = np.eye(A.shape[0])
    sym = eye + sq[:, None] * (A - eye) / np.repeat(w, n)[None, :] * sq[None, :]
    sym = hermitian_part(sym)
    try:
        factor = sla.cho_factor(sym, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        # indefinite: the eigenvalue closest to zero may be interior
        return float(np.min(np.abs(sla.eigvalsh(sym))))
    # positive definite: sigma_min = 1 / largest eigenvalue of the inverse (Lanczos)
    op = spla.LinearOperator(sym.shape, dtype=sym.dtype,
                             matvec=lambda v: sla.cho_solve(factor, v, check_finite=False))
    top = spla.eigsh(op, k=1, which="LA", return_eigenvectors=False, tol=1e-10,
                     v0=np.ones(sym.shape[0], dtype=sym.dtype))
    return float(1.0 / top[0])


def solve_marchenko(F: FKernel, grid: GridSpec, row_stride: int = 1, x_max: float | None = None,
                    window: float | None = None, check_residual: bool = True) -> MarchenkoKernel:
    """Solve the Marchenko equation on every row ``x_r = r * row_stride * h <= x_max``."""
    h, M = _layout(F, grid, window)
    n = F.n
    x_max = grid.X_max if x_max is None else x_max
    rows = np.arange(0, int(round(x_max / h)) + 1, row_stride)
    rows = rows[rows <= M - _STENCIL]
    if rows.size == 0:
        raise ValueError("no rows to solve")
    dtype = _dtype_for(F)
    Fh = _table(F, dtype)
    omega = _weights(M, h)
    sq = np.sqrt(np.repeat(omega, n))
    N = (M + 1) * n

    B = _hankel(Fh, 0, M, n, dtype)
    B *= sq[:, None]
    B *= sq[None, :]
    B[np.diag_indices(N)] += 1.0
    try:
        R = sla.cholesky(B[::-1, ::-1], lower=False, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError:
        log.warning("Nyström matrix is not positive definite; solving rows one by one")
        return _solve_rows_dense(F, grid, rows, M, h, window, check_residual)
    del B
    L = np.ascontiguousarray(R[::-1, ::-1])
    del R
    d = np.abs(np.diag(L))
    cond = (d.max() / d.min()) ** 2
    if cond > COND_LIMIT:
        raise NearSingularSystem(f"Nyström matrix condition estimate {cond:.2e} exceeds {COND_LIMIT:.0e}")

    nr = rows.size
    rhs = np.zeros((N, nr, 2, n), dtype=dtype)
    starts = rows * n
    for r, i in enumerate(rows):
        Ri = np.swapaxes(Fh[i + np.arange(i, M + 1)], -1, -2).reshape(-1, n)
        rhs[i * n:, r, 0, :] = -sq[i * n:, None] * Ri
        rhs[i * n:(i + 1) * n, r, 1, :] = np.eye(n)
    rhs = rhs.reshape(N, nr * 2 * n)
    z = sla.solve_triangular(L, rhs, lower=True, trans="C", check_finite=False, overwrite_b=True)
    z = z.reshape(N, nr, 2 * n)
    lead = np.arange(N)[:, None] < starts[None, :]
    z[lead] = 0.0
    y = sla.solve_triangular(L, z.reshape(N, -1), lower=True, check_finite=False, overwrite_b=True)
    y = y.reshape(M + 1, n, nr, 2, n)
    del z, L

    K = np.zeros((nr, M + 1, n, n), dtype=dtype)
    eye = np.eye(n)
    for r, i in enumerate(rows):
        p = y[:, :, r, 0, :]  # (M+1, n, n)
        q = y[:, :, r, 1, :]
        corr = np.linalg.solve(eye + q[i], p[i])
        zs = p - q @ corr
        X = zs / np.sqrt(omega)[:, None, None]
        X[i] *= 2.0
        X[:i] = 0.0
        K[r] = np.swapaxes(X, -1, -2)
    return _finish(F, K, rows, M, h, window if window is not None else 2 * grid.X_max,
                   check_residual)


def _solve_rows_dense(F, grid, rows, M, h, window, check_residual):
    n = F.n
    K = np.zeros((rows.size, M + 1, n, n), dtype=complex)
    for r, i in enumerate(rows):
        K_row, _ = marchenko_solve(F, i * h, grid, window)
        K[r, i:] = K_row
    return _finish(F, K, rows, M, h, window if window is not None else 2 * grid.X_max,
                   check_residual)


def _finish(F, K, rows, M, h, window, check_residual):
    nr = rows.size
    if check_residual:
        res = _offnode_residual(F, K, rows, M, h)
        node_res = _node_residual(F, K, rows, M, h)
        worst = int(np.argmax(res))
        if res[worst] > RESIDUAL_LIMIT:
            warnings.warn(f"Marchenko residual {res[worst]:.2e} at x = {rows[worst] * h:g} exceeds "
                          f"{RESIDUAL_LIMIT:.0e}; refine the x-grid or raise K_max", stacklevel=3)
    else:
        res = np.full(nr, np.nan)
        node_res = np.full(nr, np.nan)
    return MarchenkoKernel(x_grid=rows * h, row_index=rows, t_grid=h * np.arange(M + 1), K=K,
                           residual=res, node_residual=node_res, window=window)


def _quadrature_term(F, K, rows, M, h, offset):
    """``sum_b w_b K(x_r, t_b) F(t_b + y_a)`` with ``y_a = (a + offset/2) h``.

    ``offset`` is 0 for nodes and 1 for midpoints.  The sum is a correlation in
    ``b``, evaluated with FFTs.  Returns ``(rows, M+1, n, n)``.
    """
    nr = rows.size
    w = _weights(M, h)
    Kw = K * w[None, :, None, None]
    Kw[np.arange(nr), rows] *= 0.5  # half weight at the lower limit of each row
    idx = np.minimum(2 * np.arange(2 * M + 1) + offset, F.F.shape[0] - 1)
    H = F.F[idx]
    real = not np.iscomplexobj(K) and _dtype_for(F) is float
    if real:
        H = H.real
    size = sp_fft.next_fast_len(3 * M + 2)
    fk = sp_fft.fft(Kw[:, ::-1], size, axis=1)
    fh = sp_fft.fft(H, size, axis=0)
    conv = sp_fft.ifft(np.einsum("rjpq,jqs->rjps", fk, fh), axis=1)[:, M:2 * M + 1]
    return conv.real if real else conv


def _node_residual(F, K, rows, M, h):
    quad = _quadrature_term(F, K, rows, M, h, 0)
    res = np.zeros(rows.size)
    for r, i in enumerate(rows):
        a = np.arange(i, M + 1)
        e = K[r, a] + F.F[2 * (i + a)] + quad[r, a]
        res[r] = np.max(mnorm(e))
    return res


def _lagrange_weights(nodes, point):
    nodes = np.asarray(nodes, dtype=float)
    w = np.ones(nodes.size)
    for j, xj in enumerate(nodes):
        for m, xm in enumerate(nodes):
            if m != j:
                w[j] *= (point - xm) / (xj - xm)
    return w


_STENCIL = 6
# weights for the midpoint at offset p + 1/2 inside a 6-node window, p = 0..4
_MID_WEIGHTS = np.array([_lagrange_weights(np.arange(_STENCIL), p + 0.5) for p in range(_STENCIL - 1)])


def _midpoints(row):
    """Values at ``t_a + h/2`` from local six-point (quintic) interpolation."""
    m = row.shape[0]
    a = np.arange(m - 1)
    start = np.clip(a - (_STENCIL // 2 - 1), 0, m - _STENCIL)
    weights = _MID_WEIGHTS[a - start]  # (m-1, 6)
    window = row[start[:, None] + np.arange(_STENCIL)[None, :]]  # (m-1, 6, n, n)
    flat = window.reshape(window.shape[0], _STENCIL, -1)
    return (weights[:, None, :] @ flat).reshape((m - 1,) + row.shape[1:])


def _offnode_residual(F, K, rows, M, h):
    """Residual of the discrete equation at midpoints, with ``K`` interpolated locally."""
    quad = _quadrature_term(F, K, rows, M, h, 1)
    res = np.zeros(rows.size)
    for r, i in enumerate(rows):
        row = K[r, i:]
        if row.shape[0] < _STENCIL:
            res[r] = np.nan
            continue
        mid = _midpoints(row)
        a = np.arange(i, M)
        e = mid + F.F[2 * (i + a) + 1] + quad[r, a]
        res[r] = np.max(mnorm(e))
    return res


# ---------------------------------------------------------------------------
# recovery


def _fd_derivative(vals, h):
    """Fourth-order finite-difference derivative along axis 0 (one-sided at the ends)."""
    m = vals.shape[0]
    if m < 5:
        raise ValueError("need at least five samples for the derivative")
    d = np.empty_like(vals)
    d[2:-2] = (vals[:-4] - 8 * vals[1:-3] + 8 * vals[3:-1] - vals[4:]) / (12 * h)
    f0, f1, f2, f3, f4 = vals[:5]
    d[0] = (-25 * f0 + 48 * f1 - 36 * f2 + 16 * f3 - 3 * f4) / (12 * h)
    d[1] = (-3 * f0 - 10 * f1 + 18 * f2 - 6 * f3 + f4) / (12 * h)
    g0, g1, g2, g3, g4 = vals[::-1][:5]
    d[-1] = -(-25 * g0 + 48 * g1 - 36 * g2 + 16 * g3 - 3 * g4) / (12 * h)
    d[-2] = -(-3 * g0 - 10 * g1 + 18 * g2 - 6 * g3 + g4) / (12 * h)
    return d


def recover_potential(kernel: MarchenkoKernel, return_residual: bool = False):
    """``V(x) = -2 d/dx K(x, x)`` on the kernel rows, made Hermitian.

    With ``return_residual`` the largest anti-Hermitian part removed by the
    symmetrisation is returned as well.
    """
    x = kernel.x_grid
    hr = x[1] - x[0]
    V = -2.0 * _fd_derivative(kernel.diagonal().astype(complex), hr)
    anti = float(np.max(mnorm(V - dagger(V)))) / 2
    pot = HermitianPotential.sampled(x, hermitian_part(V))
    return (pot, anti) if return_residual else pot


def _default_k_samples(k_grid):
    targets = [0.5, 1.0, 1.5, 2.0]
    picks = {float(k_grid[np.argmin(np.abs(k_grid - t))]) for t in targets}
    return sorted(picks)


def _constrain_to_U0(M, U0):
    """Nearest unitary with the (-1)-eigenspace fixed by ``U0``.

    ``U0`` pins down the (-1)-eigenspace of ``U`` exactly; the remaining block
    is projected onto the unitary group on the complementary subspace.
    """
    lam, W = np.linalg.eigh(hermitian_part(U0))
    minus = W[:, lam < 0]
    plus = W[:, lam >= 0]
    U = -minus @ dagger(minus)
    if plus.shape[1]:
        U = U + plus @ polar_unitary(dagger(plus) @ M @ plus) @ dagger(plus)
    return U


def recover_boundary(kernel: MarchenkoKernel, data: ScatteringDataset, k_samples=None,
                     return_estimates: bool = False):
    """Boundary matrix ``U = (G - iG')(G + iG')^{-1}`` averaged over sample k.

    ``G(k, 0) = f(-k, 0) + f(k, 0) S(k)`` with the Jost solution rebuilt from
    the kernel rows.  ``f'(k, 0)`` comes from a fourth-order one-sided
    difference of the slowly varying factor ``e^{-ikx} f(k, x)`` over the
    first five rows.  Estimates are averaged with ``1/cond(G + iG')``
    weights (the condition number is taken relative to the size of
    ``[G; G']``) and projected onto the unitary matrices whose (-1)-eigenspace is
    the one encoded by ``U0``.
    """
    if k_samples is None:
        k_samples = _default_k_samples(data.k_grid)
    k_samples = np.asarray(k_samples, dtype=float)
    if np.any(k_samples == 0):
        raise ValueError("k = 0 cannot be used")
    n = kernel.n
    x = kernel.x_grid[:5]
    hr = x[1] - x[0]
    h = kernel.h
    ks = np.concatenate([k_samples, -k_samples])
    m = np.empty((5, ks.size, n, n), dtype=complex)
    for r in range(5):
        i = kernel.row_index[r]
        integral = filon_linear(kernel.K[r, i:], kernel.t_grid[i], h, ks)
        f = np.exp(1j * ks * x[r])[:, None, None] * np.eye(n) + integral
        m[r] = np.exp(-1j * ks * x[r])[:, None, None] * f
    f0 = m[0]
    dm0 = (-25 * m[0] + 48 * m[1] - 36 * m[2] + 16 * m[3] - 3 * m[4]) / (12 * hr)
    fp0 = 1j * ks[:, None, None] * m[0] + dm0
    nk = k_samples.size
    estimates, weights = [], []
    for j, k in enumerate(k_samples):
        S = data.S_at(k)
        G = f0[nk + j] + f0[j] @ S
        Gp = fp0[nk + j] + fp0[j] @ S
        D = G + 1j * Gp
        # conditioning relative to the size of [G; G'], so a vanishing D is caught for n = 1 too
        smin = np.linalg.svd(D, compute_uv=False)[-1]
        scale = np.linalg.norm(np.concatenate([G, Gp]), 2)
        c = scale / smin if smin > 0 else np.inf
        if not np.isfinite(c) or c > COND_LIMIT:
            estimates.append(np.full((n, n), np.nan, dtype=complex))
            weights.append(0.0)
            continue
        estimates.append((G - 1j * Gp) @ np.linalg.inv(D))
        weights.append(1.0 / c)
    weights = np.array(weights)
    if not np.any(weights > 0):
        raise IllConditionedRecovery("G + iG' is ill conditioned at every sample k")
    good = weights > 0
    avg = np.tensordot(weights[good] / weights[good].sum(), np.array(estimates)[good], axes=1)
    U = _constrain_to_U0(avg, data.U0)
    if return_estimates:
        return U, {"k_samples": k_samples, "estimates": np.array(estimates),
                   "weights": weights,
                   "spread": float(max(mnorm(e - U) for e, ok in zip(estimates, good) if ok))}
    return U


def run_inverse(data: ScatteringDataset, grid: GridSpec, row_stride: int = 1,
                window: float | None = None, margin_points: int = 3) -> RecoveredModel:
    """Scattering data -> ``(V, U)``: build F, solve all rows, read off V and U."""
    F = build_F(data, grid)
    kernel = solve_marchenko(F, grid, row_stride=row_stride, window=window)
    V_rec, anti = recover_potential(kernel, return_residual=True)
    U_rec, est = recover_boundary(kernel, data, return_estimates=True)
    margins = {}
    xs = kernel.x_grid
    for x in np.linspace(0, xs[-1], margin_points) if margin_points else []:
        xn = xs[np.argmin(np.abs(xs - x))]
        margins[float(xn)] = homogeneous_margin(F, float(xn), grid, window)
    diagnostics = {
        "max_residual": float(np.nanmax(kernel.residual)),
        "max_node_residual": float(np.nanmax(kernel.node_residual)),
        "anti_hermitian": anti,
        "homogeneous_margin": margins,
        "min_margin": min(margins.values()) if margins else float("nan"),
        "U_estimates": est,
        "U_spread": est["spread"],
        "kernel": kernel,
        "F": F,
    }
    return RecoveredModel(V_rec=V_rec, U_rec=U_rec, diagnostics=diagnostics)
