"""Independent reference computations used as test oracles.

Nothing here calls into the package's numerical routines; each oracle uses a
different formulation (Volterra iteration, forward shooting, closed forms).
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import cumulative_trapezoid, solve_ivp


def picard_jost(V, k: float, X: float = 20.0, num: int = 40001, iters: int = 60, tol: float = 1e-13):
    """``f(k, x)`` from fixed-point iteration of the Volterra equation.

    ``f(x) = e^{ikx} I + int_x^X sin(k (t - x)) / k  V(t) f(t) dt`` on a fine
    uniform grid, with the integral split into ``cos(kx) int sin(kt) ...``
    and ``sin(kx) int cos(kt) ...`` so each sweep is two cumulative sums.
    Returns ``(x, f)`` with ``f`` of shape ``(num, n, n)``.
    """
    x = np.linspace(0.0, X, num)
    Vx = V(x)
    n = Vx.shape[-1]
    free = np.exp(1j * k * x)[:, None, None] * np.eye(n)
    f = free.copy()
    s, c = np.sin(k * x)[:, None, None], np.cos(k * x)[:, None, None]
    for _ in range(iters):
        g = Vx @ f
        # int_x^X h(t) dt = total - int_0^x h(t) dt
        def tail(h):
            cum = cumulative_trapezoid(h, x, axis=0, initial=0.0)
            return cum[-1] - cum
        new = free + (c * tail(s * g) - s * tail(c * g)) / k
        delta = np.max(np.abs(new - f))
        f = new
        if delta < tol:
            break
    return x, f


def shooting_bound_states(V, A, B, kappa_max: float, X: float = 12.0, num: int = 120):
    """Bound-state wavenumbers of a scalar problem by forward shooting.

    Starts from ``psi(0) = A, psi'(0) = B`` (which satisfies the boundary
    condition), integrates ``psi'' = (V + kappa^2) psi`` to ``X`` and looks
    for sign changes of the mismatch ``psi'(X) + kappa psi(X)`` against the
    decaying solution.  Roots are refined by bisection.
    """
    A = complex(np.asarray(A).ravel()[0])
    B = complex(np.asarray(B).ravel()[0])
    # A and B share a phase for a scalar self-adjoint condition; remove it
    phase = A / abs(A) if abs(A) > abs(B) else B / abs(B)
    a, b = (A / phase).real, (B / phase).real

    def mismatch(kappa):
        def rhs(x, y):
            v = np.real(np.asarray(V(x)).ravel()[0])
            return [y[1], (v + kappa * kappa) * y[0]]
        sol = solve_ivp(rhs, (0.0, X), [a, b], method="DOP853", rtol=1e-12, atol=1e-14)
        psi, dpsi = sol.y[0, -1], sol.y[1, -1]
        return (dpsi + kappa * psi) * np.exp(-kappa * X)

    grid = np.linspace(1e-3, kappa_max, num)
    vals = np.array([mismatch(kk) for kk in grid])
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
        lo, hi, flo = grid[i], grid[i + 1], vals[i]
        for _ in range(45):
            mid = (lo + hi) / 2
            fm = mismatch(mid)
            if np.sign(fm) == np.sign(flo):
                lo, flo = mid, fm
            else:
                hi = mid
        roots.append((lo + hi) / 2)
    return roots


def robin_S(alpha: float, k):
    """Scalar free Robin scattering matrix ``-(c + ik)/(c - ik)``, ``c = -tan(alpha/2)``."""
    c = -np.tan(alpha / 2)
    k = np.asarray(k, dtype=float)
    return -(c + 1j * k) / (c - 1j * k)


def soliton_jost(k, x):
    """Jost solution of ``V = -2 sech^2 x``: ``e^{ikx} (k + i tanh x) / (k + i)``."""
    x = np.asarray(x, dtype=float)
    return np.exp(1j * k * x) * (k + 1j * np.tanh(x)) / (k + 1j)


def soliton_kernel(x, y):
    """Marchenko kernel for ``F(t) = 2 e^{-t}``."""
    return -2 * np.exp(-(x + y)) / (1 + np.exp(-2 * x))


def random_unitary(rng, n):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_hermitian(rng, n, scale=1.0):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (z + z.conj().T) / 2
