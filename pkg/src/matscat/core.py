"""Domain types and small linear-algebra kernels shared by every module.

Matrices are dense ``numpy`` arrays of shape ``(n, n)`` (or stacks
``(..., n, n)``).  The matrix norm is the max-row-sum norm used throughout
the theory, see :func:`mnorm`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "ScatteringError",
    "NonUnitary",
    "NotPositiveDefinite",
    "BoundaryCondition",
    "HermitianPotential",
    "GridSpec",
    "mnorm",
    "dagger",
    "hermitian_part",
    "boundary_pair",
    "nullspace_projector",
    "psd_inv_sqrt",
    "polar_unitary",
    "filon_linear",
]

MAX_DIM = 8


class ScatteringError(Exception):
    """Base class for every error raised by the library."""


class NonUnitary(ScatteringError, ValueError):
    pass


class NotPositiveDefinite(ScatteringError, ValueError):
    pass


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def mnorm(m: np.ndarray) -> np.ndarray | float:
    """Max-row-sum norm ``max_l sum_s |m_ls|`` over the last two axes."""
    out = np.abs(m).sum(axis=-1).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _as_matrix(m: Any, name: str = "matrix") -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=complex))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not 1 <= a.shape[0] <= MAX_DIM:
        raise ValueError(f"{name} dimension {a.shape[0]} outside 1..{MAX_DIM}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


# ---------------------------------------------------------------------------
# boundary condition


@dataclass(frozen=True, eq=False)
class BoundaryCondition:
    """Self-adjoint boundary condition generated by a unitary matrix.

    ``A = (U + I)/2`` and ``B = i(U - I)/2``; the condition on a solution is
    ``-B^dag psi(0) + A^dag psi'(0) = 0``.
    """

    U: np.ndarray
    A: np.ndarray
    B: np.ndarray

    @property
    def n(self) -> int:
        return self.U.shape[0]


def boundary_pair(U: Any, tol: float = 1e-10) -> BoundaryCondition:
    U = _as_matrix(U, "U")
    eye = np.eye(U.shape[0])
    resid = mnorm(dagger(U) @ U - eye)
    if resid > tol:
        raise NonUnitary(f"U is not unitary: |U^dag U - I| = {resid:.3e}")
    A = 0.5 * (U + eye)
    B = 0.5j * (U - eye)
    return BoundaryCondition(U=U, A=A, B=B)


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True, eq=False)
class HermitianPotential:
    """Hermitian matrix potential ``V(x)`` on the half line.

    Build instances through the factories :meth:`zero`, :meth:`sech2`,
    :meth:`exp_decay` and :meth:`sampled`.  Calling the object evaluates
    ``V`` at a scalar (``(n, n)`` result) or at an array of positions
    (``(len(x), n, n)`` result).
    """

    n: int
    kind: str
    params: dict = field(default_factory=dict)
    x: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if not 1 <= self.n <= MAX_DIM:
            raise ValueError(f"dimension {self.n} outside 1..{MAX_DIM}")
        if self.kind not in ("zero", "sech2", "exp_decay", "sampled"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        for key in ("H", "coupling"):
            if key in self.params:
                _check_hermitian(self.params[key], key)
        if self.kind == "sampled":
            if self.x is None or self.v is None:
                raise ValueError("sampled potential needs x and v")
            if self.x.ndim != 1 or len(self.x) < 2 or np.any(np.diff(self.x) <= 0):
                raise ValueError("sample positions must be strictly increasing")
            if self.v.shape != (len(self.x), self.n, self.n):
                raise ValueError(f"samples have shape {self.v.shape}")
            _check_hermitian(self.v, "samples")
            object.__setattr__(self, "_interp", _sampled_interp(self.x, self.v))

    # -- factories --------------------------------------------------------

    @classmethod
    def zero(cls, n: int = 1) -> "HermitianPotential":
        return cls(n=n, kind="zero")

    @classmethod
    def sech2(cls, kappa: float = 1.0, n: int = 1, coupling: Any = None) -> "HermitianPotential":
        """``V(x) = -2 kappa^2 sech^2(kappa x) * coupling`` (coupling defaults to I)."""
        c = np.eye(n, dtype=complex) if coupling is None else _as_matrix(coupling, "coupling")
        return cls(n=c.shape[0], kind="sech2", params={"kappa": float(kappa), "coupling": c})

    @classmethod
    def exp_decay(cls, H: Any, rate: float = 1.0) -> "HermitianPotential":
        """``V(x) = exp(-rate x) H`` with ``H`` Hermitian."""
        H = _as_matrix(H, "H")
        if rate <= 0:
            raise ValueError("rate must be positive")
        return cls(n=H.shape[0], kind="exp_decay", params={"H": H, "rate": float(rate)})

    @classmethod
    def sampled(cls, x: Any, v: Any) -> "HermitianPotential":
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=complex)
        if v.ndim == 1:
            v = v[:, None, None]
        return cls(n=v.shape[-1], kind="sampled", x=x, v=v)

    # -- evaluation -------------------------------------------------------

    def __call__(self, x):
        xs = np.asarray(x, dtype=float)
        flat = np.atleast_1d(xs)
        if self.kind == "zero":
            out = np.zeros((flat.size, self.n, self.n), dtype=complex)
        elif self.kind == "sech2":
            k = self.params["kappa"]
            s = -2.0 * k * k / np.cosh(k * flat) ** 2
            out = s[:, None, None] * self.params["coupling"]
        elif self.kind == "exp_decay":
            s = np.exp(-self.params["rate"] * flat)
            out = s[:, None, None] * self.params["H"]
        else:
            out = self._interp(flat)
        return out[0] if xs.ndim == 0 else out

    def tail_bound(self, X: float) -> float:
        """Upper estimate of ``int_X^inf ||V(t)|| dt``."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "sech2":
            k = self.params["kappa"]
            return 4.0 * k * np.exp(-2 * k * X) * mnorm(self.params["coupling"])
        if self.kind == "exp_decay":
            a = self.params["rate"]
            return np.exp(-a * X) / a * mnorm(self.params["H"])
        rate = self._interp.rate
        return mnorm(self(X)) / rate

    def sup_norm(self, X: float, num: int = 2001) -> float:
        xs = np.linspace(0.0, X, num)
        return float(np.max(mnorm(self(xs))))

    def weighted_norm(self, X: float, num: int = 4001) -> float:
        """``int_0^X (1 + x) ||V(x)|| dx`` by the composite Simpson rule."""
        from scipy.integrate import simpson

        xs = np.linspace(0.0, X, num)
        return float(simpson((1 + xs) * mnorm(self(xs)), x=xs))


def _check_hermitian(m, name):
    m = np.asarray(m, dtype=complex)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    resid = np.max(np.atleast_1d(mnorm(m - dagger(m))))
    if resid > 1e-12 * max(1.0, float(np.max(np.atleast_1d(mnorm(m))))):
        raise ValueError(f"{name} is not Hermitian (residual {resid:.3e})")


class _sampled_interp:
    """Monotone cubic interpolation with an exponential tail."""

    def __init__(self, x, v):
        self.x = x
        self.v = v
        n = v.shape[-1]
        flat = v.reshape(len(x), n * n)
        self.re = PchipInterpolator(x, flat.real, axis=0, extrapolate=False)
        self.im = PchipInterpolator(x, flat.imag, axis=0, extrapolate=False)
        self.n = n
        # decay rate from the last two sample norms; falls back to 1
        norms = mnorm(v[-2:])
        dx = x[-1] - x[-2]
        rate = 1.0
        if norms[0] > norms[1] > 0:
            rate = np.log(norms[0] / norms[1]) / dx
        self.rate = float(np.clip(rate, 1e-2, 1e2))

    def __call__(self, xs):
        n = self.n
        inside = (xs >= self.x[0]) & (xs <= self.x[-1])
        out = np.zeros((xs.size, n * n), dtype=complex)
        if np.any(inside):
            xi = xs[inside]
            out[inside] = self.re(xi) + 1j * self.im(xi)
        below = xs < self.x[0]
        out[below] = self.v[0].reshape(-1)
        above = xs > self.x[-1]
        if np.any(above):
            decay = np.exp(-self.rate * (xs[above] - self.x[-1]))
            out[above] = decay[:, None] * self.v[-1].reshape(-1)
        return out.reshape(xs.size, n, n)


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Uniform discretisations of ``k in (0, K_max]`` and ``x in [0, X_max]``.

    ``tol_rank`` is relative to the largest singular value of the matrix
    whose numerical rank is being judged.
    """

    K_max: float = 40.0
    n_k: int = 800
    X_max: float = 20.0
    n_x: int = 401
    tol_rank: float = 1e-6
    tol_tail: float = 1e-8

    def __post_init__(self):
        if self.n_k < 2 or self.n_x < 2:
            raise ValueError("n_k and n_x must be at least 2")
        for name in ("K_max", "X_max", "tol_rank", "tol_tail"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def h_k(self) -> float:
        return self.K_max / self.n_k

    @property
    def h_x(self) -> float:
        return self.X_max / (self.n_x - 1)

    @property
    def k_grid(self) -> np.ndarray:
        return self.h_k * np.arange(1, self.n_k + 1)

    @property
    def x_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.X_max, self.n_x)

    def refined(self, factor: int = 2) -> "GridSpec":
        """Same cutoffs with both step sizes divided by ``factor``."""
        return GridSpec(
            K_max=self.K_max,
            n_k=self.n_k * factor,
            X_max=self.X_max,
            n_x=(self.n_x - 1) * factor + 1,
            tol_rank=self.tol_rank,
            tol_tail=self.tol_tail,
        )


# ---------------------------------------------------------------------------
# linear algebra kernels


def nullspace_projector(M: Any, tol_rank: float) -> tuple[np.ndarray, int]:
    """Orthogonal projector onto the span of small left-singular vectors.

    Singular values below ``tol_rank`` (absolute) count as zero.  The range of
    the returned projector is ``ker M^dag``, so ``P @ M`` is negligible.
    """
    M = np.asarray(M, dtype=complex)
    u, s, _ = np.linalg.svd(M)
    small = s < tol_rank
    w = u[:, small]
    return w @ dagger(w), int(small.sum())


def psd_inv_sqrt(M: Any, tol: float = 1e-12) -> np.ndarray:
    """Inverse square root of a Hermitian positive-definite matrix."""
    M = np.asarray(M, dtype=complex)
    w, q = np.linalg.eigh(hermitian_part(M))
    if w[0] <= tol * max(1.0, abs(w[-1])):
        raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} is not positive")
    return (q / np.sqrt(w)) @ dagger(q)


def polar_unitary(M: np.ndarray) -> np.ndarray:
    """Nearest unitary matrix (unitary polar factor)."""
    u, _, vh = np.linalg.svd(M)
    return u @ vh


# ---------------------------------------------------------------------------
# oscillatory quadrature


def _filon_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``int_0^1 (1-s) e^{i theta s} ds`` and ``int_0^1 s e^{i theta s} ds``."""
    theta = np.asarray(theta, dtype=float)
    a = np.empty(theta.shape, dtype=complex)
    b = np.empty(theta.shape, dtype=complex)
    small = np.abs(theta) < 0.5
    t = theta[~small]
    e = np.exp(1j * t)
    a[~small] = (1 + 1j * t - e) / t**2
    b[~small] = (e * (1 - 1j * t) - 1) / t**2
    if np.any(small):
        ts = theta[small]
        term = np.ones_like(ts, dtype=complex)
        sa = np.zeros_like(term)
        sb = np.zeros_like(term)
        for m in range(18):
            if m:
                term = term * (1j * ts) / m
            sa += term / ((m + 1) * (m + 2))
            sb += term / (m + 2)
        a[small] = sa
        b[small] = sb
    return a, b


def filon_linear(values: np.ndarray, start: float, step: float, omega: np.ndarray,
                 chunk: int = 512) -> np.ndarray:
    """Integrate the piecewise-linear interpolant of samples against ``e^{i omega s}``.

    ``values`` has shape ``(m, ...)`` with samples at ``start + j*step``; the
    result has shape ``(len(omega), ...)``.  The rule is exact for linear
    panels, so it stays accurate when ``omega * step`` is large.
    """
    values = np.asarray(values)
    omega = np.asarray(omega, dtype=float)
    m = values.shape[0]
    tail_shape = values.shape[1:]
    flat = values.reshape(m, -1)
    nodes = start + step * np.arange(m)
    out = np.empty((omega.size, flat.shape[1]), dtype=complex)
    for lo in range(0, omega.size, chunk):
        om = omega[lo:lo + chunk]
        phase = np.exp(1j * np.outer(om, nodes))
        full = phase @ flat
        s_lo = full - phase[:, -1:] * flat[-1]
        s_hi = full - phase[:, :1] * flat[0]
        a, b = _filon_coeffs(om * step)
        out[lo:lo + chunk] = step * (a[:, None] * s_lo
                                     + (b * np.exp(-1j * om * step))[:, None] * s_hi)
    return out.reshape((omega.size,) + tail_shape)


def _centered_moments(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``mu_m = int_{-1}^{1} s^m e^{i theta s} ds`` for ``m = 0, 1, 2``."""
    theta = np.asarray(theta, dtype=float)
    mu = np.empty((3,) + theta.shape, dtype=complex)
    small = np.abs(theta) < 1.0
    t = theta[~small]
    s, c = np.sin(t), np.cos(t)
    mu[0, ~small] = 2 * s / t
    mu[1, ~small] = 2j * (s - t * c) / t**2
    mu[2, ~small] = 2 * ((t**2 - 2) * s + 2 * t * c) / t**3
    if np.any(small):
        ts = theta[small]
        term = np.ones_like(ts, dtype=complex)
        acc = np.zeros((3,) + ts.shape, dtype=complex)
        for j in range(30):
            if j:
                term = term * (1j * ts) / j
            for m in range(3):
                if (m + j) % 2 == 0:
                    acc[m] += term * 2 / (m + j + 1)
        mu[:, small] = acc
    return mu[0], mu[1], mu[2]


def filon_quadratic(values: np.ndarray, start: float, step: float, omega: np.ndarray,
                    chunk: int = 512) -> np.ndarray:
    """Integrate piecewise-quadratic interpolants of samples against ``e^{i omega s}``.

    Panels are consecutive node pairs; with an even number of samples the
    last interval falls back to a linear panel.  Same calling convention as
    :func:`filon_linear`.
    """
    values = np.asarray(values)
    omega = np.asarray(omega, dtype=float)
    m = values.shape[0]
    if m < 3:
        return filon_linear(values, start, step, omega, chunk)
    tail_shape = values.shape[1:]
    flat = values.reshape(m, -1)
    last = m - 1 if (m - 1) % 2 == 0 else m - 2
    centres = start + step * np.arange(1, last, 2)
    out = np.empty((omega.size, flat.shape[1]), dtype=complex)
    for lo in range(0, omega.size, chunk):
        om = omega[lo:lo + chunk]
        phase = np.exp(1j * np.outer(om, centres))
        mu0, mu1, mu2 = _centered_moments(om * step)
        w_left, w_mid, w_right = (mu2 - mu1) / 2, mu0 - mu2, (mu2 + mu1) / 2
        acc = (w_left[:, None] * (phase @ flat[0:last - 1:2])
               + w_mid[:, None] * (phase @ flat[1:last:2])
               + w_right[:, None] * (phase @ flat[2:last + 1:2]))
        out[lo:lo + chunk] = step * acc
    result = out.reshape((omega.size,) + tail_shape)
    if last != m - 1:
        result = result + filon_linear(values[last:], start + step * last, step, omega, chunk)
    return result
