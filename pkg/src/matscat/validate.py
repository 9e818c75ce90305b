"""Admissibility checks on scattering data and identity checks on solver output.

Conditions checked on a dataset:

* **(I)** ``S(k)`` unitary with ``S(-k) = S(k)^dag``, ``U0`` unitary and
  Hermitian, and ``S(k) - U0`` decaying like ``c/k``.
* **(II)** ``int_0^inf (1 + t) ||F'(t)|| dt < inf``, judged on the tabulation.
* **(III)** bound-state wavenumbers positive and increasing, normalization
  matrices Hermitian positive semidefinite and nonzero.

All checks report; none of them raise on failing data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson

from .core import BoundaryCondition, GridSpec, ScatteringError, dagger, mnorm
from .direct import ScatteringDataset, _jost_batch, scattering_matrices
from .inverse import FKernel, RecoveredModel, build_F

__all__ = [
    "DimensionMismatch",
    "ConditionReport",
    "check_condition_I",
    "check_condition_II",
    "check_condition_III",
    "check_conditions",
    "wronskian_report",
    "roundtrip_report",
]

TOL_DIRECT = 1e-6
TAIL_SHARE = 0.05
NOISE_FLOOR = 1e-2
DECAY_SLOPE = 0.25


class DimensionMismatch(ScatteringError, ValueError):
    pass


@dataclass
class ConditionReport:
    """Outcome of the three admissibility checks.

    Each fragment is a dict with at least a boolean ``passed`` entry plus the
    residuals behind the verdict.
    """

    condition_I: dict
    condition_II: dict
    condition_III: dict
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in (self.condition_I, self.condition_II, self.condition_III))

    def failed(self) -> list[str]:
        names = {"I": self.condition_I, "II": self.condition_II, "III": self.condition_III}
        return [name for name, frag in names.items() if not frag["passed"]]


def _finite(x) -> float:
    x = float(x)
    return x if np.isfinite(x) else float("inf")


def check_condition_I(data: ScatteringDataset, tol: float = TOL_DIRECT) -> dict:
    """Unitarity, symmetry, ``U0`` structure and ``c/k`` decay of ``S - U0``.

    The decay test fits the log-log slope of ``k ||S(k) - U0||`` over the top
    quarter of the grid (the range the tail fit of ``F`` relies on).  For
    ``S - U0 = S_1/k + S_2/k^2 + ...`` the slope is ``O(1/k)``; a slope above
    ``DECAY_SLOPE`` means ``S - U0`` decays more slowly than ``c/k``.
    """
    n = data.n
    eye = np.eye(n)
    S = data.S
    unitarity = _finite(np.max(mnorm(dagger(S) @ S - eye), initial=0.0))
    inverse = _finite(np.max(mnorm(S @ dagger(S) - eye), initial=0.0))
    # S(-k) is stored through the Hermitian extension; check it reproduces S^dag
    # and that S^dag acts as S^{-1}
    if data.k_grid.size:
        k0 = data.k_grid[0]
        symmetry = _finite(mnorm(data.S_at(-k0) @ data.S_at(k0) - eye))
    else:
        symmetry = 0.0
    U0 = data.U0
    u0_herm = _finite(mnorm(U0 - dagger(U0)))
    u0_unit = _finite(mnorm(dagger(U0) @ U0 - eye))

    ks = data.k_grid
    top = ks >= 0.75 * ks[-1] if ks.size else np.zeros(0, bool)
    decay_ok, c_fit, slope = True, 0.0, 0.0
    if top.sum() >= 4:
        kk = ks[top]
        scaled = kk * mnorm(S[top] - U0)
        c_fit = float(np.max(scaled))
        if c_fit > 1e-8 * ks[-1] and np.all(scaled > 0):
            slope = float(np.polyfit(np.log(kk), np.log(scaled), 1)[0])
            decay_ok = bool(slope <= DECAY_SLOPE)
    passed = (max(unitarity, inverse, symmetry) <= tol and u0_herm <= 1e-10
              and u0_unit <= 1e-10 and decay_ok)
    return {"passed": bool(passed), "unitarity": unitarity, "inverse": inverse,
            "symmetry": symmetry, "U0_hermitian": u0_herm, "U0_unitary": u0_unit,
            "decay_constant": c_fit, "decay_slope": slope, "decay_ok": decay_ok}


def check_condition_II(F: FKernel, tail_fraction: float = 0.25,
                       tail_share: float = TAIL_SHARE, floor: float = NOISE_FLOOR) -> dict:
    """Estimate ``int (1 + t) ||F'(t)|| dt`` and judge whether it converges.

    ``F'`` comes from second-order differences on the tabulation.  Two
    quantities over the last ``tail_fraction`` of the grid must stay below
    ``tail_share`` of the total (plus an absolute ``floor`` for quadrature
    noise): the increment of the cumulative integral, and the mean of
    ``t ||F(t)||``, which estimates ``c`` when ``F`` decays like ``c/t`` (the
    borderline case in which ``(1 + t) ||F'||`` is no longer integrable).
    ``F`` itself is used for the level rather than ``t (1 + t) ||F'||``
    because differencing amplifies quadrature noise by ``t^2 / h``.
    """
    t = F.t_grid
    dF = np.gradient(F.F, t, axis=0)
    integrand = (1 + t) * mnorm(dF)
    cum = cumulative_trapezoid(integrand, t, initial=0.0)
    total = _finite(cum[-1])
    start = int(np.floor((1 - tail_fraction) * (t.size - 1)))
    increment = _finite(cum[-1] - cum[start])
    level = _finite(np.mean(t[start:] * mnorm(F.F[start:])))
    bound = tail_share * total + floor
    passed = total == 0.0 or (increment <= bound and level <= bound)
    return {"passed": bool(passed), "integral": total, "tail_increment": increment,
            "tail_level": level, "tail_share": increment / total if total > 0 else 0.0}


def check_condition_III(data: ScatteringDataset, tol_rank: float = 1e-6) -> dict:
    """Bound-state wavenumbers and normalization matrices."""
    ks = np.array([k for k, _ in data.bound_states], dtype=float)
    diagnostics = []
    ok = True
    if ks.size and (np.any(ks <= 0) or np.any(np.diff(ks) <= 0)):
        ok = False
        diagnostics.append({"problem": "wavenumbers must be positive and strictly increasing",
                            "k": ks.tolist()})
    for k, C in data.bound_states:
        scale = max(1.0, float(mnorm(C)))
        herm = _finite(mnorm(C - dagger(C)))
        lam = np.linalg.eigvalsh((C + dagger(C)) / 2)
        rank = int(np.sum(lam > tol_rank * scale))
        entry = {"k": k, "hermitian_residual": herm, "min_eigenvalue": float(lam.min()),
                 "rank": rank, "passed": True}
        if herm > 1e-8 * scale:
            entry["passed"] = False
            entry["problem"] = "normalization matrix is not Hermitian"
        elif lam.min() < -tol_rank * scale:
            entry["passed"] = False
            entry["problem"] = f"normalization matrix has eigenvalue {lam.min():.3g} < 0"
        elif rank < 1:
            entry["passed"] = False
            entry["problem"] = "normalization matrix is zero"
        ok = ok and entry["passed"]
        diagnostics.append(entry)
    return {"passed": bool(ok), "bound_states": diagnostics}


def check_conditions(data: ScatteringDataset, grid: GridSpec | None = None,
                     F: FKernel | None = None) -> ConditionReport:
    """Run (I)-(III).  ``F`` is built from ``data`` on ``grid`` when not given."""
    notes = []
    if F is None:
        grid = grid if grid is not None else _grid_from_meta(data)
        try:
            F = build_F(data, grid)
        except ScatteringError as exc:
            notes.append(f"F could not be assembled: {exc}")
    c1 = check_condition_I(data)
    c2 = check_condition_II(F) if F is not None else {"passed": False, "integral": float("inf")}
    c3 = check_condition_III(data)
    return ConditionReport(c1, c2, c3, notes)


def _grid_from_meta(data: ScatteringDataset) -> GridSpec:
    keys = ("K_max", "n_k", "X_max", "n_x", "tol_rank", "tol_tail")
    kwargs = {k: data.meta[k] for k in keys if k in data.meta}
    return GridSpec(**kwargs)


def _wronskian(F, Fp, G, Gp):
    """``[F; G] = F G' - F' G`` for stacked matrix samples."""
    return F @ Gp - Fp @ G


def wronskian_report(V, bc: BoundaryCondition | None, grid: GridSpec, k_list) -> dict:
    """Largest residuals of the two Wronskian identities of the Jost solution.

    ``[f(k)^dag; f(k)] = 2ik I`` and ``[f(-k)^dag; f(k)] = 0`` for real
    ``k != 0``, over all ``x`` in ``grid.x_grid``.  ``bc`` is unused by the
    identities and accepted for interface symmetry.
    """
    ks = np.asarray(k_list, dtype=float)
    if np.any(ks == 0):
        raise ValueError("k = 0 is excluded")
    xs = grid.x_grid
    f, fp = _jost_batch(V, np.concatenate([ks, -ks]), grid.X_max, xs)
    m = ks.size
    fk, fpk = f[:m], fp[:m]
    fm, fpm = f[m:], fp[m:]
    eye = np.eye(f.shape[-1])
    w1 = _wronskian(dagger(fk), dagger(fpk), fk, fpk) - 2j * ks[:, None, None, None] * eye
    w2 = _wronskian(dagger(fm), dagger(fpm), fk, fpk)
    return {"same_k": float(np.max(mnorm(w1))), "opposite_k": float(np.max(mnorm(w2)))}


def _weighted_l1(diff_fn, X, num=4001):
    xs = np.linspace(0.0, X, num)
    return float(simpson((1 + xs) * mnorm(diff_fn(xs)), x=xs))


def roundtrip_report(original, recovered: RecoveredModel, grid: GridSpec,
                     data: ScatteringDataset | None = None, k_eval=None) -> dict:
    """Distances between ``(V, U)`` and a recovered model.

    The potential error is ``int (1+x)||V - V_rec|| dx / int (1+x)||V|| dx``
    over ``[0, X_max]`` (absolute when ``V`` vanishes).  The scattering error
    re-runs the direct solver on the recovered model and compares with
    ``data`` (or with a fresh direct run of the original) on ``k_eval``,
    which defaults to the grid's k-samples.
    """
    from .core import boundary_pair

    V, U = original
    U = np.asarray(U, dtype=complex)
    if V.n != recovered.V_rec.n or U.shape != recovered.U_rec.shape or V.n != U.shape[0]:
        raise DimensionMismatch(f"original is {V.n}x{V.n}, recovered is "
                                f"{recovered.V_rec.n}x{recovered.V_rec.n}")
    X = grid.X_max
    num = _weighted_l1(lambda xs: V(xs) - recovered.V_rec(xs), X)
    den = _weighted_l1(V, X)
    pot = num / den if den > 0 else num
    ks = grid.k_grid if k_eval is None else np.asarray(k_eval, dtype=float)
    bc_rec = boundary_pair(recovered.U_rec, tol=1e-8)
    S_rec = scattering_matrices(recovered.V_rec, bc_rec, ks, grid)
    if data is not None and k_eval is None and np.array_equal(data.k_grid, ks):
        S_ref = data.S
    else:
        S_ref = scattering_matrices(V, boundary_pair(U), ks, grid)
    return {"potential_error": float(pot), "potential_error_relative": den > 0,
            "boundary_error": float(mnorm(U - recovered.U_rec)),
            "scattering_error": float(np.max(mnorm(S_rec - S_ref)))}
