"""JSON and CSV encoding of potentials, boundary matrices, datasets and models.

Complex numbers are ``[re, im]`` pairs and matrices are row-major nested
lists, so a 2x2 matrix is ``[[[re, im], [re, im]], [[re, im], [re, im]]]``.
Real-valued matrices may also be written with plain numbers.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .core import HermitianPotential
from .direct import ScatteringDataset

__all__ = [
    "InputError",
    "encode_complex",
    "decode_complex",
    "load_json",
    "dump_json",
    "potential_from_json",
    "potential_to_json",
    "boundary_from_json",
    "dataset_to_json",
    "dataset_from_json",
    "csv_table",
]


class InputError(ValueError):
    """Malformed input file; the message carries the location."""


def encode_complex(a) -> list:
    """Nested ``[re, im]`` lists for any complex array (or scalar)."""
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def decode_complex(obj, depth: int, what: str = "value") -> np.ndarray:
    """Inverse of :func:`encode_complex` for an array with ``depth`` axes.

    Input with one extra trailing axis of length 2 is read as ``[re, im]``
    pairs; input with exactly ``depth`` axes is read as real numbers.
    """
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{what}: expected numbers or [re, im] pairs") from exc
    if arr.ndim == depth + 1 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == depth:
        return arr.astype(complex)
    kind = {0: "a number", 2: "a matrix", 3: "a list of matrices"}.get(depth, f"{depth} axes")
    raise InputError(f"{what}: expected {kind}, got an array of shape {arr.shape}")


def _matrix(obj, what, depth):
    return decode_complex(obj, depth, what)


def load_json(path) -> dict:
    """Read a JSON file, reporting the line and column of syntax errors."""
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump_json(obj, path) -> None:
    """Write ``obj`` deterministically (sorted keys, fixed layout)."""
    Path(path).write_text(json.dumps(_plain(obj), sort_keys=True, indent=1) + "\n")


def potential_from_json(obj, source: str = "potential") -> HermitianPotential:
    """``{"kind": ..., "params": {...}}`` or ``{"kind": "sampled", "x": [...], "v": [...]}``."""
    if not isinstance(obj, dict) or "kind" not in obj:
        raise InputError(f"{source}: expected an object with a 'kind' field")
    kind = obj["kind"]
    params = obj.get("params", {})
    try:
        if kind == "zero":
            return HermitianPotential.zero(int(params.get("n", obj.get("n", 1))))
        if kind == "sech2":
            coupling = params.get("coupling")
            if coupling is not None:
                coupling = _matrix(coupling, f"{source}.params.coupling", 2)
            return HermitianPotential.sech2(float(params.get("kappa", 1.0)),
                                            int(params.get("n", 1)), coupling)
        if kind == "exp_decay":
            if "H" not in params:
                raise InputError(f"{source}.params: exp_decay needs 'H'")
            return HermitianPotential.exp_decay(_matrix(params["H"], f"{source}.params.H", 2),
                                                float(params.get("rate", 1.0)))
        if kind == "sampled":
            x = np.asarray(obj["x"], dtype=float)
            v = _matrix(obj["v"], f"{source}.v", 3)
            return HermitianPotential.sampled(x, v)
    except InputError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{source}: {exc}") from exc
    raise InputError(f"{source}: unknown kind {kind!r}")


def potential_to_json(V: HermitianPotential) -> dict:
    if V.kind == "sampled":
        return {"kind": "sampled", "x": V.x.tolist(), "v": encode_complex(V.v)}
    params = {}
    for key, val in V.params.items():
        params[key] = encode_complex(val) if isinstance(val, np.ndarray) else val
    params.setdefault("n", V.n)
    return {"kind": V.kind, "params": params}


def boundary_from_json(obj, source: str = "boundary") -> np.ndarray:
    """``{"U": matrix}`` or a bare matrix."""
    if isinstance(obj, dict):
        if "U" not in obj:
            raise InputError(f"{source}: expected a 'U' field")
        obj = obj["U"]
    return _matrix(obj, f"{source}.U", 2)


def dataset_to_json(data: ScatteringDataset, header: dict) -> dict:
    return {
        "header": header,
        "n": data.n,
        "k_grid": data.k_grid.tolist(),
        "S": encode_complex(data.S),
        "U0": encode_complex(data.U0),
        "bound_states": [{"k": k, "C": encode_complex(C)} for k, C in data.bound_states],
    }


def dataset_from_json(obj, source: str = "data") -> ScatteringDataset:
    try:
        k = np.asarray(obj["k_grid"], dtype=float)
        S = _matrix(obj["S"], f"{source}.S", 3)
        U0 = _matrix(obj["U0"], f"{source}.U0", 2)
        bound = [(float(b["k"]), _matrix(b["C"], f"{source}.bound_states.C", 2))
                 for b in obj.get("bound_states", [])]
        meta = dict(obj.get("header", {}).get("grid", {}))
        return ScatteringDataset(k_grid=k, S=S, U0=U0, bound_states=bound, meta=meta)
    except InputError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{source}: {exc}") from exc


def csv_table(axis_name: str, axis, matrices: dict) -> str:
    """One row per grid point; columns ``NAME_ij_re``, ``NAME_ij_im`` per matrix entry."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = []
    for name, arr in matrices.items():
        n = arr.shape[-1]
        names += [f"{name}_{i}{j}_{part}" for i in range(n) for j in range(n) for part in ("re", "im")]
    writer.writerow([axis_name] + names)
    axis = np.asarray(axis, dtype=float)
    cols = []
    for arr in matrices.values():
        flat = np.asarray(arr, dtype=complex).reshape(len(axis), -1)
        cols.append(np.stack([flat.real, flat.imag], axis=-1).reshape(len(axis), -1))
    table = np.concatenate([axis[:, None]] + cols, axis=1)
    for row in table:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
