"""Command-line front end.

Subcommands::

    matscat direct    --potential P.json --boundary U.json --out data.json
    matscat inverse   --data data.json --out model.json [--force]
    matscat roundtrip --potential P.json --boundary U.json --out report.json
    matscat validate  --data data.json [--out report.json]

Exit codes: 0 success, 1 solver error, 2 validation failure (including
malformed input files), 64 usage error.  ``MM_THREADS`` caps the number of
worker threads used by the Jost integrations.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .core import GridSpec, NonUnitary, ScatteringError, boundary_pair
from .direct import ATOL, RTOL, scattering_dataset
from .inverse import run_inverse
from .serialize import (
    InputError,
    boundary_from_json,
    csv_table,
    dataset_from_json,
    dataset_to_json,
    dump_json,
    encode_complex,
    load_json,
    potential_from_json,
    potential_to_json,
)
from .validate import check_conditions, roundtrip_report

log = logging.getLogger("matscat")

EXIT_OK, EXIT_SOLVER, EXIT_INVALID, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class ConditionsFailed(Exception):
    def __init__(self, failed, report):
        super().__init__("scattering data fails condition(s) " + ", ".join(f"({c})" for c in failed))
        self.failed = failed
        self.report = report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}")
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return value
    return parse


def _grid_options(p, with_k=True):
    if with_k:
        p.add_argument("--kmax", type=_positive(float), help="wavenumber cutoff K_max")
        p.add_argument("--nk", type=_positive(int), help="number of k samples")
    p.add_argument("--xmax", type=_positive(float), help="spatial cutoff X_max")
    p.add_argument("--nx", type=_positive(int), help="number of x samples")
    p.add_argument("--tol", type=_positive(float), help="relative numerical-rank threshold")
    p.add_argument("--tol-tail", type=_positive(float), help="truncation tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matscat", description="Half-line matrix Schrödinger scattering: "
                     "direct map, Marchenko inversion and admissibility checks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("direct", help="potential and boundary matrix -> scattering data")
    p.add_argument("--potential", required=True)
    p.add_argument("--boundary", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa-max", type=_positive(float), help="upper end of the bound-state scan")
    p.add_argument("--csv", help="plot-data file (default: OUT with .csv suffix)")
    _grid_options(p)

    p = sub.add_parser("inverse", help="scattering data -> potential and boundary matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="skip the admissibility checks")
    p.add_argument("--row-stride", type=_positive(int), default=1,
                   help="solve every N-th kernel row")
    p.add_argument("--csv", help="plot-data file (default: OUT with .csv suffix)")
    _grid_options(p, with_k=False)

    p = sub.add_parser("roundtrip", help="direct map, inversion and error metrics")
    p.add_argument("--potential", required=True)
    p.add_argument("--boundary", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--row-stride", type=_positive(int), default=1)
    _grid_options(p)

    p = sub.add_parser("validate", help="check conditions (I)-(III) on scattering data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report here as well as to stdout")
    return parser


# ---------------------------------------------------------------------------


def _existing(path):
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def _grid(args, base: GridSpec | None = None) -> GridSpec:
    g = asdict(base if base is not None else GridSpec())
    overrides = {"K_max": getattr(args, "kmax", None), "n_k": getattr(args, "nk", None),
                 "X_max": args.xmax, "n_x": args.nx, "tol_rank": args.tol,
                 "tol_tail": args.tol_tail}
    g.update({k: v for k, v in overrides.items() if v is not None})
    return GridSpec(**g)


def _header(command: str, grid: GridSpec, inputs: dict, extra: dict | None = None) -> dict:
    header = {
        "program": "matscat",
        "version": __version__,
        "command": command,
        "inputs": inputs,
        "grid": asdict(grid),
        "defaults": {"ode_rtol": RTOL, "ode_atol": ATOL},
    }
    if extra:
        header.update(extra)
    return header


def _csv_path(args):
    return args.csv if getattr(args, "csv", None) else str(Path(args.out).with_suffix(".csv"))


def _load_problem(args):
    V = potential_from_json(load_json(args.potential), args.potential)
    U = boundary_from_json(load_json(args.boundary), args.boundary)
    if U.shape[0] != V.n:
        raise InputError(f"{args.boundary}: U is {U.shape[0]}x{U.shape[0]} "
                         f"but the potential is {V.n}x{V.n}")
    return V, U


def cmd_direct(args) -> int:
    _existing(args.potential), _existing(args.boundary), _writable(args.out)
    V, U = _load_problem(args)
    bc = boundary_pair(U)
    grid = _grid(args)
    data = scattering_dataset(V, bc, grid, kappa_max=args.kappa_max)
    header = _header("direct", grid, {"potential": potential_to_json(V), "U": encode_complex(U)},
                     {"kappa_max": data.meta["kappa_max"]})
    dump_json(dataset_to_json(data, header), args.out)
    Path(_csv_path(args)).write_text(csv_table("k", data.k_grid, {"S": data.S}))
    log.info("wrote %s (%d bound states)", args.out, len(data.bound_states))
    return EXIT_OK


def _model_json(model, header):
    kernel = model.diagnostics["kernel"]
    d = model.diagnostics
    return {
        "header": header,
        "n": model.V_rec.n,
        "x": model.V_rec.x.tolist(),
        "V": encode_complex(model.V_rec.v),
        "U": encode_complex(model.U_rec),
        "diagnostics": {
            "homogeneous_margin": [{"x": x, "sigma_min": s}
                                   for x, s in sorted(d["homogeneous_margin"].items())],
            "min_margin": d["min_margin"],
            "max_residual": d["max_residual"],
            "max_node_residual": d["max_node_residual"],
            "residual_per_row": kernel.residual.tolist(),
            "anti_hermitian": d["anti_hermitian"],
            "U_spread": d["U_spread"],
            "U_estimates": [{"k": k, "U": encode_complex(e)} for k, e in
                            zip(d["U_estimates"]["k_samples"].tolist(),
                                d["U_estimates"]["estimates"])],
        },
    }


def _inverse_grid(args, data):
    base = dict(data.meta)
    keys = ("K_max", "n_k", "X_max", "n_x", "tol_rank", "tol_tail")
    base = GridSpec(**{k: base[k] for k in keys if k in base})
    if data.k_grid.size:
        base = GridSpec(**{**asdict(base), "K_max": float(data.k_grid[-1]),
                           "n_k": int(data.k_grid.size)})
    return _grid(args, base)


def cmd_inverse(args) -> int:
    _existing(args.data), _writable(args.out)
    data = dataset_from_json(load_json(args.data), args.data)
    grid = _inverse_grid(args, data)
    if not args.force:
        report = check_conditions(data, grid)
        if not report.passed:
            raise ConditionsFailed(report.failed(), report)
    model = run_inverse(data, grid, row_stride=args.row_stride)
    header = _header("inverse", grid, {"data": args.data},
                     {"row_stride": args.row_stride, "forced": bool(args.force)})
    dump_json(_model_json(model, header), args.out)
    Path(_csv_path(args)).write_text(csv_table("x", model.V_rec.x, {"V": model.V_rec.v}))
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    _existing(args.potential), _existing(args.boundary), _writable(args.out)
    V, U = _load_problem(args)
    grid = _grid(args)
    data = scattering_dataset(V, boundary_pair(U), grid)
    report = check_conditions(data, grid)
    model = run_inverse(data, grid, row_stride=args.row_stride)
    metrics = roundtrip_report((V, U), model, grid, data=data)
    header = _header("roundtrip", grid, {"potential": potential_to_json(V),
                                         "U": encode_complex(U)},
                     {"row_stride": args.row_stride})
    dump_json({"header": header, "metrics": metrics, "conditions": _report_json(report),
               "U_rec": encode_complex(model.U_rec),
               "min_margin": model.diagnostics["min_margin"],
               "max_residual": model.diagnostics["max_residual"]}, args.out)
    return EXIT_OK


def _report_json(report) -> dict:
    return {"passed": report.passed, "failed": report.failed(),
            "condition_I": report.condition_I, "condition_II": report.condition_II,
            "condition_III": report.condition_III, "notes": report.notes}


def cmd_validate(args) -> int:
    _existing(args.data)
    if args.out:
        _writable(args.out)
    data = dataset_from_json(load_json(args.data), args.data)
    report = check_conditions(data, _inverse_grid(argparse.Namespace(
        xmax=None, nx=None, tol=None, tol_tail=None), data))
    payload = _report_json(report)
    text = json.dumps(payload, sort_keys=True, indent=1)
    print(text)
    if args.out:
        dump_json(payload, args.out)
    return EXIT_OK if report.passed else EXIT_INVALID


COMMANDS = {"direct": cmd_direct, "inverse": cmd_inverse, "roundtrip": cmd_roundtrip,
            "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"matscat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConditionsFailed as exc:
        print(f"matscat: {exc}", file=sys.stderr)
        for name in exc.failed:
            frag = getattr(exc.report, f"condition_{name}")
            print(f"  condition ({name}): {json.dumps(frag, sort_keys=True)}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, NonUnitary) as exc:
        print(f"matscat: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ScatteringError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"matscat: solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"matscat: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
