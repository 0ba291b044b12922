"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 complex spectrum, 4 non-hyperbolic,
5 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import BlowupError, ComplexSpectrumUnsupported, NonHyperbolic, ParseError
from .expansion import BlowupExpansion, run_expansion
from .spectral import TAU_HYP, TOL_NEWTON, BalanceRoot, SpectralData, analyze_root, solve_balance
from .theta_series import ParamPoly, ThetaSeries, ThetaTerm
from .validator import GRID_POINTS, THETA_MAX, THETA_MIN, ValidationReport, default_grid, validate
from .vf_core import check_certificates, format_number
from .vf_dsl import ProblemSpec, builtin_names, builtin_text, format_expr, parse_problem

log = logging.getLogger("blowup_asym")

EXIT_OK, EXIT_INPUT, EXIT_COMPLEX, EXIT_NONHYP, EXIT_VALIDATION = 0, 2, 3, 4, 5
DIGITS = 10
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _key_values(items: Sequence[str] | None, what: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for item in items or []:
        for part in item.split(","):
            part = part.strip()
            if not part:
                continue
            key, sep, value = part.partition("=")
            if not sep or not key.strip():
                raise ParseError(f"{what} {part!r} is not of the form name=value")
            try:
                out[key.strip()] = float(value)
            except ValueError:
                raise ParseError(f"{what} {key.strip()}: {value!r} is not a number") from None
    return out


def _seeds(items: Sequence[str] | None) -> list[list[float]]:
    seeds = []
    for item in items or []:
        try:
            seeds.append([float(x) for x in item.replace(";", ",").split(",") if x.strip()])
        except ValueError:
            raise ParseError(f"seed {item!r} is not a comma-separated list of numbers") from None
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="count", default=0,
                           help="more log output (repeat for debug)")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="errors only")

    problem = argparse.ArgumentParser(add_help=False, parents=[common])
    src = problem.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", metavar="NAME", help="bundled problem (see `examples`)")
    src.add_argument("--file", metavar="PATH", type=Path, help="problem file")
    problem.add_argument("--param", action="append", metavar="K=V",
                         help="override a problem parameter; repeatable or comma-separated")
    problem.add_argument("--seed", action="append", metavar="X,Y",
                         help="Newton seed for the balance law; repeatable")
    problem.add_argument("--tol-newton", type=float, default=None)
    problem.add_argument("--tau-hyp", type=float, default=None,
                         help="imaginary-axis exclusion for eigenvalues (default 1e-8)")
    problem.add_argument("--tau-cluster", type=float, default=None,
                         help="absolute eigenvalue clustering tolerance (default 1e-6*|A|)")
    problem.add_argument("--root", type=int, action="append", metavar="INDEX",
                         help="restrict to the given 1-based root indices")
    problem.add_argument("--json", metavar="PATH", type=Path, help="write a JSON report ('-' for stdout)")

    expanding = argparse.ArgumentParser(add_help=False)
    expanding.add_argument("--order", type=int, default=None, help="expansion order N (default 3)")
    expanding.add_argument("--bind", action="append", metavar="Ci=V",
                           help="value for a free parameter; repeatable or comma-separated")

    checking = argparse.ArgumentParser(add_help=False)
    checking.add_argument("--csv", metavar="PATH", type=Path, help="write the numeric comparison table")
    checking.add_argument("--theta-min", type=float, default=THETA_MIN)
    checking.add_argument("--theta-max", type=float, default=THETA_MAX)
    checking.add_argument("--points", type=int, default=GRID_POINTS)
    checking.add_argument("--no-s-time", action="store_true", help="skip the s-time decay diagnostic")

    parser = argparse.ArgumentParser(
        prog="blowup-asym", parents=[common],
        description="Asymptotic expansions of finite-time blow-up solutions of autonomous ODEs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("analyze", parents=[problem],
                   help="balance roots, blow-up power eigenvalues, Jordan structure, delta")
    sub.add_parser("expand", parents=[problem, expanding], help="compute the expansion to order N")
    sub.add_parser("validate", parents=[problem, expanding, checking],
                   help="expand, then certify symbolically and numerically")
    sub.add_parser("report", parents=[problem, expanding, checking],
                   help="analysis, expansion and validation in one report")
    ex = sub.add_parser("examples", parents=[common], help="list or show the bundled problems")
    ex.add_argument("--show", metavar="NAME", help="print the problem file")
    return parser


def _configure_logging(args) -> None:
    level = LOG_LEVELS.get(os.environ.get("BLOWUP_ASYM_LOG", "warn").lower(), logging.WARNING)
    if getattr(args, "quiet", False):
        level = logging.ERROR
    elif getattr(args, "verbose", 0):
        level = logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


# ---------------------------------------------------------------------------
# formatting helpers
# ---------------------------------------------------------------------------

def _num(x: float, digits: int = DIGITS) -> str:
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if float(x).is_integer() and abs(x) < 1e15:
        return format_number(float(x))
    return f"{x:.{digits}g}"


def _vec(v) -> str:
    return "(" + ", ".join(_num(float(x)) for x in v) + ")"


def _json_num(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _power(g: float) -> str:
    if abs(g) < 1e-12:
        return ""
    if abs(g - 1.0) < 1e-12:
        return "theta"
    txt = _num(g)
    return f"theta^{txt}" if g > 0 else f"theta^({txt})"


def render_y(name: str, terms: Sequence[ThetaTerm], shift_by: float) -> str:
    """One component in the original variable, like ``u(t) ~ theta^(-1) - 0.25 - ...``."""
    if not terms:
        return f"{name}(t) ~ 0"
    parts = []
    for t in terms:
        coeff = t.coeff
        factors = [p for p in (_power(t.gamma + shift_by),
                               ("ln(theta)" + (f"^{t.m}" if t.m > 1 else "")) if t.m else "") if p]
        if coeff.is_constant or len(coeff.d) == 1:
            (mono, c), = coeff.items() if coeff.d else [((), 0.0)]
            sign = "-" if c < 0 else "+"
            mag = ParamPoly({mono: abs(c)}).to_text(DIGITS) if mono else _num(abs(c))
            body = " * ".join(factors) if factors else mag
            if factors and mag != "1":
                body = f"{mag} * {body}"
        else:
            sign = "+"
            body = f"({coeff.to_text(DIGITS)})"
            if factors:
                body += " * " + " * ".join(factors)
        parts.append((sign, body))
    first_sign, first = parts[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, body in parts[1:]:
        out += f" {sign} {body}"
    return f"{name}(t) ~ {out}"


def _write_json(path: Path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=False, allow_nan=False) + "\n"
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def load_problem(args) -> ProblemSpec:
    overrides = _key_values(args.param, "--param")
    if args.builtin:
        text = builtin_text(args.builtin)
    else:
        try:
            text = args.file.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read {args.file}: {exc.strerror}") from None
    spec = parse_problem(text, overrides)
    check_certificates(spec.field)
    return spec


def find_roots(spec: ProblemSpec, args) -> list[tuple[int, BalanceRoot]]:
    """Balance roots as (1-based index, root), honouring --root."""
    seeds = _seeds(args.seed) or spec.seeds
    for s in seeds:
        if len(s) != spec.field.n:
            raise ParseError(f"seed {s} has {len(s)} entries, expected {spec.field.n}")
    opts = spec.options
    tol = args.tol_newton if args.tol_newton is not None else opts.get("tol_newton", TOL_NEWTON)
    roots = solve_balance(spec.field, seeds or None, tol_newton=tol,
                          grid_L=opts.get("grid_L", 10.0), grid_points=int(opts.get("grid_points", 5)))
    if args.root:
        bad = [i for i in args.root if not 1 <= i <= len(roots)]
        if bad:
            raise ParseError(f"--root {bad[0]} is out of range (found {len(roots)} roots)")
        return [(i, roots[i - 1]) for i in args.root]
    return list(enumerate(roots, 1))


def _analyze(spec: ProblemSpec, root: BalanceRoot, args) -> SpectralData:
    tau_hyp = args.tau_hyp if args.tau_hyp is not None else spec.options.get("tau_hyp", TAU_HYP)
    tau_cl = args.tau_cluster if args.tau_cluster is not None else spec.options.get("tau_cluster")
    return analyze_root(spec.field, root, tau_hyp, tau_cl)


def _order(spec: ProblemSpec, args) -> int:
    n = args.order if args.order is not None else spec.order
    if n < 1:
        raise ParseError("--order must be at least 1")
    return n


def _bindings(spec: ProblemSpec, args) -> dict[str, float]:
    b = dict(spec.bind)
    b.update(_key_values(getattr(args, "bind", None), "--bind"))
    return b


def _check_bindings(bindings: dict, results: list) -> None:
    # a name is accepted if at least one selected root has it as a free parameter
    exps = [e for *_, e in results if isinstance(e, BlowupExpansion)]
    if not exps:
        return
    free = sorted({c for e in exps for c in e.free_params})
    unknown = sorted(set(bindings) - set(free))
    if unknown:
        raise ParseError(f"--bind {unknown[0]}: not a free parameter of any selected root "
                         f"(free: {', '.join(free) or 'none'})")


def _restrict(bindings: dict, exp: BlowupExpansion) -> dict:
    return exp.bindings({c: v for c, v in bindings.items() if c in exp.free_params})


def spectral_json(root: BalanceRoot, sd: SpectralData) -> dict:
    return {
        "Y0": [float(x) for x in root.Y0],
        "residual": float(root.residual_norm),
        "A": [[float(x) for x in row] for row in np.asarray(sd.A)],
        "eigenvalues": [{"re": e.re, "im": e.im, "alg_mult": e.alg_mult,
                         "block_sizes": list(e.block_sizes)} for e in sd.eigenvalues],
        "m_A": sd.m_A,
        "hyperbolic": bool(sd.hyperbolic),
        "has_complex": bool(sd.has_complex),
        "delta": _json_num(sd.delta),
        "gamma_res": [_json_num(g) for g in sd.gamma_res],
        "delta_parts": {k: _json_num(v) for k, v in sorted(sd.delta_parts.items())},
        "tau_hyp": sd.tau_hyp,
        "tau_cluster": sd.tau_cluster,
        "reconstruction_error": sd.reconstruction_error(),
    }


def spectral_text(idx: int, root: BalanceRoot, sd: SpectralData) -> list[str]:
    lines = [f"root {idx}: Y0 = {_vec(root.Y0)}   balance residual {root.residual_norm:.2e}"]
    rows = ["[" + ", ".join(_num(float(x)) for x in row) + "]" for row in np.asarray(sd.A)]
    lines.append(f"  A = [{', '.join(rows)}]")
    eig = []
    for e in sd.eigenvalues:
        val = _num(e.re) if e.im == 0 else f"{_num(e.re)} {'+' if e.im > 0 else '-'} {_num(abs(e.im))}i"
        extra = f", Jordan blocks {list(e.block_sizes)}" if e.block_sizes and max(e.block_sizes) > 1 else ""
        mult = f" (multiplicity {e.alg_mult}{extra})" if e.alg_mult > 1 or extra else ""
        eig.append(val + mult)
    lines.append(f"  eigenvalues: {'; '.join(eig)}")
    lines.append(f"  m_A = {sd.m_A}   hyperbolic: {'yes' if sd.hyperbolic else 'no'}"
                 f"   complex: {'yes' if sd.has_complex else 'no'}")
    parts = ", ".join(f"{k} {_num(v)}" for k, v in sorted(sd.delta_parts.items()))
    lines.append(f"  gamma_res = {_vec(sd.gamma_res)}   delta = {_num(sd.delta)}"
                 + (f"  [{parts}]" if parts else ""))
    return lines


def expansion_json(exp: BlowupExpansion, derived: dict) -> dict:
    names = list(exp.free_params)
    comps = []
    for i in range(exp.n):
        terms = []
        for t in exp.sum[i].terms:
            terms.append({"gamma": t.gamma, "logpow": t.m, "coeff": t.coeff.to_json(names),
                          "final": exp.is_final(t)})
        comps.append({"name": exp.field.names[i], "prefactor_gamma": exp.prefactors[i],
                      "terms": terms, "trunc": _json_num(exp.sum[i].trunc)})
    return {
        "root": [float(x) for x in exp.root.Y0],
        "order": exp.order,
        "delta": _json_num(exp.spectral.delta),
        "final_below": _json_num(exp.final_below),
        "working_truncation": exp.working_trunc,
        "components": comps,
        "free_params": names,
        "exact": exp.exact,
        "lattice": [g for g in exp.lattice if g <= exp.working_trunc + 1e-9],
        "derived": {k: v.to_json(names) for k, v in derived.items()},
    }


def _derived(spec: ProblemSpec, exp: BlowupExpansion, bindings: dict | None) -> dict[str, ThetaSeries]:
    out = {}
    for name, expr in spec.derived.items():
        try:
            s = exp.derived_series(expr)
            out[name] = s.bind(bindings) if bindings else s
        except BlowupError as exc:
            log.warning("derived quantity %s unavailable: %s", name, exc)
    return out


def expansion_text(idx: int, spec: ProblemSpec, exp: BlowupExpansion, bindings: dict | None) -> list[str]:
    lines = [f"root {idx}: Y0 = {_vec(exp.root.Y0)}   order N = {exp.order}"]
    if exp.exact:
        lines.append("  exact: every correction Y_j (j >= 1) vanishes")
    else:
        lines.append(f"  delta = {_num(exp.spectral.delta)}; coefficients of theta^g in Y with "
                     f"g < {_num(exp.final_below)} are final")
    if exp.free_params:
        shown = ", ".join(f"{c} = {_num(bindings[c])}" for c in exp.free_params) if bindings \
            else "left symbolic"
        lines.append(f"  free parameters: {', '.join(exp.free_params)} ({shown})")
    for i in range(exp.n):
        s = exp.sum[i].bind(bindings) if bindings else exp.sum[i]
        final = [t for t in s.terms if exp.is_final(t)]
        rest = [t for t in s.terms if not exp.is_final(t)]
        lines.append("  " + render_y(exp.field.names[i], final, exp.prefactors[i]))
        if rest:
            tail = render_y("", rest, exp.prefactors[i]).split("~ ", 1)[1]
            lines.append(f"      provisional: {tail}")
    for name, s in _derived(spec, exp, bindings).items():
        lines.append("  " + render_y(name, list(s.terms), 0.0) + "   (derived)")
    return lines


def report_text(idx: int, rep: ValidationReport) -> list[str]:
    lines = [f"root {idx}: validation {'PASS' if rep.passed else 'FAIL'}"]
    for c in rep.residual:
        lines.append(f"  residual {c.component}: cancels below theta^{_num(c.expected)}, first surviving "
                     f"exponent {_num(c.degree)}  [{'ok' if c.passed else 'FAIL'}]")
    for s in rep.slopes:
        if s.at_floor:
            body = f"error at floor (max {s.max_error:.2e})"
        elif s.measured is None:
            body = f"no fit ({s.points} usable point{'' if s.points == 1 else 's'}, max error {s.max_error:.2e})"
            if s.predicted is not None:
                body += "; the error barely clears the floor, try a larger --theta-max or a lower --order"
        else:
            body = (f"slope {_num(s.measured, 4)} vs predicted {_num(s.predicted, 6)} "
                    f"over theta in [{s.window[0]:.1e}, {s.window[1]:.1e}]")
        lines.append(f"  numeric {s.component}: {body}  [{'ok' if s.passed else 'FAIL'}]")
    if rep.s_time is not None:
        st = rep.s_time
        lines.append(f"  s-time decay rate {_num(st.decay_rate_measured, 6)} vs |Re lambda| "
                     f"{_num(st.min_stable_rate, 6)}  [{'ok' if st.passed else 'off'}; diagnostic only]")
    elif rep.s_time_note:
        lines.append(f"  s-time: {rep.s_time_note}")
    return lines


def _header(spec: ProblemSpec) -> list[str]:
    vf = spec.field
    lines = [f"problem {spec.name}: n = {vf.n}, alpha = {_vec(spec.alpha)}, k = {_num(spec.k)}"]
    if spec.params:
        lines.append("  parameters: " + ", ".join(f"{k} = {_num(v)}" for k, v in spec.params.items()))
    for i, name in enumerate(vf.names):
        res = format_expr(vf.residual[i])
        lines.append(f"  {name}' = {format_expr(vf.quasi[i])}" + ("" if res == "0" else f"  +  [{res}]"))
    return lines


def _emit(lines: list[str]) -> None:
    sys.stdout.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_examples(args) -> int:
    if args.show:
        sys.stdout.write(builtin_text(args.show))
        return EXIT_OK
    for name in builtin_names():
        first = builtin_text(name).splitlines()[0]
        note = first.lstrip("# ").strip() if first.startswith("#") else ""
        _emit([f"{name:20s} {note}".rstrip()])
    return EXIT_OK


def cmd_analyze(args) -> int:
    spec = load_problem(args)
    roots = find_roots(spec, args)
    lines = _header(spec)
    payload = {"problem": spec.name, "roots": []}
    usable, complex_seen = 0, False
    for idx, root in roots:
        sd = _analyze(spec, root, args)
        lines += spectral_text(idx, root, sd)
        payload["roots"].append(spectral_json(root, sd))
        usable += sd.hyperbolic and not sd.has_complex
        complex_seen |= sd.hyperbolic and sd.has_complex
    _emit(lines)
    if args.json:
        _write_json(args.json, payload)
    if not usable:
        log.error("no balance root has a hyperbolic real spectrum; expansions are unavailable")
        return EXIT_COMPLEX if complex_seen else EXIT_NONHYP
    return EXIT_OK


def _expansions(spec: ProblemSpec, args):
    """(index, root, spectral, expansion or exception) for each selected root."""
    N = _order(spec, args)
    out = []
    for idx, root in find_roots(spec, args):
        sd = _analyze(spec, root, args)
        try:
            out.append((idx, root, sd, run_expansion(spec.field, root, N, sd)))
        except (ComplexSpectrumUnsupported, NonHyperbolic) as exc:
            out.append((idx, root, sd, exc))
    return out


def cmd_expand(args) -> int:
    spec = load_problem(args)
    given = _bindings(spec, args)
    lines = _header(spec)
    payload = {"problem": spec.name, "expansions": []}
    code = EXIT_OK
    results = _expansions(spec, args)
    _check_bindings(given, results)
    for idx, root, sd, exp in results:
        if isinstance(exp, BlowupError):
            lines.append(f"root {idx}: Y0 = {_vec(root.Y0)}   no expansion: {exp}")
            payload["expansions"].append({"root": [float(x) for x in root.Y0], "error": str(exp),
                                          "exit_code": exp.exit_code})
            code = code or exp.exit_code
            continue
        b = _restrict(given, exp) if given else None
        lines += expansion_text(idx, spec, exp, b)
        payload["expansions"].append(expansion_json(exp, _derived(spec, exp, b)))
    _emit(lines)
    if args.json:
        _write_json(args.json, payload)
    return code


def _validate_all(spec: ProblemSpec, args, lines: list[str], payload: dict,
                  with_expansion: bool) -> int:
    given = _bindings(spec, args)
    grid = default_grid(args.theta_min, args.theta_max, args.points)
    code = EXIT_OK
    csv_rows = []
    results = _expansions(spec, args)
    _check_bindings(given, results)
    for idx, root, sd, exp in results:
        if with_expansion:
            lines += spectral_text(idx, root, sd)
            payload["roots"].append(spectral_json(root, sd))
        if isinstance(exp, BlowupError):
            lines.append(f"root {idx}: no expansion: {exp}")
            code = code or exp.exit_code
            continue
        b = _restrict(given, exp)
        if with_expansion:
            lines += expansion_text(idx, spec, exp, b)
            payload["expansions"].append(expansion_json(exp, _derived(spec, exp, b)))
        rep = validate(exp, b, grid, problem=spec.name, with_s_time=not args.no_s_time)
        lines += report_text(idx, rep)
        payload["validation"].append(rep.to_json())
        label = (lambda c: c) if len(results) == 1 else (lambda c, i=idx: f"root{i}:{c}")
        csv_rows += [(th, label(c), ye, yn, err) for th, c, ye, yn, err in rep.rows]
        if not rep.passed:
            code = code or EXIT_VALIDATION
    if args.csv:
        with args.csv.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "component", "y_expansion", "y_numeric", "abs_error"])
            for th, c, ye, yn, err in sorted(csv_rows, key=lambda r: (r[1], r[0])):
                w.writerow([repr(th), c, repr(ye), repr(yn), repr(err)])
    payload["pass"] = code == EXIT_OK
    return code


def cmd_validate(args) -> int:
    spec = load_problem(args)
    lines = _header(spec)
    payload = {"problem": spec.name, "validation": []}
    code = _validate_all(spec, args, lines, payload, with_expansion=False)
    _emit(lines)
    if args.json:
        _write_json(args.json, payload)
    return code


def cmd_report(args) -> int:
    spec = load_problem(args)
    lines = _header(spec)
    payload = {"problem": spec.name, "roots": [], "expansions": [], "validation": []}
    code = _validate_all(spec, args, lines, payload, with_expansion=True)
    _emit(lines)
    if args.json:
        _write_json(args.json, payload)
    return code


COMMANDS = {"analyze": cmd_analyze, "expand": cmd_expand, "validate": cmd_validate,
            "report": cmd_report, "examples": cmd_examples}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except BlowupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
