"""Command-line interface: fit, profile, coverage, simulate, exact.

File formats
------------
Model spec: JSON object with "X" and "Z" (row-major arrays of arrays),
"delta_map" (1-based indices assigning Z columns to shared variance
parameters) and optional "name".

Data: CSV of 0/1 integers, one record per row; a single header row is
auto-detected and skipped.  Ragged rows or non-binary cells are input
errors reported with their row and column.

Reports: JSON with floats rendered by shortest round-trip decimal, so a
report re-read parses to bitwise-identical numbers.  Every report embeds
provenance (file hashes, seed, sample size, generator id).  Output files
are written atomically (temp file + rename).

Exit codes: 0 success, 1 input error, 3 optimizer non-convergence (the
report is still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import engine, glmm, infer, optim, oracle, study
from .rng import GENERATOR_ID

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_CONVERGENCE = 3


class InputError(Exception):
    """Bad file or flag value; maps to exit code 1."""


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json_report(path: str, report: dict):
    _atomic_write(path, json.dumps(report, indent=2, default=_json_default) + "\n")


def load_model_spec(path: str) -> glmm.GlmmDesign:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read model spec {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"model spec {path} is not valid JSON: {exc}") from None
    try:
        return glmm.design_from_spec(obj)
    except glmm.ModelSpecError as exc:
        raise InputError(f"model spec {path}: {exc}") from None


def load_data_csv(path: str, T: int) -> engine.ObservedData:
    """Read binary records, one per row; a leading row containing letters
    is taken to be a header and skipped."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from None
    rows = [row for row in rows if row]
    if not rows:
        raise InputError(f"data file {path} is empty")
    start = 1 if any(ch.isalpha() for cell in rows[0] for ch in cell) else 0
    if start == len(rows):
        raise InputError(f"data file {path} has a header but no records")

    records = []
    for index in range(start, len(rows)):
        row = rows[index]
        if len(row) != T:
            raise InputError(
                f"{path}: row {index + 1} has {len(row)} columns, model expects {T}"
            )
        parsed = []
        for col, cell in enumerate(row):
            cell = cell.strip()
            if cell == "0" or cell == "1":
                parsed.append(int(cell))
            else:
                raise InputError(
                    f"{path}: row {index + 1}, column {col + 1}: "
                    f"expected 0 or 1, got {cell!r}"
                )
        records.append(parsed)
    return engine.ObservedData(records=np.array(records, dtype=np.int8))


def _parse_theta(text: str, design: glmm.GlmmDesign, what: str) -> np.ndarray:
    try:
        values = np.array([float(tok) for tok in text.split(",")])
    except ValueError:
        raise InputError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if values.shape != (design.theta_dim,):
        labels = ", ".join(design.layout().labels())
        raise InputError(
            f"{what} has {values.size} values, model expects {design.theta_dim} ({labels})"
        )
    return values


def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise InputError(f"grid must look like lo:hi:count, got {text!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise InputError(f"grid must look like lo:hi:count, got {text!r}") from None
    if count < 1:
        raise InputError("grid count must be >= 1")
    return np.linspace(lo, hi, count)


def _float_csv(value: float) -> str:
    return repr(float(value))


def _provenance(args, extra=None) -> dict:
    out = {
        "generator_id": GENERATOR_ID,
        "threads": getattr(args, "threads", 1),
    }
    for attr, key in (("model", "model_spec_sha256"), ("data", "data_sha256")):
        path = getattr(args, attr, None)
        if path:
            out[key] = _sha256(path)
    for attr in ("seed", "m", "n"):
        if getattr(args, attr, None) is not None:
            out[attr] = getattr(args, attr)
    if extra:
        out.update(extra)
    return out


def _labeled(design: glmm.GlmmDesign, theta: np.ndarray) -> dict[str, float]:
    return dict(zip(design.layout().labels(), (float(v) for v in theta)))


def cmd_fit(args) -> int:
    design = load_model_spec(args.model)
    data = load_data_csv(args.data, design.T)
    model = glmm.as_model(design)
    t0 = time.time()

    theta0 = None
    if args.start is not None:
        theta0 = engine.ParamVector(_parse_theta(args.start, design, "--start"), design.layout())

    fresh_samples = None
    if args.fresh:
        if theta0 is None:
            theta0 = engine.ParamVector(optim.default_start(model), design.layout())
        fresh_samples = engine.fresh_record_samples(model, data.n, args.m, args.seed)

        def objective(theta):
            return engine.mc_loglik_and_score_per_sample(model, theta, data, fresh_samples)

        result = optim.maximize(objective, theta0)
        sample = None
    else:
        sample = engine.draw_sample(model, args.m, args.seed)
        result = optim.fit_mcmle(model, data, sample, theta0=theta0)

    theta_hat = glmm.GlmmParams.from_theta(design, result.theta).canonical().to_theta()

    report = {
        "model_name": design.name or os.path.basename(args.model),
        "method": "monte-carlo-fresh" if args.fresh else "monte-carlo",
        "theta_hat": _labeled(design, theta_hat),
        "loglik": result.objective,
        "m": args.m,
        "n": data.n,
        "seed": args.seed,
        "generator_id": GENERATOR_ID,
        "optimizer": {
            "converged": result.converged,
            "iterations": result.iterations,
            "grad_norm": result.grad_norm,
        },
        "provenance": _provenance(args, {"fresh": bool(args.fresh)}),
    }

    warnings = []
    try:
        if args.fresh:
            J = sum(
                infer.estimate_J(model, theta_hat, engine.ObservedData(data.records[j : j + 1]), s)
                for j, s in enumerate(fresh_samples)
            ) / data.n
            scores = np.stack(
                [
                    engine.mc_score(model, theta_hat, engine.ObservedData(data.records[j : j + 1]), s)
                    for j, s in enumerate(fresh_samples)
                ]
            )
            V = scores.T @ scores / data.n
            W = infer.estimate_W_fresh(model, theta_hat, data, fresh_samples)
            vcov = infer.sandwich_vcov(J, V, W, n=data.n, m=args.m)
            se = np.sqrt(np.diag(vcov))
            rep = infer.InferenceReport(
                J_hat=J, V_hat=V, W_hat=W, vcov=vcov, se=se, m=args.m, n=data.n,
                theta_ref=engine.ParamVector(theta_hat, design.layout()),
            )
        else:
            rep = infer.build_report(
                model, engine.ParamVector(theta_hat, design.layout()), data, sample
            )
        report["J_hat"] = rep.J_hat
        report["V_hat"] = rep.V_hat
        report["W_hat"] = rep.W_hat
        report["vcov"] = rep.vcov
        report["se"] = dict(zip(design.layout().labels(), map(float, rep.se)))
    except infer.RidgeError as exc:
        warnings.append(f"ridge: {exc}")
    if warnings:
        report["warnings"] = warnings
    report["wall_time"] = time.time() - t0
    write_json_report(args.out, report)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_profile(args) -> int:
    design = load_model_spec(args.model)
    data = load_data_csv(args.data, design.T)
    model = glmm.as_model(design)
    layout = design.layout()
    coord = layout.index_of(args.param)  # KeyError -> input error via main()
    grid = _parse_grid(args.grid)
    sample = engine.draw_sample(model, args.m, args.seed)

    def objective(theta):
        return engine.mc_loglik_and_score(model, theta, data, sample)

    theta0 = optim.default_start(model)
    if args.start is not None:
        theta0 = _parse_theta(args.start, design, "--start")
    points = optim.profile(objective, theta0, coord, grid)

    labels = layout.labels()
    other = [lab for i, lab in enumerate(labels) if i != coord]
    lines = [",".join([f"grid_{labels[coord]}", "profile_loglik"] + other)]
    for pt in points:
        row = [_float_csv(pt.value), _float_csv(pt.objective)]
        row += [_float_csv(pt.theta[i]) for i in range(len(labels)) if i != coord]
        lines.append(",".join(row))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_coverage(args) -> int:
    design = load_model_spec(args.model)
    truth = glmm.GlmmParams.from_theta(design, _parse_theta(args.truth, design, "--truth"))
    try:
        result = study.coverage_study(
            design, truth, n=args.n, m=args.m, replicates=args.reps,
            level=args.level, seed=args.seed, ellipse_mode=args.mode,
            threads=args.threads,
        )
    except (oracle.QuadratureError, ValueError) as exc:
        raise InputError(str(exc)) from None
    except study.StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE

    labels = design.layout().labels()
    report = {
        "model_name": design.name or os.path.basename(args.model),
        "truth": dict(zip(labels, map(float, truth.to_theta()))),
        "n": args.n,
        "m": args.m,
        "replicates": result.replicates,
        "covered": result.covered,
        "invalid": result.invalid,
        "level": result.level,
        "ellipse_used": result.ellipse_used,
        "seed": args.seed,
        "generator_id": GENERATOR_ID,
        "provenance": _provenance(args),
    }
    write_json_report(args.out, report)

    cloud_path = os.path.splitext(args.out)[0] + ".estimates.csv"
    lines = [",".join(["replicate", "covered"] + list(labels))]
    for rep in range(result.replicates):
        flag = int(result.covered_flags[rep])
        row = [str(rep), str(flag)]
        row += [
            _float_csv(v) if np.isfinite(v) else "nan" for v in result.estimates[rep]
        ]
        lines.append(",".join(row))
    _atomic_write(cloud_path, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    design = load_model_spec(args.model)
    truth = glmm.GlmmParams.from_theta(design, _parse_theta(args.truth, design, "--truth"))
    data = study.generate_dataset(design, truth, args.n, args.seed)
    lines = [",".join(str(int(v)) for v in row) for row in data.records]
    _atomic_write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_exact(args) -> int:
    design = load_model_spec(args.model)
    if design.q > 1:
        raise InputError(
            f"exact fitting integrates the random effect by quadrature and "
            f"supports at most one (model has q={design.q}); use 'fit' instead"
        )
    data = load_data_csv(args.data, design.T)
    rule = oracle.gauss_hermite(args.order)
    t0 = time.time()
    result = oracle.gh_mle(design, data, rule)
    theta_hat = glmm.GlmmParams.from_theta(design, result.theta).canonical().to_theta()
    report = {
        "model_name": design.name or os.path.basename(args.model),
        "method": "quadrature",
        "quadrature_order": args.order,
        "theta_hat": _labeled(design, theta_hat),
        "loglik": result.objective,
        "n": data.n,
        "optimizer": {
            "converged": result.converged,
            "iterations": result.iterations,
            "grad_norm": result.grad_norm,
        },
        "provenance": _provenance(args),
        "wall_time": time.time() - t0,
    }
    write_json_report(args.out, report)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcmle",
        description="Monte Carlo maximum likelihood for Logit-Normal GLMMs",
    )
    default_threads = int(os.environ.get("MCMLE_THREADS", "1"))
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="maximize the Monte Carlo log likelihood")
    fit.add_argument("--model", required=True, help="model spec JSON")
    fit.add_argument("--data", required=True, help="0/1 CSV, one record per row")
    fit.add_argument("--m", type=int, required=True, help="Monte Carlo sample size")
    fit.add_argument("--seed", type=int, required=True)
    fit.add_argument("--start", help="comma-separated starting theta")
    fit.add_argument("--fresh", action="store_true",
                     help="draw an independent sample of size m per record")
    fit.add_argument("--out", required=True, help="report JSON path")
    fit.set_defaults(func=cmd_fit)

    prof = sub.add_parser("profile", help="profile log likelihood over one parameter")
    prof.add_argument("--model", required=True)
    prof.add_argument("--data", required=True)
    prof.add_argument("--m", type=int, required=True)
    prof.add_argument("--seed", type=int, required=True)
    prof.add_argument("--param", required=True, help="parameter label, e.g. delta or beta[2]")
    prof.add_argument("--grid", required=True, help="lo:hi:count")
    prof.add_argument("--start", help="comma-separated starting theta")
    prof.add_argument("--out", required=True, help="profile CSV path")
    prof.set_defaults(func=cmd_profile)

    cov = sub.add_parser("coverage", help="simulate, fit and count ellipse coverage")
    cov.add_argument("--model", required=True)
    cov.add_argument("--truth", required=True, help="comma-separated theta")
    cov.add_argument("--n", type=int, required=True)
    cov.add_argument("--m", type=int, required=True)
    cov.add_argument("--reps", type=int, required=True)
    cov.add_argument("--level", type=float, default=0.95)
    cov.add_argument("--seed", type=int, required=True)
    cov.add_argument("--mode", choices=["exact-theory", "plugin"], default="exact-theory")
    cov.add_argument("--threads", type=int, default=default_threads)
    cov.add_argument("--out", required=True, help="study JSON path")
    cov.set_defaults(func=cmd_coverage)

    sim = sub.add_parser("simulate", help="simulate a dataset at a truth")
    sim.add_argument("--model", required=True)
    sim.add_argument("--truth", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True, help="data CSV path")
    sim.set_defaults(func=cmd_simulate)

    ex = sub.add_parser("exact", help="exact (quadrature) maximum likelihood, q <= 1")
    ex.add_argument("--model", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--order", type=int, default=64, help="quadrature order")
    ex.add_argument("--out", required=True, help="report JSON path")
    ex.set_defaults(func=cmd_exact)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, KeyError) as exc:
        message = exc.args[0] if exc.args else str(exc)
        print(f"error: {message}", file=sys.stderr)
        return EXIT_INPUT
    except engine.AllImpossibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
