"""Command-line front end.

Subcommands: ``fit``, ``predict``, ``ate``, ``blp``, ``rate``, ``report``,
``simulate`` and ``fetch-jtpa``. Results go to stdout (or the files named
by flags); logs and error messages go to stderr. Every failure class
exits with its own status code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import urllib.request
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import csf, errors, inference
from .dataset import (JTPA_SCHEMA, JTPA_URL, ColumnSchema, group_covariate_means, histogram,
                      load_covariates, load_csv, relabel_treatment, SurvivalDataset)
from .plots import histogram_svg, toc_svg
from .simulate import SimulationSpec, censoring_rate_for, simulate

logger = logging.getLogger("csforest")

THREADS_ENV = "CSFOREST_NUM_THREADS"
PRESETS = {"jtpa": JTPA_SCHEMA}
# no stable digest of the source file is published, so none is pinned
JTPA_SHA256 = None

EXIT_CODES = {
    "success": 0,
    "unexpected error": 1,
    "usage error": 2,
    "missing or unreadable input": errors.InputError.exit_code,
    "column not found": errors.SchemaError.exit_code,
    "unparseable cell": errors.ParseError.exit_code,
    "invalid parameter": errors.ParameterError.exit_code,
    "empty selection": errors.SelectionError.exit_code,
    "fit failed": errors.FitError.exit_code,
    "rank deficient projection": errors.RankDeficiencyError.exit_code,
    "undefined prediction": errors.PredictionError.exit_code,
    "training data mismatch": errors.FingerprintError.exit_code,
    "bad model file": errors.ModelFormatError.exit_code,
    "digest mismatch": errors.IntegrityError.exit_code,
}


# argument helpers -----------------------------------------------------------------------

def _probability(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _add_schema(p, required=True):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=required, help="CSV file with a header row")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named column mapping")
    g.add_argument("--outcome", help="recorded-time column")
    g.add_argument("--treatment", help="0/1 treatment column")
    g.add_argument("--event", help="0/1 event column (1 = event observed)")
    g.add_argument("--covariates", help="comma-separated covariate columns")
    g.add_argument("--no-censoring", action="store_true",
                   help="accept data in which every unit had an event")
    g.add_argument("--relabel-treatment", action="store_true", help="use 1 - treatment")


def _add_forest_flags(p):
    g = p.add_argument_group("estimator")
    g.add_argument("--horizon", type=float, required=True, help="truncation time h")
    g.add_argument("--target", choices=csf.TARGETS, default="rmst")
    g.add_argument("--w-hat", default="estimate",
                   help="'estimate' (propensity forest), 'auto-mean' (treated share) or a constant")
    g.add_argument("--censoring-model", choices=csf.CENSORING_MODELS, default="forest")
    g.add_argument("--g-floor", type=float, default=0.05)
    g.add_argument("--num-trees", type=int, default=2000)
    g.add_argument("--nuisance-num-trees", type=int, default=500)
    g.add_argument("--subsample-fraction", type=float, default=0.5)
    g.add_argument("--honesty-fraction", type=float, default=0.5)
    g.add_argument("--mtry", type=int, default=None)
    g.add_argument("--min-node-size", type=int, default=5)
    g.add_argument("--grid-points", type=int, default=50)
    g.add_argument("--seed", type=int, default=42)


def _schema(args) -> ColumnSchema:
    base = PRESETS.get(args.preset)
    covs = tuple(c.strip() for c in args.covariates.split(",") if c.strip()) if args.covariates else None
    fields = {
        "outcome": args.outcome or (base.outcome if base else None),
        "treatment": args.treatment or (base.treatment if base else None),
        "event": args.event or (base.event if base else None),
        "covariates": covs or (base.covariates if base else None),
    }
    missing = [k for k, v in fields.items() if not v]
    if missing:
        raise errors.ParameterError(
            "column mapping incomplete; pass --preset or --" + ", --".join(missing))
    labels = base.labels if base is not None and covs is None else None
    return ColumnSchema(**fields, labels=labels)


def _dataset(args) -> SurvivalDataset:
    ds = load_csv(args.data, _schema(args), no_censoring=args.no_censoring)
    if args.relabel_treatment:
        ds = relabel_treatment(ds)
    return ds


def _w_hat(text, ds):
    if text == "estimate":
        return None
    if text == "auto-mean":
        return float(ds.w.mean())
    try:
        return float(text)
    except ValueError:
        raise errors.ParameterError(
            f"--w-hat must be 'estimate', 'auto-mean' or a number, got {text!r}") from None


def _params(args, ds) -> csf.CsfParams:
    return csf.CsfParams(
        horizon=args.horizon, target=args.target, w_hat=_w_hat(args.w_hat, ds),
        censoring_model=args.censoring_model, g_floor=args.g_floor, num_trees=args.num_trees,
        nuisance_num_trees=args.nuisance_num_trees, subsample_fraction=args.subsample_fraction,
        honesty_fraction=args.honesty_fraction, mtry=args.mtry,
        min_node_size=args.min_node_size, grid_points=args.grid_points, seed=args.seed,
    )


def _model(args) -> csf.CsfModel:
    if not Path(args.model).is_file():
        raise errors.InputError(f"model file not found: {args.model}")
    model = csf.load_model(args.model)
    if getattr(args, "data", None):
        csf.check_fingerprint(model, _dataset(args))
    return model


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text, path=None):
    if path:
        _write_text(path, text)
    else:
        sys.stdout.write(text)


def _publish(tmp, path):
    # mkstemp files are private; give the result the usual umask-based mode
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp, 0o666 & ~umask)
    os.replace(tmp, path)


def _write_text(path, text):
    # write-then-rename so a failed run never leaves a partial file behind
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".csforest-")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        _publish(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\r\n")
    out.writerow(header)
    out.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v))


# subcommands ----------------------------------------------------------------------------

def run_fit(args):
    ds = _dataset(args)
    params = _params(args, ds)
    model = csf.fit(ds, params)
    fd, tmp = tempfile.mkstemp(dir=Path(args.model).parent, prefix=".csforest-", suffix=".npz")
    os.close(fd)
    try:
        csf.save_model(model, tmp)
        _publish(tmp, args.model)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    diag = dict(model.diagnostics)
    diag.update(model.nuisances.diagnostics)
    diag["params"] = asdict(params)
    diag["score"] = model.score
    diag["model_hash"] = model.model_hash()
    _emit(_json(diag), args.diagnostics)


def run_predict(args):
    model = csf.load_model(args.model) if Path(args.model).is_file() else None
    if model is None:
        raise errors.InputError(f"model file not found: {args.model}")
    if args.oob:
        if not args.data:
            raise errors.FingerprintError("--oob needs --data pointing at the training file")
        csf.check_fingerprint(model, _dataset(args))
        tau = csf.predict_cate(model)
    else:
        if not args.data:
            raise errors.ParameterError("pass --data with covariates to predict, or --oob")
        cols = _schema(args).covariates if (args.preset or args.covariates) else model.names
        x = load_covariates(args.data, cols)
        tau = csf.predict_cate(model, x)
    rows = [(i + 1, _num(t)) for i, t in enumerate(tau)]
    _emit(_csv_text(["row", "tau_hat"], rows), args.output)


def run_ate(args):
    est = inference.average_treatment_effect(inference.dr_scores(_model(args)))
    if args.format == "json":
        _emit(_json(est.to_dict()), args.output)
    else:
        _emit(f"{'estimate':>8} {'std.err':>8}\n{est.estimate:>8.1f} {est.std_err:>8.1f}\n",
              args.output)


def run_blp(args):
    model = _model(args)
    names = list(model.names)
    cols = list(range(len(names)))
    if args.projection:
        wanted = [c.strip() for c in args.projection.split(",") if c.strip()]
        unknown = [c for c in wanted if c not in names]
        if unknown:
            raise errors.SchemaError(f"projection covariates not in model: {unknown}")
        cols = [names.index(c) for c in wanted]
    res = inference.best_linear_projection(inference.dr_scores(model), model.x[:, cols],
                                           [names[j] for j in cols])
    if args.format == "json":
        _emit(_json(res.to_dict()), args.output)
    elif args.format == "csv":
        rows = [(c.name, _num(c.estimate), _num(c.std_error), _num(c.t_value), _num(c.p_value))
                for c in res.coefficients]
        _emit(_csv_text(["term", "estimate", "std_error", "t_value", "p_value"], rows), args.output)
    else:
        _emit(res.table() + "\n", args.output)


def _priorities(model, spec):
    if spec == "cate":
        return csf.predict_cate(model)
    if spec == "constant":
        return np.zeros(model.n)
    if spec in model.names:
        return model.x[:, list(model.names).index(spec)].copy()
    raise errors.ParameterError(f"--priorities must be 'cate', 'constant' or a covariate, got {spec!r}")


def run_rate(args):
    model = _model(args)
    res = inference.rate(inference.dr_scores(model), _priorities(model, args.priorities),
                         n_bootstrap=args.n_bootstrap, seed=args.seed)
    if args.toc_csv:
        rows = [(_num(q), _num(v)) for q, v in zip(res.toc.q_grid, res.toc.toc_values)]
        _write_text(args.toc_csv, _csv_text(["q", "toc"], rows))
    if args.toc_svg:
        k = inference.thin_grid(model.n)
        _write_text(args.toc_svg, toc_svg(res.toc.q_grid[k - 1], res.toc.toc_values[k - 1], res.toc_se))
    if args.format == "json":
        out = res.to_dict()
        out["priorities"] = args.priorities
        _emit(_json(out), args.output)
    else:
        _emit(f"AUTOC: {res.autoc_estimate:.2f} +/- {1.96 * res.std_err:.2f}\n", args.output)


def _five_numbers(tau):
    q = np.quantile(tau, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"Min.": q[0], "1st Qu.": q[1], "Median": q[2], "Mean": float(np.mean(tau)),
            "3rd Qu.": q[3], "Max.": q[4]}


def top_fraction_mask(tau, fraction):
    """Units whose CATE is at or above the ``1 - fraction`` sample quantile."""
    if not 0.0 < fraction <= 1.0:
        raise errors.ParameterError(f"--top-fraction must lie in (0, 1], got {fraction}")
    return tau >= np.quantile(tau, 1.0 - fraction)


def run_report(args):
    model = _model(args)
    tau = csf.predict_cate(model)
    summary = {k: float(v) for k, v in _five_numbers(tau).items()}
    train = SurvivalDataset(model.x, np.ones(model.n), model.w, np.ones(model.n),
                            names=model.names, no_censoring=True)
    top_label = f"top.{round(100 * args.top_fraction):d}"
    means = {
        "full.sample": group_covariate_means(train, np.ones(model.n, dtype=bool)),
        top_label: group_covariate_means(train, top_fraction_mask(tau, args.top_fraction)),
    }
    if args.histogram_svg or args.histogram_csv:
        if not args.data:
            raise errors.ParameterError("the histogram needs --data (recorded times and events)")
        spec = histogram(_dataset(args), args.bins)
        if args.histogram_svg:
            _write_text(args.histogram_svg, histogram_svg(spec))
        if args.histogram_csv:
            rows = [(_num(a), _num(b), int(e), int(c)) for a, b, e, c in
                    zip(spec.bin_edges[:-1], spec.bin_edges[1:], spec.counts_event,
                        spec.counts_censored)]
            _write_text(args.histogram_csv, _csv_text(["lower", "upper", "events", "censored"], rows))
    if args.format == "json":
        _emit(_json({"cate_summary": summary, "covariate_means": means,
                     "top_fraction": args.top_fraction}), args.output)
        return
    lines = ["CATE summary (out-of-bag):",
             " ".join(f"{k:>8}" for k in summary),
             " ".join(f"{v:>8.2f}" for v in summary.values()), ""]
    names = list(model.names)
    width = max(len(top_label), len("full.sample"))
    cols = [max(len(nm), 8) for nm in names]
    lines.append(" " * width + "".join(f" {nm:>{w}}" for nm, w in zip(names, cols)))
    for row, vals in means.items():
        lines.append(f"{row:<{width}}" + "".join(f" {vals[nm]:>{w}.2f}" for nm, w in zip(names, cols)))
    _emit("\n".join(lines) + "\n", args.output)


def run_simulate(args):
    if args.censoring_rate is not None and args.censoring_fraction is not None:
        raise errors.ParameterError("pass at most one of --censoring-rate and --censoring-fraction")
    spec = SimulationSpec(n=args.n, p=args.p, horizon=args.horizon, effect=args.effect,
                          effect_value=args.effect_value, effect_covariate=args.effect_covariate - 1,
                          baseline_rate=args.baseline_rate, prognostic=args.prognostic,
                          censoring_rate=args.censoring_rate, treat_fraction=args.treat_fraction,
                          seed=args.seed)
    if args.censoring_fraction is not None:
        spec = SimulationSpec(**{**asdict(spec),
                                 "censoring_rate": censoring_rate_for(spec, args.censoring_fraction)})
    ds, truth = simulate(spec)
    header = ["y", "w", "d", *ds.names]
    rows = [(_num(y), int(w), int(d), *(_num(v) for v in xr))
            for y, w, d, xr in zip(ds.y, ds.w, ds.d, ds.x)]
    truth_path = args.truth or f"{args.output}.truth.json"
    _write_text(args.output, _csv_text(header, rows))
    _write_text(truth_path, truth.to_json(spec) + "\n")
    _emit(_json({"output": str(args.output), "truth": str(truth_path), "n": ds.n,
                 "censoring_rate_observed": ds.censoring_rate,
                 "censoring_rate_expected": truth.censoring_rate, "ate": truth.ate}))


def run_fetch_jtpa(args):
    out = Path(args.output)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".csforest-")
    os.close(fd)
    try:
        if args.from_file:
            src = Path(args.from_file)
            if not src.is_file():
                raise errors.InputError(f"file not found: {src}")
            shutil.copyfile(src, tmp)
            source = str(src)
        else:
            try:
                with urllib.request.urlopen(args.url, timeout=args.timeout) as resp, \
                        open(tmp, "wb") as fh:
                    shutil.copyfileobj(resp, fh)
            except OSError as exc:
                raise errors.InputError(f"download of {args.url} failed: {exc}") from None
            source = args.url
        digest = hashlib.sha256(Path(tmp).read_bytes()).hexdigest()
        expected = args.sha256 or JTPA_SHA256
        if expected and digest != expected.lower():
            raise errors.IntegrityError(f"sha256 {digest} does not match expected {expected}")
        ds = load_csv(tmp, JTPA_SCHEMA)
        _publish(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    _emit(_json({"path": str(out), "source": source, "sha256": digest,
                 "verified": bool(expected), "n": ds.n, "p": ds.p,
                 "censoring_rate": ds.censoring_rate}))


# parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csforest",
        description="Causal survival forests: CATEs on right-censored outcomes.",
        epilog="exit codes: " + ", ".join(f"{v} {k}" for k, v in EXIT_CODES.items()),
    )
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("fit", help="fit a model and save it")
    _add_schema(p)
    _add_forest_flags(p)
    p.add_argument("--model", required=True, help="output model file (.npz)")
    p.add_argument("--diagnostics", help="write diagnostics JSON here instead of stdout")
    p.set_defaults(func=run_fit)

    p = sub.add_parser("predict", help="per-row CATE estimates as CSV")
    p.add_argument("--model", required=True)
    _add_schema(p, required=False)
    p.add_argument("--oob", action="store_true", help="out-of-bag estimates for the training rows")
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(func=run_predict)

    for name, func, helptext in (("ate", run_ate, "doubly robust average treatment effect"),
                                 ("blp", run_blp, "best linear projection with HC3 errors"),
                                 ("rate", run_rate, "TOC curve and AUTOC"),
                                 ("report", run_report, "CATE summary and subgroup means")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        _add_schema(p, required=False)
        p.add_argument("--output", help="write the result here instead of stdout")
        formats = ("json", "table", "csv") if name == "blp" else ("json", "table")
        p.add_argument("--format", choices=formats, default="table")
        p.set_defaults(func=func)
        if name == "blp":
            p.add_argument("--projection", help="comma-separated covariates (default: all)")
        if name == "rate":
            p.add_argument("--priorities", default="cate",
                           help="'cate' (OOB estimates), 'constant' or a covariate name")
            p.add_argument("--n-bootstrap", type=int, default=200)
            p.add_argument("--seed", type=int, default=42)
            p.add_argument("--toc-csv", help="full TOC curve as CSV (q, toc)")
            p.add_argument("--toc-svg", help="TOC plot with 95%% bars")
        if name == "report":
            p.add_argument("--top-fraction", type=float, default=0.2)
            p.add_argument("--histogram-svg", help="histogram of recorded times (needs --data)")
            p.add_argument("--histogram-csv", help="histogram counts as CSV (needs --data)")
            p.add_argument("--bins", type=int, default=30)

    p = sub.add_parser("simulate", help="draw a synthetic dataset with known effects")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--horizon", type=float, default=720.0)
    p.add_argument("--effect", choices=("constant", "step", "linear"), default="constant")
    p.add_argument("--effect-value", type=float, default=0.0)
    p.add_argument("--effect-covariate", type=int, default=2,
                   help="column carrying the effect, 1-based to match x1..xP (default 2)")
    p.add_argument("--baseline-rate", type=float, default=1 / 100)
    p.add_argument("--prognostic", type=float, default=0.0)
    p.add_argument("--censoring-rate", type=float, default=None,
                   help="exponential censoring rate (default: no censoring)")
    p.add_argument("--censoring-fraction", type=_probability, default=None,
                   help="solve for the censoring rate giving this censored share")
    p.add_argument("--treat-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="CSV path")
    p.add_argument("--truth", help="truth JSON path (default: OUTPUT.truth.json)")
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("fetch-jtpa", help="download (or import) the JTPA survival data")
    p.add_argument("--output", default="jtpa.csv")
    p.add_argument("--url", default=JTPA_URL)
    p.add_argument("--from-file", help="import a local copy instead of downloading")
    p.add_argument("--sha256", help="expected digest of the file")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=run_fetch_jtpa)
    return parser


def _configure_threads(requested):
    value = requested if requested is not None else os.environ.get(THREADS_ENV)
    if value is None:
        return
    try:
        count = int(value)
    except ValueError:
        raise errors.ParameterError(f"thread count must be an integer, got {value!r}") from None
    if count < 1:
        raise errors.ParameterError(f"thread count must be positive, got {count}")
    import numba

    numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads(args.threads)
        args.func(args)
    except errors.CsfError as exc:
        print(f"csforest {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"csforest {args.command}: error: {exc}", file=sys.stderr)
        return errors.InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
