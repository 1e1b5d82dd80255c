"""Command-line front end.

Every verb resolves a configuration (see :mod:`galqr.config`), writes its
outputs into a staging directory, validates them, writes ``manifest.json``
and only then moves the directory into place. Failures print a JSON error
object on stderr, leave no partial outputs and exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, _accel, config as cfgmod
from .diagnostics import (
    diagnose,
    lstat_kurtosis,
    sample_skewness_kurtosis,
    write_influence_csv,
    write_loo_csv,
    write_residual_csv,
)
from .dist import (
    AlParams,
    CgalParams,
    GalParams,
    RngStream,
    al_cdf,
    al_logpdf,
    cgal_logpdf,
    cgal_sample,
    gal_cdf_grid,
    gal_logpdf,
    gal_sample,
)
from .errors import ConfigError, DataError, GalqrError
from .mcmc import (
    PosteriorDraws,
    SUMMARY_COLUMNS,
    convergence,
    posterior_summary,
    predict_quantile_trajectory,
    run_sampler,
)
from .model import LongitudinalDataset
from .sim import (
    TABLE_COLUMNS,
    ScenarioSpec,
    cgal_rows,
    contamination_rows,
    performance_table,
    run_scenario,
    summarize_tables,
)

SCHEMA_VERSION = "1.0"
OUTPUT_ROOT_ENV = "GALQR_OUTPUT_ROOT"
VERBS = ("fit", "predict", "diagnose", "simulate", "pdf-table", "kurtosis-table", "rerun")

log = logging.getLogger("galqr")

# expected header (CSV, exact unless marked as prefix) or required keys (JSON)
SCHEMAS = {
    "draws.csv": ("csv-prefix", ["chain", "iteration"]),
    "random_effects.csv": ("csv-prefix", ["chain", "iteration", "subject"]),
    "summary.csv": ("csv", list(SUMMARY_COLUMNS)),
    "inclusion.csv": ("csv", ["subject", "obs_index", "time", "inclusion_prob"]),
    "convergence.json": ("json", ["converged", "rhat", "ess", "acceptance"]),
    "trajectory.csv": ("csv", ["time", "cd4", "median", "hpd_lo", "hpd_hi"]),
    "influence.csv": ("csv", ["subject", "obs_index", "time", "kl", "calibration", "influential"]),
    "residuals.csv": ("csv", ["subject", "obs_index", "time", "y", "scaled_residual"]),
    "loo.csv": ("csv", ["subject", "obs_index", "time", "elpd_loo", "pareto_k"]),
    "diagnostics.json": ("json", ["loo", "residual_tests", "influence"]),
    "performance.csv": ("csv", list(TABLE_COLUMNS)),
    "contamination.csv": ("csv", list(TABLE_COLUMNS)),
    "cgal_performance.csv": ("csv", list(TABLE_COLUMNS)),
    "performance.md": ("text", None),
    "replicates.csv": ("csv", ["p0", "alpha", "Model", "replicates", "succeeded", "failed", "refit", "flagged"]),
    "pdf_table.csv": ("csv", ["y", "al_pdf", "gal_pdf", "cgal_pdf", "al_cdf", "gal_cdf", "cgal_cdf"]),
    "kurtosis_table.csv": ("csv", ["gamma", "family", "skewness", "kurtosis", "lkurt_left", "lkurt_right"]),
}


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _id_key(ids):
    try:
        return sorted(ids, key=float)
    except ValueError:
        return sorted(ids)


def ingest_csv(path, cd4_scale: float | None = None) -> LongitudinalDataset:
    """Read a long-format CSV with columns ``id, time, y`` plus numeric covariates.

    Rows are grouped by subject (numeric ids in numeric order, otherwise
    lexicographic) and sorted by time within subject. ``cd4_scale`` divides
    the ``cd4`` column.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        for col in ("id", "time", "y"):
            if col not in header:
                raise DataError(f"{path}: missing required column {col!r}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names")
        covs = [h for h in header if h not in ("id", "time", "y")]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, found {len(rec)}")
            cells = dict(zip(header, (c.strip() for c in rec)))
            vals = {}
            for col in ["time", "y"] + covs:
                try:
                    vals[col] = float(cells[col])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cells[col]!r} in column {col!r}") from None
                if not math.isfinite(vals[col]):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col!r}")
            rows.append((cells["id"], vals))
    if not rows:
        raise DataError(f"{path}: no data rows")
    if cd4_scale is not None:
        if "cd4" not in covs:
            raise DataError(f"{path}: --cd4-scale given but no cd4 column")
        if not cd4_scale > 0:
            raise DataError("cd4 scale must be positive")
        for _, v in rows:
            v["cd4"] /= cd4_scale
    ids = _id_key({r[0] for r in rows})
    index = {sid: i for i, sid in enumerate(ids)}
    rows.sort(key=lambda r: (index[r[0]], r[1]["time"]))
    return LongitudinalDataset(
        ids=ids,
        subj=np.array([index[r[0]] for r in rows]),
        t=np.array([r[1]["time"] for r in rows]),
        y=np.array([r[1]["y"] for r in rows]),
        covariates={c: np.array([r[1][c] for r in rows]) for c in covs},
    )


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **obj}, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(obj):
    # JSON has no NaN/inf; map them to null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def validate_output(path: Path) -> None:
    kind, spec = SCHEMAS[path.name]
    if kind == "text":
        if path.stat().st_size == 0:
            raise GalqrError(f"{path.name} is empty")
        return
    if kind == "json":
        with open(path) as fh:
            obj = json.load(fh)
        missing = [k for k in ["schema_version"] + spec if k not in obj]
        if missing:
            raise GalqrError(f"{path.name} lacks keys {missing}")
        return
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    ok = header[: len(spec)] == spec if kind == "csv-prefix" else header == spec
    if not ok:
        raise GalqrError(f"{path.name} header {header} does not match schema {spec}")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def _dataset(cfg: dict) -> LongitudinalDataset:
    if not cfg["input"]:
        raise ConfigError("this verb needs an input CSV (--input or 'input' in the config)")
    return ingest_csv(cfg["input"], cfg["cd4_scale"])


def _load_fit(fit_dir: Path):
    man_path = fit_dir / "manifest.json"
    if not man_path.exists():
        raise ConfigError(f"{fit_dir} is not a fit output directory (no manifest.json)")
    with open(man_path) as fh:
        man = json.load(fh)
    if man.get("verb") != "fit":
        raise ConfigError(f"{fit_dir} holds a {man.get('verb')!r} run, not a fit")
    re_path = fit_dir / "random_effects.csv"
    draws = PosteriorDraws.from_csv(fit_dir / "draws.csv", re_path if re_path.exists() else None)
    return man["config"], draws


def cmd_fit(cfg: dict, out: Path, ctx: dict) -> None:
    data = _dataset(cfg)
    spec = cfgmod.model_spec(cfg)
    draws = run_sampler(spec, data, cfgmod.sampler_config(cfg))
    draws.to_csv(out / "draws.csv")
    if draws.b is not None:
        draws.random_effects_to_csv(out / "random_effects.csv")
    rows = posterior_summary(draws)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS,
               [[r["parameter"]] + [_num(r[c]) for c in SUMMARY_COLUMNS[1:]] for r in rows])
    conv = convergence(draws)
    if not conv.converged:
        log.warning("fit did not reach split R-hat < 1.05 for every parameter; see convergence.json")
    _write_json(out / "convergence.json", _clean({
        "converged": conv.converged, "rhat": conv.rhat, "ess": conv.ess, "flags": conv.flags(),
        "acceptance": draws.acceptance, "streams": draws.streams,
    }))
    if draws.inclusion is not None:
        prob = draws.inclusion.mean(axis=0)
        _write_csv(out / "inclusion.csv", SCHEMAS["inclusion.csv"][1],
                   [[data.ids[data.subj[j]], j, _num(data.t[j]), _num(prob[j])] for j in range(data.n_obs)])
    ctx["inputs"]["data"] = cfg["input"]


def cmd_predict(cfg: dict, out: Path, ctx: dict) -> None:
    fit_dir = Path(ctx["fit"])
    fit_cfg, draws = _load_fit(fit_dir)
    spec = cfgmod.model_spec(fit_cfg)
    p = cfg["predict"]
    rows = predict_quantile_trajectory(draws, spec, p["schedule"], (p["cd4_intercept"], p["cd4_slope"]))
    _write_csv(out / "trajectory.csv", SCHEMAS["trajectory.csv"][1],
               [[_num(r[c]) for c in SCHEMAS["trajectory.csv"][1]] for r in rows])
    ctx["inputs"]["draws"] = str(fit_dir / "draws.csv")


def cmd_diagnose(cfg: dict, out: Path, ctx: dict) -> None:
    fit_dir = Path(ctx["fit"])
    fit_cfg, draws = _load_fit(fit_dir)
    if draws.b is None:
        raise ConfigError("diagnose needs random effects; refit with sampler.keep_b = true")
    spec = cfgmod.model_spec(fit_cfg)
    data = ingest_csv(fit_cfg["input"], fit_cfg["cd4_scale"])
    rep = diagnose(draws, spec, data, cfg["diagnose"]["n_sims"], RngStream(cfg["seed"], (7,)))
    write_influence_csv(out / "influence.csv", rep.influence)
    write_residual_csv(out / "residuals.csv", data, rep.residuals)
    write_loo_csv(out / "loo.csv", data, rep.loo)
    r = rep.residuals
    _write_json(out / "diagnostics.json", _clean({
        "loo": {"elpd": rep.loo.elpd, "looic": rep.loo.looic, "se_elpd": rep.loo.se_elpd,
                "n_pareto_k_above_0.7": rep.loo.n_high_k},
        "residual_tests": {"ks_statistic": r.ks_stat, "p_uniform": r.p_uniform,
                           "dispersion_ratio": r.dispersion_ratio, "p_dispersion": r.p_dispersion,
                           "n_outliers": r.n_outliers, "p_outlier": r.p_outlier, "n_sims": rep.n_sims},
        "influence": {"n_influential": sum(x.influential for x in rep.influence),
                      "max_kl": max(x.kl for x in rep.influence)},
    }))
    ctx["inputs"]["draws"] = str(fit_dir / "draws.csv")
    ctx["inputs"]["data"] = fit_cfg["input"]


def cmd_simulate(cfg: dict, out: Path, ctx: dict) -> None:
    sc = cfg["scenario"]
    scfg = cfgmod.sampler_config(cfg)
    rows, status = [], []
    for p0, alpha in sc["grid"]:
        s = ScenarioSpec(p0=float(p0), alpha_true=float(alpha), replicates=int(sc["replicates"]),
                         families=tuple(sc["families"]))
        log.info("scenario p0=%s alpha=%s: %d replicates", p0, alpha, s.replicates)
        res = run_scenario(s, scfg, master_seed=cfg["seed"], n_jobs=int(sc["n_jobs"]))
        rows += performance_table(res)
        status += res.status()
    (out / "performance.csv").write_text(summarize_tables(rows))
    (out / "contamination.csv").write_text(summarize_tables(contamination_rows(rows)))
    (out / "cgal_performance.csv").write_text(summarize_tables(cgal_rows(rows)))
    (out / "performance.md").write_text(summarize_tables(rows, "markdown"))
    cols = SCHEMAS["replicates.csv"][1]
    _write_csv(out / "replicates.csv", cols, [[r[c] for c in cols] for r in status])


def cmd_pdf_table(cfg: dict, out: Path, ctx: dict) -> None:
    p = cfg["pdf_table"]
    y = np.linspace(p["y_min"], p["y_max"], int(p["n_points"]))
    al = AlParams(p["mu"], p["sigma"], p["p0"])
    gal = GalParams(p["mu"], p["sigma"], p["gamma"], p["p0"])
    cg = CgalParams(gal, p["alpha"], p["tau0"])
    al_pdf = np.exp(al_logpdf(y, al))
    gal_pdf = np.exp(gal_logpdf(y, gal))
    cgal_pdf = np.exp(cgal_logpdf(y, cg))
    al_c = np.asarray(al_cdf(y, al))
    gal_c = gal_cdf_grid(y, gal)
    cgal_c = (1 - cg.alpha) * gal_c + cg.alpha * gal_cdf_grid(y, cg.inflated)
    cols = [y, al_pdf, gal_pdf, cgal_pdf, al_c, gal_c, cgal_c]
    _write_csv(out / "pdf_table.csv", SCHEMAS["pdf_table.csv"][1],
               [[_num(c[i]) for c in cols] for i in range(y.size)])


def cmd_kurtosis_table(cfg: dict, out: Path, ctx: dict) -> None:
    p = cfg["kurtosis_table"]
    rows = []
    for i, g in enumerate(p["gammas"]):
        gal = GalParams(0.0, 1.0, float(g), p["p0"])
        for j, fam in enumerate(("GAL", "cGAL")):
            stream = RngStream(cfg["seed"], (11, i, j))
            if fam == "GAL":
                x = gal_sample(gal, stream, int(p["n_draws"]))
            else:
                x = cgal_sample(CgalParams(gal, p["alpha"], p["tau0"]), stream, int(p["n_draws"]))
            sk, ku = sample_skewness_kurtosis(x)
            left, right = lstat_kurtosis(x)
            rows.append([_num(g), fam, _num(sk), _num(ku), _num(left), _num(right)])
    _write_csv(out / "kurtosis_table.csv", SCHEMAS["kurtosis_table.csv"][1], rows)


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "pdf-table": cmd_pdf_table,
    "kurtosis-table": cmd_kurtosis_table,
}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def _versions() -> dict:
    import scipy

    out = {"galqr": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    if _accel.HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


def _default_out(verb: str, cfg_hash: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV) or "galqr-runs"
    return Path(root) / f"{verb}-{cfg_hash[:12]}"


def execute(verb: str, cfg: dict, out: Path | None, fit: str | None = None, force: bool = False) -> Path:
    """Run one verb with a resolved config; returns the final output directory."""
    if verb in ("predict", "diagnose"):
        if not fit:
            raise ConfigError(f"{verb} needs --fit DIR")
        fit = str(Path(fit).resolve())
    body = {"verb": verb, "config": cfg, "fit": fit}
    cfg_hash = cfgmod.config_hash(body)
    out = Path(out) if out is not None else Path(cfg["output"]) if cfg["output"] else _default_out(verb, cfg_hash)
    out = out.resolve()
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.stage-", dir=out.parent))
    ctx = {"fit": fit, "inputs": {}}
    start = time.perf_counter()
    try:
        COMMANDS[verb](cfg, stage, ctx)
        outputs = {}
        for f in sorted(stage.iterdir()):
            validate_output(f)
            outputs[f.name] = {"schema_version": SCHEMA_VERSION, "sha256": sha256_file(f)}
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "verb": verb,
            "config": cfg,
            "fit": fit,
            "config_hash": cfg_hash,
            "seed": cfg["seed"],
            "backend": _accel.backend(),
            "versions": _versions(),
            "inputs": {k: {"path": v, "sha256": sha256_file(v)} for k, v in ctx["inputs"].items()},
            "outputs": outputs,
            "wall_time_s": time.perf_counter() - start,
        }
        with open(stage / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out


def rerun(manifest_path, out: Path | None, force: bool = False, check: bool = False) -> Path:
    """Replay a run from its manifest; with ``check`` compare output digests."""
    with open(manifest_path) as fh:
        man = json.load(fh)
    for key in ("verb", "config"):
        if key not in man:
            raise ConfigError(f"{manifest_path} is not a galqr manifest")
    if man.get("backend") and man["backend"] != _accel.backend():
        log.warning("manifest was produced with the %s backend, replaying with %s", man["backend"], _accel.backend())
    cfg = cfgmod.resolve(man["config"])
    if out is None:
        out = Path(manifest_path).resolve().parent.with_name(Path(manifest_path).resolve().parent.name + ".rerun")
    final = execute(man["verb"], cfg, out, man.get("fit"), force=force)
    if check:
        with open(final / "manifest.json") as fh:
            new = json.load(fh)
        diff = [k for k, v in man["outputs"].items() if new["outputs"].get(k, {}).get("sha256") != v["sha256"]]
        if diff:
            raise GalqrError(f"rerun outputs differ from the manifest: {', '.join(diff)}")
    return final


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON error path
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="galqr",
        description="Bayesian mixed-effects quantile regression with AL, GAL and contaminated GAL likelihoods.",
        epilog=f"Outputs default to ${OUTPUT_ROOT_ENV}/<verb>-<config hash> (or ./galqr-runs).",
    )
    parser.add_argument("--version", action="version", version=f"galqr {__version__}")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    helps = {
        "fit": "fit a model to a CSV dataset and write draws, summary and convergence report",
        "predict": "population quantile trajectory over the prediction schedule from a fit",
        "diagnose": "influence, PSIS-LOO and simulated-residual tests for a fit",
        "simulate": "run the simulation scenarios and write performance tables",
        "pdf-table": "density and CDF grid for AL, GAL and cGAL",
        "kurtosis-table": "sample skewness and kurtosis over a grid of shape values",
        "rerun": "replay a run from its manifest.json",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb], description=helps[verb])
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        if verb == "rerun":
            p.add_argument("manifest", type=Path, help="manifest.json of the run to replay")
            p.add_argument("--check", action="store_true", help="fail unless outputs match the manifest digests")
            continue
        p.add_argument("-c", "--config", type=Path, help="TOML config file")
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="master seed")
        if verb in ("fit",):
            p.add_argument("--input", type=Path, help="long-format CSV with id, time, y columns")
            p.add_argument("--cd4-scale", type=float, help="divide the cd4 column by this factor")
            p.add_argument("--likelihood", choices=("AL", "GAL", "cGAL"))
            p.add_argument("--p0", type=float, help="target quantile level")
        if verb in ("fit", "simulate"):
            p.add_argument("--chains", type=int)
            p.add_argument("--iter", type=int)
            p.add_argument("--burnin", type=int)
            p.add_argument("--adapt", type=int)
            p.add_argument("--thin", type=int)
        if verb == "simulate":
            p.add_argument("--replicates", type=int)
            p.add_argument("--n-jobs", type=int)
        if verb in ("predict", "diagnose"):
            p.add_argument("--fit", required=False, help="output directory of a previous fit")
    return parser


def _flag_overrides(args) -> dict:
    o: dict = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        o["seed"] = args.seed
    if get("input") is not None:
        if not args.input.exists():
            raise ConfigError(f"input file not found: {args.input}")
        o["input"] = str(args.input.resolve())
    if get("cd4_scale") is not None:
        o["cd4_scale"] = args.cd4_scale
    model = {k: get(a) for k, a in (("likelihood", "likelihood"), ("p0", "p0")) if get(a) is not None}
    if model:
        o["model"] = model
    sampler = {k: get(a) for k, a in (("n_chains", "chains"), ("n_iter", "iter"), ("n_burnin", "burnin"),
                                      ("n_adapt", "adapt"), ("thin", "thin")) if get(a) is not None}
    if sampler:
        o["sampler"] = sampler
    scen = {k: get(a) for k, a in (("replicates", "replicates"), ("n_jobs", "n_jobs")) if get(a) is not None}
    if scen:
        o["scenario"] = scen
    return o


def _resolve_args(args) -> dict:
    file_cfg = cfgmod.load_file(args.config) if args.config else {}
    if file_cfg.get("input"):
        p = Path(file_cfg["input"])
        if not p.is_absolute() and args.config:
            p = (args.config.parent / p)
        if not p.exists():
            raise ConfigError(f"input file not found: {p}")
        file_cfg["input"] = str(p.resolve())
    overrides = [cfgmod.parse_assignment(s) for s in args.sets] + [_flag_overrides(args)]
    return cfgmod.resolve(file_cfg, overrides)


def _error_json(exc: BaseException) -> str:
    code = exc.code if isinstance(exc, GalqrError) else "internal-error"
    return json.dumps({"schema_version": SCHEMA_VERSION,
                       "error": {"type": code, "class": type(exc).__name__, "message": str(exc)}})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            parser.print_help()
            return 0
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.verb == "rerun":
            out = rerun(args.manifest, args.out, args.force, args.check)
        else:
            cfg = _resolve_args(args)
            out = execute(args.verb, cfg, args.out, getattr(args, "fit", None), args.force)
        print(str(out))
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except KeyboardInterrupt as exc:
        print(_error_json(exc), file=sys.stderr)
        return 130
    except GalqrError as exc:
        print(_error_json(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure must surface as JSON
        print(_error_json(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
