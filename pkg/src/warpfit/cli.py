"""Command-line front end: ``warpfit simulate|fit|register|cv|plot``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Settings resolve as command-line flags > ``--config`` JSON file > defaults.
Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from . import svgplot
from .data import (
    Dataset,
    SimSpec,
    default_template,
    downsample,
    load_curves,
    load_dataset,
    read_labels,
    save_dataset,
    simulate,
    truncate,
    write_labels,
    write_long_csv,
)
from .discriminate import LogisticModel, cross_validate, cross_validate_pipeline, features_from_effects, fit_logistic
from .exceptions import DataFormatError, FitError, SeparationError, WarpfitError
from .model import FitConfig, TemplateModel, fit_em, register_curve, subject_effects, subject_warp
from .splines import warp_eval

log = logging.getLogger("warpfit")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "seed": 0,
    "interval": [-80.0, 0.0],
    "tau0": [-60.0, -40.0, -20.0],
    "degree": 3,
    "knots": 10,
    "downsample": 30,
    "truncate": -80.0,
    "quad": 5,
    "estep": "laplace_ghq",
    "max_iter": 200,
    "min_iter": 1,
    "tol": 1e-6,
    "p": [2],
    "ridge": 1e-6,
    "folds": None,
    "format": "long",
}

SIM_SCHEMA = {
    "type": "object",
    "required": ["n"],
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "grid": {"enum": ["common", "random"]},
        "incomplete_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "model": {"type": "string"},
        "template": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p": {"type": "integer", "minimum": 0, "maximum": 5},
                "lambda": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "sigma": {"type": "number", "minimum": 0},
                "Sigma": {
                    "oneOf": [
                        {"type": "number", "minimum": 0},
                        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                    ]
                },
                "tau0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "interval": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "degree": {"type": "integer", "minimum": 0},
                "n_interior_knots": {"type": "integer", "minimum": 0},
            },
        },
        "labels": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number"},
                "b": {"type": "array", "items": {"type": "number"}},
                "d": {"type": "array", "items": {"type": "number"}},
            },
        },
    },
}


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _settings(args: argparse.Namespace) -> Dict:
    s = dict(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        unknown = set(cfg) - set(DEFAULTS) - {"labels", "data"}
        if unknown:
            raise DataFormatError(f"{args.config}: unknown config keys {sorted(unknown)}")
        s.update(cfg)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config", "command"):
            s[k] = v
    return s


def _write_manifest(out: Path, command: str, settings: Dict, inputs: List[str], outputs: List[str],
                    t_start: float) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in settings.items() if k not in ("out",)},
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seed": settings.get("seed"),
        "version": _version(),
        "duration_s": round(time.time() - t_start, 3),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _fit_config(s: Dict, p: int) -> FitConfig:
    return FitConfig(
        p=p,
        max_em_iters=int(s["max_iter"]),
        min_em_iters=int(s["min_iter"]),
        em_tol=float(s["tol"]),
        quad_points_per_dim=int(s["quad"]),
        estep_mode=s["estep"],
        seed=int(s["seed"]),
        interval=tuple(s["interval"]),
        tau0=tuple(s["tau0"]),
        degree=int(s["degree"]),
        n_interior_knots=int(s["knots"]),
    )


def _config_from_model(model: TemplateModel) -> FitConfig:
    cfg = dict(model.diagnostics.get("config", {}))
    cfg.update(p=model.p, tau0=tuple(model.tau0), interval=model.interval)
    known = set(FitConfig.__dataclass_fields__)
    return FitConfig(**{k: v for k, v in cfg.items() if k in known})


def _load_data(s: Dict, preprocess: bool = True) -> Dataset:
    path = Path(s["data"])
    if path.suffix == ".json":
        ds = load_dataset(path)
        if s.get("labels"):
            ds = Dataset(ds.curves, read_labels(s["labels"]), ds.meta)
    else:
        ds = load_curves(path, s["format"], s.get("labels"))
    if preprocess:
        ds = truncate(ds, float(s["truncate"]))
        ds = downsample(ds, int(s["downsample"]))
    return ds


def _write_rows(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_effects(path: Path, effects) -> None:
    rows = [e.to_row() for e in effects]
    header = list(rows[0].keys()) if rows else ["id"]
    _write_rows(path, header, [[r[k] for k in header] for r in rows])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(s: Dict, out: Path) -> List[str]:
    with open(s["spec"]) as fh:
        spec = json.load(fh)
    try:
        jsonschema.validate(spec, SIM_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DataFormatError(f"{s['spec']}: {where}: {exc.message}") from None

    sigma = None
    if "model" in spec:
        model = TemplateModel.from_json(spec["model"])
    else:
        t = dict(spec.get("template", {}))
        p = t.get("p", 2)
        lam = t.get("lambda", [4.0, 1.0, 0.5, 0.25, 0.125][:p])
        sigma = float(t.get("sigma", 0.1))
        model = default_template(
            p=p,
            lam=lam,
            sigma=sigma if sigma > 0 else 1.0,
            Sigma=t.get("Sigma", 0.04),
            interval=tuple(t.get("interval", s["interval"])),
            tau0=tuple(t.get("tau0", s["tau0"])),
            degree=t.get("degree", s["degree"]),
            n_interior_knots=t.get("n_interior_knots", s["knots"]),
        )
    seed = int(spec.get("seed", s["seed"]))
    sim = SimSpec(
        model=model,
        n=spec["n"],
        m=spec.get("m", 30),
        grid=spec.get("grid", "common"),
        incomplete_frac=spec.get("incomplete_frac", 0.4),
        labels=spec.get("labels"),
        seed=seed,
        sigma=sigma,
    )
    ds, truth = simulate(sim)
    write_long_csv(ds, out / "curves.csv")
    save_dataset(ds, out / "dataset.json")
    outputs = ["curves.csv", "dataset.json", "truth.json", "truth_model.json"]
    if ds.labels is not None:
        write_labels(ds, out / "labels.csv")
        outputs.append("labels.csv")
    with open(out / "truth.json", "w") as fh:
        json.dump(truth.to_dict(), fh, indent=1)
        fh.write("\n")
    model.to_json(out / "truth_model.json")
    return outputs


def cmd_fit(s: Dict, out: Path) -> List[str]:
    ds = _load_data(s)
    outputs = []
    for p in s["p"]:
        cfg = _fit_config(s, int(p))
        log.info("fitting p=%d on %d curves", p, len(ds))
        res = fit_em(ds, cfg)
        res.model.to_json(out / f"model_p{p}.json")
        _write_rows(out / f"trace_p{p}.csv", ["iteration", "loglik"], enumerate(res.trace))
        _write_effects(out / f"effects_p{p}.csv", res.effects)
        outputs += [f"model_p{p}.json", f"trace_p{p}.csv", f"effects_p{p}.csv"]
    return outputs


def _model_path(s: Dict, p: Optional[int] = None) -> Path:
    if s.get("model"):
        return Path(s["model"])
    if s.get("model_dir") and p is not None:
        return Path(s["model_dir"]) / f"model_p{p}.json"
    raise DataFormatError("no model given; pass --model or --model-dir")


def _load_model(path: Path) -> TemplateModel:
    if not path.exists():
        raise DataFormatError(f"model file {path} not found (hint: run `warpfit fit` first)")
    return TemplateModel.from_json(str(path))


def cmd_register(s: Dict, out: Path) -> List[str]:
    ds = _load_data(s)
    model = _load_model(_model_path(s, s["p"][0]))
    effects = subject_effects(ds, model, _config_from_model(model))
    rows = []
    for c, e in zip(ds.curves, effects):
        rc = register_curve(c, e, model)
        rows += [[c.id, t, tr, y] for t, tr, y in zip(c.grid, rc.grid, c.values)]
    _write_rows(out / "registered.csv", ["id", "t", "t_registered", "value"], rows)
    _write_effects(out / "effects.csv", effects)
    return ["registered.csv", "effects.csv"]


def cmd_cv(s: Dict, out: Path) -> List[str]:
    ds = _load_data(s)
    if ds.labels is None:
        raise DataFormatError("cv needs group labels (--labels id,group CSV)")
    p_values = [int(p) for p in s["p"]]
    folds = None if s["folds"] in (None, 0) else int(s["folds"])
    ridge = float(s["ridge"])
    outputs = ["cv.csv", "cv_table.csv", "cv.json"]
    if s.get("full_pipeline"):
        cfg = _fit_config(s, 0)
        report = cross_validate_pipeline(ds, p_values, cfg, folds=folds, ridge=ridge, seed=int(s["seed"]))
    else:
        features = {}
        for p in p_values:
            model = _load_model(_model_path(s, p))
            effects = subject_effects(ds, model, _config_from_model(model))
            features[p] = features_from_effects(effects, ds.labels)
        report = cross_validate(features, p_values, folds=folds, ridge=ridge, seed=int(s["seed"]))
        for p, rows in features.items():
            for with_tau in (False, True):
                if p == 0 and not with_tau:
                    continue
                try:
                    lm = fit_logistic(rows, include_tau=with_tau, ridge=ridge)
                except SeparationError as exc:
                    log.warning("full-data logistic fit p=%d tau=%s: %s", p, with_tau, exc)
                    continue
                name = f"logistic_p{p}_{'z+tau' if with_tau else 'z'}.json"
                with open(out / name, "w") as fh:
                    json.dump(lm.to_dict(), fh, indent=2)
                    fh.write("\n")
                outputs.append(name)
    report.to_csv(out / "cv.csv")
    report.to_table_csv(out / "cv_table.csv")
    report.to_json(out / "cv.json")
    for p, without, with_ in report.table():
        fmt = lambda v: "  --- " if v is None else f"{100 * v:5.1f}%"  # noqa: E731
        print(f"p={p}: without tau {fmt(without)}   with tau {fmt(with_)}")
    return outputs


PLOT_KINDS = ("curves", "registered", "components", "warps", "beta")


def cmd_plot(s: Dict, out: Path) -> List[str]:
    kind = s["kind"]
    lines: List[svgplot.Line] = []
    xlabel, ylabel = "t", "curvature"
    if kind in ("curves", "registered"):
        ds = _load_data(s)
        if kind == "registered":
            model = _load_model(_model_path(s, s["p"][0]))
            effects = subject_effects(ds, model, _config_from_model(model))
            curves = [register_curve(c, e, model) for c, e in zip(ds.curves, effects)]
        else:
            curves = ds.curves
        rows = []
        for c in curves:
            color = None
            if ds.labels is not None:
                color = svgplot.PALETTE[1] if ds.labels[c.id] else svgplot.PALETTE[0]
            lines.append(svgplot.Line(c.grid, c.values, color=color, width=0.8, opacity=0.6))
            rows += [[c.id, t, y] for t, y in zip(c.grid, c.values)]
        _write_rows(out / f"{kind}.csv", ["id", "t", "value"], rows)
    elif kind == "components":
        model = _load_model(_model_path(s, s["p"][0]))
        t = np.linspace(*model.interval, 401)
        mu = model.mean_function(t)
        xi = model.components(t)
        header, cols = ["t", "mean"], [t, mu]
        for k in range(model.p):
            step = np.sqrt(model.lam[k]) * xi[:, k]
            header += [f"xi{k + 1}", f"mean_plus_{k + 1}", f"mean_minus_{k + 1}"]
            cols += [xi[:, k], mu + step, mu - step]
            lines += [
                svgplot.Line(t, mu + step, color=svgplot.PALETTE[k % 8], style="dashdot"),
                svgplot.Line(t, mu - step, color=svgplot.PALETTE[k % 8], style="dot"),
            ]
        lines.append(svgplot.Line(t, mu, color="black", width=1.8))
        _write_rows(out / "components.csv", header, np.column_stack(cols))
    elif kind == "warps":
        ds = _load_data(s)
        model = _load_model(_model_path(s, s["p"][0]))
        effects = subject_effects(ds, model, _config_from_model(model))
        t = np.linspace(*model.interval, 201)
        rows = []
        for e in effects:
            ht = warp_eval(subject_warp(e, model), t)
            lines.append(svgplot.Line(t, ht, width=0.8, opacity=0.6))
            rows += [[e.id, a, b] for a, b in zip(t, ht)]
        _write_rows(out / "warps.csv", ["id", "t", "h"], rows)
        ylabel = "h(t)"
    elif kind == "beta":
        model = _load_model(_model_path(s, s["p"][0]))
        if not s.get("logistic"):
            raise DataFormatError("plot beta needs --logistic <logistic model JSON>")
        with open(s["logistic"]) as fh:
            lm = LogisticModel.from_dict(json.load(fh))
        if lm.b.size != model.p:
            raise DataFormatError(f"logistic model has {lm.b.size} score coefficients, template has p={model.p}")
        t = np.linspace(*model.interval, 401)
        beta = model.components(t) @ lm.b
        lines.append(svgplot.Line(t, beta, color="black"))
        _write_rows(out / "beta.csv", ["t", "beta"], np.column_stack([t, beta]))
        ylabel = "beta(t)"
    else:
        raise DataFormatError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    (out / f"{kind}.svg").write_text(svgplot.render(lines, title=kind, xlabel=xlabel, ylabel=ylabel))
    return [f"{kind}.csv", f"{kind}.svg"]


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "register": cmd_register,
    "cv": cmd_cv,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="long CSV (id,t,value), curve directory or dataset JSON")
    data.add_argument("--labels", help="labels CSV (id,group)")
    data.add_argument("--format", choices=["long", "dir"])
    data.add_argument("--truncate", type=float, help="drop observations below this t (default -80)")
    data.add_argument("--downsample", type=int, help="maximum points per curve (default 30)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--interval", type=float, nargs=2)
    model.add_argument("--tau0", type=float, nargs="+", help="reference warp knots")
    model.add_argument("--degree", type=int)
    model.add_argument("--knots", type=int, help="number of equispaced interior knots")
    model.add_argument("--quad", type=int, help="quadrature nodes per warp dimension")
    model.add_argument("--estep", choices=["laplace_ghq", "map_hard"])
    model.add_argument("--max-iter", dest="max_iter", type=int)
    model.add_argument("--min-iter", dest="min_iter", type=int)
    model.add_argument("--tol", type=float, help="relative log-likelihood tolerance")

    parser = argparse.ArgumentParser(prog="warpfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic dataset")
    p.add_argument("--spec", required=True, help="simulation spec JSON")

    p = sub.add_parser("fit", parents=[common, data, model], help="fit the warping model by EM")
    p.add_argument("--p", type=int, nargs="+", help="numbers of amplitude components")

    p = sub.add_parser("register", parents=[common, data, model], help="write registered curves")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--model-dir", dest="model_dir")
    p.add_argument("--p", type=int, nargs=1)

    p = sub.add_parser("cv", parents=[common, data, model], help="cross-validated discrimination")
    p.add_argument("--model-dir", dest="model_dir", help="directory with model_p<p>.json files")
    p.add_argument("--p", type=int, nargs="+")
    p.add_argument("--ridge", type=float)
    p.add_argument("--folds", type=int, help="number of folds (default: leave-one-out)")
    p.add_argument("--full-pipeline", dest="full_pipeline", action="store_true", default=None,
                   help="refit the registration model inside every fold")

    p = sub.add_parser("plot", parents=[common, model], help="SVG plot plus its data as CSV")
    p.add_argument("kind", choices=PLOT_KINDS)
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--format", choices=["long", "dir"])
    p.add_argument("--truncate", type=float)
    p.add_argument("--downsample", type=int)
    p.add_argument("--model")
    p.add_argument("--model-dir", dest="model_dir")
    p.add_argument("--p", type=int, nargs=1)
    p.add_argument("--logistic", help="logistic model JSON (for kind=beta)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    t_start = time.time()
    try:
        s = _settings(args)
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command in ("plot",) and args.kind in ("curves", "registered", "warps") and not s.get("data"):
            raise DataFormatError(f"plot {args.kind} needs --data")
        outputs = COMMANDS[args.command](s, out)
        inputs = [str(s[k]) for k in ("data", "labels", "spec", "model", "model_dir", "logistic") if s.get(k)]
        _write_manifest(out, args.command, s, inputs, outputs, t_start)
    except (FitError, SeparationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"warpfit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WarpfitError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"warpfit: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
