"""Command-line front end: ``lapselab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import lms
from .classify import ClassifierSpec
from .portfolio import PortfolioError, SynthConfig, generate_synthetic, load_csv, to_csv_string, write_csv
from .survival.base import SchemaMismatch
from .survival.retention import (
    ACCEPTANT,
    LAPSER,
    MODEL_FAMILIES,
    ModelFitFailed,
    build_retention_matrices,
    compare_models,
)
from .survival.serialize import ModelFormatError, load_model, save_model
from .valuation import InvalidStrategy, StrategyParams, ValuationError, relabel_targets

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_SCENARIO = 4


class ConfigError(Exception):
    pass


class ModelFailure(Exception):
    pass


class ScenarioFailure(Exception):
    pass


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _write(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _load_data(args):
    if not args.data:
        raise ConfigError("--data is required")
    try:
        return load_csv(args.data)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {args.data}") from None
    except PortfolioError as exc:
        raise ConfigError(f"{args.data}: {exc}") from None


def _model_path(models_dir, family, target):
    return Path(models_dir) / f"{family}_{target}.json"


def _load_selected(args):
    """The selected r^acceptant and r^lapser models from ``--models-dir``."""
    if not args.models_dir:
        raise ConfigError("--models-dir is required")
    sel_path = Path(args.models_dir) / "selected.json"
    try:
        selected = json.loads(sel_path.read_text(encoding="utf-8"))
        return tuple(
            load_model(_model_path(args.models_dir, selected[target], target)) for target in (ACCEPTANT, LAPSER)
        )
    except FileNotFoundError as exc:
        raise ConfigError(f"missing model file: {exc.filename}; run fit-survival first") from None
    except (ModelFormatError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad model directory {args.models_dir}: {exc}") from None


def _table(args):
    try:
        table = lms.ScenarioTable.load(args.strategies) if args.strategies else lms.ScenarioTable.builtin()
    except FileNotFoundError:
        raise ConfigError(f"strategy file not found: {args.strategies}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.strategies}: {exc}") from None
    except lms.InvalidScenario as exc:
        raise ScenarioFailure(str(exc)) from None
    if getattr(args, "scenarios", None):
        try:
            table = table.select(_csv_list(args.scenarios))
        except KeyError as exc:
            raise ScenarioFailure(f"unknown scenario {exc.args[0]!r}") from None
    return table


def _strategy(args):
    """Strategy from ``--scenario NAME`` or the explicit parameter flags."""
    if args.scenario:
        try:
            return _table(args)[args.scenario].strategy
        except KeyError:
            raise ScenarioFailure(f"unknown scenario {args.scenario!r}") from None
    values = {k: getattr(args, k) for k in lms.STRATEGY_FIELDS}
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"give --scenario or all of --p --delta --gamma --c --d --T (missing {', '.join(missing)})")
    try:
        return StrategyParams(**values)
    except InvalidStrategy as exc:
        raise ScenarioFailure(f"strategy: {exc}") from None


def _require_seed(args):
    if args.seed is None:
        raise ConfigError("--seed is required for this subcommand")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    _require_seed(args)
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: {exc}") from None
    overrides.update(n_subjects=args.n, seed=args.seed)
    try:
        cfg = SynthConfig.from_dict(overrides)
        data = generate_synthetic(cfg)
    except (PortfolioError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if args.out in (None, "-"):
        sys.stdout.write(to_csv_string(data))
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(data, args.out)
    return EXIT_OK


def _survival_options(args):
    return {
        "rsf": {"n_trees": args.rsf_trees},
        "gbsm": {"n_stages": args.gbsm_stages},
    }


def cmd_fit_survival(args):
    _require_seed(args)
    data = _load_data(args)
    if not args.models_dir:
        raise ConfigError("--models-dir is required")
    families = _csv_list(args.families) if args.families else list(MODEL_FAMILIES)
    unknown = set(families) - set(MODEL_FAMILIES)
    if unknown:
        raise ConfigError(f"unknown survival families: {sorted(unknown)}")
    try:
        comparison = compare_models(
            data,
            families=families,
            options=_survival_options(args),
            test_fraction=args.test_fraction,
            seed=args.seed,
            lapser_population=args.lapser_population,
        )
    except ModelFitFailed as exc:
        raise ModelFailure(str(exc)) from None
    out = Path(args.models_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (family, target), model in comparison.models.items():
        save_model(model, _model_path(out, family, target))
    (out / "selected.json").write_text(json.dumps(comparison.best, indent=1, sort_keys=True), encoding="utf-8")
    lines = ["model,target,cindex,selected"]
    for row in comparison.rows():
        lines.append(f"{row['model']},{row['target']},{row['cindex']!r},{int(row['selected'])}")
    report = "\n".join(lines) + "\n"
    (out / "cindex.csv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return EXIT_OK


def _matrices(args, data, horizon):
    acc, lap = _load_selected(args)
    try:
        return build_retention_matrices(acc, lap, data, horizon)
    except SchemaMismatch as exc:
        raise ConfigError(f"models do not match the data: {exc}") from None


def cmd_valuate(args):
    data = _load_data(args)
    s = _strategy(args)
    matrices = _matrices(args, data, args.horizon or s.T)
    try:
        result = relabel_targets(data, matrices, s)
    except ValuationError as exc:
        raise ScenarioFailure(str(exc)) from None
    _write(args.out, result.to_csv_string(data.subject_ids, data.lapsed))
    sys.stderr.write(result.summary_json() + "\n")
    return EXIT_OK


def cmd_run_lms(args):
    _require_seed(args)
    data = _load_data(args)
    table = _table(args)
    if len(table) == 0:
        raise ConfigError("no scenarios selected")
    horizon = max(sc.strategy.T for sc in table)
    if args.horizon is not None and args.horizon < horizon:
        raise ScenarioFailure(f"--horizon {args.horizon} is shorter than a scenario horizon ({horizon})")
    matrices = _matrices(args, data, args.horizon or horizon)
    families = _csv_list(args.families) if args.families else list(lms.DEFAULT_FAMILIES)
    out = Path(args.out or "lms-results")
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = lms.run_grid(
            data,
            matrices,
            table,
            families,
            args.folds,
            args.seed,
            protocol=args.protocol,
            inner_k=args.inner_folds,
            checkpoint_dir=out / "checkpoints",
        )
    except lms.HorizonMismatch as exc:
        raise ScenarioFailure(str(exc)) from None
    (out / "results.csv").write_text(lms.results_csv(results), encoding="utf-8")
    (out / "results.json").write_text(lms.results_json(results), encoding="utf-8")
    sys.stdout.write(f"{len(results)} scenarios -> {out / 'results.csv'}\n")
    return EXIT_OK


def _axis(text):
    """``name=v1,v2,...`` or ``name=start:stop:count`` (inclusive linspace)."""
    if "=" not in text:
        raise ScenarioFailure(f"axis {text!r}: expected name=values")
    name, spec = text.split("=", 1)
    try:
        if ":" in spec:
            start, stop, count = spec.split(":")
            values = np.linspace(float(start), float(stop), int(count)).tolist()
        else:
            values = [float(v) for v in _csv_list(spec)]
    except ValueError:
        raise ScenarioFailure(f"axis {text!r}: cannot parse values") from None
    return name.strip(), values


def cmd_sensitivity(args):
    data = _load_data(args)
    base = _strategy(args)
    axis1, axis2 = _axis(args.axis1), _axis(args.axis2)
    horizon = args.horizon or max([base.T] + [int(v) for n, vals in (axis1, axis2) if n == "T" for v in vals])
    matrices = _matrices(args, data, horizon)
    classifier = None
    if args.classifier:
        _require_seed(args)
        try:
            classifier = ClassifierSpec.default(args.classifier, args.seed)
        except (KeyError, ValueError):
            raise ConfigError(f"unknown classifier family {args.classifier!r}") from None
    try:
        grid = lms.sensitivity_surface(
            data, matrices, base, axis1, axis2, classifier=classifier, k=args.folds, seed=args.seed or 0
        )
    except lms.InvalidAxis as exc:
        raise ScenarioFailure(str(exc)) from None
    _write(args.out, grid.to_csv_string())
    return EXIT_OK


def cmd_report(args):
    if not args.results:
        raise ConfigError("--results is required")
    try:
        docs = json.loads(Path(args.results).read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--results: {exc}") from None
    results = [lms.ScenarioResult.from_dict(d) for d in docs]
    report = {"scenarios": len(results), "families": {}}
    families = sorted({f for r in results for f in r.families})
    for family in families:
        rows = [r.families[family] for r in results if family in r.families]
        imps = [fr.improvement for fr in rows if fr.improvement is not None]
        entry = {
            "mean_rg_y": float(np.mean([fr.rg_y for fr in rows])),
            "mean_rg_ytilde": float(np.mean([fr.rg_ytilde for fr in rows])),
            "mean_improvement": float(np.mean(imps)) if imps else None,
            "scenarios_improved": sum(fr.rg_ytilde > fr.rg_y for fr in rows),
            "scenarios_ytilde_negative": sum(fr.rg_ytilde < 0 for fr in rows),
        }
        try:
            entry["corr_improvement_target_diff"] = lms.improvement_correlation(results, family)
        except ValueError:
            entry["corr_improvement_target_diff"] = None
        report["families"][family] = entry
    if args.scenario:
        data = _load_data(args)
        s = _strategy(args)
        matrices = _matrices(args, data, s.T)
        val = relabel_targets(data, matrices, s)
        try:
            report["nontargeted_profile"] = lms.profile_nontargeted(data, data.lapsed, val.y_tilde)
        except lms.EmptySubset as exc:
            report["nontargeted_profile"] = {"error": str(exc)}
    _write(args.out, json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _add_strategy_flags(p):
    p.add_argument("--strategies", help="scenario table JSON (default: built-in 64-strategy table)")
    p.add_argument("--scenario", help="scenario name from the table")
    for name, typ in (("p", float), ("delta", float), ("gamma", float), ("c", float), ("d", float), ("T", int)):
        p.add_argument(f"--{name}", type=typ, dest=name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapselab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic portfolio CSV")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file of SynthConfig overrides")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-survival", help="fit and compare survival models for both targets")
    p.add_argument("--data")
    p.add_argument("--models-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--families", help="comma list of cox,rsf,gbsm")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--lapser-population", choices=("all", "lapsers"), default="all")
    p.add_argument("--rsf-trees", type=int, default=50)
    p.add_argument("--gbsm-stages", type=int, default=100)
    p.set_defaults(func=cmd_fit_survival)

    p = sub.add_parser("valuate", help="individual gains and profit labels for one strategy")
    p.add_argument("--data")
    p.add_argument("--models-dir")
    p.add_argument("--horizon", type=int)
    p.add_argument("-o", "--out")
    _add_strategy_flags(p)
    p.set_defaults(func=cmd_valuate)

    p = sub.add_parser("run-lms", help="run both targeting pipelines over a scenario table")
    p.add_argument("--data")
    p.add_argument("--models-dir")
    p.add_argument("--strategies")
    p.add_argument("--scenarios", help="comma list of scenario names to run")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--inner-folds", type=int, default=3)
    p.add_argument("--protocol", choices=lms.PROTOCOLS, default="cv")
    p.add_argument("--families", help="comma list of cart,rf,gbt")
    p.add_argument("--horizon", type=int)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_run_lms)

    p = sub.add_parser("sensitivity", help="retention gain over a two-parameter grid")
    p.add_argument("--data")
    p.add_argument("--models-dir")
    p.add_argument("--axis1", required=True, help="name=v1,v2,... or name=start:stop:count")
    p.add_argument("--axis2", required=True)
    p.add_argument("--classifier", help="cart|rf|gbt: cross-fitted classifier surface instead of the oracle")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--horizon", type=int)
    p.add_argument("-o", "--out")
    _add_strategy_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("report", help="summarize run-lms results")
    p.add_argument("--results", help="results.json from run-lms")
    p.add_argument("--data")
    p.add_argument("--models-dir")
    p.add_argument("-o", "--out")
    _add_strategy_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"lapselab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFailure as exc:
        print(f"lapselab {args.command}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ScenarioFailure as exc:
        print(f"lapselab {args.command}: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
