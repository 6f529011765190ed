"""Command-line front end: `fiem plan | toy | gmm | check`.

Exit codes: 0 success, 1 check failure, 2 infeasible plan or invalid input,
3 a run aborted on a domain violation or a degenerate parameter.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from fiem.config.presets import CHECK_SCALES, SCALE_ALIASES, SUITE_ALIASES, get_preset
from fiem.config.settings import Settings, configure_logging, load_settings
from fiem.core.stepsize import (
    STRATEGIES,
    PlannerInputs,
    asymptotic_case1,
    make_plan,
    scan_mu,
)
from fiem.errors import (
    ArgumentError,
    ConfigurationError,
    DomainError,
    InfeasibleError,
    ParameterError,
)
from fiem.experiments import (
    ExperimentConfig,
    GmmExperimentConfig,
    build_toy_model,
    fluctuation_window,
    identity_suite,
    lambda_tail_mean,
    load_gmm_dataset,
    mean_field_suite,
    run_replicated,
    table_report,
    descent_suite,
)
from fiem.parsers import (
    dump_json,
    load_json,
    load_plan_file,
    load_weights,
    parse_algorithms,
    parse_synthetic_spec,
)
from fiem.utils.path_utils import ensure_output_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_DOMAIN = 3


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fiem", description="Incremental EM step-size planning and Monte Carlo experiments"
    )
    parser.add_argument("--env-file", help="Load settings from this .env file")
    parser.add_argument("--log-level", help="Override FIEM_LOG_LEVEL")
    parser.add_argument("--threads", type=int, help="Parallel replicas (-1: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="Compute a constant step-size plan")
    plan.add_argument("--n", type=int, required=True)
    plan.add_argument("--kmax", type=int, required=True)
    plan.add_argument("--vmin", type=float, required=True)
    plan.add_argument("--L", type=float, required=True, dest="l_rms")
    plan.add_argument("--Lv", type=float, required=True, dest="l_gradv")
    plan.add_argument("--mu", type=float, default=0.25)
    plan.add_argument("--lambda", type=float, default=0.5, dest="lam")
    plan.add_argument("--delta-v", type=float, default=1.0)
    plan.add_argument("--strategy", choices=STRATEGIES + ("auto",), default="case1")
    plan.add_argument("--weights", help="Termination weights file (nonuniform)")
    plan.add_argument("--epsilon", type=float, help="Target accuracy (auto)")
    plan.add_argument("--asymptotic", action="store_true", help="Large-n case1 plan")
    plan.add_argument("--scan-mu", type=_float_list, help="Comma-separated mu grid; writes CSV")
    plan.add_argument("--out", help="Write the plan JSON (or scan CSV) here")

    toy = sub.add_parser("toy", help="Replicated runs on the Gaussian toy model")
    toy.add_argument("--config", help="ExperimentConfig JSON")
    toy.add_argument("--preset", help="Named preset, e.g. toy-full or desk")
    toy.add_argument("--model", help="Toy model JSON (overrides generation)")
    toy.add_argument("--seed", type=int)
    toy.add_argument("--n", type=int)
    toy.add_argument("--kmax", type=int)
    toy.add_argument("--algos")
    toy.add_argument("--plan", help="Plan JSON written by `fiem plan --out`")
    toy.add_argument("--gamma", type=float, help="Constant step size")
    toy.add_argument("--replicas", type=int)
    toy.add_argument("--batch", type=int)
    toy.add_argument("--e2", action="store_true", help="Record the control-variate gap")
    toy.add_argument("--out")

    gmm = sub.add_parser("gmm", help="GMM epoch tables")
    source = gmm.add_mutually_exclusive_group()
    source.add_argument("--data", help="Numeric CSV, one observation per row")
    source.add_argument("--synthetic", help="seed,n,g,p,sep")
    gmm.add_argument("--config", help="GmmExperimentConfig JSON")
    gmm.add_argument("--preset", help="Named preset, e.g. gmm-full")
    gmm.add_argument("--preprocess", type=int, help="PCA target dimension")
    gmm.add_argument("--g", type=int)
    gmm.add_argument("--algos")
    gmm.add_argument("--gamma", type=float)
    gmm.add_argument("--batch", type=int)
    gmm.add_argument("--kswitch", type=int)
    gmm.add_argument("--epochs", type=int)
    gmm.add_argument("--replicas", type=int)
    gmm.add_argument("--seed", type=int)
    gmm.add_argument("--reference-loglik", type=float)
    gmm.add_argument("--domain-policy", choices=("warn", "abort"))
    gmm.add_argument("--out")

    check = sub.add_parser("check", help="Verification suites")
    check.add_argument(
        "--suite",
        choices=("identities", "descent", "mean-field", "all") + tuple(SUITE_ALIASES),
        default="identities",
    )
    check.add_argument(
        "--scale", choices=tuple(CHECK_SCALES) + tuple(SCALE_ALIASES), default="desk"
    )
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--out", help="Write results JSON here")
    return parser


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def _cmd_plan(args: argparse.Namespace, settings: Settings) -> int:
    inputs = PlannerInputs(
        n=args.n,
        k_max=args.kmax,
        v_min=args.vmin,
        l_rms=args.l_rms,
        l_gradv=args.l_gradv,
        mu=args.mu,
        lam=args.lam,
        delta_v=args.delta_v,
    )
    if args.out:
        ensure_output_dir(os.path.dirname(os.path.abspath(args.out)))
    if args.scan_mu:
        frame = pd.DataFrame(scan_mu(inputs, args.scan_mu, args.strategy))
        if args.out:
            frame.to_csv(args.out, index=False)
        else:
            print(frame.to_csv(index=False), end="")
        return EXIT_OK

    weights = load_weights(args.weights) if args.weights else None
    if args.asymptotic:
        if args.strategy != "case1":
            raise ArgumentError("--asymptotic applies to the case1 strategy only")
        plan = asymptotic_case1(inputs)
    else:
        plan = make_plan(args.strategy, inputs, weights=weights, epsilon=args.epsilon)
    doc = plan.to_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        dump_json(doc, args.out)
    if not plan.feasible:
        logger.error("Infeasible plan: %s", plan.violated_condition)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# toy
# ---------------------------------------------------------------------------


def _toy_config(args: argparse.Namespace, threads: int) -> ExperimentConfig:
    doc: Dict[str, Any] = {}
    kmax_factor = None
    if args.preset:
        preset = get_preset(args.preset)
        if preset["kind"] != "toy":
            raise ConfigurationError(f"preset '{args.preset}' is not a toy preset")
        kmax_factor = preset["kmax_factor"]
        doc = {
            "model": {"n": preset["n"]},
            "replicas": preset["replicas"],
            "algorithms": list(preset["algorithms"]),
            "plan": {"strategy": "case1", "mu": preset["mu"], "lambda": preset["lambda"]},
            "compute_lambda_star": preset["compute_lambda_star"],
            "track_theta_error": preset["track_theta_error"],
        }
    if args.config:
        overrides = load_json(args.config)
        model = dict(doc.get("model", {}))
        model.update(overrides.pop("model", {}))
        doc.update(overrides)
        doc["model"] = model
    model = dict(doc.get("model", {}))
    if args.model:
        model = {"path": args.model}
    if args.n is not None:
        model["n"] = args.n
    doc["model"] = model
    if args.kmax is not None:
        doc["k_max"] = args.kmax
    elif kmax_factor is not None and "k_max" not in doc and "path" not in model:
        doc["k_max"] = kmax_factor * model.get("n", 100)
    if args.algos:
        doc["algorithms"] = parse_algorithms(args.algos)
    if args.plan:
        doc["plan"] = load_plan_file(args.plan)
    if args.gamma is not None:
        doc["plan"] = {"gamma": args.gamma}
    for key, value in (("seed", args.seed), ("replicas", args.replicas), ("batch_size", args.batch)):
        if value is not None:
            doc[key] = value
    if args.e2:
        doc["compute_e2"] = True
    doc.setdefault("threads", threads)
    return ExperimentConfig.from_dict(doc)


def _toy_summary(result, model, config: ExperimentConfig) -> Dict[str, Any]:
    constants = model.constants()
    k_max = config.k_max or 20 * model.n
    inputs = PlannerInputs.from_constants(constants, model.n, k_max)
    doc: Dict[str, Any] = dict(constants.to_dict())
    doc["gamma_FGM"] = make_plan("case1", inputs).gamma
    doc["gamma_K"] = make_plan("karimi", inputs, lipschitz=constants.lipschitz_i).gamma
    doc["plan"] = result.plan
    doc["estimates"] = result.estimates
    doc["complete"] = result.complete
    doc["failures"] = result.replica_set.failures
    lo, hi = fluctuation_window(model.n, k_max)
    doc["fluctuation_window"] = [lo, hi]
    window = {}
    for algorithm, diags in result.replica_set.diagnostics.items():
        if diags:
            stacked = np.vstack([d.fluctuation[lo : hi + 1] for d in diags])
            window[algorithm] = float(np.mean(stacked))
    doc["fluctuation_mean"] = window
    opt = result.replica_set.diagnostics.get("opt-fiem")
    if opt:
        doc["lambda_star_tail_mean"] = lambda_tail_mean(opt)
    return doc


def _cmd_toy(args: argparse.Namespace, settings: Settings) -> int:
    config = _toy_config(args, _threads(args, settings))
    model = build_toy_model(config.model, config.seed)
    logger.info("Toy model built: n=%d, q=%d", model.n, model.q)
    result = run_replicated(config, model)
    out = args.out or config.output or os.path.join(settings.output_dir, "toy")
    paths = result.write(out)
    model.spec.to_json(os.path.join(out, "toy_model.json"))
    dump_json(_toy_summary(result, model, config), os.path.join(out, "constants.json"))
    logger.info("Wrote %s", ", ".join(sorted(paths.values())))
    return EXIT_OK if result.complete else EXIT_DOMAIN


# ---------------------------------------------------------------------------
# gmm
# ---------------------------------------------------------------------------


def _gmm_config(args: argparse.Namespace, threads: int) -> GmmExperimentConfig:
    doc: Dict[str, Any] = {}
    if args.preset:
        preset = get_preset(args.preset)
        if preset["kind"] != "gmm":
            raise ConfigurationError(f"preset '{args.preset}' is not a gmm preset")
        doc = {
            key: preset[key]
            for key in ("g", "batch_size", "gamma", "epochs", "kswitch", "replicas", "report_epochs")
        }
        doc["algorithms"] = list(preset["algorithms"])
        doc["domain_policy"] = preset["domain_policy"]
        if args.data:
            doc["preprocess"] = preset["p"]
    if args.config:
        doc.update(load_json(args.config))
    if args.data:
        doc["data"] = args.data
        doc.pop("synthetic", None)
    if args.synthetic:
        doc["synthetic"] = parse_synthetic_spec(args.synthetic)
        doc.pop("data", None)
    if args.algos:
        doc["algorithms"] = parse_algorithms(args.algos)
    for key, value in (
        ("preprocess", args.preprocess),
        ("g", args.g),
        ("gamma", args.gamma),
        ("batch_size", args.batch),
        ("kswitch", args.kswitch),
        ("epochs", args.epochs),
        ("replicas", args.replicas),
        ("seed", args.seed),
        ("reference_loglik", args.reference_loglik),
        ("domain_policy", args.domain_policy),
    ):
        if value is not None:
            doc[key] = value
    if "synthetic" in doc and args.g is None and "g" in doc.get("synthetic", {}):
        doc.setdefault("g", doc["synthetic"]["g"])
    doc.setdefault("threads", threads)
    return GmmExperimentConfig.from_dict(doc)


def _cmd_gmm(args: argparse.Namespace, settings: Settings) -> int:
    config = _gmm_config(args, _threads(args, settings))
    dataset, _ = load_gmm_dataset(config)
    logger.info("GMM dataset: n=%d, p=%d, g=%d", dataset.n, dataset.p, config.g)
    report = table_report(config, dataset)
    out = args.out or config.output or os.path.join(settings.output_dir, "gmm")
    paths = report.write(out)
    params = {name: theta.to_dict() for name, theta in report.final_params.items()}
    dump_json({"params": params, "failures": report.failures}, os.path.join(out, "params.json"))
    if not report.table.empty:
        print(report.table.pivot(index="algorithm", columns="epoch", values="cell").to_string())
    logger.info("Wrote %s", ", ".join(sorted(paths.values())))
    return EXIT_DOMAIN if report.failures else EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def _cmd_check(args: argparse.Namespace, settings: Settings) -> int:
    scale_name = SCALE_ALIASES.get(args.scale, args.scale)
    scale = CHECK_SCALES[scale_name]
    n_jobs = _threads(args, settings)
    requested = SUITE_ALIASES.get(args.suite, args.suite)
    suites = ("identities", "descent", "mean-field") if requested == "all" else (requested,)
    results = []
    for suite in suites:
        logger.info("Running %s suite (%s scale)", suite, scale_name)
        if suite == "identities":
            results.extend(identity_suite(args.seed))
        elif suite == "descent":
            results.extend(descent_suite(scale["descent"], scale["bound"], args.seed, n_jobs))
        else:
            results.extend(mean_field_suite(scale["mean_field"], args.seed, n_jobs))
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        margin = "" if result.margin is None else f" margin={result.margin:.3g}"
        print(f"{status} {result.name}{margin} {result.detail}".rstrip())
    if args.out:
        ensure_output_dir(os.path.dirname(os.path.abspath(args.out)))
        dump_json({"results": [r.to_dict() for r in results]}, args.out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    "plan": _cmd_plan,
    "toy": _cmd_toy,
    "gmm": _cmd_gmm,
    "check": _cmd_check,
}


def _threads(args: argparse.Namespace, settings: Settings) -> int:
    return args.threads if args.threads is not None else settings.threads


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.env_file)
        configure_logging(args.log_level or settings.log_level)
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        return COMMANDS[args.command](args, settings)
    except InfeasibleError as e:
        logger.error("Infeasible plan: %s", e.condition)
        return EXIT_INFEASIBLE
    except (DomainError, ParameterError) as e:
        logger.error("%s", e)
        return EXIT_DOMAIN
    except (ConfigurationError, ArgumentError) as e:
        logger.error("%s", e)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
