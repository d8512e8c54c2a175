"""
CLI Module for Wild OOD
Config-driven experiment runner: dataset generation, training under any
method, evaluation, mixing-ratio sweeps and holdout model selection.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric abort.
"""

import argparse
import os
import sys
import time
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from colorama import Fore, Style
from colorama import init as colorama_init

from wild_ood.alm import (EpochLog, evaluate_constraints, save_epoch_logs,
                          woods_nn_head_train, woods_train)
from wild_ood.baselines import ce_only_train, energy_reg_train, oe_train, warmup_tau
from wild_ood.config import METHODS, ExperimentConfig, derive_seed, load_config
from wild_ood.data import (CsvSchema, GaussianTaskSpec, MixtureSpec,
                           gen_gaussian_task, gen_moons_ring_task, load_csv,
                           load_wild_csv, make_wild, save_features_csv,
                           save_labeled_csv, save_wild_csv, split)
from wild_ood.evaluation import (SCORERS, ModelCandidate, compute_scores,
                                 evaluate_with_scores, scores_to_frame,
                                 select_model)
from wild_ood.exceptions import ConfigurationError, WildOODError, exit_code_for
from wild_ood.export import ARTIFACT_SCHEMA_VERSION, ArtifactExporter
from wild_ood.logger import ActivityLogger, get_logger
from wild_ood.nnet import load_model, mlp_init, save_model

logger = get_logger("cli")

LABEL_COLUMN = "label"

DATA_FILES = {
    "id_train": "id_train.csv",
    "id_val": "id_val.csv",
    "id_test": "id_test.csv",
    "wild_train": "wild_train.csv",
    "wild_train_provenance": "wild_train_provenance.csv",
    "wild_val": "wild_val.csv",
    "wild_val_provenance": "wild_val_provenance.csv",
    "ood_test": "ood_test.csv",
}

SWEEP_COLUMNS = ["pi", "method", "data_seed", "fpr95", "auroc", "accuracy",
                 "ood_constraint", "status", "error"]


def _ok(message: str):
    print(f"{Fore.GREEN}✓{Style.RESET_ALL} {message}")


def _fail(message: str):
    print(f"{Fore.RED}✗{Style.RESET_ALL} {message}")


def data_dir(config: ExperimentConfig) -> str:
    return os.path.join(config.output_dir, "data")


def data_path(config: ExperimentConfig, name: str) -> str:
    return os.path.join(data_dir(config), DATA_FILES[name])


def _build_task(config: ExperimentConfig):
    """Return (id LabeledDataset, ood pool, optional test OOD pool)"""
    params = config.task["params"]
    generator = config.task["generator"]
    seed = derive_seed(config.seeds["data"], 0)

    if generator == "gaussian":
        task = gen_gaussian_task(GaussianTaskSpec(**params), seed=seed)
        return task.id_data, task.ood_pool, task.test_ood_pool
    if generator == "moons_ring":
        task = gen_moons_ring_task(params["noise"], params["class_counts"], params["ood_count"],
                                   seed=seed, ring_radius=params["ring_radius"])
        return task.id_data, task.ood_pool, None

    schema = CsvSchema(label_column=params["label_column"], feature_columns=params["feature_columns"])
    id_data = load_csv(params["id_path"], schema)
    ood_pool = load_csv(params["ood_path"], CsvSchema(feature_columns=params["feature_columns"]))
    test_pool = None
    if params["test_ood_path"]:
        test_pool = load_csv(params["test_ood_path"], CsvSchema(feature_columns=params["feature_columns"]))
    return id_data, ood_pool, test_pool


def cmd_generate(config: ExperimentConfig, activity_logger: ActivityLogger = None) -> Dict[str, str]:
    """
    Build the datasets of an experiment and write them as CSV

    Files: id_train/id_val/id_test (labeled), wild_train and wild_val with
    provenance side-files, ood_test. Output depends only on the config.

    Args:
        config: Validated experiment config
        activity_logger: Optional ActivityLogger

    Returns:
        Mapping of file role to path
    """
    id_data, ood_pool, test_pool = _build_task(config)
    if activity_logger:
        activity_logger.log_data_load(config.task["generator"], len(id_data) + len(ood_pool))

    id_fracs = config.task["id_splits"]
    ood_fracs = config.task["ood_splits"]
    id_train, id_wild, id_val, id_test = split(
        id_data, [id_fracs["train"], id_fracs["wild"], id_fracs["val"], id_fracs["test"]],
        seed=derive_seed(config.seeds["data"], 1))
    ood_wild, ood_val, ood_test = split(
        ood_pool, [ood_fracs["wild"], ood_fracs["val"], ood_fracs["test"]],
        seed=derive_seed(config.seeds["data"], 2))
    if test_pool is not None:
        ood_test = test_pool

    mixture = config.mixture
    m_val = mixture["m_val"] or max(1, mixture["m"] // 4)
    wild_train = make_wild(id_wild.features, ood_wild,
                           MixtureSpec(mixture["pi"], mixture["m"],
                                       derive_seed(config.seeds["data"], 3), mixture["fixed"]))
    wild_val = make_wild(id_val.features, ood_val,
                         MixtureSpec(mixture["pi"], m_val,
                                     derive_seed(config.seeds["data"], 4), mixture["fixed"]))

    os.makedirs(data_dir(config), exist_ok=True)
    paths = {name: data_path(config, name) for name in DATA_FILES}
    save_labeled_csv(id_train, paths["id_train"], LABEL_COLUMN)
    save_labeled_csv(id_val, paths["id_val"], LABEL_COLUMN)
    save_labeled_csv(id_test, paths["id_test"], LABEL_COLUMN)
    save_wild_csv(wild_train, paths["wild_train"], paths["wild_train_provenance"])
    save_wild_csv(wild_val, paths["wild_val"], paths["wild_val_provenance"])
    save_features_csv(ood_test, paths["ood_test"])

    if activity_logger:
        for name, rows in (("id_train", len(id_train)), ("id_val", len(id_val)),
                           ("id_test", len(id_test)), ("wild_train", len(wild_train)),
                           ("wild_val", len(wild_val)), ("ood_test", len(ood_test))):
            activity_logger.log_export("CSV", paths[name], rows)
    return paths


def _load_training_data(config: ExperimentConfig):
    id_train = load_csv(data_path(config, "id_train"), CsvSchema(label_column=LABEL_COLUMN))
    # Training never reads the provenance side-file
    wild_train = load_wild_csv(data_path(config, "wild_train"))
    return id_train, wild_train


def _final_values(model, logs: List[EpochLog], id_train, wild_train, use_head: bool) -> Dict:
    if logs:
        return logs[-1].to_dict()
    ood, cls, objective = evaluate_constraints(model, id_train, wild_train, use_head)
    return {"epoch": -1, "ood_constraint": ood, "cls_constraint": cls, "objective": objective,
            "lambda1": 0.0, "lambda2": 0.0, "beta1": 0.0, "beta2": 0.0}


def cmd_train(config: ExperimentConfig, activity_logger: ActivityLogger = None,
              method: str = None, gamma: float = None, mu2: float = None,
              run_dir: str = None) -> Dict:
    """
    Train one method on the generated data

    Every method starts with the CE-only warm-up; for constrained methods
    in 'warmup' tau mode, tau is twice the warm-up CE.

    Args:
        config: Validated experiment config
        activity_logger: Optional ActivityLogger
        method: Method override (default: config method)
        gamma: Penalty multiplier override
        mu2: Dual learning rate override
        run_dir: Output directory (default: <output_dir>/<method>)

    Returns:
        Summary dictionary (also written to summary.json)
    """
    name = method or config.method_name
    if name not in METHODS:
        raise ConfigurationError(f"method must be one of {list(METHODS)}, got '{name}'")
    if name == "woods_nn" and not config.model["head"]:
        raise ConfigurationError("method 'woods_nn' needs 'model.head' set to true")
    run_dir = run_dir or os.path.join(config.output_dir, name)
    started = time.perf_counter()

    id_train, wild_train = _load_training_data(config)
    if activity_logger:
        activity_logger.log_data_load("CSV", len(id_train), data_path(config, "id_train"))
        activity_logger.log_data_load("CSV", len(wild_train), data_path(config, "wild_train"))
        activity_logger.log_training_start(name, config.method["epochs"], config.config_hash())

    use_head = config.model["head"]
    model = mlp_init(config.layer_dims(id_train.dim, id_train.n_classes),
                     activation=config.model["activation"], seed=config.seeds["init"],
                     with_head=use_head, head_width=config.model["head_width"],
                     energy_slope_w=config.model["energy_slope_w"])

    warm, warm_ce, tau = warmup_tau(model, id_train, config.warmup_config(),
                                    config.method["warmup_epochs"])
    if config.method["tau_mode"] == "fixed":
        tau = float(config.method["tau"])

    train_config = config.train_config()
    state = None
    if name in ("woods", "woods_nn"):
        spec = config.constraint_spec(tau)
        state = config.alm_state(gamma, mu2)
        if name == "woods":
            trained, logs = woods_train(warm, id_train, wild_train, spec, train_config, state,
                                        activity_logger, config.method["calibrate_slope"])
        else:
            trained, logs = woods_nn_head_train(warm, id_train, wild_train, spec, train_config,
                                                state, activity_logger)
    elif name == "ce_only":
        trained, logs = ce_only_train(warm, id_train, train_config, activity_logger)
    elif name == "oe":
        trained, logs = oe_train(warm, id_train, wild_train, config.baseline_config(name),
                                 train_config, activity_logger)
    else:
        trained, logs = energy_reg_train(warm, id_train, wild_train, config.baseline_config(name),
                                         train_config, activity_logger)

    exporter = ArtifactExporter(run_dir, activity_logger)
    model_path = save_model(trained, exporter.path("model.json"))
    log_path = save_epoch_logs(logs, exporter.path("epoch_log.csv"))

    final = _final_values(trained, logs, id_train, wild_train, name == "woods_nn")
    alpha, tol = config.method["alpha"], config.method["tol"]
    summary = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "method": name,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "gamma": state.gamma if state else None,
        "mu2": state.mu2 if state else None,
        "tau": tau,
        "tau_mode": config.method["tau_mode"],
        "warmup_ce": warm_ce,
        "epochs": len(logs),
        "final": final,
        "constraint_satisfied": bool(final["ood_constraint"] <= alpha + tol),
        "label_names": id_train.label_names,
        "files": {"model": model_path, "epoch_log": log_path},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    summary["files"]["summary"] = exporter.export_json(summary, "summary.json")
    return summary


def _read_trajectory(model_path: str) -> Optional[List[float]]:
    log_path = os.path.join(os.path.dirname(model_path), "epoch_log.csv")
    if not os.path.exists(log_path):
        return None
    return pd.read_csv(log_path)["ood_constraint"].astype(float).tolist()


def cmd_evaluate(model_path: str, id_test_path: str, ood_test_path: str,
                 scorer: str = "energy_sigmoid", output_path: str = None,
                 label_column: str = LABEL_COLUMN, tpr_target: float = 0.95,
                 activity_logger: ActivityLogger = None) -> Dict:
    """
    Evaluate a saved model on ID and OOD test files

    Writes the report JSON (default: report.json next to the model) and a
    score dump scores.csv in the same directory.

    Returns:
        Report dictionary
    """
    model = load_model(model_path)
    id_test = load_csv(id_test_path, CsvSchema(label_column=label_column))
    ood_test = load_csv(ood_test_path)
    if activity_logger:
        activity_logger.log_data_load("CSV", len(id_test), id_test_path)
        activity_logger.log_data_load("CSV", len(ood_test), ood_test_path)

    report, scores = evaluate_with_scores(model, id_test, ood_test, scorer, tpr_target,
                                          _read_trajectory(model_path))
    if activity_logger:
        activity_logger.log_evaluation(scorer, report.fpr_at_95tpr, report.auroc, report.accuracy)

    output_path = output_path or os.path.join(os.path.dirname(model_path), "report.json")
    exporter = ArtifactExporter(os.path.dirname(output_path) or ".", activity_logger)
    payload = report.to_dict()
    exporter.export_json(payload, os.path.basename(output_path))
    exporter.export_csv(scores_to_frame(scores), "scores.csv")
    return payload


def _sweep_cell(args) -> List[Dict]:
    """Generate, train and evaluate every method for one mixing ratio"""
    payload, index, pi, methods = args
    base = ExperimentConfig.from_dict(payload)
    cell = base.with_changes(
        mixture={"pi": pi},
        seeds={key: derive_seed(base.seeds[key], index) for key in ("data", "init", "training")},
        output_dir=os.path.join(base.output_dir, "sweep", f"cell_{index:03d}"),
    )
    rows = []
    try:
        cmd_generate(cell)
    except Exception as e:
        logger.error(f"Sweep cell {index} (pi={pi}) failed during generation: {e}")
        return [_sweep_row(pi, name, cell, error=e) for name in methods]

    for name in methods:
        try:
            summary = cmd_train(cell, method=name)
            report = cmd_evaluate(summary["files"]["model"], data_path(cell, "id_test"),
                                  data_path(cell, "ood_test"), cell.default_scorer(name),
                                  tpr_target=cell.method["tpr_target"])
            rows.append(_sweep_row(pi, name, cell, report, summary))
        except Exception as e:
            logger.error(f"Sweep cell {index} (pi={pi}, {name}) failed: {e}")
            rows.append(_sweep_row(pi, name, cell, error=e))
    return rows


def _sweep_row(pi: float, method: str, cell: ExperimentConfig, report: Dict = None,
               summary: Dict = None, error: Exception = None) -> Dict:
    row = {"pi": pi, "method": method, "data_seed": cell.seeds["data"], "fpr95": np.nan,
           "auroc": np.nan, "accuracy": np.nan, "ood_constraint": np.nan,
           "status": "ok", "error": ""}
    if error is not None:
        row["status"] = "error"
        row["error"] = f"{type(error).__name__}: {error}"
        return row
    row.update(fpr95=report["fpr_at_95tpr"], auroc=report["auroc"], accuracy=report["accuracy"],
               ood_constraint=summary["final"]["ood_constraint"])
    return row


def cmd_sweep(config: ExperimentConfig, pi_values: Sequence[float] = None,
              methods: Sequence[str] = None, workers: int = None,
              activity_logger: ActivityLogger = None) -> str:
    """
    Run generate + train + evaluate for every mixing ratio and method

    Each ratio gets its own derived seeds and output subdirectory; a failing
    cell is recorded in its rows and the sweep continues.

    Args:
        config: Validated experiment config
        pi_values: Mixing ratios (default: config sweep.pi_values)
        methods: Methods per ratio (default: config sweep.methods)
        workers: Worker processes (default: config sweep.workers)
        activity_logger: Optional ActivityLogger

    Returns:
        Path of sweep.csv (one row per (pi, method))
    """
    pi_values = list(config.sweep["pi_values"] if pi_values is None else pi_values)
    methods = list(config.sweep["methods"] if methods is None else methods)
    workers = config.sweep["workers"] if workers is None else workers
    # Validate overrides through the config rules
    config = config.with_changes(sweep={"pi_values": pi_values, "methods": methods,
                                        "workers": workers})

    cells = [(config.to_dict(), index, pi, methods) for index, pi in enumerate(pi_values)]
    if workers > 1 and len(cells) > 1:
        with Pool(min(workers, len(cells))) as pool:
            results = pool.map(_sweep_cell, cells)
    else:
        results = [_sweep_cell(cell) for cell in cells]

    rows = [row for cell_rows in results for row in cell_rows]
    exporter = ArtifactExporter(config.output_dir, activity_logger)
    return exporter.export_csv(pd.DataFrame(rows, columns=SWEEP_COLUMNS), "sweep.csv")


def cmd_select(config: ExperimentConfig, activity_logger: ActivityLogger = None) -> Dict:
    """
    Train the constrained method over the gamma x mu2 grid and pick a model
    by holdout validation (ID validation set vs. holdout wild set)

    Returns:
        Selection dictionary (also written to selection.json)
    """
    name = config.method_name if config.method_name in ("woods", "woods_nn") else "woods"
    scorer = config.default_scorer(name)
    holdout_id = load_csv(data_path(config, "id_val"), CsvSchema(label_column=LABEL_COLUMN))
    holdout_wild = load_wild_csv(data_path(config, "wild_val"))

    candidates, runs = [], {}
    for gamma in config.select["gammas"]:
        for mu2 in config.select["mu2s"]:
            run_name = f"gamma_{gamma:g}_mu2_{mu2:g}"
            run_dir = os.path.join(config.output_dir, "select", run_name)
            summary = cmd_train(config, activity_logger, method=name, gamma=gamma, mu2=mu2,
                                run_dir=run_dir)
            model = load_model(summary["files"]["model"])
            candidates.append(ModelCandidate(
                run_name,
                compute_scores(model, holdout_id.features, scorer),
                compute_scores(model, holdout_wild.training_view(), scorer)))
            runs[run_name] = {"gamma": gamma, "mu2": mu2, "model": summary["files"]["model"]}

    result = select_model(candidates, config.method["alpha"], config.select["epsilon"])
    test_report = cmd_evaluate(runs[result.name]["model"], data_path(config, "id_test"),
                               data_path(config, "ood_test"), scorer,
                               output_path=os.path.join(config.output_dir, "select", result.name,
                                                        "report.json"),
                               tpr_target=config.method["tpr_target"],
                               activity_logger=activity_logger)
    selection = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "method": name,
        "scorer": scorer,
        "alpha": config.method["alpha"],
        "epsilon": config.select["epsilon"],
        "selected": result.name,
        "threshold": result.threshold,
        "wild_in_rate": result.wild_in_rate,
        "id_out_rate": result.id_out_rate,
        "candidates": [dict(row, **{k: runs[row["name"]][k] for k in ("gamma", "mu2")})
                       for row in result.table],
        "test_report": test_report,
    }
    ArtifactExporter(config.output_dir, activity_logger).export_json(selection, "selection.json")
    return selection


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the generate/train/evaluate/sweep/select subcommands"""
    parser = argparse.ArgumentParser(
        prog="wild-ood",
        description="Train and evaluate OOD detectors from labeled ID data and unlabeled wild data")
    parser.add_argument("--log-dir", default="logs", help="Directory for log files")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="Write the experiment's datasets as CSV")
    generate.add_argument("--config", required=True, help="Experiment config (JSON)")

    train = sub.add_parser("train", help="Train a model on generated data")
    train.add_argument("--config", required=True, help="Experiment config (JSON)")
    train.add_argument("--method", default=None, help="Override method.name")

    evaluate = sub.add_parser("evaluate", help="Evaluate a saved model")
    evaluate.add_argument("--model", required=True, help="Model JSON file")
    evaluate.add_argument("--id-test", required=True, help="Labeled ID test CSV")
    evaluate.add_argument("--ood-test", required=True, help="OOD test CSV")
    evaluate.add_argument("--scorer", default="energy_sigmoid", choices=SCORERS)
    evaluate.add_argument("--output", default=None, help="Report path (default: next to model)")
    evaluate.add_argument("--label-column", default=LABEL_COLUMN)
    evaluate.add_argument("--tpr", type=float, default=0.95, help="TPR target for FPR")

    sweep = sub.add_parser("sweep", help="Sweep the mixing ratio pi")
    sweep.add_argument("--config", required=True, help="Experiment config (JSON)")
    sweep.add_argument("--pi", type=float, nargs="+", default=None, help="Mixing ratios")
    sweep.add_argument("--methods", nargs="+", default=None, help="Methods per ratio")
    sweep.add_argument("--workers", type=int, default=None, help="Parallel worker processes")

    select = sub.add_parser("select", help="Holdout model selection over gamma x mu2")
    select.add_argument("--config", required=True, help="Experiment config (JSON)")
    return parser


def run_command(args: argparse.Namespace, activity_logger: ActivityLogger) -> None:
    if args.command == "evaluate":
        report = cmd_evaluate(args.model, args.id_test, args.ood_test, args.scorer, args.output,
                              args.label_column, args.tpr, activity_logger)
        _ok(f"FPR95 {report['fpr_at_95tpr']:.4f}  AUROC {report['auroc']:.4f}  "
            f"accuracy {report['accuracy']:.4f}")
        return

    config = load_config(args.config)
    if args.command == "generate":
        paths = cmd_generate(config, activity_logger)
        _ok(f"Wrote {len(paths)} files to {data_dir(config)}")
    elif args.command == "train":
        summary = cmd_train(config, activity_logger, method=args.method)
        final = summary["final"]
        _ok(f"Trained {summary['method']}: ood constraint {final['ood_constraint']:.4f}, "
            f"cls constraint {final['cls_constraint']:.4f}")
        if summary["method"] in ("woods", "woods_nn") and not summary["constraint_satisfied"]:
            activity_logger.log_warning(f"{summary['method']}: ID OOD constraint "
                                        f"{final['ood_constraint']:.4f} above alpha + tol")
            _fail("ID OOD constraint above alpha + tol at the end of training")
    elif args.command == "sweep":
        path = cmd_sweep(config, args.pi, args.methods, args.workers, activity_logger)
        _ok(f"Sweep table written to {path}")
    elif args.command == "select":
        selection = cmd_select(config, activity_logger)
        _ok(f"Selected {selection['selected']} (wild-in rate {selection['wild_in_rate']:.4f})")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command-line entry point

    Args:
        argv: Arguments (default: sys.argv[1:])

    Returns:
        Process exit code
    """
    colorama_init()
    args = build_parser().parse_args(argv)
    activity_logger = ActivityLogger(log_dir=args.log_dir)
    try:
        run_command(args, activity_logger)
        return 0
    except (WildOODError, OSError) as e:
        code = exit_code_for(e)
        activity_logger.log_error(f"{args.command} failed", e)
        _fail(f"{args.command} failed: {e}")
        return code
    finally:
        activity_logger.log_session_end()


if __name__ == "__main__":
    sys.exit(main())
