"""
Applicazione principale
Interfaccia a linea di comando: synth, preprocess, train, predict, evaluate, report
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from src.backbone_net import (
    ModelConfigError,
    build_model,
    independent_parameter_count,
    load_checkpoint,
    parameter_count,
)
from src.config import ConfigError, RunConfig, load_run_config
from src.datapipe import (
    DatasetError,
    LabelMode,
    load_dataset,
    load_predictions,
    prepare_cases,
    save_dataset,
    save_prediction,
    split_train_validation,
    synth_generate,
)
from src.metrics import (
    SoftMap,
    evaluate_dataset,
    save_difference_heatmap,
    write_scores_csv,
    write_summary_json,
)
from src.trainer import (
    TrainingDivergenceError,
    case_ground_truth,
    ensemble_predict,
    train,
    train_ensemble,
    write_config_echo,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_MISSING_DATA = 3
EXIT_DIVERGENCE = 4

COMMANDS = ("synth", "preprocess", "train", "evaluate", "predict", "report")


def _parse_betas(text: str) -> List[float]:
    try:
        return [float(b) for b in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid betas '{text}'")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', default=None,
                        help='Path al file di configurazione JSON/YAML')
    common.add_argument('--data', help='Directory del dataset')
    common.add_argument('--out', help='Directory di output')
    common.add_argument('--seed', type=int, help='Seed (synth: generatore, altrimenti training)')
    common.add_argument('--epochs', type=int, help='Numero totale di epoche')
    common.add_argument('--cross-enable-epoch', type=int, help='Epoca di attivazione cross loss')
    common.add_argument('--alpha', type=float, help='Peso della cross entropy')
    common.add_argument('--betas', type=_parse_betas, help='Coefficienti beta, es. "1,1,1"')
    common.add_argument('--ensemble', type=int, help='Numero di run dell\'ensemble')
    common.add_argument('--workers', type=int, default=1, help='Thread per evaluate')
    common.add_argument('--print-config', action='store_true',
                        help='Stampa la configurazione risolta ed esce')
    common.add_argument('--verbose', '-v', action='store_true', help='Abilita logging verbose')

    parser = argparse.ArgumentParser(
        prog='multidecoder-seg',
        description='Multi-decoder U-Net per la quantificazione dell\'incertezza')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    seed_key = 'synth.seed' if args.command == 'synth' else 'schedule.seed'
    return {
        'data.path': args.data,
        'output_dir': args.out,
        seed_key: args.seed,
        'schedule.total_epochs': args.epochs,
        'schedule.cross_enable_epoch': args.cross_enable_epoch,
        'loss.alpha': args.alpha,
        'loss.betas': args.betas,
        'ensemble.size': args.ensemble,
    }


def _emit_error(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def _load_prepared(cfg: RunConfig):
    cases = load_dataset(cfg.data.path)
    multiple = cfg.build_model_config().grid_multiple
    return prepare_cases(cases, multiple, tuple(cfg.data.ct_window))


def _checkpoint_paths(out: Path) -> List[Path]:
    single = out / "best.ckpt"
    if single.is_file():
        return [single]
    runs = sorted(out.glob("run_*/best.ckpt"))
    if not runs:
        raise DatasetError(out, "no checkpoint found (expected best.ckpt or run_XX/best.ckpt)")
    return runs


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    s = cfg.synth
    cases = synth_generate(s.n_cases, s.n_raters, s.seed, s.ambiguity,
                           shape=(s.height, s.width), modality=s.modality)
    save_dataset(cases, cfg.data.path)
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args: argparse.Namespace) -> int:
    prepared = _load_prepared(cfg)
    save_dataset(prepared, cfg.output_dir)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    model_config = cfg.build_model_config()
    cases = _load_prepared(cfg)
    n_raters = cases[0].n_raters
    mode = cfg.labels.mode
    if mode in (LabelMode.CONSENSUS, LabelMode.RATERS) and model_config.n_decoders != n_raters:
        raise ConfigError("model.n_decoders",
                          f"{mode.value} labels need {n_raters} decoders, got "
                          f"{model_config.n_decoders}")

    out = Path(cfg.output_dir)
    write_config_echo(out / "config.json", json.loads(cfg.to_json()))
    train_cases, val_cases = split_train_validation(cases, cfg.schedule.val_fraction)
    schedule = cfg.schedule.to_schedule()

    if cfg.ensemble.size > 1 or cfg.ensemble.runs:
        train_ensemble(model_config, cfg.ensemble_spec(), train_cases, schedule, val_cases,
                       out, mode, cfg.labels.level)
    else:
        model = build_model(model_config, seed=schedule.seed)
        train(model, train_cases, schedule, cfg.loss_weights(), val_cases, out,
              mode, cfg.labels.level)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = Path(cfg.output_dir)
    models = [load_checkpoint(p)[0] for p in _checkpoint_paths(out)]
    cases = _load_prepared(cfg)
    for case in cases:
        soft = ensemble_predict(models, case.image, case.crop)
        save_prediction(out / "predictions" / case.case_id, soft, case.case_id)
    logger.info(f"Predictions for {len(cases)} cases written to {out / 'predictions'} "
                f"({len(models)} model(s))")
    return EXIT_OK


def _paired_maps(cfg: RunConfig):
    """(case_ids, predizioni, ground truth) allineati per case_id"""
    cases = load_dataset(cfg.data.path)
    preds = load_predictions(Path(cfg.output_dir) / "predictions")
    missing = [c.case_id for c in cases if c.case_id not in preds]
    if missing:
        raise DatasetError(Path(cfg.output_dir) / "predictions",
                           f"missing predictions for cases {missing}")
    ids, pred_maps, gt_maps = [], [], []
    for case in cases:
        gt = case_ground_truth(case)
        # Ground truth alla stessa precisione float32 delle predizioni su disco
        gt = SoftMap(values=gt.values.astype(np.float32), provenance=gt.provenance)
        ids.append(case.case_id)
        pred_maps.append(preds[case.case_id])
        gt_maps.append(gt)
    return ids, pred_maps, gt_maps


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    ids, preds, gts = _paired_maps(cfg)
    report = evaluate_dataset(preds, gts, ids, task=cfg.data.task, workers=max(1, args.workers))
    out = Path(cfg.output_dir)
    write_scores_csv([report], out / "scores.csv")
    write_summary_json([report], out / "summary.json")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    from rich.console import Console
    from rich.table import Table

    ids, preds, gts = _paired_maps(cfg)
    report = evaluate_dataset(preds, gts, ids, task=cfg.data.task)
    out = Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)

    curve = report.mean_curve()
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "n_cases", "mean_score"]
                        + [f"dice_tau_{k / 10:.1f}" for k in range(len(curve))])
        writer.writerow([report.task, len(ids), repr(report.mean)] + [repr(v) for v in curve])

    for case_id, pred, gt, score in zip(ids, preds, gts, report.scores):
        save_difference_heatmap(pred, gt, out / f"{case_id}.png",
                                title=f"{case_id} - score {score:.3f}")

    table = Table(title=f"Task '{report.task}'")
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_row("cases", str(len(ids)))
    table.add_row("mean score", f"{report.mean:.4f}")
    for k, value in enumerate(curve):
        table.add_row(f"dice @ tau={k / 10:.1f}", f"{value:.4f}")

    try:
        models = [load_checkpoint(p)[0] for p in _checkpoint_paths(Path(cfg.output_dir))]
    except DatasetError:
        models = []
    if models:
        table.add_row("models in ensemble", str(len(models)))
        table.add_row("parameters (multi-decoder)", str(sum(parameter_count(m) for m in models)))
        table.add_row("parameters (independent nets)",
                      str(sum(independent_parameter_count(m.config) for m in models)))
    Console().print(table)
    return EXIT_OK


HANDLERS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Funzione principale"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        cfg = load_run_config(args.config, _overrides(args))
    except ConfigError as e:
        return _emit_error("invalid_config", EXIT_INVALID_CONFIG, str(e))

    if args.print_config:
        print(cfg.to_json())
        return EXIT_OK

    logging.basicConfig(level=logging.DEBUG if args.verbose else cfg.logging.level,
                        format=cfg.logging.format, force=True)

    try:
        code = HANDLERS[args.command](cfg, args)
        logger.info(f"Command '{args.command}' completed")
        return code
    except (ConfigError, ModelConfigError) as e:
        return _emit_error("invalid_config", EXIT_INVALID_CONFIG, str(e))
    except (DatasetError, FileNotFoundError) as e:
        return _emit_error("missing_data", EXIT_MISSING_DATA, str(e))
    except TrainingDivergenceError as e:
        return _emit_error("training_divergence", EXIT_DIVERGENCE, str(e))
    except Exception as e:
        logger.error(f"Fatal error: {e}")
        return _emit_error("failure", EXIT_FAILURE, str(e))


if __name__ == "__main__":
    sys.exit(main())
