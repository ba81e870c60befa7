"""
ConvFormer - Entry Point.

Subcommands:
    train      Train a model from a key=value config; writes checkpoint, loss log, metrics, report.
    eval       Evaluate a checkpoint on a stored or regenerated dataset.
    gradcheck  Run the registered finite-difference suite (one case or "all").
    ablate     Train every ablation variant under identical seeds and data; tabulate.

Usage:
    convformer train --config run.cfg [--variant NAME] [--seed N] [--deterministic]

Exit codes: 0 success, 1 failed check, 2 usage / config error, 3 numeric abort.
"""

import os
import sys

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _wants_determinism(argv) -> bool:
    if "--deterministic" in argv:
        return True
    if "--config" in argv:
        index = argv.index("--config")
        if index + 1 < len(argv):
            try:
                with open(argv[index + 1], "r", encoding="utf-8") as handle:
                    lines = [line.split("#", 1)[0].replace(" ", "").strip().lower() for line in handle]
                return "deterministic=true" in lines
            except OSError:
                return False
    return False


# BLAS threads must be pinned before numpy is first imported.
if _wants_determinism(sys.argv[1:]):
    for _var in THREAD_ENV_VARS:
        os.environ[_var] = "1"

import argparse  # noqa: E402
import logging  # noqa: E402
from datetime import datetime  # noqa: E402
from typing import List, Optional  # noqa: E402

from dotenv import load_dotenv  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.logging import RichHandler  # noqa: E402
from rich.panel import Panel  # noqa: E402
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn  # noqa: E402
from rich.table import Table  # noqa: E402

from src.analysis.ablation import TABLE_METRICS, run_ablation  # noqa: E402
from src.analysis.metrics import MetricsReport  # noqa: E402
from src.analysis.report import generate_report, write_metrics  # noqa: E402
from src.errors import ConfigError, DataError, NumericError, TrainingAborted  # noqa: E402
from src.model.config import VARIANT_FLAGS  # noqa: E402
from src.tensor.io import write_pgm  # noqa: E402
from src.training.data import SegmentationDataset, dataset_exists, load_dataset, save_dataset, synth_dataset  # noqa: E402
from src.training.ledger import RunLedger  # noqa: E402
from src.training.loop import evaluate_model, train_loop  # noqa: E402
from src.utils.checkpoints import load_model  # noqa: E402
from src.utils.gradcheck_suite import REGISTRY, run_suite  # noqa: E402
from src.utils.run_config import RunConfig, apply_overrides, load_run_config, write_effective_config  # noqa: E402

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
VAL_SEED_OFFSET = 10_000

# Load environment variables from .env file
load_dotenv()

console = Console()


# --- Setup ---


def setup_logging(run_id: str) -> str:
    """File log under CONVFORMER_LOG_DIR plus rich console output. Returns the log path."""
    log_dir = os.environ.get("CONVFORMER_LOG_DIR", "logs")
    level = os.environ.get("CONVFORMER_LOG_LEVEL", "INFO").upper()
    os.makedirs(log_dir, exist_ok=True)
    log_filename = os.path.join(log_dir, f"convformer_{run_id}.log")
    file_handler = logging.FileHandler(log_filename, encoding="utf-8")
    file_handler.setFormatter(
        logging.Formatter("%(asctime)s - %(levelname)s - %(name)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S")
    )
    rich_handler = RichHandler(console=console, show_path=False, rich_tracebacks=False)
    rich_handler.setFormatter(logging.Formatter("%(message)s"))
    logging.basicConfig(level=getattr(logging, level, logging.INFO), handlers=[file_handler, rich_handler], force=True)
    return log_filename


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="convformer",
        description="ConvFormer hybrid CNN-Transformer segmentation toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="key=value run configuration file")
        p.add_argument("--variant", choices=list(VARIANT_FLAGS), default=None, help="Ablation variant overriding the model flags.")
        p.add_argument("--seed", type=int, default=None, help="Override the train seed.")
        p.add_argument("--deterministic", action="store_true", help="Single-threaded numerics for bitwise reproducibility.")

    common(sub.add_parser("train", help="Train a model"))
    eval_parser = sub.add_parser("eval", help="Evaluate a checkpoint")
    common(eval_parser)
    eval_parser.add_argument("--checkpoint", default=None, help="Checkpoint to evaluate (default: checkpoint_in, then checkpoint_out).")
    eval_parser.add_argument("--dataset", default=None, help="Dataset directory with images.cft / masks.cft.")
    grad_parser = sub.add_parser("gradcheck", help="Run the finite-difference suite")
    common(grad_parser, config_required=False)
    grad_parser.add_argument("--scope", default="all", help=f"'all' or one of: {', '.join(REGISTRY)}")
    grad_parser.add_argument("--seeds", type=int, default=None, help="Seeds per case (default: per-case setting).")
    common(sub.add_parser("ablate", help="Run the component ablation"))
    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    return apply_overrides(cfg, variant=args.variant, seed=args.seed, deterministic=args.deterministic)


def build_datasets(cfg: RunConfig, dataset_dir: Optional[str] = None):
    """Training set (stored when `dataset_dir` is set) and a disjoint validation set."""
    train = cfg.train
    directory = dataset_dir or cfg.run.dataset_dir
    if dataset_exists(directory):
        train_set = load_dataset(directory)
    else:
        train_set = synth_dataset(train.train_samples, train.image_size, train.seed, cfg.model.num_classes)
        if directory:
            save_dataset(directory, train_set)
    val_set = None
    if train.val_samples:
        size = train_set.images.shape[-1]
        val_set = synth_dataset(train.val_samples, size, train.seed + VAL_SEED_OFFSET, cfg.model.num_classes)
    return train_set, val_set


def check_geometry(cfg: RunConfig, dataset: SegmentationDataset) -> None:
    """
    Raises:
        ConfigError: Dataset channels, classes or size incompatible with the model.
    """
    channels = dataset.images.shape[1]
    if channels != cfg.model.in_channels:
        raise ConfigError(f"dataset has {channels} channel(s), model expects {cfg.model.in_channels}", key="in_channels")
    top = int(dataset.masks.max()) if dataset.masks.size else 0
    if top >= cfg.model.num_classes:
        raise ConfigError(f"dataset labels reach {top}, model has {cfg.model.num_classes} classes", key="num_classes")
    height, width = dataset.image_size
    if height % 16 or width % 16:
        raise ConfigError(f"dataset images are {height}x{width}, not divisible by 16", key="image_size")


def dump_masks(preds, directory: str, num_classes: int) -> None:
    for i, mask in enumerate(preds):
        write_pgm(os.path.join(directory, f"pred_{i:03d}.pgm"), mask, num_classes)
    logging.info(f"MASKS: {len(preds)} -> {directory}")


def metrics_table(report: MetricsReport, title: str) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Mean", style="magenta")
    for metric, value in report.mean.items():
        table.add_row(metric, "-" if value is None else f"{value:.4f}")
    table.add_row("excluded", str(report.excluded))
    return table


def finish_report(cfg: RunConfig, run_id: str, report: MetricsReport, preds, losses, summary) -> None:
    report_dir = cfg.run.report_dir
    txt_path, csv_path = write_metrics(report, report_dir)
    logging.info(f"METRICS: {txt_path} | {csv_path}")
    if cfg.run.dump_masks:
        dump_masks(preds, os.path.join(report_dir, "masks"), cfg.model.num_classes)
    run_report = generate_report(run_id, os.path.join(report_dir, "reports"), report, losses, summary)
    logging.info(f"REPORT: {run_report}")


# --- Commands ---


def cmd_train(args: argparse.Namespace, run_id: str) -> int:
    cfg = load_config(args)
    write_effective_config(cfg, cfg.run.report_dir)
    train_set, val_set = build_datasets(cfg)
    check_geometry(cfg, train_set)
    os.makedirs(os.path.dirname(cfg.run.ledger_path) or ".", exist_ok=True)
    ledger = RunLedger(cfg.run.ledger_path)

    console.print(Panel(f"Training {cfg.model.variant_name() or 'custom'} | run_id={run_id}", style="bold blue"))
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task("train", total=cfg.train.max_iters)

        def advance(iteration: int, loss: float) -> None:
            progress.update(task, completed=iteration, description=f"loss {loss:.4f}")

        try:
            result = train_loop(
                cfg.model,
                cfg.train,
                train_set,
                val_dataset=val_set,
                ledger=ledger,
                run_id=run_id,
                checkpoint_out=cfg.run.checkpoint_out,
                loss_log=os.path.join(cfg.run.report_dir, "loss.log"),
                dump_root=os.path.join(cfg.run.report_dir, "dumps"),
                spacing=cfg.run.spacing,
                on_iteration=advance,
            )
        finally:
            ledger.close()

    eval_set = val_set if val_set is not None else train_set
    report, preds = evaluate_model(result.model, eval_set, cfg.run.spacing)
    summary = {
        "variant": cfg.model.variant_name() or "custom",
        "parameters": result.model.num_parameters(),
        "iterations": cfg.train.max_iters,
        "checkpoint": result.checkpoint_path,
    }
    finish_report(cfg, run_id, report, preds, result.losses, summary)
    console.print(metrics_table(report, "Final metrics (validation)" if val_set is not None else "Final metrics (train)"))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, run_id: str) -> int:
    cfg = load_config(args)
    checkpoint = args.checkpoint or cfg.run.checkpoint_in or cfg.run.checkpoint_out
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint '{checkpoint}' not found", key="checkpoint_in")
    model = load_model(checkpoint, expected=cfg.model)
    directory = args.dataset or cfg.run.dataset_dir
    if directory and not dataset_exists(directory):
        raise DataError(f"no dataset found in '{directory}'")
    dataset = load_dataset(directory) if directory else build_datasets(cfg)[0]
    check_geometry(cfg, dataset)
    report, preds = evaluate_model(model, dataset, cfg.run.spacing)
    summary = {"variant": cfg.model.variant_name() or "custom", "checkpoint": checkpoint, "parameters": model.num_parameters()}
    finish_report(cfg, run_id, report, preds, [], summary)
    console.print(metrics_table(report, f"Evaluation of {checkpoint}"))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, run_id: str) -> int:
    results = run_suite(args.scope, seeds=args.seeds)
    table = Table(title="Gradient checks")
    table.add_column("Operation", style="cyan")
    table.add_column("Max rel. error", style="magenta")
    table.add_column("Excluded kinks", style="dim")
    table.add_column("Status", style="bold")
    for result in results:
        status = "[green]PASS[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(result.name, f"{result.max_rel_error:.3e}", str(result.excluded_coords), status)
    console.print(table)
    failed = [r for r in results if not r.passed]
    for result in failed:
        logging.error(f"GRADCHECK FAILED: {result.name} | MAX_REL_ERR: {result.max_rel_error:.3e}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_ablate(args: argparse.Namespace, run_id: str) -> int:
    cfg = load_config(args)
    write_effective_config(cfg, cfg.run.report_dir)
    os.makedirs(os.path.dirname(cfg.run.ledger_path) or ".", exist_ok=True)
    ledger = RunLedger(cfg.run.ledger_path)
    try:
        result = run_ablation(
            cfg,
            output_dir=os.path.join(cfg.run.report_dir, "ablation"),
            ledger=ledger,
            on_variant=lambda name, seed: console.print(f"[bold]ablate[/bold] {name} (seed {seed})"),
        )
    finally:
        ledger.close()
    table = Table(title="Component ablation")
    table.add_column("Variant", style="cyan")
    table.add_column("Para.", style="dim")
    for metric in TABLE_METRICS:
        table.add_column(metric, style="magenta")
    for row in result.table.to_dict("records"):
        cells = [f"{row[f'{m}_mean']:.4f} ± {row[f'{m}_std']:.4f}" for m in TABLE_METRICS]
        table.add_row(row["label"], str(row["params"]), *cells)
    console.print(table)
    logging.info(f"ABLATION: {result.paths.get('markdown')}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    run_id = datetime.now().strftime("%Y%m%d_%H%M%S")
    setup_logging(run_id)
    logging.info(f"Starting ConvFormer {args.command} | run_id={run_id}")
    try:
        return COMMANDS[args.command](args, run_id)
    except (ConfigError, DataError) as exc:
        key = f" (key: {exc.key})" if getattr(exc, "key", None) else ""
        console.print(f"[bold red]config error[/bold red]{key}: {exc}")
        logging.error(f"CONFIG ERROR: {exc}{key}")
        return EXIT_USAGE
    except (TrainingAborted, NumericError) as exc:
        dump = getattr(exc, "dump_path", None)
        console.print(f"[bold red]numeric abort[/bold red]: {exc}" + (f" (batch dumped to {dump})" if dump else ""))
        logging.error(f"NUMERIC ABORT: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
