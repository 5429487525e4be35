"""
Command-line interface.

    python -m gdnet gen --preset en100 --out runs/en100
    python -m gdnet train --preset en100 --out runs/en100
    python -m gdnet eval --preset en100 --out runs/en100
    python -m gdnet sweep-depth --preset en100 --out runs/en100 --depths 1,5,10,20
    python -m gdnet make-prox-net --preset en100 --out runs/en100
"""
from pathlib import Path
from typing import List, Optional, Sequence
import argparse
import logging
import sys

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .errors import GdnError
from .harness import experiments
from .harness.audit import RunJournal
from .schemas.contracts import PRESETS, ExperimentConfig, get_preset, load_config


console = Console()
logger = logging.getLogger("gdnet")


def setup_logging(verbose: bool) -> None:
    """Route package logs through rich."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def parse_depths(text: str) -> List[int]:
    try:
        depths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"depths must be comma-separated integers, got {text!r}") from e
    if not depths or any(d < 1 for d in depths):
        raise argparse.ArgumentTypeError(f"depths must be positive integers, got {text!r}")
    return depths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdnet", description="Unrolled proximal-gradient networks with sparse Bayesian training")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="Experiment config (JSON)")
        src.add_argument("--preset", choices=sorted(PRESETS), help="Named preset")
        p.add_argument("--out", type=Path, help="Output root (default: <output_dir>/<name>)")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument("--data", type=Path, help="Dataset directory (default: <out>/data)")
        p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    common(sub.add_parser("gen", help="Generate train and test datasets"))

    p = sub.add_parser("train", help="Run the sampler")
    common(p)
    p.add_argument("--run", type=Path, help="Run directory (default: <out>/runs/<run name>)")
    p.add_argument("--baseline", action="store_true", help="Train the no-physics baseline instead of the GDN")
    p.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")

    p = sub.add_parser("eval", help="Evaluate retained samples on the test set")
    common(p)
    p.add_argument("--run", type=Path, help="Run directory (default: <out>/runs/<run name>)")
    p.add_argument("--baseline", action="store_true", help="Default run directory of the baseline")

    p = sub.add_parser("sweep-depth", help="Train and evaluate one chain per unrolling depth")
    common(p)
    p.add_argument("--depths", type=parse_depths, help="Comma-separated depths (default: from config)")
    p.add_argument("--workers", type=int, default=1, help="Parallel chains")

    p = sub.add_parser("make-prox-net", help="Write the exact prox network as a run")
    common(p)
    p.add_argument("--run", type=Path, help="Run directory (default: <out>/runs/prox_exact)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = get_preset(args.preset) if args.preset else load_config(args.config)
    return cfg.with_seed(args.seed)


def _out_dir(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    return args.out if args.out is not None else Path(cfg.output_dir) / cfg.name


def _quantile_table(title: str, rows) -> Table:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Run", style="cyan")
    for name, _ in experiments.QUANTILES:
        table.add_column(name, justify="right", style="green")
    for label, q in rows:
        table.add_row(label, *(f"{q[name]:.4g}" for name, _ in experiments.QUANTILES))
    return table


def run_command(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, cfg)
    data_dir = args.data if args.data is not None else out / "data"
    journal = RunJournal(out / "journal.log")

    if args.command == "gen":
        res = experiments.cmd_gen(cfg, data_dir, journal)
        console.print(f"[green]✓[/green] {res.n_train} train / {res.n_test} test pairs written to {data_dir}")
        return 0

    if args.command == "train":
        run_dir = args.run or out / "runs" / experiments.run_name(cfg, args.baseline)
        res = experiments.cmd_train(cfg, data_dir, run_dir, baseline=args.baseline, resume=args.resume, journal=journal)
        console.print(
            f"[green]✓[/green] {res.final_state.iter} iterations, {res.retained} retained samples, "
            f"active fraction {res.final_state.active_fraction:.3f} ({run_dir})"
        )
        return 0

    if args.command == "eval":
        run_dir = args.run or out / "runs" / experiments.run_name(cfg, args.baseline)
        rep = experiments.cmd_eval(cfg, data_dir, run_dir, journal)
        s = rep.summary
        console.print(_quantile_table(f"Test error e over {s['samples']} samples", [(run_dir.name, s["e"])]))
        console.print(
            f"zero predictor e = {s['zero_predictor_e']:.4g}, posterior mean e = {s['posterior_mean_e']:.4g}"
        )
        return 0

    if args.command == "sweep-depth":
        rep = experiments.cmd_sweep_depth(cfg, data_dir, out / "sweep", args.depths, args.workers, journal)
        console.print(_quantile_table("Test error e by depth", [(f"D'={d}", q) for d, q in sorted(rep.per_depth.items())]))
        if rep.contraction is not None:
            console.print(f"estimated rho = {rep.contraction.rho:.6f}, R0 = {rep.contraction.r0:.4g}")
        if rep.recommended_depth is not None:
            console.print(f"[bold]recommended depth:[/bold] {rep.recommended_depth}")
        return 0

    if args.command == "make-prox-net":
        run_dir = args.run or out / "runs" / "prox_exact"
        path = experiments.cmd_make_prox_net(cfg, data_dir, run_dir, journal)
        console.print(f"[green]✓[/green] exact prox network written to {path}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return run_command(args)
    except GdnError as e:
        console.print(Panel(experiments.describe_error(e), title=f"[bold red]{e.code}[/bold red]", border_style="red"))
        return 2
    except KeyboardInterrupt:
        console.print("[yellow]Interrupted[/yellow]")
        return 130
    except Exception:
        logger.error("Unexpected failure", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
