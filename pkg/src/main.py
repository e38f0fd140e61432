import asyncio
import os
from typing import Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from src.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, NUMERICAL_ERRORS, ReportError, ValidationError
from src.features.artifact_store import write_csv
from src.features.experiment_config import config_hash, load_config, sweep_points
from src.features.experiment_runner import PointState, dp_sweep_frame, run_experiment_async
from src.features.report_builder import report as build_report, summary_table

app = typer.Typer(help="FedGC uncertainty-quantification experiments.")
console = Console()


def _fail(message: str, code: int):
    console.print(f"[bold red]{message}[/bold red]")
    raise typer.Exit(code=code)


@app.command()
def validate(
    config: str = typer.Argument(..., help="Path to the experiment JSON config"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed (beats FEDGC_SEED)"),
):
    """
    Check a config without running it.
    """
    try:
        cfg = load_config(config, seed_override=seed)
    except ValidationError as e:
        for violation in e.context.get("violations", [e.message]):
            console.print(f"[red] - {violation}[/red]")
        _fail("Config is invalid", EXIT_VALIDATION)
    console.print(Panel(
        f"[bold]Name:[/bold] {cfg.name}\n"
        f"[bold]Sweep:[/bold] {cfg.sweep.axis} over {len(sweep_points(cfg))} point(s)\n"
        f"[bold]T / stride:[/bold] {cfg.T} / {cfg.stride}\n"
        f"[bold]Seed:[/bold] {cfg.seed}\n"
        f"[bold]sha256:[/bold] {config_hash(cfg)}",
        title="Config OK",
        border_style="green",
    ))


@app.command()
def run(
    config: str = typer.Argument(..., help="Path to the experiment JSON config"),
    seed: Optional[int] = typer.Option(None, help="Override the config seed (beats FEDGC_SEED)"),
    threads: int = typer.Option(4, help="Sweep points run concurrently up to this many"),
    out: Optional[str] = typer.Option(None, help="Output root (default: the config's output_dir)"),
):
    """
    Run every sweep point and write the artifact tree.
    """
    try:
        cfg = load_config(config, seed_override=seed)
    except ValidationError as e:
        _fail(f"Config is invalid: {e.message}", EXIT_VALIDATION)

    console.print(f"\n[yellow]Running '{cfg.name}': {cfg.sweep.axis} over {len(cfg.sweep.values)} point(s)...[/yellow]")
    try:
        with console.status("[bold green]Simulating..."):
            result = asyncio.run(run_experiment_async(cfg, out=out, threads=threads))
        if cfg.sweep.axis == "dp_sigma" and result.exit_code == EXIT_OK:
            write_csv(os.path.join(result.directory, "dp_sweep.csv"), dp_sweep_frame(result))
    except ValidationError as e:
        _fail(f"Validation failed: {e.message}", EXIT_VALIDATION)
    except NUMERICAL_ERRORS as e:
        _fail(f"Numerical failure: {e.message}", EXIT_NUMERICAL)

    table = Table(title=f"{cfg.name} ({result.directory})")
    table.add_column("Point")
    table.add_column("State")
    table.add_column("Steady")
    table.add_column("Error")
    for ctx in result.points:
        color = "green" if ctx.state == PointState.COMPLETED else "red"
        last = ctx.error_trace[-1]["message"] if ctx.error_trace else ""
        table.add_row(ctx.label, f"[{color}]{ctx.state.name}[/{color}]", ctx.steady_status, last[:80])
    console.print(table)

    if result.exit_code != EXIT_OK:
        _fail("Some sweep points failed; see manifest.json", result.exit_code)


@app.command()
def report(
    directory: str = typer.Argument(..., help="Experiment directory containing manifest.json"),
    out: Optional[str] = typer.Option(None, help="Where to write plots/ and summary.json"),
):
    """
    Build plot-data files and the pass/fail summary for a finished run.
    """
    try:
        summary = build_report(directory, out=out)
    except ReportError as e:
        for missing in e.context.get("missing", []):
            console.print(f"[red] - missing {missing}[/red]")
        _fail(f"Report failed: {e.message}", EXIT_VALIDATION)

    table = Table(title=f"Checks for {summary['name']}")
    table.add_column("Check")
    table.add_column("Status")
    table.add_column("Detail")
    for name, status, detail in summary_table(summary):
        color = {"pass": "green", "fail": "red"}.get(status, "yellow")
        table.add_row(name, f"[{color}]{status}[/{color}]", detail)
    console.print(table)


if __name__ == "__main__":
    app()
