from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table

from api.deps import EXIT_NUMERIC, cli_errors
from services.harness_service import harness_service

router = typer.Typer()
console = Console()


@router.command("check-grad")
def check_grad(
    config: Path = typer.Option(..., "--config", help="TOML run config"),
    step_size: float = typer.Option(1e-6, "--step-size", help="Central difference step"),
    tolerance: float = typer.Option(1e-5, "--tolerance", help="Maximum relative error per leaf"),
    threads: Optional[int] = typer.Option(None, "--threads", min=1),
):
    """
    Compare AD gradients of every loss term with central finite differences
    """
    with cli_errors():
        report = harness_service.check_grad(config, step_size=step_size, tolerance=tolerance, threads=threads)
    table = Table("term", "leaf", "rel. error", "ok")
    for case in report.cases:
        table.add_row(case.term, case.leaf, f"{case.rel_error:.2e}", "yes" if case.passed else "[red]no[/red]")
    console.print(table)
    console.print(f"forward/reverse residual agreement: {report.mode_agreement:.2e}")
    if not report.passed:
        raise typer.Exit(code=EXIT_NUMERIC)
