from pathlib import Path
from typing import Optional

import typer
from rich.console import Console

from api.deps import cli_errors
from services.harness_service import harness_service

router = typer.Typer()
console = Console()


@router.command("make-reference")
def make_reference(
    problem: str = typer.Argument(..., help="Registered problem id"),
    out: Path = typer.Option(..., "--out", help="Directory for the reference table"),
    points_per_axis: Optional[int] = typer.Option(None, "--points-per-axis", min=2),
):
    """
    Write a reference table with a '# rows=N' header line
    """
    with cli_errors():
        path = harness_service.make_reference(problem, out, points_per_axis)
    console.print(f"reference written to {path}")
