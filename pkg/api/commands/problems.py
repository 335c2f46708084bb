import typer
from rich.console import Console
from rich.table import Table

from services.harness_service import harness_service

router = typer.Typer()
console = Console()


@router.command("list-problems")
def list_problems():
    """
    Registered problems with their kind, supported modes and reference source
    """
    table = Table()
    table.add_column("id", no_wrap=True)
    table.add_column("kind", no_wrap=True)
    table.add_column("modes")
    table.add_column("reference")
    table.add_column("description", overflow="fold")
    for summary in harness_service.list_problems():
        table.add_row(summary.id, summary.kind, ", ".join(summary.modes), summary.reference, summary.description)
    console.print(table)
