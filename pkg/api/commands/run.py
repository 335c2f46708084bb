from pathlib import Path
from typing import Optional

import typer
from rich.console import Console

from api.deps import cli_errors
from services.harness_service import harness_service

router = typer.Typer()
console = Console()


@router.command("run")
def run(
    config: Path = typer.Option(..., "--config", help="TOML run config"),
    out: Optional[Path] = typer.Option(None, "--out", help="Artifact directory"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help="Overrides solve.seed"),
    threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Evaluation workers"),
):
    """
    Solve the configured problem and write report, history, solution and checkpoint
    """
    with cli_errors():
        report = harness_service.run(config, out_dir=out, seed=seed, threads=threads)
    for name in sorted(report.l2re):
        console.print(f"{name}: L1RE={report.l1re[name]:.3e} L2RE={report.l2re[name]:.3e}")
    for name, value in sorted(report.estimates.items()):
        console.print(f"estimate {name} = {value:.6g}")
    console.print(f"final loss {report.final_loss['total']:.3e} after {report.n_iter} steps")
