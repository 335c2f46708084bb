from contextlib import contextmanager

import typer
from rich.console import Console

from core.errors import ADError, DivergenceError, EvaluationError, PinnForgeError
from utils.logger import logger

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CONFIG = 2

console = Console(stderr=True)


def exit_code_for(error: Exception) -> int:
    """Numeric failures exit 1; everything a user can fix in the config exits 2."""
    if isinstance(error, (DivergenceError, EvaluationError, ADError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


@contextmanager
def cli_errors():
    try:
        yield
    except PinnForgeError as e:
        code = exit_code_for(e)
        logger.error(f"{type(e).__name__}: {str(e)}")
        console.print(f"[red]error[/red] ({type(e).__name__}): {str(e)}")
        raise typer.Exit(code=code)
