import typer

from api.commands import check_grad, problems, reference, run

app = typer.Typer(
    name="pinnforge",
    help="Physics-informed neural network solver and benchmark harness",
    no_args_is_help=True,
    add_completion=False,
)

app.registered_commands += run.router.registered_commands
app.registered_commands += problems.router.registered_commands
app.registered_commands += check_grad.router.registered_commands
app.registered_commands += reference.router.registered_commands
