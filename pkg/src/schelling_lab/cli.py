"""Command-line runner: one subcommand per experiment kind.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration,
3 inconclusive (for example a run that hit its horizon).
"""

from __future__ import annotations

import sys

import click

from . import __version__
from .config import EXPERIMENTS, FIELDS, PRESETS, ConfigError, flag_name, resolve
from .runner import EXIT_FAILURE, EXIT_USAGE, OUTPUT_ROOT_ENV, dispatch

_METAVARS = {"_int": "INT", "_float": "FLOAT", "_opt_float": "FLOAT", "_int_list": "INTS",
             "_float_list": "FLOATS", "_str": "TEXT"}
_BOOL_KEYS = {k for k, f in FIELDS.items() if f.type in (bool, "bool")}


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _execute(experiment: str | None, config_path, flags: dict):
    try:
        cfg = resolve(experiment, config_path, flags)
    except ConfigError as exc:
        _fail(str(exc), EXIT_USAGE)
    try:
        code, out, summary = dispatch(cfg)
    except Exception as exc:  # any failure inside a run maps to exit 1
        _fail(f"{type(exc).__name__}: {exc}", EXIT_FAILURE)
    click.echo(f"{summary['status']}: {out}")
    for reason in summary["inconclusive_reasons"]:
        click.echo(f"  inconclusive: {reason}", err=True)
    sys.exit(code)


def _options(experiment: str):
    """click options for every config key the experiment reads."""
    opts = [click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                         default=None, help="Sectioned key = value file; flags override it.")]
    for key, f in FIELDS.items():
        if key == "experiment" or experiment not in f.metadata["experiments"]:
            continue
        default = f.metadata["fmt"](f.default) if f.default != "" else '""'
        name = flag_name(key)
        help_ = f.metadata["help"][0].upper() + f.metadata["help"][1:] + "."
        if key in _BOOL_KEYS:
            decl = f"{name}/--no-{name[2:]}"
            opts.append(click.option(decl, key, default=None, show_default=default, help=help_))
        else:
            if key == "preset":
                help_ = f"Named parameter preset: {', '.join(PRESETS)}."
            opts.append(click.option(name, key, type=str, default=None, show_default=default, help=help_,
                                     metavar=_METAVARS.get(f.metadata["parse"].__name__, "TEXT")))

    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return wrap


@click.group(context_settings={"help_option_names": ["-h", "--help"], "max_content_width": 100},
             help="Seeded experiments for discrete and continuum Schelling dynamics.\n\n"
                  f"Outputs go to --out, or to ${OUTPUT_ROOT_ENV}/<experiment>-<hash> (default root: runs).")
@click.version_option(__version__, prog_name="schelling-lab")
def main():
    pass


def _make(experiment: str, doc: str):
    @_options(experiment)
    def command(config_path, **flags):
        _execute(experiment, config_path, flags)

    command.__doc__ = doc
    main.command(experiment, help=doc)(command)


_DOCS = {
    "simulate": "Run the lattice dynamics to stabilization for every (w, seed).",
    "solve": "Integrate a continuum equation from Gaussian or sawtooth data.",
    "couple": "Compare the rescaled lattice bias with the continuum solution it seeds.",
    "final-configs": "Tabulate final 1D run lengths for every (w, seed).",
    "stable-shape": "Erode boxes to stable sets and search for minimal stable shapes.",
    "occupation": "Sup of occupation measures over a dyadic Lipschitz family.",
}
for _name in EXPERIMENTS:
    _make(_name, _DOCS[_name])


@main.command("run")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, show_default='""', help="Output directory (empty: derived).")
@click.option("--sequential/--no-sequential", default=None, show_default="false",
              help="Run matrix cells in order.")
def run_file(config_path, out, sequential):
    """Run the experiment named in a config file."""
    _execute(None, config_path, {"out": out, "sequential": sequential})


if __name__ == "__main__":
    main()
