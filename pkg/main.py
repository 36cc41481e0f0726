# Command-line entry point: fit, check, rank and report component network meta-analyses

import logging
import os
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from dotenv import load_dotenv

from cnma.config import CnmaConfig, RunConfig, get_config_from_env, load_run_config
from cnma.design import DesignMatrices, ModelSpec, build_design, export_matrix_csv
from cnma.errors import CnmaError, ConfigError, DataValidationError
from cnma.estimability import check_set, component_diagnostics
from cnma.fit import FitResult, fit_model
from cnma.network import Network, parse_contrast_csv, validate_network
from cnma.ranking import answer_question, ingest_samples, league_table, resolve_reference, resolve_set
from cnma.report import (
    emit_network_svg,
    estimability_table_text,
    fit_summary_text,
    hierarchy_table_text,
    load_fit,
    load_hierarchy,
    write_hierarchy_outputs,
    write_json,
)

load_dotenv()

logger = logging.getLogger("cnma")


class RunContext:
    """Everything the subcommands share: settings, run config and CLI overrides."""

    def __init__(self, config_path: Optional[str], seed: Optional[int], exclude_inestimable: bool,
                 out: Optional[str]):
        self.config_path = config_path
        self.seed_override = seed
        self.exclude_inestimable = exclude_inestimable
        self.out_override = out
        self.settings: CnmaConfig = get_config_from_env()
        self._run_config: Optional[RunConfig] = None

    @property
    def run_config(self) -> RunConfig:
        if self._run_config is None:
            if not self.config_path:
                raise ConfigError("no run configuration given; pass --config <path>")
            self._run_config = load_run_config(self.config_path)
        return self._run_config

    @property
    def out_dir(self) -> Path:
        path = Path(self.out_override or self.run_config.output.dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def question_value(self, field: str, setting: str):
        """Config-file value when set explicitly, otherwise the environment/default setting."""
        question = self.run_config.question
        if field in question.model_fields_set:
            return getattr(question, field)
        return self.settings.get(setting, getattr(question, field))

    @property
    def seed(self) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return int(self.question_value("seed", "seed"))

    def load_network(self) -> Network:
        network = parse_contrast_csv(self.run_config.data)
        for diagnostic in validate_network(network):
            if diagnostic.severity == "error":
                raise DataValidationError(diagnostic.message, study_id=diagnostic.study_id)
            if diagnostic.kind == "connectivity":
                click.echo(f"Network: {diagnostic.message}")
        return network

    def build_design(self, network: Network) -> DesignMatrices:
        model = self.run_config.model
        spec = ModelSpec.from_strings(anchor=model.anchor, interactions=model.interactions, effects=model.effects)
        return build_design(network, spec)


def _run(ctx: click.Context, action) -> None:
    """Run a subcommand body and map failures onto the exit-code contract."""
    try:
        action(ctx.obj)
    except CnmaError as e:
        logger.error(e.detail)
        click.echo(f"Error: {e.detail}", err=True)
        ctx.exit(e.exit_code)
    except OSError as e:
        logger.error(f"I/O error: {e}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(1)


def _fit(run: RunContext) -> Tuple[Network, DesignMatrices, FitResult]:
    network = run.load_network()
    design = run.build_design(network)
    fit = fit_model(design, network, tol=run.settings.rank_tolerance())
    return network, design, fit


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run configuration JSON")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the configured seed")
@click.option("--exclude-inestimable", is_flag=True, help="Rank only the estimable subset and record exclusions")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx: click.Context, config_path, seed, exclude_inestimable, out, verbose):
    """Component network meta-analysis: fit, check estimability, rank."""
    level = logging.DEBUG if verbose else os.getenv("CNMA_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = RunContext(config_path, seed, exclude_inestimable, out)


@cli.command()
@click.pass_context
def fit(ctx: click.Context):
    """Fit the configured model and write fit.json (plus design CSVs and the network plot)."""

    def action(run: RunContext):
        network, design, result = _fit(run)
        out_dir = run.out_dir
        formats = run.run_config.output.formats
        write_json(result.to_dict(), out_dir / "fit.json")
        if "csv" in formats:
            export_matrix_csv(design, "M", out_dir / "design_M.csv")
            export_matrix_csv(design, "C", out_dir / "design_C.csv")
        if "svg" in formats:
            emit_network_svg(network, out_dir / "network.svg")
        click.echo(fit_summary_text(result))

    _run(ctx, action)


@cli.command()
@click.pass_context
def check(ctx: click.Context):
    """Check which relative effects versus the reference are estimable."""

    def action(run: RunContext):
        network = run.load_network()
        design = run.build_design(network)
        tol = run.settings.rank_tolerance()
        question = run.run_config.question
        set_S = resolve_set(question.set, design.catalog)
        reference = resolve_reference(set_S, question.reference)

        report = check_set(design, set_S, reference, tol)
        if not report.all_estimable:
            report.components = component_diagnostics(design, tol)
        write_json(report.to_dict(), run.out_dir / "estimability.json")
        click.echo(estimability_table_text(report))

    _run(ctx, action)


@cli.command()
@click.option("--fit", "fit_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse a fit.json written by `fit`")
@click.option("--samples", "samples_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="External effect samples CSV (one column per element)")
@click.pass_context
def rank(ctx: click.Context, fit_path, samples_path):
    """Refine the set, compute the ranking metric and write the hierarchy."""

    def action(run: RunContext):
        network = run.load_network()
        design = run.build_design(network)
        tol = run.settings.rank_tolerance()
        if fit_path:
            result = load_fit(fit_path)
            if result.param_labels != design.param_labels:
                raise ConfigError(
                    f"fit file parameters {result.param_labels} do not match the configured model {design.param_labels}"
                )
        else:
            result = fit_model(design, network, tol=tol)

        question = run.run_config.question
        samples = None
        if samples_path:
            set_S = resolve_set(question.set, design.catalog)
            samples = ingest_samples(samples_path, resolve_reference(set_S, question.reference))

        report = answer_question(
            design,
            result,
            question.set,
            reference=question.reference,
            metric=question.metric,
            orientation=question.orientation,
            n_samples=int(run.question_value("samples", "n_samples")),
            seed=run.seed,
            mode=run.question_value("mode", "sampling_mode"),
            exclude_inestimable=run.exclude_inestimable,
            samples=samples,
            tol=tol,
            z=float(run.settings.get("ci_z")),
            max_workers=int(run.settings.get("max_workers")),
        )
        formats = run.run_config.output.formats
        league = None
        if "csv" in formats:
            league = league_table(result, design, report.question.refined_S_star, tol, float(run.settings.get("ci_z")))
        write_hierarchy_outputs(report, run.out_dir, formats, league=league)
        click.echo(hierarchy_table_text(report))

    _run(ctx, action)


@cli.command()
@click.option("--hierarchy", "hierarchy_path", type=click.Path(dir_okay=False), default=None,
              help="hierarchy.json to re-render (default: <out>/hierarchy.json)")
@click.option("--format", "formats", type=click.Choice(["json", "csv", "svg"]), multiple=True,
              help="Formats to write (default: the configured formats, or svg and csv)")
@click.pass_context
def report(ctx: click.Context, hierarchy_path, formats):
    """Re-render tables and the forest plot from a saved hierarchy report."""

    def action(run: RunContext):
        out_dir = Path(run.out_override) if run.out_override else None
        if out_dir is None:
            out_dir = run.out_dir if run.config_path else Path("cnma-out")
        path = Path(hierarchy_path) if hierarchy_path else out_dir / "hierarchy.json"
        hierarchy = load_hierarchy(path)
        chosen = list(formats) or (run.run_config.output.formats if run.config_path else ["svg", "csv"])
        for written in write_hierarchy_outputs(hierarchy, out_dir, [f for f in chosen if f != "json"]):
            click.echo(f"Wrote {written}")
        click.echo(hierarchy_table_text(hierarchy))

    _run(ctx, action)


def main():
    cli(obj=None)


if __name__ == "__main__":
    sys.exit(main())
