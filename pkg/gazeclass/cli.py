"""Command-line front end: synth, hfm, run, analyze, verify."""

import json
import logging
from functools import wraps
from pathlib import Path

import click

from . import __version__
from .config import load_config
from .errors import GazeclassError
from .experiment import (
    ANALYSES,
    RunArtifacts,
    new_run_dir,
    prepare_output_dir,
    run_experiment,
    synthesize_dataset,
)
from .gaze import load_dataset, save_fixation_map
from .log import configure_logging
from .verify import SUITES, run_all

logger = logging.getLogger(__name__)


def reports_errors(f):
    """Turn domain errors into a JSON report on stderr and exit code 2."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except GazeclassError as exc:
            click.echo(json.dumps(exc.to_report()), err=True)
            click.get_current_context().exit(2)
        except click.exceptions.Exit:
            raise
        except Exception:
            logger.exception("unexpected failure")
            click.get_current_context().exit(1)

    return decorated_function


def config_options(f):
    f = click.option(
        "--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
        help="Override one config value (JSON-decoded).",
    )(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config file.")(f)
    f = click.option("--seed", type=int, help="Run seed (run.seed).")(f)
    return f


def resolve_config(config_path, overrides, seed=None, jobs=None):
    flags = list(overrides)
    if seed is not None:
        flags.append({"run": {"seed": seed}})
    if jobs is not None:
        flags.append({"run": {"jobs": jobs}})
    return load_config(config_path, flags)


def echo_json(payload):
    click.echo(json.dumps(payload, indent=2, default=str))


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Two-stream gaze classification toolkit."""
    configure_logging(verbose)


@cli.command()
@config_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Replace a non-empty output directory.")
@reports_errors
def synth(config_path, overrides, seed, out_dir, force):
    """Write a synthetic cohort: images, gaze CSV and manifest."""
    config = resolve_config(config_path, overrides, seed)
    out = synthesize_dataset(config, prepare_output_dir(out_dir, force))
    manifest = json.loads((out / "manifest.json").read_text())
    echo_json({
        "success": True,
        "dataset": str(out),
        "subjects": len(manifest["subjects"]),
        "images": len(manifest["image_ids"]),
    })


@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--sample-rate", default=300.0, show_default=True, help="Tracker rate in Hz.")
@click.option("--sigma", default=24.0, show_default=True, help="Gaussian sigma in pixels.")
@click.option("--force", is_flag=True)
@reports_errors
def hfm(data_dir, out_dir, sample_rate, sigma, force):
    """Build every subject's fixation maps as 16-bit PGM plus JSON sidecar."""
    out = prepare_output_dir(out_dir, force)
    dataset = load_dataset(data_dir, sample_rate, sigma)
    count = 0
    for sid, record in dataset.subjects.items():
        for image_id in dataset.image_ids:
            save_fixation_map(record.maps[image_id], out / sid)
            count += 1
    echo_json({"success": True, "maps": count, "out": str(out)})


@cli.command()
@config_options
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="Dataset directory; synthesizes one from the config when omitted.")
@click.option("--run-dir", type=click.Path(file_okay=False), help="Exact run directory.")
@click.option("--jobs", type=int, help="Worker threads (run.jobs).")
@click.option("--force", is_flag=True)
@reports_errors
def run(config_path, overrides, seed, data_dir, run_dir, jobs, force):
    """Train and evaluate under cross-validation."""
    flags = list(overrides) + ([{"dataset": {"data_dir": data_dir}}] if data_dir else [])
    config = resolve_config(config_path, flags, seed, jobs)
    target = Path(run_dir) if run_dir else new_run_dir(config.run.output_dir)
    result = run_experiment(config, target, force)
    m = result.metrics
    echo_json({
        "success": True,
        "run_dir": str(result.run_dir),
        "subject_acc": m.subject_acc,
        "model_acc": m.model_acc,
        "sen": m.sensitivity,
        "spe": m.specificity,
        "auc": m.auc,
        "cache": result.cache_stats,
    })


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("which", type=click.Choice(sorted(ANALYSES)))
@click.option("--fold", default=0, show_default=True, help="Fold whose model is analyzed.")
@click.option("--cross-validated", is_flag=True,
              help="contrib/tsne: score each subject with the model that held it out.")
@click.option("--subject", "subjects", multiple=True, help="lrp: subject ids (default: the fold's test set).")
@click.option("--variant", default=0, show_default=True, help="lrp: augmentation variant.")
@click.option("--top-n", default=5, show_default=True, help="lrp: relevance maps exported per subject.")
@click.option("--candidates", type=click.IntRange(min=1),
              help="lrp: choose maps among this many top contrib images (default: analysis.lrp_candidates).")
@click.option("--target", type=click.Choice(["TD", "ASD"]), help="lrp: class to explain (default: true label).")
@click.option("--annotations", type=click.Path(exists=True, dir_okay=False), help="lrp: region annotation JSON.")
@click.option("--force", is_flag=True, help="Replace earlier output of this analysis.")
@reports_errors
def analyze(run_dir, which, fold, cross_validated, subjects, variant, top_n, candidates, target,
            annotations, force):
    """Attribution, contribution or embedding analysis of a finished run."""
    run_artifacts = RunArtifacts(run_dir)
    if which == "lrp":
        result = ANALYSES[which](
            run_artifacts, fold, subjects, variant, top_n,
            None if target is None else ["TD", "ASD"].index(target), annotations, force, candidates,
        )
    else:
        result = ANALYSES[which](run_artifacts, fold, cross_validated, force)
    echo_json({"success": True, "analysis": which, "result": result})


@cli.command()
@click.option("--suite", "suites", multiple=True, type=click.Choice(sorted(SUITES)),
              help="Run only these suites.")
@reports_errors
def verify(suites):
    """Run the gradient, relevance, AUC and augmentation oracle suites."""
    report = run_all(suites or None)
    echo_json(report)
    if not report["passed"]:
        click.get_current_context().exit(1)
