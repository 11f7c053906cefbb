import functools
import json
from typing import Optional

import click

from app import logger
from app.crud.checkpoint import load_checkpoint
from app.crud.dataset import convert_csv, load_dataset, save_dataset
from app.errors import TimeCheatError
from app.run_config import resolve_run_config
from app.training import evaluate, interpolation_report, summarize_runs, train
from app.utils.synthetic import PRESETS, generate_synthetic, resolve_preset


# Converts engine and IO failures into a one-line click error (exit status 1).
def _handle_errors(command):
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (TimeCheatError, OSError) as exc:
            logger.debug("command %s failed", command.__name__, exc_info=True)
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.group(name="timecheat")
def cli():
    """Train and evaluate patch-graph Transformers on irregularly sampled time series."""


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON run configuration.")
@click.option("--data", "train_path", type=click.Path(exists=True, dir_okay=False), help="Training dataset (JSONL).")
@click.option("--val", "val_path", type=click.Path(exists=True, dir_okay=False), help="Validation dataset (JSONL).")
@click.option("--test", "test_path", type=click.Path(exists=True, dir_okay=False), help="Test dataset (JSONL).")
@click.option("--synthetic", type=click.Choice(sorted(PRESETS)), help="Train on a generated preset instead of a file.")
@click.option("--patches", type=int, help="Number of patches P.")
@click.option("--ref-points", type=int, help="Reference points K per patch.")
@click.option("--layers", type=int, help="Graph attention layers L.")
@click.option("--hidden", type=int, help="Graph feature width d_h.")
@click.option("--heads", type=int, help="Graph attention heads.")
@click.option("--patch-dim", type=int, help="Patch embedding width T_P.")
@click.option("--encoder-mode", type=click.Choice(["ci", "cd"]), help="Channel-independent or joint encoder.")
@click.option("--encoder-layers", type=int, help="Transformer layers.")
@click.option("--encoder-heads", type=int, help="Transformer heads.")
@click.option("--freeze-channel-matrix", is_flag=True, help="Keep channel encodings fixed one-hot images.")
@click.option("--no-node-residual", is_flag=True, help="Drop the node residual in graph layers.")
@click.option("--absolute-time", is_flag=True, help="Feed absolute instead of patch-relative times.")
@click.option("--epochs", type=int, help="Maximum epochs.")
@click.option("--batch-size", type=int, help="Instances per batch.")
@click.option("--lr", type=float, help="Adam step size.")
@click.option("--observed", type=float, help="Observed fraction for interpolation training.")
@click.option("--seed", type=int, help="Base seed.")
@click.option("--runs", type=int, help="Repeat training with consecutive seeds.")
@click.option("--out-dir", type=click.Path(file_okay=False), help="Run directory.")
@_handle_errors
def train_command(config_path, train_path, val_path, test_path, synthetic, **flags):
    """Train a model and write checkpoints, metrics.jsonl and final_report.json."""
    overrides = {
        "data.train": train_path,
        "data.val": val_path,
        "data.test": test_path,
        "data.synthetic": synthetic,
        "data.observed_fraction": flags["observed"],
        "model.patches": flags["patches"],
        "model.ref_points": flags["ref_points"],
        "model.patch_dim": flags["patch_dim"],
        "model.embedder.layers": flags["layers"],
        "model.embedder.hidden": flags["hidden"],
        "model.embedder.heads": flags["heads"],
        "model.embedder.freeze_channel_matrix": True if flags["freeze_channel_matrix"] else None,
        "model.embedder.node_residual": False if flags["no_node_residual"] else None,
        "model.embedder.patch_relative_time": False if flags["absolute_time"] else None,
        "model.encoder.mode": flags["encoder_mode"],
        "model.encoder.layers": flags["encoder_layers"],
        "model.encoder.heads": flags["encoder_heads"],
        "optimizer.epochs": flags["epochs"],
        "optimizer.batch_size": flags["batch_size"],
        "optimizer.lr": flags["lr"],
        "seed": flags["seed"],
        "runs": flags["runs"],
        "out_dir": flags["out_dir"],
    }
    config = resolve_run_config(config_path, overrides)
    results = train(config)
    logger.info("trained %d run(s) into %s", len(results), config.out_dir)
    _echo_json(summarize_runs(results))


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Also write the report here.")
@_handle_errors
def evaluate_command(checkpoint_path, data_path, out_path: Optional[str]):
    """Print a JSON metrics report for a dataset."""
    report = evaluate(load_checkpoint(checkpoint_path), load_dataset(data_path)).to_dict()
    if out_path:
        with open(out_path, "w", encoding="utf-8") as handle:
            json.dump(report, handle, indent=2, sort_keys=True)
    _echo_json(report)


@cli.command("interpolate")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--observed", "fractions", type=float, multiple=True, help="Observed fraction; repeat for a sweep.")
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def interpolate_command(checkpoint_path, data_path, fractions, seed):
    """Mask observations at each observed fraction and report model and baseline MSE."""
    fractions = fractions or (0.5, 0.6, 0.7, 0.8, 0.9)
    rows = interpolation_report(load_checkpoint(checkpoint_path), load_dataset(data_path), fractions, seed)
    _echo_json({"task": "interpolation", "sweep": rows})


@cli.command("generate")
@click.option("--spec", "preset", required=True, type=click.Choice(sorted(PRESETS)), help="Generator preset.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--instances", type=int, help="Override the instance count.")
@_handle_errors
def generate_command(preset, seed, out_path, instances):
    """Write a synthetic dataset in JSONL form."""
    overrides = {"num_instances": instances} if instances is not None else {}
    dataset = generate_synthetic(resolve_preset(preset, **overrides), seed)
    save_dataset(dataset, out_path)
    click.echo(f"wrote {len(dataset)} instances to {out_path}")


@cli.command("convert-csv")
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--channels", type=int, help="Channel count C (default: largest channel + 1).")
@click.option(
    "--task",
    type=click.Choice(["classification", "interpolation", "forecasting"]),
    default="classification",
    show_default=True,
)
@_handle_errors
def convert_csv_command(csv_path, out_path, channels, task):
    """Convert a long-format CSV (instance_id, channel, time, value[, label]) to JSONL."""
    dataset = convert_csv(csv_path, num_channels=channels, task=task)
    save_dataset(dataset, out_path)
    click.echo(f"wrote {len(dataset)} instances to {out_path}")
