"""Command-line entry points for the self-training label pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 detector
failure. All commands accept --config PATH (JSON) plus repeatable
--set key=value overrides with dotted paths, e.g. --set filter.rho=0.25.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import pipeline
from .config import SelfTrainConfig, apply_overrides, load_config
from .errors import ConfigError, DataError, DetectorError
from .kitti_io import DataRoot
from .sim import gen_world


def _resolve_config(config, sets, seed=None, data_root=None, workers=None) -> SelfTrainConfig:
    cfg = load_config(config, tuple(sets))
    direct = []
    if seed is not None:
        direct.append(f"master_seed={seed}")
        direct.append(f"world.rng_seed={seed}")
    if data_root is not None:
        direct.append(f'data_root="{data_root}"')
    if workers is not None:
        direct.append(f"workers={workers}")
    if direct:
        cfg = apply_overrides(cfg, tuple(direct))
    return cfg


def _config_options(fn):
    fn = click.option("--config", type=click.Path(), default=None,
                      help="JSON config file; defaults apply when omitted.")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="K=V",
                      help="Override a config key (dotted path), repeatable.")(fn)
    return fn


@click.group()
def cli():
    """Self-training label pipeline for multi-traversal LiDAR data."""


@cli.command("gen-world")
@_config_options
@click.option("--out", type=click.Path(), default=None,
              help="Data root to populate (defaults to config data_root).")
@click.option("--seed", type=int, default=None, help="World seed override.")
@click.option("--force", is_flag=True, help="Overwrite an existing data root.")
def cmd_gen_world(config, sets, out, seed, force):
    """Generate a synthetic multi-traversal world with ground truth."""
    cfg = _resolve_config(config, sets, seed=seed, data_root=out)
    world = gen_world(cfg.world)
    pipeline.write_world(world, Path(cfg.data_root), force=force)
    n_objects = sum(len(s.objects) for s in world.samples)
    click.echo(
        f"wrote {len(world.samples)} samples ({n_objects} objects) to {cfg.data_root}"
    )


@cli.command("seed-generate")
@_config_options
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--force", is_flag=True)
def cmd_seed_generate(config, sets, data_root, seed, workers, force):
    """Compute persistence sidecars and round-0 seed labels."""
    cfg = _resolve_config(config, sets, seed=seed, data_root=data_root, workers=workers)
    manifest = pipeline.seed_generate(cfg, force=force)
    click.echo(
        f"round 0: {manifest.counts['n_pseudo_labels']} seed labels, "
        f"{manifest.counts['n_db_entries']} database entries "
        f"({manifest.counts['n_db_skipped']} skipped as sparse)"
    )


@cli.command("self-train")
@_config_options
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--rounds", type=int, default=None, help="Override max_rounds.")
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--force", is_flag=True, help="Redo existing rounds.")
@click.option("--resume", is_flag=True, help="Skip completed rounds.")
def cmd_self_train(config, sets, data_root, rounds, seed, workers, force, resume):
    """Run the multi-round detect/filter/retrain loop."""
    cfg = _resolve_config(config, sets, seed=seed, data_root=data_root, workers=workers)
    if rounds is not None:
        cfg = apply_overrides(cfg, (f"max_rounds={rounds}",))
    manifests = pipeline.self_train(cfg, resume=resume, force=force)
    for m in manifests:
        t = "-" if m.threshold is None else f"{m.threshold:.4f}"
        click.echo(
            f"round {m.round_index}: t={t} "
            f"pseudo={m.counts.get('n_pseudo_labels', '?')} "
            f"db={m.counts.get('n_db_entries', '?')}"
        )


@cli.command("filter")
@_config_options
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--detections", type=click.Path(), required=True,
              help="Directory of 16-field detection label files.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--round", "round_index", type=int, default=1)
def cmd_filter(config, sets, data_root, detections, out, round_index):
    """Filter a detections directory with the configured algorithm."""
    cfg = _resolve_config(config, sets, data_root=data_root)
    manifest = pipeline.filter_detections(cfg, Path(detections), Path(out), round_index)
    t = "-" if manifest.threshold is None else f"{manifest.threshold:.4f}"
    click.echo(
        f"threshold {t}: {manifest.counts['n_detections']} detections -> "
        f"{manifest.counts['n_pseudo_labels']} pseudo-labels, "
        f"{manifest.counts['n_db_source']} augmentation labels"
    )


@cli.command("build-db")
@_config_options
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--labels", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
def cmd_build_db(config, sets, data_root, labels, out):
    """Build an augmentation database from a label directory."""
    cfg = _resolve_config(config, sets, data_root=data_root)
    db = pipeline.build_db_from_dir(cfg, Path(labels), Path(out))
    click.echo(f"{len(db)} entries ({db.skipped_sparse} skipped as sparse)")


@cli.command("augment")
@_config_options
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--labels", type=click.Path(), required=True)
@click.option("--db", "db_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
def cmd_augment(config, sets, data_root, labels, db_dir, out, seed):
    """Ground-truth-sample and globally augment every sample."""
    cfg = _resolve_config(config, sets, seed=seed, data_root=data_root)
    inserted = pipeline.augment_samples(cfg, Path(labels), Path(db_dir), Path(out))
    click.echo(f"inserted {sum(inserted.values())} objects over {len(inserted)} samples")


@cli.command("eval")
@_config_options
@click.option("--dets", type=click.Path(), required=True)
@click.option("--gts", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None,
              help="CSV output path (stdout when omitted).")
def cmd_eval(config, sets, dets, gts, out):
    """Range-binned AP of a detections directory against ground truth."""
    cfg = _resolve_config(config, sets)
    report = pipeline.evaluate_dirs(Path(dets), Path(gts), cfg)
    csv_text = report.to_csv()
    if out is None:
        click.echo(csv_text, nl=False)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(csv_text)
    click.echo(
        f"mean predicted objects per sample: {report.mean_predicted_objects:.4f}",
        err=True,
    )


@cli.command("report")
@click.option("--rounds", "rounds_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None)
def cmd_report(rounds_dir, out):
    """Per-round summary CSV from the round manifests and audits."""
    csv_text = pipeline.report_rounds(Path(rounds_dir))
    if out is None:
        click.echo(csv_text, nl=False)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(csv_text)


@cli.command("sim-detector")
@_config_options
@click.option("--mode", type=click.Choice(["train", "infer"]), required=True)
@click.option("--points", type=click.Path(), required=True)
@click.option("--labels", type=click.Path(), default=None)
@click.option("--db", "db_dir", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--round", "round_index", type=int, required=True)
@click.option("--seed", type=int, default=None)
def cmd_sim_detector(config, sets, mode, points, labels, db_dir, out, round_index, seed):
    """Simulated detector speaking the external-detector file protocol."""
    cfg = _resolve_config(config, sets, seed=seed)
    if mode == "train":
        if labels is None or db_dir is None:
            raise ConfigError("sim-detector train needs --labels and --db")
        pipeline.sim_detector_train(
            cfg, Path(points), Path(labels), Path(db_dir), Path(out), round_index
        )
    else:
        pipeline.sim_detector_infer(cfg, Path(points), Path(out), round_index)


def main(argv=None) -> int:
    """Entry point mapping pipeline errors to documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    except DetectorError as e:
        click.echo(f"detector error: {e}", err=True)
        return 4
    except DataError as e:
        click.echo(f"data error: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
