"""Command-line surface: config-driven, reproducible experiment commands.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime or numeric
failure.  MULTEHR_THREADS caps cross-validation worker parallelism; the
--deterministic flag forces single-thread, bit-reproducible runs.
"""

import json
import os
import sys

import click

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .data import DataError
from .pipeline import (run_cv, run_eval, run_explain, run_export_embeddings,
                       run_sweep, run_synth, run_training)
from .training import NumericFailure
from . import tensor as T

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:
        pass
    os.environ["MULTEHR_THREADS"] = "1"


def _resolve(config_path, seed, deterministic, out):
    cfg = load_config(config_path) if config_path else ExperimentConfig().validate()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    if deterministic:
        cfg.deterministic = True
        _limit_threads()
    return cfg


def _fail(kind, code, err, out_dir=None):
    message = f"{kind}: {err}"
    click.echo(message, err=True)
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                json.dump({"stage": kind, "error": str(err)}, fh, indent=2)
        except OSError:
            pass
    sys.exit(code)


def _guard(fn, out_dir=None):
    try:
        return fn()
    except ConfigError as err:
        _fail("config", EXIT_CONFIG, err, out_dir)
    except DataError as err:
        _fail("data", EXIT_DATA, err, out_dir)
    except (NumericFailure, FloatingPointError, T.ContractError) as err:
        _fail("runtime", EXIT_RUNTIME, err, out_dir)


_global = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="JSON experiment config; flags override file values."),
    click.option("--seed", type=int, default=None),
    click.option("--deterministic", is_flag=True, default=False),
    click.option("--out", type=click.Path(), default=None,
                 help="output directory (overrides config.out_dir)"),
]


def global_options(fn):
    for opt in reversed(_global):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Heterogeneous EHR graph learning experiments."""


@main.command()
@global_options
def synth(config_path, seed, deterministic, out):
    """Generate synthetic EHR CSVs plus partition and manifest."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    if seed is not None:
        cfg.synth.seed = seed
    out_dir = cfg.out_dir
    _guard(lambda: run_synth(cfg, out_dir), out_dir)
    click.echo(f"wrote synthetic tables to {out_dir}")


@main.command("build-graph")
@global_options
def build_graph_cmd(config_path, seed, deterministic, out):
    """Ingest CSVs and export the typed graph directory."""
    from .graph import build_graph, save_graph_dir
    from .data import ingest_csv

    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))

    def work():
        tables = ingest_csv(cfg.data_dir)
        g = build_graph(tables, include_lab_events=cfg.include_lab_events,
                        feature_dim=cfg.feature_dim)
        target = os.path.join(cfg.out_dir, "graph")
        save_graph_dir(g, target)
        return target

    target = _guard(work, cfg.out_dir)
    click.echo(f"graph written to {target}")


@main.command()
@global_options
def pretrain(config_path, seed, deterministic, out):
    """Run translational pretraining and store the embedding checkpoint."""
    from .pipeline import resolve_data, build_pretrained_graph, _seed_streams

    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))

    def work():
        _, rng_pre, _, _ = _seed_streams(cfg.seed)
        tables, _, _ = resolve_data(cfg)
        g, params, trace = build_pretrained_graph(cfg, tables, rng_pre)
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "pretrained.ckpt")
        T.save_checkpoint(path, params)
        with open(os.path.join(cfg.out_dir, "pretrain_trace.json"), "w") as fh:
            json.dump(trace, fh)
        return path

    path = _guard(work, cfg.out_dir)
    click.echo(f"pretrained embeddings at {path}")


@main.command()
@global_options
@click.option("--tasks", type=str, default=None, help="task letters, e.g. R or RMDL")
@click.option("--lam", type=float, default=None, help="uniform-loss coefficient")
@click.option("--no-causal", is_flag=True, default=False)
@click.option("--no-task-agg", is_flag=True, default=False)
def train(config_path, seed, deterministic, out, tasks, lam, no_causal, no_task_agg):
    """Full pipeline: data, graph, pretraining, training, test metrics."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    if tasks:
        cfg.tasks = tasks
    if lam is not None:
        cfg.lam = lam
    if no_causal:
        cfg.train.causal_enabled = False
    if no_task_agg:
        cfg.train.task_agg_enabled = False
    artifacts = _guard(lambda: run_training(cfg, out_dir=cfg.out_dir), cfg.out_dir)
    click.echo(json.dumps(artifacts["metrics"]["test"], indent=2, sort_keys=True))
    click.echo(f"checkpoint: {artifacts['checkpoint']}")


@main.command("eval")
@global_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
def eval_cmd(config_path, seed, deterministic, out, checkpoint, split):
    """Evaluate a stored checkpoint on one split."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"metrics_{split}.json")
    report = _guard(lambda: run_eval(cfg, checkpoint, split, out_path=path), cfg.out_dir)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command()
@global_options
def cv(config_path, seed, deterministic, out):
    """Patient-level k-fold cross-validation with a mean/std summary."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    summary = _guard(lambda: run_cv(cfg, cfg.out_dir), cfg.out_dir)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@main.command()
@global_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--visit", "visit_id", type=str, required=True)
@click.option("-k", type=int, default=3, show_default=True)
def explain(config_path, seed, deterministic, out, checkpoint, visit_id, k):
    """Top-k attended diagnosis edges for one visit."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = _guard(lambda: run_explain(
        cfg, checkpoint, visit_id, k,
        out_path=os.path.join(cfg.out_dir, "explain.csv"),
        dump_path=os.path.join(cfg.out_dir, "explain_attention.json")), cfg.out_dir)
    for row in rows:
        click.echo(f"{row['diagnosis']}\t{row['score']:.6f}")


@main.command("export-embeddings")
@global_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
def export_embeddings(config_path, seed, deterministic, out, checkpoint):
    """Write per-node final representations as CSV for external projection."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "embeddings.csv")
    _guard(lambda: run_export_embeddings(cfg, checkpoint, path), cfg.out_dir)
    click.echo(f"embeddings at {path}")


@main.command()
@global_options
def sweep(config_path, seed, deterministic, out):
    """Grid sweep over config.sweep entries (dotted paths to value lists)."""
    cfg = _guard(lambda: _resolve(config_path, seed, deterministic, out))
    frame = _guard(lambda: run_sweep(cfg, cfg.out_dir), cfg.out_dir)
    click.echo(frame.to_string(index=False))


if __name__ == "__main__":
    main()
