"""Command-line entry points.

Every command reads the same YAML config (flags override a few common knobs),
writes its artifacts into a run directory, and exits 0 on success.  Failures
emit one machine-readable JSON error object on stderr (and error.json inside
the run directory when it exists) and exit 1.  Run outputs carry no
timestamps, so repeated runs with equal inputs are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .archspace import (
    ArchDescriptor,
    BudgetSpec,
    flops as count_flops,
    format_flops,
    group_of,
    params as count_params,
    parse_flops,
)
from .config import ConfigError, RunConfig, load_config, parse_budget_flag
from .container import write_feature_dump
from .data import DatasetHandle, load_cifar10, synth_dataset
from .rankeval import fixed_teacher_ablation, ranking_experiment
from .selector import SearchSpec, TaskKind, cache_teacher_features, search as run_search
from .supernet import build_supernet, extract_subnet, save_subnet
from .training import load_checkpoint, train as run_train

RUN_CONFIG_NAME = "effective-config.yaml"
RUN_META_NAME = "run-meta.json"


def version_string() -> str:
    """Package version, extended with `git describe` when available."""
    source_dir = Path(__file__).resolve().parent
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=source_dir, capture_output=True, text=True, timeout=5,
        )
        if described.returncode == 0:
            return f"{__version__}+g{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fail(exc: BaseException, run_dir: "Path | None" = None) -> None:
    record = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    encoded = json.dumps(record, sort_keys=True)
    print(encoded, file=sys.stderr)
    if run_dir is not None and run_dir.exists():
        (run_dir / "error.json").write_text(encoded + "\n")
    raise SystemExit(1)


def _write_run_records(run_dir: Path, config: RunConfig, command: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RUN_CONFIG_NAME).write_text(config.to_yaml())
    meta = {
        "command": command,
        "config_digest": config.digest(),
        "version": version_string(),
    }
    (run_dir / RUN_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _ssl_images(config: RunConfig) -> np.ndarray:
    data = config.data
    if data.source == "synthetic":
        return synth_dataset(data.classes, data.train_size, data.seed, "train").images
    handle = load_cifar10(data.path, "train")
    return handle.images[: data.train_size]


def _probe_handles(config: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    data = config.data
    if data.source == "synthetic":
        return (
            synth_dataset(data.classes, data.train_size, data.seed, "train"),
            synth_dataset(data.classes, data.val_size, data.seed, "val"),
        )
    train = load_cifar10(data.path, "train")
    test = load_cifar10(data.path, "test")
    return (
        DatasetHandle(train.images[: data.train_size], train.labels[: data.train_size],
                      "cifar10", "train"),
        DatasetHandle(test.images[: data.val_size], test.labels[: data.val_size],
                      "cifar10", "test"),
    )


def _target_dataset(config: RunConfig) -> DatasetHandle:
    """Unlabeled images the selector scores against; the held-out split."""
    return _probe_handles(config)[1]


def _read_descriptor(text: str) -> ArchDescriptor:
    if text.lstrip().startswith("{"):
        record = json.loads(text)
    else:
        import yaml

        record = yaml.safe_load(Path(text).read_text())
    return ArchDescriptor.from_dict(record)


def _parse_boundaries(text: str) -> tuple[int, ...]:
    """'1G:8G:1G' (start:stop:step, inclusive) or '1G,2G,3G'."""
    if ":" in text:
        start_t, stop_t, step_t = text.split(":")
        start, stop, step = parse_flops(start_t), parse_flops(stop_t), parse_flops(step_t)
        if step <= 0 or stop <= start:
            raise ValueError(f"bad boundary range {text!r}")
        return tuple(range(start, stop + 1, step))
    return tuple(parse_flops(part) for part in text.split(","))


@click.group()
@click.version_option(version=__version__, prog_name="elastic-ssl")
def main() -> None:
    """Elastic supernet SSL training and label-free architecture selection."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--iterations", type=int, default=None, help="Override train.iterations.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--resume", is_flag=True, help="Continue from the run dir's checkpoint.")
def cmd_train(config_path, run_dir, iterations, seed, resume):
    """Train the supernet and write checkpoint plus loss curve."""
    run_path = Path(run_dir)
    try:
        config = load_config(config_path)
        if iterations is not None:
            config = dataclasses.replace(
                config, train=dataclasses.replace(config.train, iterations=iterations)
            )
        if seed is not None:
            config = dataclasses.replace(
                config, train=dataclasses.replace(config.train, seed=seed)
            )
        images = _ssl_images(config)
        momentum = None
        checkpoint = run_path / "checkpoint.escf"
        if resume and checkpoint.exists():
            state, extras = load_checkpoint(checkpoint)
            momentum = extras["optimizer_momentum"]
            if state.space != config.model.space:
                raise ValueError("checkpoint model space differs from config")
        else:
            state = build_supernet(
                config.model.space,
                embed_dim=config.model.embed_dim,
                seed=config.train.seed,
                projection_hidden=config.model.projection_hidden,
            )
        _write_run_records(run_path, config, "train")
        result = run_train(
            state, images, config.train, run_dir=run_path, optimizer_momentum=momentum
        )
        if result.reports:
            first, last = result.reports[0].total, result.reports[-1].total
            click.echo(
                f"trained {len(result.reports)} iterations; "
                f"loss {first:.4f} -> {last:.4f}; checkpoint {result.checkpoint_path}"
            )
        else:
            click.echo(f"no iterations to run; checkpoint {result.checkpoint_path}")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail(exc, run_path)


@main.command("search")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--task", type=click.Choice([t.value for t in TaskKind]), default=None)
@click.option("--budget", "budget_flag", default=None,
              help="Group label '3G~4G' or explicit window 'lo:hi'.")
@click.option("--candidates", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dump-features", "dump_path", type=click.Path(), default=None,
              help="Also write the cached teacher features.")
def cmd_search(config_path, checkpoint, run_dir, task, budget_flag, candidates,
               seed, dump_path):
    """Rank sampled candidates in a budget window by teacher agreement."""
    run_path = Path(run_dir)
    try:
        config = load_config(config_path)
        settings = config.search
        budget = settings.budget_spec()
        if budget_flag is not None:
            lower, upper = parse_budget_flag(budget_flag)
            budget = BudgetSpec(lower, upper, settings.boundaries)
        state, _ = load_checkpoint(checkpoint)
        spec = SearchSpec(
            task=TaskKind(task or settings.task),
            budget=budget,
            dataset=_target_dataset(config),
            candidates=candidates if candidates is not None else settings.candidates,
            relation_temperature=settings.relation_temperature,
            seed=seed if seed is not None else settings.seed,
            batch_size=settings.batch_size,
            calibration_passes=settings.calibration_passes,
            max_sample_tries=settings.max_sample_tries,
            hw_cap=settings.hw_cap,
        )
        _write_run_records(run_path, config, "search")
        result = run_search(state, spec)
        result.save(run_path / "search-result.json")
        if dump_path is not None:
            bundles = cache_teacher_features(state, spec)
            features = {}
            index = 0
            for bundle in bundles:
                for i in range(len(bundle)):
                    one = bundle[i]
                    features[(index, "z")] = one.z.numpy()
                    for name, value in one.stages.items():
                        features[(index, name)] = value.numpy()
                    index += 1
            write_feature_dump(
                dump_path,
                {"task": spec.task.value, "count": index, "source": spec.dataset.kind},
                features,
            )
        best = result.winner
        click.echo(
            f"winner {best.descriptor.to_dict()} score {best.score:.4f} "
            f"flops {format_flops(best.flops)} group {best.group}"
        )
    except Exception as exc:  # noqa: BLE001
        _fail(exc, run_path)


@main.command("rank-eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--subnets", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--plot", is_flag=True, help="Also write a metric-vs-accuracy scatter.")
def cmd_rank_eval(config_path, checkpoint, run_dir, subnets, seed, plot):
    """Correlate the selection metric with linear-probe accuracy."""
    run_path = Path(run_dir)
    try:
        config = load_config(config_path)
        state, _ = load_checkpoint(checkpoint)
        train_data, eval_data = _probe_handles(config)
        spec = SearchSpec(
            task=TaskKind(config.search.task),
            budget=config.search.budget_spec(),
            dataset=eval_data,
            relation_temperature=config.search.relation_temperature,
            seed=seed if seed is not None else config.rank.seed,
            batch_size=config.search.batch_size,
            calibration_passes=config.search.calibration_passes,
            max_sample_tries=config.search.max_sample_tries,
            hw_cap=config.search.hw_cap,
        )
        _write_run_records(run_path, config, "rank-eval")
        report = ranking_experiment(
            state, spec, train_data, eval_data,
            n_subnets=subnets if subnets is not None else config.rank.subnets,
            probe=config.probe,
            config_digest=config.digest(),
        )
        report.save(run_path / "rank-report.json")
        report.save_table(run_path / "rank-table.tsv")
        if plot:
            report.save_plot(run_path / "rank-scatter.png")
        click.echo(f"spearman rho {report.spearman_rho:.4f} over {len(report.rows)} subnets")
    except Exception as exc:  # noqa: BLE001
        _fail(exc, run_path)


@main.command("ablate-teacher")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--seeds", default=None, help="Comma-separated, e.g. '0,1,2'.")
def cmd_ablate_teacher(config_path, run_dir, seeds):
    """Paired runs: teacher fixed at largest vs mirroring the student."""
    run_path = Path(run_dir)
    try:
        config = load_config(config_path)
        seed_list = (
            tuple(int(s) for s in seeds.split(",")) if seeds else config.ablation.seeds
        )
        images = _ssl_images(config)
        probe_train, probe_eval = _probe_handles(config)
        _write_run_records(run_path, config, "ablate-teacher")
        report = fixed_teacher_ablation(
            config.model.space,
            images,
            probe_train,
            probe_eval,
            train_config=config.train,
            probe_config=config.probe,
            seeds=seed_list,
            embed_dim=config.model.embed_dim,
            projection_hidden=config.model.projection_hidden,
        )
        report.save(run_path / "ablation-report.json")
        for row in report.rows:
            click.echo(
                f"seed {row['seed']}: fixed {row['fixed_accuracy']:.4f} "
                f"unfixed {row['unfixed_accuracy']:.4f} delta {row['delta']:+.4f}"
            )
        click.echo(f"median delta {report.median_delta:+.4f}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc, run_path)


@main.command("flops")
@click.option("--descriptor", required=True,
              help="Inline JSON or a path to a YAML/JSON descriptor file.")
@click.option("--resolution", type=int, default=32, show_default=True)
@click.option("--boundaries", default=None,
              help="Group boundaries: '1G:8G:1G' or comma list; config default otherwise.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--head", type=int, default=None, help="Classifier width replacing the projector.")
@click.option("--as-json", "as_json", is_flag=True)
def cmd_flops(descriptor, resolution, boundaries, config_path, head, as_json):
    """Analytic cost and budget-group assignment of one descriptor."""
    try:
        d = _read_descriptor(descriptor)
        config = load_config(config_path)
        bounds = (
            _parse_boundaries(boundaries)
            if boundaries is not None
            else config.search.boundaries
        )
        total = count_flops(d, resolution, head=head)
        p = count_params(
            d, head=head,
            stem_plan="imagenet" if resolution >= 64 else "small",
        )
        try:
            group = group_of(total, BudgetSpec.from_boundaries(bounds))
        except ValueError:
            group = None
        record = {
            "descriptor": d.to_dict(),
            "resolution": resolution,
            "flops": total,
            "flops_label": format_flops(total) if total % 10**6 == 0 else f"{total / 1e9:.3f}G",
            "params": p,
            "group": group,
        }
        if as_json:
            click.echo(json.dumps(record, indent=2, sort_keys=True))
        else:
            click.echo(f"flops: {total} ({total / 1e9:.3f}G at {resolution}x{resolution})")
            click.echo(f"params: {p}")
            click.echo(f"group: {group if group is not None else 'outside boundaries'}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("extract")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--descriptor", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--branch", type=click.Choice(["student", "teacher"]), default="student",
              show_default=True)
def cmd_extract(checkpoint, descriptor, out_path, branch):
    """Materialize one subnet as a standalone weight container."""
    try:
        d = _read_descriptor(descriptor)
        state, _ = load_checkpoint(checkpoint)
        subnet = extract_subnet(state, d, branch=branch)
        save_subnet(out_path, subnet)
        click.echo(f"wrote {out_path}: descriptor {d.to_dict()}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
