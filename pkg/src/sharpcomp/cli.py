"""Command-line entry point: train, sweep, metrics, verify-bounds, correlate.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error,
5 violated bound. All randomness flows from the config seed; CSV and summary
outputs are byte-identical across reruns of the same config. Relative output
directories are resolved under $SHARPCOMP_OUT_ROOT when it is set.
"""

from __future__ import annotations

import dataclasses
import datetime
import glob
import hashlib
import json
import math
import os
import signal
import sys

import click

from . import __version__
from .datasets import build_dataset
from .errors import (ConfigError, ContractViolation, DivergenceError,
                     FormatError, SharpcompError, UndefinedCorrelationError)
from .experiments import (RunDescriptor, SweepGrid, correlation_report,
                          dump_json, run_sweep, selector_metrics,
                          standard_metric_hook, sweep_summary,
                          write_records_csv, write_scatter_csvs)
from .metrics import evaluate_record, record_bound_reports, train_subsample
from .nets import load_network_dict
from .oracles import net_hessian_trace
from .records import MetricRecord, OracleReport
from .trainer import TrainConfig, init_network, train_sgd

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_BOUND = 5


def _resolve_out_dir(out_dir: str) -> str:
    root = os.environ.get("SHARPCOMP_OUT_ROOT")
    if root and not os.path.isabs(out_dir):
        return os.path.join(root, out_dir)
    return out_dir


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if config.get("schema_version") != 1:
        raise ConfigError("config schema_version must be 1")
    return config


def _train_config(config: dict, overrides: dict) -> TrainConfig:
    section = dict(config.get("train", {}))
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    if "seed" not in section:
        section["seed"] = int(config.get("seed", 0))
    try:
        return TrainConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"unknown train config field: {exc}") from exc


def _config_hash(resolved: dict) -> str:
    payload = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _write_manifest(out_dir: str, resolved: dict, seed: int) -> None:
    manifest = {
        "schema_version": 1,
        "toolkit_version": __version__,
        "seed": seed,
        "config": resolved,
        "config_hash": _config_hash(resolved),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _record_from_dict(d: dict) -> MetricRecord:
    names = {f.name for f in dataclasses.fields(MetricRecord)} - {"bound_reports"}
    return MetricRecord(**{k: v for k, v in d.items() if k in names})


def _save_checkpoint(path: str, network, record: MetricRecord,
                     descriptor: dict) -> None:
    payload = {"format_version": 1, "descriptor": descriptor,
               "step": record.step, "network": network.save_dict(),
               "record": record.as_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_checkpoint(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if payload.get("format_version") != 1:
        raise FormatError(f"unsupported checkpoint format in {path}")
    net = load_network_dict(payload["network"])
    record = _record_from_dict(payload.get("record", {}))
    return net, record, payload.get("descriptor", {})


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        fn()
    except DivergenceError as exc:
        _fail(EXIT_DIVERGENCE, str(exc))
    except (ConfigError, ContractViolation, UndefinedCorrelationError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (FormatError, OSError) as exc:
        _fail(EXIT_IO, str(exc))
    except SharpcompError as exc:
        _fail(EXIT_CONFIG, str(exc))


@click.group()
def main():
    """Sharpness / representation-compression experiment toolkit."""
    # die quietly when output is piped into a closed reader (e.g. head)
    if hasattr(signal, "SIGPIPE"):
        signal.signal(signal.SIGPIPE, signal.SIG_DFL)


@main.command()
@click.argument("config_path", type=str)
@click.argument("out_dir", type=str)
@click.option("--lr", "lr", type=float, default=None, help="override learning rate")
@click.option("--batch-size", type=int, default=None, help="override batch size")
@click.option("--steps", type=int, default=None, help="override step count")
@click.option("--seed", type=int, default=None, help="override seed")
def train(config_path, out_dir, lr, batch_size, steps, seed):
    """Train one network; writes checkpoints, metrics.csv and a manifest."""

    def body():
        config = _load_config(config_path)
        overrides = {"learning_rate": lr, "batch_size": batch_size,
                     "steps": steps, "seed": seed}
        tc = _train_config(config, overrides)
        resolved = dict(config)
        resolved["train"] = dataclasses.asdict(tc)
        resolved["seed"] = tc.seed
        if "dataset" not in config or "arch" not in config:
            raise ConfigError("config needs 'dataset' and 'arch' sections")
        out = _resolve_out_dir(out_dir)
        os.makedirs(out, exist_ok=True)
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
        _write_manifest(out, resolved, tc.seed)

        dataset = build_dataset(config["dataset"])
        net = init_network(config["arch"], tc.seed)
        msec = config.get("metrics", {})
        hook = standard_metric_hook(dataset, tc.metric_sample_budget, tc.seed,
                                    rho=float(msec.get("rho", 0.1)),
                                    adaptive_draws=int(msec.get("adaptive_draws", 16)))
        checkpoints = train_sgd(net, dataset, tc, metric_hook=hook,
                                log_fn=click.echo)
        descriptor = RunDescriptor(index=0, learning_rate=tc.learning_rate,
                                   batch_size=tc.batch_size, seed=tc.seed,
                                   run_seed=tc.seed,
                                   arch=config["arch"].get("kind", "?"),
                                   dataset=dataset.name)
        write_records_csv(os.path.join(out, "metrics.csv"), descriptor,
                          [c.record for c in checkpoints])
        desc_dict = dataclasses.asdict(descriptor)
        for ckpt in checkpoints:
            _save_checkpoint(
                os.path.join(out, "checkpoints", f"step_{ckpt.step:08d}.json"),
                ckpt.network, ckpt.record, desc_dict)
        _save_checkpoint(os.path.join(out, "checkpoint_final.json"),
                         checkpoints[-1].network, checkpoints[-1].record,
                         desc_dict)
        summary = {"schema_version": 1, "n_checkpoints": len(checkpoints),
                   "final_step": checkpoints[-1].step,
                   "final_train_loss": checkpoints[-1].record.train_loss,
                   "interpolation": checkpoints[-1].record.interpolation_flag,
                   "bound_violation_count": sum(
                       len(c.record.violated_reports()) for c in checkpoints)}
        if msec.get("hessian_oracle", False):
            final = checkpoints[-1]
            trace = net_hessian_trace(final.network, dataset.train_inputs(),
                                      dataset.train_targets())
            final.record.hessian_trace = trace.value
            err = abs(trace.value - final.record.sharpness_approx)
            rel = err / (abs(trace.value) + 1e-300)
            summary["hessian_oracle"] = OracleReport(
                name="fd_hessian_trace_vs_sharpness", max_abs_err=err,
                max_rel_err=rel, n_points=1, tolerance=math.inf).as_dict()
            summary["hessian_trace_mode"] = trace.mode
        dump_json(summary, os.path.join(out, "summary.json"))
        click.echo(f"wrote {out}")

    _guarded(body)


@main.command()
@click.argument("config_path", type=str)
@click.argument("out_dir", type=str)
def sweep(config_path, out_dir):
    """Run the lr x batch x seed grid from the config's sweep section."""

    def body():
        config = _load_config(config_path)
        if "sweep" not in config:
            raise ConfigError("config needs a 'sweep' section")
        tc = _train_config(config, {})
        resolved = dict(config)
        resolved["train"] = dataclasses.asdict(tc)
        grid_sec = config["sweep"]
        try:
            grid = SweepGrid(learning_rates=tuple(grid_sec["learning_rates"]),
                             batch_sizes=tuple(grid_sec["batch_sizes"]),
                             seeds=tuple(grid_sec["seeds"]),
                             arch=config["arch"])
        except KeyError as exc:
            raise ConfigError(f"sweep section missing {exc}") from exc
        out = _resolve_out_dir(out_dir)
        os.makedirs(out, exist_ok=True)
        _write_manifest(out, resolved, tc.seed)
        dataset = build_dataset(config["dataset"])
        msec = config.get("metrics", {})
        results = run_sweep(grid, tc, dataset,
                            rho=float(msec.get("rho", 0.1)),
                            adaptive_draws=int(msec.get("adaptive_draws", 16)),
                            parallelism=int(config.get("parallelism", 1)))
        for res in results:
            run_dir = os.path.join(out, f"run_{res.descriptor.index:03d}")
            os.makedirs(run_dir, exist_ok=True)
            if res.completed:
                write_records_csv(os.path.join(run_dir, "metrics.csv"),
                                  res.descriptor, res.records)
                _save_checkpoint(os.path.join(run_dir, "checkpoint_final.json"),
                                 res.final_network, res.final,
                                 dataclasses.asdict(res.descriptor))
            else:
                dump_json({"diverged": True, "step": res.divergence_step,
                           "descriptor": dataclasses.asdict(res.descriptor)},
                          os.path.join(run_dir, "diverged.json"))
        table = None
        if sum(1 for r in results if r.completed) >= 3:
            table = correlation_report(results)
        dump_json(sweep_summary(results, table),
                  os.path.join(out, "summary.json"))
        n_div = sum(1 for r in results if r.diverged)
        click.echo(f"completed {len(results) - n_div}/{len(results)} runs "
                   f"({n_div} diverged); wrote {out}")

    _guarded(body)


@main.command()
@click.argument("config_path", type=str)
@click.argument("checkpoint_path", type=str)
@click.option("--selector", default="train-subsample",
              type=click.Choice(["train-subsample", "test-all",
                                 "test-misclassified"]))
@click.option("--out", "out_csv", type=str, default=None,
              help="also write the record as a one-row CSV")
def metrics(config_path, checkpoint_path, selector, out_csv):
    """Recompute the metric record for a stored checkpoint."""

    def body():
        config = _load_config(config_path)
        dataset = build_dataset(config["dataset"])
        net, _, desc = _load_checkpoint(checkpoint_path)
        msec = config.get("metrics", {})
        budget = int(config.get("train", {}).get("metric_sample_budget", 100))
        rec = selector_metrics(net, dataset, selector, budget=budget,
                               seed=int(config.get("seed", 0)),
                               rho=float(msec.get("rho", 0.1)),
                               adaptive_draws=int(msec.get("adaptive_draws", 16)))
        for name in MetricRecord.CSV_FIELDS:
            value = rec.sharpness_sqrt if name == "sharpness_sqrt" else getattr(rec, name)
            click.echo(f"{name}={value!r}")
        if out_csv:
            descriptor = RunDescriptor(
                index=0, learning_rate=float(desc.get("learning_rate", math.nan)),
                batch_size=int(desc.get("batch_size", 0)),
                seed=int(desc.get("seed", 0)), run_seed=int(desc.get("run_seed", 0)),
                arch=desc.get("arch", "?"), dataset=dataset.name)
            write_records_csv(out_csv, descriptor, [rec])

    _guarded(body)


@main.command("verify-bounds")
@click.argument("config_path", type=str)
@click.argument("checkpoint_path", type=str)
@click.option("--samples", type=int, default=None,
              help="metric sample budget (default: config value)")
def verify_bounds(config_path, checkpoint_path, samples):
    """Re-verify every inequality for a checkpoint; exit 5 on any violation.

    Also cross-checks the inequalities among the values stored in the
    checkpoint's own metric record.
    """

    def body():
        config = _load_config(config_path)
        dataset = build_dataset(config["dataset"])
        net, stored, _ = _load_checkpoint(checkpoint_path)
        budget = samples if samples is not None else \
            int(config.get("train", {}).get("metric_sample_budget", 100))
        if budget < 1:
            raise ConfigError("sample budget must be >= 1 (empty sample set)")
        seed = int(config.get("seed", 0))
        sample_set = train_subsample(dataset, budget, seed)
        x = dataset.inputs[sample_set.indices]
        y = dataset.targets[sample_set.indices]
        msec = config.get("metrics", {})
        rec = evaluate_record(net, x, y, seed=seed,
                              rho=float(msec.get("rho", 0.1)),
                              adaptive_draws=int(msec.get("adaptive_draws", 16)))
        reports = list(rec.bound_reports)
        reports.extend(record_bound_reports(stored, net.output_dim))
        violated = 0
        for report in reports:
            click.echo(report.line())
            if not report.holds:
                violated += 1
        if violated:
            _fail(EXIT_BOUND, f"{violated} bound(s) violated")
        click.echo(f"all {len(reports)} bounds hold")

    _guarded(body)


@main.command()
@click.argument("sweep_dir", type=str)
def correlate(sweep_dir):
    """Correlation table over the final records of a sweep directory."""

    def body():
        from .experiments import SweepResult

        sweep_path = _resolve_out_dir(sweep_dir)
        paths = sorted(glob.glob(os.path.join(sweep_path, "run_*",
                                              "checkpoint_final.json")))
        results = []
        for path in paths:
            _, record, desc = _load_checkpoint(path)
            descriptor = RunDescriptor(
                index=int(desc.get("index", len(results))),
                learning_rate=float(desc.get("learning_rate", math.nan)),
                batch_size=int(desc.get("batch_size", 0)),
                seed=int(desc.get("seed", 0)),
                run_seed=int(desc.get("run_seed", 0)),
                arch=desc.get("arch", "?"), dataset=desc.get("dataset", "?"))
            results.append(SweepResult(descriptor=descriptor, records=[record]))
        table = correlation_report(results)
        dump_json(sweep_summary(results, table),
                  os.path.join(sweep_path, "correlations.json"))
        write_scatter_csvs(table, sweep_path)
        width = max(len(m) for m in table.metrics)
        click.echo("pearson rho (final checkpoints, completed runs):")
        for i, a in enumerate(table.metrics):
            row = " ".join(
                "   nan" if math.isnan(table.rho[i, j]) else f"{table.rho[i, j]:+.3f}"
                for j in range(len(table.metrics)))
            click.echo(f"{a:>{width}} {row}")

    _guarded(body)


if __name__ == "__main__":
    main()
