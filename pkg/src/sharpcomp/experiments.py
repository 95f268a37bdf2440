"""Sweep orchestration (learning rate x batch size x seed), correlation
analysis across trained models, bound reports, and test-set metric
evaluation.

Runs are independent; aggregation order is fixed by grid index so outputs
are deterministic for a given base seed regardless of the parallelism
degree.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import Dataset
from .errors import (ContractViolation, DivergenceError,
                     UndefinedCorrelationError)
from .metrics import evaluate_record, train_subsample
from .nets import Network
from .records import MetricRecord
from .trainer import TrainConfig, init_network, train_sgd

CORRELATION_METRICS = ("local_dim", "sharpness_sqrt", "log_lvr_mean", "mls",
                       "nmls", "gen_gap_loss", "mls_bound", "nmls_bound",
                       "matrix_normalized_sharpness")


@dataclass(frozen=True)
class SweepGrid:
    learning_rates: tuple
    batch_sizes: tuple
    seeds: tuple
    arch: dict

    def __post_init__(self):
        if not (self.learning_rates and self.batch_sizes and self.seeds):
            raise ContractViolation("sweep grid must be non-empty on every axis")

    def points(self):
        idx = 0
        for lr in self.learning_rates:
            for bs in self.batch_sizes:
                for seed in self.seeds:
                    yield idx, float(lr), int(bs), int(seed)
                    idx += 1

    @property
    def size(self) -> int:
        return len(self.learning_rates) * len(self.batch_sizes) * len(self.seeds)


@dataclass
class RunDescriptor:
    index: int
    learning_rate: float
    batch_size: int
    seed: int            # grid replicate label
    run_seed: int        # derived seed all run randomness flows from
    arch: str
    dataset: str


@dataclass
class SweepResult:
    descriptor: RunDescriptor
    records: list[MetricRecord] = field(default_factory=list)
    final_network: Network | None = None
    diverged: bool = False
    divergence_step: int | None = None

    @property
    def completed(self) -> bool:
        return not self.diverged and bool(self.records)

    @property
    def final(self) -> MetricRecord | None:
        return self.records[-1] if self.records else None


def derive_run_seed(base_seed: int, seed_label: int, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), int(seed_label), int(index)])
    return int(ss.generate_state(1)[0])


def standard_metric_hook(dataset: Dataset, budget: int, seed: int,
                         rho: float = 0.1, adaptive_draws: int = 16):
    """Full-metric checkpoint hook over a fixed per-run train subsample."""
    sample_set = train_subsample(dataset, budget, seed)
    x = dataset.inputs[sample_set.indices]
    y = dataset.targets[sample_set.indices]

    def hook(net: Network, step: int, fields: dict) -> MetricRecord:
        return evaluate_record(net, x, y, step=step, rho=rho,
                               adaptive_draws=adaptive_draws, seed=seed,
                               extra=fields)

    return hook


def _execute_run(args) -> SweepResult:
    (index, lr, bs, seed_label, run_seed, arch, dataset, base_config,
     rho, adaptive_draws) = args
    desc = RunDescriptor(index=index, learning_rate=lr, batch_size=bs,
                         seed=seed_label, run_seed=run_seed,
                         arch=arch.get("kind", "?"), dataset=dataset.name)
    config = replace(base_config, learning_rate=lr, batch_size=bs, seed=run_seed)
    net = init_network(arch, run_seed)
    hook = standard_metric_hook(dataset, config.metric_sample_budget, run_seed,
                                rho=rho, adaptive_draws=adaptive_draws)
    result = SweepResult(descriptor=desc)
    try:
        checkpoints = train_sgd(net, dataset, config, metric_hook=hook)
    except DivergenceError as exc:
        result.diverged = True
        result.divergence_step = exc.step
        return result
    result.records = [c.record for c in checkpoints]
    result.final_network = checkpoints[-1].network
    return result


def run_sweep(grid: SweepGrid, base_config: TrainConfig, dataset: Dataset,
              rho: float = 0.1, adaptive_draws: int = 16,
              parallelism: int = 1) -> list[SweepResult]:
    """Train one model per grid point; failures are isolated per run and
    recorded, never aborting the sweep."""
    jobs = [(index, lr, bs, seed,
             derive_run_seed(base_config.seed, seed, index), grid.arch,
             dataset, base_config, rho, adaptive_draws)
            for index, lr, bs, seed in grid.points()]
    if parallelism <= 1:
        return [_execute_run(job) for job in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
        results = list(pool.map(_execute_run, jobs))
    return sorted(results, key=lambda r: r.descriptor.index)


# ---------------------------------------------------------------------------
# correlation analysis


def pearson(xs, ys) -> float:
    """Standard Pearson correlation; rejects short or zero-variance data."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractViolation("pearson needs two equal-length vectors")
    if xs.size < 3:
        raise UndefinedCorrelationError(f"need >= 3 points, got {xs.size}")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    vx = float(np.sum(xc * xc))
    vy = float(np.sum(yc * yc))
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("zero variance in correlation input")
    rho = float(np.sum(xc * yc) / math.sqrt(vx * vy))
    return min(1.0, max(-1.0, rho))


@dataclass
class CorrelationTable:
    metrics: tuple
    rho: np.ndarray        # symmetric, unit diagonal; NaN when undefined
    n: np.ndarray          # finite pairs used per entry
    scatter: dict          # (a, b) -> (xs, ys) arrays

    def get(self, a: str, b: str) -> float:
        return float(self.rho[self.metrics.index(a), self.metrics.index(b)])


def correlation_report(results: list[SweepResult],
                       metrics: tuple = CORRELATION_METRICS,
                       strict: bool = False) -> CorrelationTable:
    """Pairwise Pearson correlations of final-checkpoint metrics across
    completed runs. Non-finite values are dropped pairwise; in strict mode a
    zero-variance pair raises instead of recording NaN."""
    finals = [r.final for r in results if r.completed]
    if len(finals) < 3:
        raise UndefinedCorrelationError(
            f"need >= 3 completed runs, got {len(finals)}")
    columns = {}
    for name in metrics:
        columns[name] = np.array([getattr(rec, name) for rec in finals],
                                 dtype=np.float64)
    k = len(metrics)
    rho = np.eye(k)
    n = np.full((k, k), len(finals), dtype=np.intp)
    scatter = {}
    for i in range(k):
        for j in range(i + 1, k):
            xs, ys = columns[metrics[i]], columns[metrics[j]]
            ok = np.isfinite(xs) & np.isfinite(ys)
            n[i, j] = n[j, i] = int(np.sum(ok))
            scatter[(metrics[i], metrics[j])] = (xs[ok], ys[ok])
            try:
                value = pearson(xs[ok], ys[ok])
            except UndefinedCorrelationError:
                if strict:
                    raise
                value = math.nan
            rho[i, j] = rho[j, i] = value
    return CorrelationTable(metrics=tuple(metrics), rho=rho, n=n, scatter=scatter)


# ---------------------------------------------------------------------------
# test-set evaluation


def testset_metrics(net: Network, dataset: Dataset, *, seed: int = 0,
                    rho: float = 0.1, adaptive_draws: int = 16, step: int = 0):
    """Recompute all metrics on the full test split and on its misclassified
    subset (argmax mismatch). Returns (record_all, record_mis); record_mis is
    None when test accuracy is perfect."""
    if not len(dataset.test_idx):
        raise ContractViolation("dataset has an empty test split")
    x = dataset.test_inputs()
    y = dataset.test_targets()
    rec_all = evaluate_record(net, x, y, step=step, rho=rho,
                              adaptive_draws=adaptive_draws, seed=seed)
    if not dataset.one_hot:
        return rec_all, None
    out = net.predict(x)
    mis = np.argmax(out, axis=1) != np.argmax(y, axis=1)
    if not np.any(mis):
        return rec_all, None
    rec_mis = evaluate_record(net, x[mis], y[mis], step=step, rho=rho,
                              adaptive_draws=adaptive_draws, seed=seed)
    return rec_all, rec_mis


def selector_metrics(net: Network, dataset: Dataset, selector: str, *,
                     budget: int = 100, seed: int = 0, rho: float = 0.1,
                     adaptive_draws: int = 16, step: int = 0) -> MetricRecord:
    """Metric record for one named sample selector."""
    if selector == "train-subsample":
        sample_set = train_subsample(dataset, budget, seed)
        x = dataset.inputs[sample_set.indices]
        y = dataset.targets[sample_set.indices]
        return evaluate_record(net, x, y, step=step, rho=rho,
                               adaptive_draws=adaptive_draws, seed=seed)
    if selector == "test-all":
        rec, _ = testset_metrics(net, dataset, seed=seed, rho=rho,
                                 adaptive_draws=adaptive_draws, step=step)
        return rec
    if selector == "test-misclassified":
        _, rec = testset_metrics(net, dataset, seed=seed, rho=rho,
                                 adaptive_draws=adaptive_draws, step=step)
        if rec is None:
            raise ContractViolation("no misclassified test samples")
        return rec
    raise ContractViolation(f"unknown selector {selector!r}")


# ---------------------------------------------------------------------------
# deterministic file output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


RUN_PREFIX_FIELDS = ("step", "lr", "batch", "seed", "arch", "dataset")


def records_csv_lines(descriptor: RunDescriptor,
                      records: list[MetricRecord]) -> list[str]:
    body_fields = [f for f in MetricRecord.CSV_FIELDS if f != "step"]
    lines = [",".join(RUN_PREFIX_FIELDS + tuple(body_fields))]
    for rec in records:
        prefix = [str(rec.step), repr(descriptor.learning_rate),
                  str(descriptor.batch_size), str(descriptor.seed),
                  descriptor.arch, descriptor.dataset]
        body = []
        for name in body_fields:
            v = rec.sharpness_sqrt if name == "sharpness_sqrt" else getattr(rec, name)
            body.append(_fmt(v))
        lines.append(",".join(prefix + body))
    return lines


def write_records_csv(path, descriptor: RunDescriptor,
                      records: list[MetricRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(records_csv_lines(descriptor, records)) + "\n")


def write_scatter_csvs(table: CorrelationTable, out_dir) -> list[str]:
    import os

    paths = []
    for (a, b), (xs, ys) in sorted(table.scatter.items()):
        path = os.path.join(out_dir, f"scatter_{a}_vs_{b}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"{a},{b}\n")
            for xv, yv in zip(xs, ys):
                fh.write(f"{xv!r},{yv!r}\n")
        paths.append(path)
    return paths


def sweep_summary(results: list[SweepResult],
                  table: CorrelationTable | None) -> dict:
    violations = []
    for r in results:
        for rec in r.records:
            for report in rec.violated_reports():
                violations.append({"run": r.descriptor.index, "step": rec.step,
                                   "name": report.name, "lhs": report.lhs,
                                   "rhs": report.rhs})
    summary = {
        "schema_version": 1,
        "n_runs": len(results),
        "n_completed": sum(1 for r in results if r.completed),
        "n_diverged": sum(1 for r in results if r.diverged),
        "diverged_runs": [{"run": r.descriptor.index,
                           "step": r.divergence_step}
                          for r in results if r.diverged],
        "bound_violation_count": len(violations),
        "bound_violations": violations,
    }
    if table is not None:
        summary["correlations"] = {
            "metrics": list(table.metrics),
            "rho": [[None if math.isnan(v) else v for v in row]
                    for row in table.rho.tolist()],
            "n_pairs": table.n.tolist(),
        }
    return summary


def dump_json(obj, path) -> None:
    """Canonical JSON emission so identical inputs give identical bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
