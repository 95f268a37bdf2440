"""Report and record types shared by the metric, oracle and experiment layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields


def leq_with_slack(lhs: float, rhs: float, rel: float = 1e-9, absolute: float = 1e-12) -> bool:
    """lhs <= rhs up to a relative slack on the larger magnitude.

    -inf on the left holds against anything; NaN on either side never holds.
    """
    if math.isnan(lhs) or math.isnan(rhs):
        return False
    if lhs == float("-inf") or rhs == float("inf"):
        return True
    return lhs - rhs <= rel * max(abs(lhs), abs(rhs)) + absolute


@dataclass
class BoundReport:
    """One verified inequality instance: lhs <= rhs within tolerance."""

    name: str
    lhs: float
    rhs: float
    holds: bool
    tol_rel: float = 1e-9
    note: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @classmethod
    def check(cls, name: str, lhs: float, rhs: float, tol_rel: float = 1e-9,
              note: str = "") -> "BoundReport":
        return cls(name=name, lhs=lhs, rhs=rhs,
                   holds=leq_with_slack(lhs, rhs, rel=tol_rel), tol_rel=tol_rel, note=note)

    def line(self) -> str:
        status = "holds" if self.holds else "VIOLATED"
        return (f"{self.name}: lhs={self.lhs!r} rhs={self.rhs!r} "
                f"slack={self.slack!r} {status}")


@dataclass
class OracleReport:
    """Agreement summary between an analytic path and its independent oracle."""

    name: str
    max_abs_err: float
    max_rel_err: float
    n_points: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def as_dict(self) -> dict:
        return {"name": self.name, "max_abs_err": self.max_abs_err,
                "max_rel_err": self.max_rel_err, "n_points": self.n_points,
                "tolerance": self.tolerance, "passed": self.passed}


@dataclass
class MetricRecord:
    """Scalar metrics for one checkpoint.

    Log-domain fields hold natural logs; -inf marks pseudo-determinant
    underflow (counted in ``n_underflow``). ``local_dim`` is NaN when every
    sample had a zero Jacobian.
    """

    step: int = 0
    train_loss: float = math.nan
    test_loss: float = math.nan
    train_acc: float = math.nan
    test_acc: float = math.nan
    sharpness_approx: float = math.nan
    hessian_trace: float | None = None
    log_lvr_mean: float = math.nan        # mean of log dvol
    lvr_mean_log: float = math.nan        # log of mean dvol (bounded quantity)
    nvr_log: float = math.nan
    mls: float = math.nan
    nmls: float = math.nan
    local_dim: float = math.nan
    mls_bound: float = math.nan
    nmls_bound: float = math.nan
    lvr_bound_log: float = math.nan
    nvr_bound_log: float = math.nan
    chain_a: float = math.nan
    chain_b: float = math.nan
    chain_c: float = math.nan
    chain_d: float = math.nan
    adaptive_sharpness: float = math.nan
    adaptive_sharpness_analytic: float = math.nan
    normalized_mls: float = math.nan
    input_invariant_mls: float = math.nan
    matrix_norm_mls: float = math.nan             # lhs of the per-layer normalized chain
    matrix_normalized_sharpness: float = math.nan  # rhs; the sharpness-like side
    gen_gap_loss: float = math.nan
    gen_gap_acc: float = math.nan
    interpolation_flag: bool = False
    output_dim_exceeds_input: bool = False
    n_samples: int = 0
    n_excluded_zero_norm: int = 0
    n_underflow: int = 0
    n_dpr_missing: int = 0
    n_mc_discarded: int = 0
    bound_reports: list[BoundReport] = field(default_factory=list, repr=False)

    # Column order for CSV output; bound_reports is summarised separately.
    CSV_FIELDS = (
        "step", "train_loss", "test_loss", "train_acc", "test_acc",
        "sharpness_approx", "sharpness_sqrt", "hessian_trace",
        "log_lvr_mean", "lvr_mean_log", "nvr_log", "mls", "nmls", "local_dim",
        "mls_bound", "nmls_bound", "lvr_bound_log", "nvr_bound_log",
        "chain_a", "chain_b", "chain_c", "chain_d",
        "adaptive_sharpness", "adaptive_sharpness_analytic",
        "normalized_mls", "input_invariant_mls",
        "matrix_norm_mls", "matrix_normalized_sharpness",
        "gen_gap_loss", "gen_gap_acc",
        "interpolation_flag", "output_dim_exceeds_input",
        "n_samples", "n_excluded_zero_norm", "n_underflow", "n_dpr_missing",
        "n_mc_discarded",
    )

    @property
    def sharpness_sqrt(self) -> float:
        s = self.sharpness_approx
        return math.sqrt(s) if s >= 0 else math.nan

    def violated_reports(self) -> list[BoundReport]:
        return [r for r in self.bound_reports if not r.holds]

    def as_dict(self) -> dict:
        d = {}
        for f in fields(self):
            if f.name == "bound_reports":
                continue
            d[f.name] = getattr(self, f.name)
        return d
