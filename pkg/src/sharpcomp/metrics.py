"""Scalar metrics and bound right-hand sides computed from Jacobian bundles
and network weights: sharpness, volumetric ratios, local sensitivities,
participation-ratio dimensionality, the relaxation chains, and the adaptive
and normalized variants.

All operations are pure over an immutable network snapshot; per-sample work
uses fixed-order reductions so results do not depend on scheduling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ContractViolation, StructureError
from .nets import (Conv2d, Dense, ForwardTrace, JacobianBundle, Network,
                   ResidualBlock, forward, jacobians)
from .records import BoundReport, MetricRecord

ZERO_NORM_FLOOR = 1e-12
BOUND_TOL = 1e-9


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Quadratic loss (1/2n) sum_i ||y_i - t_i||^2."""
    diff = np.asarray(outputs) - np.asarray(targets)
    return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))


def net_mse(net: Network, inputs, targets) -> float:
    return mse_loss(net.predict(np.asarray(inputs, dtype=np.float64)), targets)


def accuracy(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Argmax agreement; only meaningful for one-hot targets."""
    return float(np.mean(np.argmax(outputs, axis=1) == np.argmax(targets, axis=1)))


@dataclass(frozen=True)
class SampleSet:
    """Indices into a dataset plus the selector that produced them."""

    indices: np.ndarray
    selector: str  # train-subsample | test-all | test-misclassified

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ContractViolation("sample set is empty")


def train_subsample(dataset, budget: int, seed: int) -> SampleSet:
    """Deterministic metric subsample of the train split (same set at every
    checkpoint of a run)."""
    idx = np.asarray(dataset.train_idx)
    if len(idx) > budget:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A11]))
        idx = idx[np.sort(rng.choice(len(idx), size=budget, replace=False))]
    return SampleSet(indices=idx, selector="train-subsample")


# ---------------------------------------------------------------------------
# per-checkpoint sample analysis


@dataclass
class SampleAnalysis:
    """Traces, Jacobian bundles and weight norms for a retained sample set.

    Samples whose input or any top-level linear-layer input has (near-)zero
    norm are excluded up front and counted, so every metric and bound below
    sees the same sample set.
    """

    net: Network
    inputs: np.ndarray                      # retained samples, one row each
    targets: np.ndarray | None
    traces: list[ForwardTrace]
    bundles: list[JacobianBundle]
    w_norms: list[float]                    # spectral norms, top-level linear layers
    n_excluded: int
    _eff_norms: np.ndarray | None = None

    @classmethod
    def collect(cls, net: Network, inputs, targets=None) -> "SampleAnalysis":
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if inputs.shape[0] == 0:
            raise ContractViolation("empty sample set")
        targets = None if targets is None else np.atleast_2d(np.asarray(targets))
        keep_rows, traces, bundles = [], [], []
        excluded = 0
        for i in range(inputs.shape[0]):
            x = inputs[i]
            if np.linalg.norm(x) < ZERO_NORM_FLOOR:
                excluded += 1
                continue
            tr = forward(net, x)
            if any(np.linalg.norm(v) < ZERO_NORM_FLOOR for v in tr.layer_inputs) or \
                    any(np.linalg.norm(v) < ZERO_NORM_FLOOR for v in tr.block_inputs):
                excluded += 1
                continue
            keep_rows.append(i)
            traces.append(tr)
            bundles.append(jacobians(net, x))
        if not keep_rows:
            raise ContractViolation("all samples excluded by the zero-norm filter")
        return cls(net=net,
                   inputs=inputs[keep_rows],
                   targets=None if targets is None else targets[keep_rows],
                   traces=traces, bundles=bundles,
                   w_norms=weight_spectral_norms(net),
                   n_excluded=excluded)

    @property
    def n(self) -> int:
        return len(self.bundles)

    @property
    def first_layer_is_linear(self) -> bool:
        return isinstance(self.net.layers[0], (Dense, Conv2d))

    def input_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(t.x) for t in self.traces])

    def layer_eff_norms(self) -> np.ndarray:
        """(n, L) effective input norms for every top-level linear layer.

        The per-sample normalizer each weight-gradient bound needs:
        ||x^l||_2 for dense layers, the smallest patch-matrix singular value
        for convolutions (0 when no finite bound exists; the corresponding
        bound degenerates to +inf and holds vacuously).
        """
        if self._eff_norms is None:
            layers = [layer for _, layer in self.net.linear_layers()]
            self._eff_norms = np.array(
                [[layer.effective_input_norm(v)
                  for layer, v in zip(layers, t.layer_inputs)]
                 for t in self.traces])
        return self._eff_norms

    def first_eff_norms(self) -> np.ndarray:
        return self.layer_eff_norms()[:, 0]

    def first_weight_grad_norms_sq(self) -> np.ndarray:
        return np.array([b.per_layer_weight_grad_sq_fro[0] for b in self.bundles])

    def param_grad_norms_sq(self) -> np.ndarray:
        return np.array([b.param_grad_sq_fro for b in self.bundles])


def weight_spectral_norms(net: Network) -> list[float]:
    """||W_l||_2 for every top-level linear layer; convolutions use power
    iteration on the full layer operator, never the kernel matrix."""
    norms = []
    for _, layer in net.linear_layers():
        if isinstance(layer, Dense):
            norms.append(linalg.spectral_norm_dense(layer.w))
        else:
            # Conv spectra cluster near the top; run far past the default
            # budget and tolerate a hit cap: with near-tied leading singular
            # values the Rayleigh estimate is accurate long before the
            # iterate settles, so the cap residual overstates the error.
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                norms.append(linalg.spectral_norm_operator(
                    layer.matvec, layer.rmatvec, layer.in_dim, layer.out_dim,
                    tol=1e-12, max_iter=4000))
    return norms


# ---------------------------------------------------------------------------
# core metrics


def sharpness_approx(bundles: list[JacobianBundle]) -> float:
    """Interpolation-regime sharpness: mean squared Frobenius norm of the
    per-sample parameter Jacobian (biases included)."""
    if not bundles:
        raise ContractViolation("empty sample set")
    return float(np.mean([b.param_grad_sq_fro for b in bundles]))


def lvr_stats(bundles: list[JacobianBundle]) -> tuple[float, float, int]:
    """(mean of log dvol, log of mean dvol, underflow count).

    The second aggregate is the quantity the volumetric-ratio bound applies
    to; the first is what the trend plots track.
    """
    logs = np.array([linalg.log_pseudo_det_gram(b.j_input) for b in bundles])
    n_under = int(np.sum(np.isneginf(logs)))
    log_mean = linalg.log_mean_exp(logs)
    mean_log = float("-inf") if n_under else float(np.mean(logs))
    return mean_log, log_mean, n_under


def lvr_bound_log(analysis: SampleAnalysis, sharpness: float) -> float:
    """Log of the volumetric-ratio bound
    (1/n) sqrt(sum_i ||W||^2N / eff_i^2N) * (n S / N)^(N/2)."""
    if not analysis.first_layer_is_linear:
        raise StructureError("volumetric bound needs a linear first layer")
    n = analysis.n
    n_out = analysis.net.output_dim
    log_w = _safe_log(analysis.w_norms[0])
    log_eff = np.array([_safe_log(v) for v in analysis.first_eff_norms()])
    half_sum = 0.5 * _log_sum_exp(2.0 * n_out * (log_w - log_eff))
    if math.isinf(half_sum) and half_sum > 0:
        return float("inf")
    return (-math.log(n) + half_sum
            + 0.5 * n_out * (math.log(n) + _safe_log(sharpness) - math.log(n_out)))


def nvr_stats(bundles: list[JacobianBundle]) -> tuple[float, int]:
    """(log of the network volumetric ratio, underflow count): the summed
    tail-map volumetric ratios over top-level linear layers."""
    logs = []
    for b in bundles:
        for j in b.j_layer:
            logs.append(linalg.log_pseudo_det_gram(j))
    if not logs:
        raise StructureError("network has no top-level linear layer")
    logs = np.array(logs)
    n_under = int(np.sum(np.isneginf(logs)))
    return float(_log_sum_exp(logs) - math.log(len(bundles))), n_under


def nvr_bound_log(analysis: SampleAnalysis, sharpness: float) -> float:
    n = analysis.n
    n_out = analysis.net.output_dim
    log_terms = []
    eff = analysis.layer_eff_norms()
    for l, w in enumerate(analysis.w_norms):
        log_w = _safe_log(w)
        log_terms.extend(2.0 * n_out * (log_w - np.array(
            [_safe_log(v) for v in eff[:, l]])))
    half_sum = 0.5 * _log_sum_exp(np.array(log_terms))
    if math.isinf(half_sum) and half_sum > 0:
        return float("inf")
    return (-math.log(n) + half_sum
            + 0.5 * n_out * (math.log(n) + _safe_log(sharpness) - math.log(n_out)))


def mls(bundles: list[JacobianBundle]) -> float:
    """Mean largest singular value of the input Jacobian."""
    if not bundles:
        raise ContractViolation("empty sample set")
    return float(np.mean([_sigma_max(b.j_input) for b in bundles]))


def mls_bound(analysis: SampleAnalysis, sharpness: float) -> float:
    if not analysis.first_layer_is_linear:
        raise StructureError("sensitivity bound needs a linear first layer")
    inv_sq = float(np.mean(_inv_sq(analysis.first_eff_norms())))
    return float(analysis.w_norms[0] * math.sqrt(inv_sq) * math.sqrt(sharpness))


def nmls(bundles: list[JacobianBundle]) -> float:
    """Per-sample sum over top-level linear layers of the tail-map spectral
    norms, averaged over samples."""
    if not bundles:
        raise ContractViolation("empty sample set")
    if not bundles[0].j_layer:
        raise StructureError("network has no top-level linear layer")
    return float(np.mean([sum(_sigma_max(j) for j in b.j_layer) for b in bundles]))


def nmls_bound(analysis: SampleAnalysis, sharpness: float) -> float:
    w = np.asarray(analysis.w_norms)
    ratios = (w[None, :] ** 2) * _inv_sq(analysis.layer_eff_norms())
    return float(math.sqrt(np.mean(np.sum(ratios, axis=1))) * math.sqrt(sharpness))


def local_dimensionality(bundles: list[JacobianBundle]) -> tuple[float, int]:
    """Mean participation ratio (sum lam)^2 / sum lam^2 of the output
    covariance spectrum; samples with an all-zero Jacobian are skipped and
    counted (the ratio is 0/0 there)."""
    terms = []
    missing = 0
    for b in bundles:
        lam = _sigma_max_all(b.j_input) ** 2
        total = float(np.sum(lam))
        if total <= 0.0:
            missing += 1
            continue
        d = total * total / float(np.sum(lam * lam))
        terms.append(min(max(d, 1.0), b.j_input.shape[0]))
    return (float(np.mean(terms)) if terms else math.nan), missing


def chain_abcd(analysis: SampleAnalysis, sharpness: float):
    """The three-step relaxation from mean spectral norm to the sharpness
    bound; returns (a, b, c, d) and one report per step."""
    if not analysis.first_layer_is_linear:
        raise StructureError("relaxation chain needs a linear first layer")
    w1 = analysis.w_norms[0]
    eff = analysis.first_eff_norms()
    wg = np.sqrt(analysis.first_weight_grad_norms_sq())
    a = mls(analysis.bundles)
    if np.any(eff <= 0.0):
        b = c = d = float("inf")
    else:
        inv_sq = float(np.mean(1.0 / eff ** 2))
        b = float(w1 * np.mean(wg / eff))
        c = float(w1 * math.sqrt(inv_sq) * math.sqrt(np.mean(wg ** 2)))
        d = float(w1 * math.sqrt(inv_sq) * math.sqrt(sharpness))
    reports = [BoundReport.check("chain_a_le_b", a, b, BOUND_TOL),
               BoundReport.check("chain_b_le_c", b, c, BOUND_TOL),
               BoundReport.check("chain_c_le_d", c, d, BOUND_TOL)]
    return a, b, c, d, reports


def k_norm_chain(analysis: SampleAnalysis, k: float) -> list[BoundReport]:
    """The three-link gradient-norm chain with exponent k: mean spectral^k
    <= mean Frobenius^k <= scaled first-layer gradient term <= scaled
    full-parameter gradient term."""
    if k <= 0:
        raise ContractViolation("chain exponent must be positive")
    if not analysis.first_layer_is_linear:
        raise StructureError("k-norm chain needs a linear first layer")
    eff_min = float(np.min(analysis.first_eff_norms()))
    w1 = analysis.w_norms[0]
    spec = np.array([_sigma_max(b.j_input) for b in analysis.bundles])
    fro = np.array([np.linalg.norm(b.j_input) for b in analysis.bundles])
    wg = np.sqrt(analysis.first_weight_grad_norms_sq())
    pg = np.sqrt(analysis.param_grad_norms_sq())
    t1 = float(np.mean(spec ** k))
    t2 = float(np.mean(fro ** k))
    pref = (w1 / eff_min) ** k if eff_min > 0 else float("inf")
    t3 = float(pref * np.mean(wg ** k))
    t4 = float(pref * np.mean(pg ** k))
    tag = f"k_norm_chain[k={k:g}]"
    return [BoundReport.check(f"{tag}:spectral_le_frobenius", t1, t2, BOUND_TOL),
            BoundReport.check(f"{tag}:frobenius_le_first_layer", t2, t3, BOUND_TOL),
            BoundReport.check(f"{tag}:first_layer_le_all_params", t3, t4, BOUND_TOL)]


# ---------------------------------------------------------------------------
# adaptive / normalized variants


@dataclass
class AdaptiveSharpness:
    estimate: float      # Monte-Carlo value at finite rho
    analytic: float      # interpolation-limit value sum_j |w_j|^2 ||grad_j f||^2
    n_discarded: int


def adaptive_sharpness_analytic(bundles: list[JacobianBundle]) -> float:
    if not bundles:
        raise ContractViolation("empty sample set")
    return float(np.mean([b.weighted_param_grad_sq for b in bundles]))


def adaptive_sharpness_estimate(net: Network, inputs, targets, rho: float = 0.1,
                                n_draws: int = 32, seed: int = 0,
                                bundles: list[JacobianBundle] | None = None,
                                ) -> AdaptiveSharpness:
    """Elementwise-adaptive sharpness (2/rho^2) E[L(w + delta) - L(w)] with
    delta ~ N(0, rho^2 diag(|w|^2)), plus its analytic rho->0 limit.

    Draws producing a non-finite loss are discarded and counted.
    """
    if rho <= 0 or n_draws < 1:
        raise ContractViolation("rho must be positive and n_draws >= 1")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    theta = net.param_vector()
    work = net.clone()
    base = net_mse(net, inputs, targets)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAD4F]))
    vals = []
    discarded = 0
    for _ in range(n_draws):
        delta = rho * np.abs(theta) * rng.standard_normal(theta.size)
        work.set_param_vector(theta + delta)
        loss = net_mse(work, inputs, targets)
        if not math.isfinite(loss):
            discarded += 1
            continue
        vals.append((2.0 / rho ** 2) * (loss - base))
    if bundles is None:
        bundles = [jacobians(net, x) for x in inputs]
    analytic = adaptive_sharpness_analytic(bundles)
    estimate = float(np.mean(vals)) if vals else math.nan
    return AdaptiveSharpness(estimate=estimate, analytic=analytic,
                             n_discarded=discarded)


def input_invariant_mls(bundles: list[JacobianBundle], inputs) -> float:
    """Mean over samples of sum_p ||column p of the input Jacobian||^2 x_p^2."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if len(bundles) != inputs.shape[0]:
        raise ContractViolation("bundle/sample count mismatch")
    vals = [float(np.sum(np.sum(b.j_input ** 2, axis=0) * x ** 2))
            for b, x in zip(bundles, inputs)]
    return float(np.mean(vals))


def prop_e_scale(net: Network) -> int:
    """The Cauchy-Schwarz expansion count in the adaptive-sharpness bound:
    the first dense layer's output dimension (the contracted index of J W).
    The derivation needs unshared first-layer weights, so only dense-first
    networks qualify."""
    if not isinstance(net.layers[0], Dense):
        raise StructureError("adaptive bound needs a dense first layer")
    return net.layers[0].out_dim


def normalized_mls(net: Network, inputs, mode: str = "exact",
                   bundles: list[JacobianBundle] | None = None,
                   restarts: int = 3, steps: int = 100, seed: int = 0) -> float:
    """Input-norm-weighted squared sensitivity (1/n) sum ||x||^2 ||grad_x f||_2^2.

    exact: spectral norms from the analytic Jacobian. ascent: Jacobian-free
    estimate that maximises ||f(x+delta)-f(x)||/||delta|| over perturbations
    of radius 1e-3 ||x|| by projected gradient ascent (3 restarts x 100 steps)
    and reports the best secant ratio re-evaluated at a vanishing radius, so
    it estimates the directional derivative and never exceeds the exact value.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if mode == "exact":
        if bundles is None:
            bundles = [jacobians(net, x) for x in inputs]
        vals = [float(np.linalg.norm(x) ** 2 * _sigma_max(b.j_input) ** 2)
                for x, b in zip(inputs, bundles)]
        return float(np.mean(vals))
    if mode != "ascent":
        raise ContractViolation(f"unknown normalized-MLS mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x45C3]))
    vals = []
    for x in inputs:
        xn = float(np.linalg.norm(x))
        if xn < ZERO_NORM_FLOOR:
            vals.append(0.0)
            continue
        radius = 1e-3 * xn
        y0 = net.predict(x[None])[0]
        best_ratio = 0.0
        for _ in range(restarts):
            delta = rng.standard_normal(x.size)
            delta *= radius / np.linalg.norm(delta)
            for _ in range(steps):
                diff = net.predict((x + delta)[None])[0] - y0
                dn = float(np.linalg.norm(diff))
                if dn == 0.0:
                    delta = rng.standard_normal(x.size)
                    delta *= radius / np.linalg.norm(delta)
                    continue
                grad = 2.0 * (jacobians(net, x + delta).j_input.T @ diff)
                gn = float(np.linalg.norm(grad))
                if gn == 0.0:
                    break
                delta = radius * grad / gn
            direction = delta / radius
            # secant at a vanishing radius approaches the directional derivative
            r_eval = 1e-4 * radius
            diff = net.predict((x + r_eval * direction)[None])[0] - y0
            best_ratio = max(best_ratio, float(np.linalg.norm(diff)) / r_eval)
        vals.append(xn ** 2 * best_ratio ** 2)
    return float(np.mean(vals))


def matrix_normalized_sharpness(analysis: SampleAnalysis):
    """Per-layer normalized sensitivity against the matrix-normalized
    sharpness: sum_l xbar^l mls^l <= sum_l ||W_l||_2 sqrt(mean ||grad_Wl f||_F^2).

    Returns (lhs, rhs, report)."""
    eff = analysis.layer_eff_norms()
    if eff.shape[1] == 0:
        raise StructureError("network has no top-level linear layer")
    lhs = 0.0
    rhs = 0.0
    for l, w in enumerate(analysis.w_norms):
        mean_inv = float(np.mean(_inv_sq(eff[:, l])))
        xbar = mean_inv ** -0.5 if math.isfinite(mean_inv) else 0.0
        mls_l = float(np.mean([_sigma_max(b.j_layer[l]) for b in analysis.bundles]))
        wg_sq = float(np.mean([b.per_layer_weight_grad_sq_fro[l]
                               for b in analysis.bundles]))
        lhs += xbar * mls_l
        rhs += w * math.sqrt(wg_sq)
    report = BoundReport.check("matrix_normalized_sharpness", lhs, rhs, BOUND_TOL)
    return lhs, rhs, report


def residual_bound_check(analysis: SampleAnalysis) -> BoundReport:
    """Telescoped residual-layer bound: mean spectral norm of the input
    Jacobian minus the last layer's spectral norm is bounded by the summed
    per-block weight-gradient terms."""
    net = analysis.net
    blocks = [l for l in net.layers[:-1] if isinstance(l, ResidualBlock)]
    if not blocks or len(blocks) != len(net.layers) - 1:
        raise StructureError(
            "residual bound needs residual blocks followed by one final dense layer")
    if not isinstance(net.layers[-1], Dense):
        raise StructureError("residual bound needs a final dense layer")
    for blk in blocks:
        if not isinstance(blk.inner[0], Dense):
            raise StructureError("each residual block must start with a dense layer")
    w_last = linalg.spectral_norm_dense(net.layers[-1].w)
    w_blocks = [linalg.spectral_norm_dense(blk.inner[0].w) for blk in blocks]
    lhs_terms = []
    rhs_terms = []
    for tr, b in zip(analysis.traces, analysis.bundles):
        if len(b.res_block_weight_grad_sq) != len(blocks):
            raise StructureError("residual gradient records do not match blocks")
        lhs_terms.append(_sigma_max(b.j_input) - w_last)
        rhs_terms.append(sum(
            (w_blocks[i] / np.linalg.norm(tr.block_inputs[i]))
            * math.sqrt(b.res_block_weight_grad_sq[i])
            for i in range(len(blocks))))
    return BoundReport.check("residual_telescope", float(np.mean(lhs_terms)),
                             float(np.mean(rhs_terms)), BOUND_TOL)


# ---------------------------------------------------------------------------
# record assembly


def evaluate_record(net: Network, inputs, targets=None, *, step: int = 0,
                    rho: float = 0.1, adaptive_draws: int = 32, seed: int = 0,
                    chain_exponents=(1.0, 2.0, 4.0), extra: dict | None = None,
                    ) -> MetricRecord:
    """Compute every applicable metric and inequality report for one
    checkpoint on one sample set. ``extra`` fields (losses, step, flags
    supplied by the caller) are merged into the record."""
    analysis = SampleAnalysis.collect(net, inputs, targets)
    rec = MetricRecord(step=step)
    rec.n_samples = analysis.n
    rec.n_excluded_zero_norm = analysis.n_excluded
    rec.output_dim_exceeds_input = net.output_dim_exceeds_input
    reports: list[BoundReport] = []

    s = sharpness_approx(analysis.bundles)
    rec.sharpness_approx = s
    rec.log_lvr_mean, rec.lvr_mean_log, under_in = lvr_stats(analysis.bundles)
    rec.nvr_log, under_layers = nvr_stats(analysis.bundles)
    rec.n_underflow = under_in + under_layers
    rec.mls = mls(analysis.bundles)
    rec.nmls = nmls(analysis.bundles)
    rec.local_dim, rec.n_dpr_missing = local_dimensionality(analysis.bundles)
    rec.adaptive_sharpness_analytic = adaptive_sharpness_analytic(analysis.bundles)
    rec.nmls_bound = nmls_bound(analysis, s)
    rec.nvr_bound_log = nvr_bound_log(analysis, s)
    reports.append(BoundReport.check("nvr_le_bound", rec.nvr_log,
                                     rec.nvr_bound_log, BOUND_TOL, note="log domain"))
    reports.append(BoundReport.check("nmls_le_bound", rec.nmls, rec.nmls_bound,
                                     BOUND_TOL))

    if analysis.first_layer_is_linear:
        rec.mls_bound = mls_bound(analysis, s)
        rec.lvr_bound_log = lvr_bound_log(analysis, s)
        reports.append(BoundReport.check("lvr_le_bound", rec.lvr_mean_log,
                                         rec.lvr_bound_log, BOUND_TOL,
                                         note="log domain"))
        reports.append(BoundReport.check("mls_le_bound", rec.mls, rec.mls_bound,
                                         BOUND_TOL))
        a, b, c, d, chain_reports = chain_abcd(analysis, s)
        rec.chain_a, rec.chain_b, rec.chain_c, rec.chain_d = a, b, c, d
        reports.extend(chain_reports)
        for k in chain_exponents:
            reports.extend(k_norm_chain(analysis, k))
        rec.input_invariant_mls = input_invariant_mls(analysis.bundles,
                                                      analysis.inputs)
        if isinstance(net.layers[0], Dense):
            reports.append(BoundReport.check(
                "input_invariant_mls_le_scaled_adaptive",
                rec.input_invariant_mls,
                prop_e_scale(net) * rec.adaptive_sharpness_analytic, BOUND_TOL))
            reports.append(_eq4_report(analysis))

    lhs, rhs, mns_report = matrix_normalized_sharpness(analysis)
    rec.matrix_norm_mls = lhs
    rec.matrix_normalized_sharpness = rhs
    reports.append(mns_report)

    rec.normalized_mls = normalized_mls(net, analysis.inputs, mode="exact",
                                        bundles=analysis.bundles)

    if analysis.targets is not None:
        adaptive = adaptive_sharpness_estimate(
            net, analysis.inputs, analysis.targets, rho=rho,
            n_draws=adaptive_draws, seed=seed, bundles=analysis.bundles)
        rec.adaptive_sharpness = adaptive.estimate
        rec.adaptive_sharpness_analytic = adaptive.analytic
        rec.n_mc_discarded = adaptive.n_discarded

    try:
        reports.append(residual_bound_check(analysis))
    except StructureError:
        pass

    rec.bound_reports = reports
    if extra:
        for key, value in extra.items():
            setattr(rec, key, value)
    return rec


def _eq4_report(analysis: SampleAnalysis) -> BoundReport:
    """Worst per-sample deviation of ||grad_W f||_F from ||J||_F ||x||_2."""
    worst = (0.0, 0.0, 0.0)
    worst_rel = -1.0
    for tr, b in zip(analysis.traces, analysis.bundles):
        lhs = math.sqrt(b.per_layer_weight_grad_sq_fro[0])
        rhs = float(np.linalg.norm(b.j_first_post) * np.linalg.norm(tr.x))
        rel = abs(lhs - rhs) / (max(abs(lhs), abs(rhs)) + 1e-300)
        if rel > worst_rel:
            worst_rel = rel
            worst = (lhs, rhs, rel)
    holds = worst_rel <= 1e-9
    return BoundReport(name="eq4_identity", lhs=worst[0], rhs=worst[1],
                       holds=holds, tol_rel=1e-9, note="equality check")


def record_bound_reports(rec: MetricRecord, output_dim: int) -> list[BoundReport]:
    """Inequality consistency of a stored record (used when re-verifying a
    checkpoint whose metric values were persisted)."""
    reports = []

    def add(name, lhs, rhs, note=""):
        if any(isinstance(v, float) and math.isnan(v) for v in (lhs, rhs)):
            return
        reports.append(BoundReport.check(name, lhs, rhs, BOUND_TOL, note=note))

    add("stored:mls_le_bound", rec.mls, rec.mls_bound)
    add("stored:nmls_le_bound", rec.nmls, rec.nmls_bound)
    add("stored:lvr_le_bound", rec.lvr_mean_log, rec.lvr_bound_log, "log domain")
    add("stored:nvr_le_bound", rec.nvr_log, rec.nvr_bound_log, "log domain")
    add("stored:chain_a_le_b", rec.chain_a, rec.chain_b)
    add("stored:chain_b_le_c", rec.chain_b, rec.chain_c)
    add("stored:chain_c_le_d", rec.chain_c, rec.chain_d)
    add("stored:matrix_norm_mls_le_sharpness", rec.matrix_norm_mls,
        rec.matrix_normalized_sharpness)
    if not math.isnan(rec.local_dim):
        add("stored:local_dim_ge_1", 1.0, rec.local_dim)
        add("stored:local_dim_le_n", rec.local_dim, float(output_dim))
    return reports


# ---------------------------------------------------------------------------
# helpers


def _sigma_max(j: np.ndarray) -> float:
    return float(linalg.svd(j).sigma[0])


def _sigma_max_all(j: np.ndarray) -> np.ndarray:
    return linalg.svd(j).sigma[:min(j.shape)]


def _log_sum_exp(logs: np.ndarray) -> float:
    m = float(np.max(logs))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(logs - m))))


def _safe_log(v: float) -> float:
    return math.log(v) if v > 0 else float("-inf")


def _inv_sq(norms: np.ndarray) -> np.ndarray:
    """1 / norms^2 with +inf where no finite normalizer exists."""
    out = np.full(np.shape(norms), np.inf)
    positive = np.asarray(norms) > 0
    out[positive] = 1.0 / np.asarray(norms)[positive] ** 2
    return out
