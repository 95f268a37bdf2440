"""Independent brute-force oracles: finite-difference Jacobians and Hessian
traces, direct determinant and characteristic-polynomial eigenvalues, and
Monte-Carlo expectations.

These deliberately share no derivative code with the analytic paths they
validate; they only ever call a network's forward pass or a loss value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .nets import Network

_EPS = np.finfo(np.float64).eps


def fd_jacobian(net: Network, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference input Jacobian with per-coordinate step h*(1+|x_k|)."""
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    jac = np.empty((net.output_dim, x.size))
    for k in range(x.size):
        step = h * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        jac[:, k] = (net.predict(xp[None])[0] - net.predict(xm[None])[0]) / (2 * step)
    return jac


def fd_tail_jacobian(net: Network, x, linear_index: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the tail map from the given top-level
    linear layer's input to the network output."""
    from .nets import forward as net_forward

    trace = net_forward(net, x)
    xl = trace.layer_inputs[linear_index]
    pos = net._linear_positions[linear_index]
    tail = net.layers[pos:]

    def tail_eval(v):
        cur = v[None, :]
        for layer in tail:
            cur, _ = layer.forward(cur)
        return cur[0]

    jac = np.empty((net.output_dim, xl.size))
    for k in range(xl.size):
        step = h * (1.0 + abs(xl[k]))
        vp = xl.copy()
        vm = xl.copy()
        vp[k] += step
        vm[k] -= step
        jac[:, k] = (tail_eval(vp) - tail_eval(vm)) / (2 * step)
    return jac


@dataclass
class HessianTraceResult:
    value: float
    flagged: int      # entries whose FD noise estimate exceeded 1e-3 relative
    mode: str         # "exact" or "hutchinson"


def fd_hessian_trace(loss_of_params, theta: np.ndarray, h: float = 1e-4,
                     max_exact_params: int = 2000, n_probes: int = 64,
                     seed: int = 0) -> HessianTraceResult:
    """Trace of the Hessian of a scalar loss by central second differences.

    Exact per-coordinate mode for <= max_exact_params parameters, otherwise
    Hutchinson with Rademacher probes and pure function-value directional
    second differences. ``loss_of_params`` maps a parameter vector to the
    loss; theta is not mutated.
    """
    theta = np.asarray(theta, dtype=np.float64).copy()
    m = theta.size
    loss0 = float(loss_of_params(theta))
    if m <= max_exact_params:
        entries = np.empty(m)
        noise = np.empty(m)
        for j in range(m):
            hj = h * (1.0 + abs(theta[j]))
            tp = theta.copy()
            tm = theta.copy()
            tp[j] += hj
            tm[j] -= hj
            lp = float(loss_of_params(tp))
            lm = float(loss_of_params(tm))
            entries[j] = (lp - 2.0 * loss0 + lm) / (hj * hj)
            noise[j] = _EPS * (abs(lp) + 2.0 * abs(loss0) + abs(lm)) / (hj * hj)
        floor = float(np.median(np.abs(entries)))
        flagged = int(np.sum(noise > 1e-3 * np.maximum(np.abs(entries), floor)))
        return HessianTraceResult(value=float(np.sum(entries)), flagged=flagged,
                                  mode="exact")
    rng = np.random.default_rng(np.random.SeedSequence([seed, m]))
    hd = h * (1.0 + float(np.max(np.abs(theta))))
    est = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.integers(0, 2, size=m) * 2.0 - 1.0
        lp = float(loss_of_params(theta + hd * v))
        lm = float(loss_of_params(theta - hd * v))
        est[i] = (lp - 2.0 * loss0 + lm) / (hd * hd)
    return HessianTraceResult(value=float(np.mean(est)), flagged=0,
                              mode="hutchinson")


def net_hessian_trace(net: Network, inputs, targets, h: float = 1e-4,
                      max_exact_params: int = 2000, n_probes: int = 64,
                      seed: int = 0) -> HessianTraceResult:
    """Hessian trace of the MSE training loss L = (1/2n) sum ||f(x)-y||^2."""
    work = net.clone()
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    def loss_of(theta):
        work.set_param_vector(theta)
        diff = work.predict(inputs) - targets
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))

    return fd_hessian_trace(loss_of, net.param_vector(), h=h,
                            max_exact_params=max_exact_params,
                            n_probes=n_probes, seed=seed)


def mc_expectation(sampler, statistic, n_draws: int, seed: int = 0):
    """Mean and standard error of statistic(sampler(rng)) over n_draws draws."""
    if n_draws < 2:
        raise ContractViolation("mc_expectation needs at least 2 draws")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    vals = np.empty(n_draws)
    for i in range(n_draws):
        vals[i] = float(statistic(sampler(rng)))
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n_draws))


def det_direct(a) -> float:
    """Determinant by cofactor expansion (small matrices only)."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractViolation("determinant needs a square matrix")
    if n > 8:
        raise ContractViolation("cofactor determinant limited to n <= 8")
    if n == 1:
        return float(a[0, 0])
    if n == 2:
        return float(a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0])
    det = 0.0
    cols = list(range(n))
    for j in range(n):
        minor = a[1:][:, [c for c in cols if c != j]]
        det += ((-1.0) ** j) * a[0, j] * det_direct(minor)
    return float(det)


def charpoly_eigenvalues(a) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via Faddeev-LeVerrier characteristic
    polynomial coefficients and companion-matrix root finding. Independent of
    the symmetric eigensolver it validates."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a))))
    b = a / scale
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    mk = np.zeros_like(b)
    for k in range(1, n + 1):
        mk = b @ mk + coeffs[k - 1] * np.eye(n)
        coeffs[k] = -np.trace(b @ mk) / k
    roots = np.roots(coeffs)
    return np.sort(np.real(roots))[::-1] * scale
