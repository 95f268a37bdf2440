"""Feedforward networks (dense / conv / activation / residual blocks) with
exact per-sample Jacobians computed by reverse sweeps.

Layers operate on batches of flattened row vectors. The same vector-Jacobian
machinery serves two callers: the trainer backpropagates one loss cotangent
per sample, and ``jacobians`` backpropagates one cotangent per output
coordinate of a single replicated sample, which yields the full input
Jacobian, every tail-map Jacobian, and per-parameter gradient norms in one
pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, StructureError
from .records import BoundReport

EQ4_TOL = 1e-9


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: bind() fixes shapes, forward/vjp operate on (n, dim) rows."""

    in_dim: int
    out_dim: int

    def bind(self, in_dim: int) -> int:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def vjp_x(self, cache, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp_with_grads(self, cache, g: np.ndarray):
        """Return (input cotangents, gradients aligned with param_blocks())."""
        return self.vjp_x(cache, g), []

    def param_blocks(self) -> list[np.ndarray]:
        return []

    def param_sq(self, cache, g: np.ndarray):
        """Per-row squared gradient sums: (weight_sq, bias_sq, theta^2-weighted_sq).

        Rows of g are independent cotangents; squares are summed entrywise
        over explicit per-row gradients so downstream identity checks compare
        genuinely accumulated quantities.
        """
        return 0.0, 0.0, 0.0

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.param_blocks())

    def to_dict(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, w, b=None):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ContractViolation("dense weight must be 2-D (out, in)")
        self.b = None if b is None else np.ascontiguousarray(b, dtype=np.float64)
        if self.b is not None and self.b.shape != (self.w.shape[0],):
            raise ContractViolation("dense bias shape must match output dim")

    def bind(self, in_dim: int) -> int:
        if in_dim != self.w.shape[1]:
            raise ContractViolation(
                f"dense layer expects input dim {self.w.shape[1]}, got {in_dim}")
        self.in_dim = in_dim
        self.out_dim = self.w.shape[0]
        return self.out_dim

    def forward(self, x):
        y = x @ self.w.T
        if self.b is not None:
            y = y + self.b
        return y, x

    def vjp_x(self, cache, g):
        return g @ self.w

    def vjp_with_grads(self, cache, g):
        gw = g.T @ cache
        grads = [gw]
        if self.b is not None:
            grads.append(g.sum(axis=0))
        return g @ self.w, grads

    def param_blocks(self):
        return [self.w] if self.b is None else [self.w, self.b]

    def effective_input_norm(self, x: np.ndarray) -> float:
        """Per-sample normalizer linking the weight-gradient norm back to the
        post-affine Jacobian: ||grad_W f||_F >= eff * ||J||_F. For a dense
        layer this is exactly ||x||_2."""
        return float(np.linalg.norm(x))

    def param_sq(self, cache, g):
        # explicit per-row outer products (rows, out, in)
        per_row = g[:, :, None] * cache[:, None, :]
        wsq = float(np.sum(per_row ** 2))
        weighted = float(np.sum((self.w[None] * per_row) ** 2))
        bsq = 0.0
        if self.b is not None:
            bsq = float(np.sum(g ** 2))
            weighted += float(np.sum((self.b[None] * g) ** 2))
        return wsq, bsq, weighted

    def to_dict(self):
        return {"kind": "dense", "w": _arr_to_json(self.w),
                "b": None if self.b is None else _arr_to_json(self.b)}


class Conv2d(Layer):
    """2-D convolution as an explicit im2col linear operator.

    Input rows are flattened (c_in, h, w) images; output rows are flattened
    (c_out, h_out, w_out) maps. Symmetric zero padding, integer stride.
    """

    def __init__(self, kernels, b=None, stride: int = 1, padding: int = 0,
                 input_shape=(1, 1, 1)):
        self.kernels = np.ascontiguousarray(kernels, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise ContractViolation("conv kernels must be 4-D (c_out, c_in, kh, kw)")
        self.b = None if b is None else np.ascontiguousarray(b, dtype=np.float64)
        if self.b is not None and self.b.shape != (self.kernels.shape[0],):
            raise ContractViolation("conv bias shape must match c_out")
        if stride < 1 or padding < 0:
            raise ContractViolation("conv stride must be >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)
        self.input_shape = tuple(int(d) for d in input_shape)

    def bind(self, in_dim: int) -> int:
        c_in, h, w = self.input_shape
        if c_in * h * w != in_dim:
            raise ContractViolation(
                f"conv input shape {self.input_shape} does not match dim {in_dim}")
        c_out, kc, kh, kw = self.kernels.shape
        if kc != c_in:
            raise ContractViolation("kernel input channels do not match input shape")
        s, p = self.stride, self.padding
        hp, wp = h + 2 * p, w + 2 * p
        if hp < kh or wp < kw:
            raise ContractViolation("kernel larger than padded input")
        self.h_out = (hp - kh) // s + 1
        self.w_out = (wp - kw) // s + 1
        self.out_shape = (c_out, self.h_out, self.w_out)
        self.in_dim = in_dim
        self.out_dim = c_out * self.h_out * self.w_out
        self._kmat = self.kernels.reshape(c_out, -1)
        # gather index: padded flat pixel per (output position, kernel element)
        pix = np.arange(c_in * hp * wp).reshape(c_in, hp, wp)
        n_pos = self.h_out * self.w_out
        q_dim = c_in * kh * kw
        idx = np.empty((n_pos, q_dim), dtype=np.intp)
        pos = 0
        for oy in range(self.h_out):
            for ox in range(self.w_out):
                q = 0
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            idx[pos, q] = pix[ci, oy * s + ky, ox * s + kx]
                            q += 1
                pos += 1
        self._idx = idx
        self._padded_size = c_in * hp * wp
        self._unpad_idx = pix[:, p:p + h, p:p + w].ravel()
        return self.out_dim

    def _patches(self, x):
        padded = np.zeros((x.shape[0], self._padded_size))
        padded[:, self._unpad_idx] = x
        return padded[:, self._idx]

    def forward(self, x):
        patches = self._patches(x)
        y3 = np.einsum("npq,oq->nop", patches, self._kmat)
        if self.b is not None:
            y3 = y3 + self.b[None, :, None]
        return y3.reshape(x.shape[0], self.out_dim), patches

    def vjp_x(self, cache, g):
        n = g.shape[0]
        g3 = g.reshape(n, self.out_shape[0], -1)
        gpatch = np.einsum("nop,oq->npq", g3, self._kmat)
        padded = np.zeros((n, self._padded_size))
        np.add.at(padded, (np.arange(n)[:, None, None], self._idx[None, :, :]), gpatch)
        return padded[:, self._unpad_idx]

    def vjp_with_grads(self, cache, g):
        n = g.shape[0]
        g3 = g.reshape(n, self.out_shape[0], -1)
        gk = np.einsum("nop,npq->oq", g3, cache).reshape(self.kernels.shape)
        grads = [gk]
        if self.b is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return self.vjp_x(cache, g), grads

    def param_blocks(self):
        return [self.kernels] if self.b is None else [self.kernels, self.b]

    def param_sq(self, cache, g):
        n = g.shape[0]
        g3 = g.reshape(n, self.out_shape[0], -1)
        gk_rows = np.einsum("nop,npq->noq", g3, cache)
        wsq = float(np.sum(gk_rows ** 2))
        weighted = float(np.sum((self._kmat[None] * gk_rows) ** 2))
        bsq = 0.0
        if self.b is not None:
            gb_rows = g3.sum(axis=2)
            bsq = float(np.sum(gb_rows ** 2))
            weighted += float(np.sum((self.b[None] * gb_rows) ** 2))
        return wsq, bsq, weighted

    def effective_input_norm(self, x: np.ndarray) -> float:
        """Smallest singular value of this input's patch matrix.

        Weight sharing breaks the dense identity ||grad_K f||_F =
        ||J||_F ||x||_2; what survives is ||grad_K f||_F >= sigma_min(P(x))
        ||J||_F with P(x) the (positions x kernel-entries) patch matrix, and
        sigma_min reduces to ||x||_2 for a dense layer. Returns 0 when the
        patch matrix is structurally rank-deficient (more positions than
        kernel entries), in which case no finite bound exists.
        """
        patches = self._patches(np.asarray(x, dtype=np.float64)[None, :])[0]
        n_pos, q_dim = patches.shape
        if n_pos > q_dim:
            return 0.0
        return float(np.linalg.svd(patches, compute_uv=False)[-1])

    # implicit-operator handles for spectral norm (bias excluded)
    def matvec(self, v):
        patches = self._patches(v[None, :])
        return np.einsum("npq,oq->nop", patches, self._kmat).reshape(-1)

    def rmatvec(self, u):
        return self.vjp_x(None, u[None, :])[0]

    def to_dict(self):
        return {"kind": "conv2d", "kernels": _arr_to_json(self.kernels),
                "b": None if self.b is None else _arr_to_json(self.b),
                "stride": self.stride, "padding": self.padding,
                "input_shape": list(self.input_shape)}


_ACTIVATIONS = ("tanh", "relu", "sigmoid")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Activation(Layer):
    def __init__(self, fn: str):
        if fn not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {fn!r}")
        self.fn = fn

    def bind(self, in_dim: int) -> int:
        self.in_dim = self.out_dim = in_dim
        return in_dim

    def forward(self, x):
        if self.fn == "tanh":
            return np.tanh(x), x
        if self.fn == "relu":
            return np.maximum(x, 0.0), x
        return _sigmoid(x), x

    def _deriv(self, x):
        if self.fn == "tanh":
            t = np.tanh(x)
            return 1.0 - t * t
        if self.fn == "relu":
            # derivative 0 at exactly 0 (deterministic subgradient choice)
            return (x > 0).astype(np.float64)
        s = _sigmoid(x)
        return s * (1.0 - s)

    def vjp_x(self, cache, g):
        return g * self._deriv(cache)

    def to_dict(self):
        return {"kind": "activation", "fn": self.fn}


class ResidualBlock(Layer):
    """x + inner(x); the inner stack must preserve the input shape."""

    def __init__(self, inner: list[Layer]):
        if not inner:
            raise ContractViolation("residual block needs at least one inner layer")
        self.inner = list(inner)

    def bind(self, in_dim: int) -> int:
        cur = in_dim
        for layer in self.inner:
            cur = layer.bind(cur)
        if cur != in_dim:
            raise ContractViolation(
                f"residual inner output dim {cur} != input dim {in_dim}")
        self.in_dim = self.out_dim = in_dim
        return in_dim

    def forward(self, x):
        caches = []
        cur = x
        for layer in self.inner:
            cur, c = layer.forward(cur)
            caches.append(c)
        return x + cur, caches

    def vjp_x(self, cache, g):
        gi = g
        for layer, c in zip(reversed(self.inner), reversed(cache)):
            gi = layer.vjp_x(c, gi)
        return g + gi

    def vjp_with_grads(self, cache, g):
        gi = g
        rev_grads = []
        for layer, c in zip(reversed(self.inner), reversed(cache)):
            gi, grads = layer.vjp_with_grads(c, gi)
            rev_grads.append(grads)
        flat = []
        for grads in reversed(rev_grads):
            flat.extend(grads)
        return g + gi, flat

    def param_blocks(self):
        blocks = []
        for layer in self.inner:
            blocks.extend(layer.param_blocks())
        return blocks

    def to_dict(self):
        return {"kind": "residual", "inner": [l.to_dict() for l in self.inner]}


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered layer stack with validated shape chaining."""

    def __init__(self, layers: list[Layer], input_dim: int):
        if not layers:
            raise ContractViolation("network needs at least one layer")
        self.layers = list(layers)
        self.input_dim = int(input_dim)
        cur = self.input_dim
        for layer in self.layers:
            cur = layer.bind(cur)
        self.output_dim = cur
        self._linear_positions = [i for i, l in enumerate(self.layers)
                                  if isinstance(l, (Dense, Conv2d))]

    @property
    def linear_layer_count(self) -> int:
        return len(self._linear_positions)

    def linear_layers(self) -> list[tuple[int, Layer]]:
        """Top-level Dense/Conv layers in forward order (layers inside
        residual blocks are handled by the residual-specific bound)."""
        return [(i, self.layers[i]) for i in self._linear_positions]

    @property
    def output_dim_exceeds_input(self) -> bool:
        return self.output_dim > self.input_dim

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def forward_batch(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ContractViolation(
                f"input dim {x.shape[1]} does not match network input {self.input_dim}")
        caches = []
        layer_inputs = []
        cur = x
        for i, layer in enumerate(self.layers):
            if i in self._linear_positions or isinstance(layer, ResidualBlock):
                layer_inputs.append(cur)
            else:
                layer_inputs.append(None)
            cur, c = layer.forward(cur)
            caches.append(c)
        return cur, caches, layer_inputs

    def predict(self, x: np.ndarray) -> np.ndarray:
        y, _, _ = self.forward_batch(x)
        return y

    def param_vector(self) -> np.ndarray:
        blocks = [b.ravel() for l in self.layers for b in l.param_blocks()]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def set_param_vector(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.n_params:
            raise ContractViolation("parameter vector has the wrong length")
        offset = 0
        for layer in self.layers:
            for b in layer.param_blocks():
                b[...] = v[offset:offset + b.size].reshape(b.shape)
                offset += b.size

    def clone(self) -> "Network":
        return load_network_dict(self.save_dict())

    def save_dict(self) -> dict:
        return {"format_version": 1, "input_dim": self.input_dim,
                "layers": [l.to_dict() for l in self.layers]}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.save_dict(), fh, indent=1)
            fh.write("\n")


# ---------------------------------------------------------------------------
# traces and jacobian bundles


@dataclass
class ForwardTrace:
    """Per-sample forward pass record: inputs to every top-level linear layer
    (layer_inputs[0] is the raw network input when the first layer is linear),
    inputs to every residual block, and the output."""

    x: np.ndarray
    layer_inputs: list[np.ndarray]
    block_inputs: list[np.ndarray]
    output: np.ndarray


@dataclass
class JacobianBundle:
    """All sample-level derivative data used by the metric layer.

    j_input is the N x M input Jacobian; j_layer[l] the Jacobian of the
    output with respect to the input of the l-th top-level linear layer;
    j_first_post the Jacobian with respect to the first linear layer's
    post-affine output. Squared Frobenius norms are summed over output
    coordinates; biases are excluded from the per-layer weight norms and from
    res_block_weight_grad_sq but included in param_grad_sq_fro.
    """

    j_input: np.ndarray
    j_layer: list[np.ndarray]
    j_first_post: np.ndarray | None
    param_grad_sq_fro: float
    per_layer_weight_grad_sq_fro: list[float]
    bias_grad_sq_fro: float
    inner_weight_grad_sq_fro: float
    weighted_param_grad_sq: float
    res_block_weight_grad_sq: list[float] = field(default_factory=list)


def forward(net: Network, x) -> ForwardTrace:
    """Single-sample forward pass capturing every linear layer's input."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y, _, layer_inputs = net.forward_batch(x[None, :])
    lin_inputs = [layer_inputs[i][0].copy() for i in net._linear_positions]
    block_inputs = [layer_inputs[i][0].copy() for i, l in enumerate(net.layers)
                    if isinstance(l, ResidualBlock)]
    return ForwardTrace(x=x.copy(), layer_inputs=lin_inputs,
                        block_inputs=block_inputs, output=y[0].copy())


def jacobians(net: Network, x) -> JacobianBundle:
    """Exact Jacobians and gradient norms for one sample.

    One forward pass on the sample replicated N times, then a single reverse
    sweep with the identity as the output cotangent matrix (one row per
    output coordinate).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n_out = net.output_dim
    x_rep = np.repeat(x[None, :], n_out, axis=0)
    _, caches, _ = net.forward_batch(x_rep)

    g = np.eye(n_out)
    first_pos = net._linear_positions[0] if net._linear_positions else None
    n_linear = len(net._linear_positions)
    j_layer: list = [None] * n_linear
    per_layer_wsq = [0.0] * n_linear
    j_first_post = None
    total_wsq = 0.0
    total_bsq = 0.0
    total_weighted = 0.0
    inner_wsq_total = 0.0
    res_block_wsq_rev = []

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        if isinstance(layer, (Dense, Conv2d)):
            wsq, bsq, weighted = layer.param_sq(cache, g)
            total_wsq += wsq
            total_bsq += bsq
            total_weighted += weighted
            li = net._linear_positions.index(i)
            per_layer_wsq[li] = wsq
            if i == first_pos:
                j_first_post = g.copy()
            g = layer.vjp_x(cache, g)
            j_layer[li] = g.copy()
        elif isinstance(layer, ResidualBlock):
            gi = g
            first_inner_wsq = None
            for inner, c in zip(reversed(layer.inner), reversed(cache)):
                if isinstance(inner, (Dense, Conv2d)):
                    wsq, bsq, weighted = inner.param_sq(c, gi)
                    inner_wsq_total += wsq
                    total_bsq += bsq
                    total_weighted += weighted
                    first_inner_wsq = wsq  # last linear visited = first in forward order
                gi = inner.vjp_x(c, gi)
            g = g + gi
            res_block_wsq_rev.append(first_inner_wsq)
        else:
            g = layer.vjp_x(cache, g)

    bundle = JacobianBundle(
        j_input=g.copy(),
        j_layer=j_layer,
        j_first_post=j_first_post,
        param_grad_sq_fro=total_wsq + inner_wsq_total + total_bsq,
        per_layer_weight_grad_sq_fro=per_layer_wsq,
        bias_grad_sq_fro=total_bsq,
        inner_weight_grad_sq_fro=inner_wsq_total,
        weighted_param_grad_sq=total_weighted,
        res_block_weight_grad_sq=[w for w in reversed(res_block_wsq_rev)
                                  if w is not None],
    )
    if not np.all(np.isfinite(bundle.j_input)):
        raise ContractViolation("input Jacobian contains non-finite entries")
    return bundle


def identity_eq4_check(net: Network, x) -> BoundReport:
    """Verify ||grad_W f||_F == ||J||_F * ||x||_2 for the first dense layer,
    with J the Jacobian with respect to that layer's post-affine output.
    Both sides come from independently accumulated quantities."""
    if not net._linear_positions or net._linear_positions[0] != 0 or \
            not isinstance(net.layers[0], Dense):
        raise StructureError("eq4 identity requires the first layer to be dense")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bundle = jacobians(net, x)
    lhs = math.sqrt(bundle.per_layer_weight_grad_sq_fro[0])
    rhs = float(np.linalg.norm(bundle.j_first_post) * np.linalg.norm(x))
    diff = abs(lhs - rhs)
    holds = diff <= EQ4_TOL * max(abs(lhs), abs(rhs)) + 1e-300
    return BoundReport(name="eq4_identity", lhs=lhs, rhs=rhs, holds=holds,
                       tol_rel=EQ4_TOL, note="equality check")


# ---------------------------------------------------------------------------
# serialization (hex floats keep checkpoints exact and byte-stable)


def _arr_to_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "hex": [v.hex() for v in a.ravel().tolist()]}


def _arr_from_json(d: dict) -> np.ndarray:
    vals = np.array([float.fromhex(h) for h in d["hex"]], dtype=np.float64)
    return vals.reshape(d["shape"])


def _layer_from_dict(d: dict) -> Layer:
    kind = d.get("kind")
    if kind == "dense":
        return Dense(_arr_from_json(d["w"]),
                     None if d["b"] is None else _arr_from_json(d["b"]))
    if kind == "conv2d":
        return Conv2d(_arr_from_json(d["kernels"]),
                      None if d["b"] is None else _arr_from_json(d["b"]),
                      stride=d["stride"], padding=d["padding"],
                      input_shape=tuple(d["input_shape"]))
    if kind == "activation":
        return Activation(d["fn"])
    if kind == "residual":
        return ResidualBlock([_layer_from_dict(x) for x in d["inner"]])
    raise ContractViolation(f"unknown layer kind {kind!r}")


def load_network_dict(d: dict) -> Network:
    if d.get("format_version") != 1:
        raise ContractViolation(f"unsupported network format {d.get('format_version')!r}")
    return Network([_layer_from_dict(x) for x in d["layers"]], d["input_dim"])


def load_network(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return load_network_dict(json.load(fh))
