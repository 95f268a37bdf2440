"""Vanilla SGD training on the quadratic loss with checkpoint scheduling,
interpolation detection, and metric-record emission hooks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import Dataset
from .errors import ConfigError, ContractViolation, DivergenceError
from .metrics import accuracy, mse_loss
from .nets import Activation, Conv2d, Dense, Network, ResidualBlock
from .records import MetricRecord

DIVERGENCE_LOSS = 1e6


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 20
    steps: int = 1000
    eval_every: int = 200
    seed: int = 0
    eps_interp: float = 1e-4
    metric_sample_budget: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eps_interp <= 0:
            raise ConfigError("eps_interp must be positive")
        if self.metric_sample_budget < 1:
            raise ConfigError("metric_sample_budget must be >= 1")


@dataclass
class Checkpoint:
    step: int
    network: Network   # immutable snapshot
    record: MetricRecord


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def init_network(arch_spec: dict, seed: int) -> Network:
    """Build and initialize a network; weights and biases are uniform in
    [-1/sqrt(fan_in), 1/sqrt(fan_in)], deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    kind = arch_spec.get("kind")
    if kind == "mlp":
        widths = [int(w) for w in arch_spec["widths"]]
        if len(widths) < 2:
            raise ConfigError("mlp needs at least input and output widths")
        act = arch_spec.get("activation", "tanh")
        use_bias = bool(arch_spec.get("bias", True))
        layers: list = []
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            bound = 1.0 / math.sqrt(fan_in)
            b = _uniform(rng, bound, widths[i + 1]) if use_bias else None
            layers.append(Dense(_uniform(rng, bound, (widths[i + 1], fan_in)), b))
            if i < len(widths) - 2:
                layers.append(Activation(act))
        return Network(layers, widths[0])
    if kind == "lenet_small":
        c, h, w = (int(d) for d in arch_spec.get("input_shape", (1, 28, 28)))
        out_dim = int(arch_spec["out_dim"])
        act = arch_spec.get("activation", "tanh")

        def conv(c_in, c_out, shape):
            bound = 1.0 / math.sqrt(c_in * 25)
            return Conv2d(_uniform(rng, bound, (c_out, c_in, 5, 5)),
                          _uniform(rng, bound, c_out), stride=2, padding=0,
                          input_shape=shape)

        conv1 = conv(c, 4, (c, h, w))
        h1, w1 = (h - 5) // 2 + 1, (w - 5) // 2 + 1
        if h1 < 5 or w1 < 5:
            raise ConfigError("lenet_small input too small for two 5x5 convs")
        conv2 = conv(4, 8, (4, h1, w1))
        h2, w2 = (h1 - 5) // 2 + 1, (w1 - 5) // 2 + 1
        flat = 8 * h2 * w2
        bound = 1.0 / math.sqrt(flat)
        dense1 = Dense(_uniform(rng, bound, (32, flat)), _uniform(rng, bound, 32))
        bound = 1.0 / math.sqrt(32)
        dense2 = Dense(_uniform(rng, bound, (out_dim, 32)),
                       _uniform(rng, bound, out_dim))
        return Network([conv1, Activation(act), conv2, Activation(act),
                        dense1, Activation(act), dense2], c * h * w)
    if kind == "resmlp":
        widths = [int(w) for w in arch_spec["widths"]]
        if len(widths) < 2:
            raise ConfigError("resmlp needs at least input and output widths")
        dim = widths[0]
        if any(w != dim for w in widths[:-1]):
            raise ConfigError("resmlp block widths must all equal the input dim")
        act = arch_spec.get("activation", "tanh")
        bound = 1.0 / math.sqrt(dim)
        layers = []
        for _ in range(len(widths) - 2):
            inner = [Dense(_uniform(rng, bound, (dim, dim)),
                           _uniform(rng, bound, dim)), Activation(act)]
            layers.append(ResidualBlock(inner))
        layers.append(Dense(_uniform(rng, bound, (widths[-1], dim)),
                            _uniform(rng, bound, widths[-1])))
        return Network(layers, dim)
    raise ConfigError(f"unknown architecture {kind!r}")


# ---------------------------------------------------------------------------
# training


def _sgd_step(net: Network, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
    out, caches, _ = net.forward_batch(xb)
    m = xb.shape[0]
    g = (out - yb) / m
    batch_loss = 0.5 * float(np.sum((out - yb) ** 2)) / m
    updates = []
    for i in range(len(net.layers) - 1, -1, -1):
        g, grads = net.layers[i].vjp_with_grads(caches[i], g)
        updates.append((net.layers[i], grads))
    for layer, grads in updates:
        for block, grad in zip(layer.param_blocks(), grads):
            block -= lr * grad
    return batch_loss


def basic_record(net: Network, dataset: Dataset, step: int,
                 eps_interp: float) -> dict:
    """Loss/accuracy fields every checkpoint record carries (full-batch loss,
    not the minibatch estimate)."""
    train_out = net.predict(dataset.train_inputs())
    train_loss = mse_loss(train_out, dataset.train_targets())
    fields = {
        "step": step,
        "train_loss": train_loss,
        "interpolation_flag": bool(train_loss <= eps_interp),
    }
    if dataset.one_hot:
        fields["train_acc"] = accuracy(train_out, dataset.train_targets())
    if len(dataset.test_idx):
        test_out = net.predict(dataset.test_inputs())
        fields["test_loss"] = mse_loss(test_out, dataset.test_targets())
        fields["gen_gap_loss"] = fields["test_loss"] - train_loss
        if dataset.one_hot:
            fields["test_acc"] = accuracy(test_out, dataset.test_targets())
            fields["gen_gap_acc"] = fields["train_acc"] - fields["test_acc"]
    return fields


def train_sgd(net: Network, dataset: Dataset, config: TrainConfig,
              metric_hook=None, log_fn=None) -> list[Checkpoint]:
    """Plain SGD (no momentum, no weight decay) on the quadratic loss.

    Batches are without-replacement shuffled epochs, reshuffled per epoch
    from the run seed. The metric hook receives an immutable snapshot and the
    basic loss fields every eval_every steps and at the final step; with no
    hook the record carries the basic fields only. Divergence (non-finite or
    > 1e6 loss) aborts with the offending step.
    """
    x = dataset.train_inputs()
    y = dataset.train_targets()
    if x.shape[1] != net.input_dim or y.shape[1] != net.output_dim:
        raise ContractViolation("dataset shapes do not match the network")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5D6]))
    n = x.shape[0]
    order = rng.permutation(n)
    cursor = 0
    checkpoints = []
    for step in range(1, config.steps + 1):
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        batch_loss = _sgd_step(net, x[idx], y[idx], config.learning_rate)
        if not math.isfinite(batch_loss) or batch_loss > DIVERGENCE_LOSS:
            raise DivergenceError(step=step, loss=batch_loss)
        if step % config.eval_every == 0 or step == config.steps:
            snapshot = net.clone()
            fields = basic_record(snapshot, dataset, step, config.eps_interp)
            if not math.isfinite(fields["train_loss"]) or \
                    fields["train_loss"] > DIVERGENCE_LOSS:
                raise DivergenceError(step=step, loss=fields["train_loss"])
            if metric_hook is not None:
                record = metric_hook(snapshot, step, fields)
            else:
                record = MetricRecord(**fields)
            checkpoints.append(Checkpoint(step=step, network=snapshot,
                                          record=record))
            if log_fn is not None:
                log_fn(f"step={step} loss={fields['train_loss']:.6e}")
    return checkpoints


# ---------------------------------------------------------------------------
# sklearn-style facade


class SGDNetRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn estimator wrapping the MLP trainer.

    fit(X, y) trains a tanh MLP with plain SGD on the quadratic loss;
    checkpoints (with loss fields) are kept on ``checkpoints_``.
    """

    def __init__(self, hidden=(16,), activation="tanh", learning_rate=0.1,
                 batch_size=20, steps=2000, eval_every=500, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.eval_every = eval_every
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y2 = y.reshape(-1, 1) if y.ndim == 1 else y
        self._y_was_1d = y.ndim == 1
        widths = [X.shape[1], *[int(h) for h in self.hidden], y2.shape[1]]
        net = init_network({"kind": "mlp", "widths": widths,
                            "activation": self.activation}, self.seed)
        dataset = Dataset(name="fit", inputs=X, targets=y2,
                          train_idx=np.arange(X.shape[0]),
                          test_idx=np.arange(0), one_hot=False)
        config = TrainConfig(learning_rate=self.learning_rate,
                             batch_size=self.batch_size, steps=self.steps,
                             eval_every=self.eval_every, seed=self.seed)
        self.checkpoints_ = train_sgd(net, dataset, config)
        self.network_ = net
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X)
        out = self.network_.predict(X)
        return out[:, 0] if self._y_was_1d else out
