import numpy as np
import pytest

from sharpcomp.nets import Activation, Conv2d, Dense, Network, ResidualBlock

# one line per acceptance criterion, echoed in the terminal summary
_acceptance_lines = []
_acceptance_details = {}


def record_acceptance_detail(test_name: str, detail: str) -> None:
    _acceptance_details[test_name] = detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.name.startswith("test_criterion_"):
        status = "PASS" if report.passed else "FAIL"
        detail = _acceptance_details.get(item.name, "")
        _acceptance_lines.append(f"{item.name}: {status} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_mlp(rng, n_linear=None, max_width=16, activations=("tanh", "sigmoid", "relu")):
    """Random small MLP with mixed activations between linear layers."""
    n_linear = n_linear or int(rng.integers(1, 5))
    widths = [int(rng.integers(2, max_width + 1)) for _ in range(n_linear + 1)]
    layers = []
    for i in range(n_linear):
        w = rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
        b = rng.standard_normal(widths[i + 1]) * 0.1
        layers.append(Dense(w, b))
        if i < n_linear - 1:
            layers.append(Activation(str(rng.choice(activations))))
    return Network(layers, widths[0])


def min_relu_margin(net, x):
    """Smallest |pre-activation| feeding any relu; inf when the net has none.

    Central differences are only valid away from relu kinks, so derivative
    tests resample inputs until this margin clears the FD step.
    """
    margin = np.inf
    _, caches, _ = net.forward_batch(np.atleast_2d(x))

    def scan(layers, caches_):
        nonlocal margin
        for layer, cache in zip(layers, caches_):
            if isinstance(layer, Activation) and layer.fn == "relu":
                margin = min(margin, float(np.min(np.abs(cache))))
            elif isinstance(layer, ResidualBlock):
                scan(layer.inner, cache)

    scan(net.layers, caches)
    return margin


def guarded_input(net, rng, scale=1.0, margin=1e-3, tries=50):
    for _ in range(tries):
        x = rng.standard_normal(net.input_dim) * scale
        if min_relu_margin(net, x) > margin:
            return x
    raise AssertionError("could not find an input clear of relu kinks")


def small_conv_net(rng, h=8, w=8, c_out=3, n_out=2, activation="tanh"):
    k1 = rng.standard_normal((c_out, 1, 3, 3)) / 3.0
    b1 = rng.standard_normal(c_out) * 0.1
    conv = Conv2d(k1, b1, stride=1, padding=1, input_shape=(1, h, w))
    flat = c_out * h * w
    w2 = rng.standard_normal((n_out, flat)) / np.sqrt(flat)
    return Network([conv, Activation(activation),
                    Dense(w2, rng.standard_normal(n_out) * 0.1)], h * w)
