import os

import numpy as np
import pytest

from qcascade import cascade, model, quantizer

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def fixture_model():
    return model.load_model(os.path.join(FIXTURES, "model.ccnn"))


@pytest.fixture(scope="session")
def fixture_eval():
    return model.load_eval_set(os.path.join(FIXTURES, "eval.ccev"))


@pytest.fixture(scope="session")
def layer_stats(fixture_model, fixture_eval):
    return quantizer.profile_layer_ranges(fixture_model, fixture_eval)


@pytest.fixture(scope="session")
def sweep_points(fixture_model, fixture_eval, layer_stats):
    """Full 2..16 scaling-factor sweep; the expensive shared artifact."""
    return quantizer.sweep_wordlengths(
        fixture_model, fixture_eval, "top1", quantizer.DEFAULT_WORDLENGTHS, layer_stats
    )


@pytest.fixture(scope="session")
def built_system(fixture_model, fixture_eval, sweep_points):
    return cascade.build_cascade(
        fixture_model, fixture_eval, tolerance=0.01, seed=0, sweep=sweep_points
    )


def make_tiny_graph(seed: int = 0, num_classes: int = 3, softmax: bool = True):
    """Small random conv/pool/fc chain on (1, 8, 8) inputs for unit tests."""
    rng = np.random.default_rng(seed)
    layers = [
        model.Conv("c1", 1, 4, 3, 3, 1, 1),
        model.ReLU("r1"),
        model.MaxPool("p1", 2, 2),
        model.FullyConnected("fc", 4 * 4 * 4, num_classes),
    ]
    if softmax:
        layers.append(model.Softmax("sm"))
    weights = {
        "c1": (
            rng.normal(0, 0.5, (4, 1, 3, 3)).astype(np.float32),
            rng.normal(0, 0.1, (4,)).astype(np.float32),
        ),
        "fc": (
            rng.normal(0, 0.5, (num_classes, 64)).astype(np.float32),
            rng.normal(0, 0.1, (num_classes,)).astype(np.float32),
        ),
    }
    return model.ModelGraph(layers, weights, (1, 8, 8))


def make_tiny_eval(graph, n: int = 16, seed: int = 1):
    rng = np.random.default_rng(seed)
    samples = rng.normal(0, 1, (n, *graph.input_shape)).astype(np.float32)
    labels = rng.integers(0, graph.num_classes, n)
    return model.EvalSet(samples, labels, graph.num_classes)
