"""Shared fixtures: the synthetic corpus and a small trained model.

Session scope keeps the expensive pieces (corpus generation, training) to a
single run per pytest invocation.
"""

import numpy as np
import pytest

from uwbrem import dataset, quant, synth, train
from uwbrem.graph import optimize, remnet_to_graph
from uwbrem.model import ModelConfig, build_remnet


@pytest.fixture(scope="session")
def corpus():
    return synth.generate(seed=0)


@pytest.fixture(scope="session")
def data_split(corpus):
    return dataset.split(corpus)


@pytest.fixture(scope="session")
def small_model(data_split):
    """A quickly-trained K=16 network for graph/quant/engine plumbing tests;
    accuracy-level assertions use the full training runs in the acceptance
    suite instead."""
    cfg = ModelConfig(K=16)
    weights = build_remnet(cfg, seed=0)
    x = dataset.prepare(data_split.train.cir, 16)
    train.train(weights, x, data_split.train.range_error,
                train.TrainConfig(epochs=3), seed=0)
    return weights


@pytest.fixture(scope="session")
def small_graph(small_model):
    return optimize(remnet_to_graph(small_model))


@pytest.fixture(scope="session")
def small_qmodel(small_graph, data_split):
    x_cal = dataset.prepare(data_split.train.cir, 16)
    return quant.quantize_model(small_graph, quant.calibrate(small_graph, x_cal))


def finite_diff(f, params: dict, grads: dict, h: float = 1e-4,
                max_checks_per_tensor: int = 12, seed: int = 0) -> float:
    """Worst relative error between analytic grads and central differences,
    sampling a few coordinates per tensor."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.ravel()
        idx = rng.choice(flat.size, size=min(max_checks_per_tensor, flat.size),
                         replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[name].ravel()[i]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
