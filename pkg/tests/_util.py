"""Small shared builders for the test modules."""

import numpy as np

from tgnet.grid import RegionGraph
from tgnet.model import Batch, TGNetConfig, TGNetModel


def tiny_config(**kw):
    base = dict(T_demand=3, T_dropoff=4, n_gn_layers=3, width=2, tge_dim=3, dropoff_width=3,
                head_width=4, dropout_p=0.0)
    base.update(kw)
    return TGNetConfig(**base)


def random_batch(config, n_nodes, batch=3, seed=0):
    rng = np.random.default_rng(seed)
    keys = np.zeros((batch, config.key_dim))
    slots = config.key_dim - 9
    keys[np.arange(batch), rng.integers(0, slots, batch)] = 1.0
    keys[np.arange(batch), slots + rng.integers(0, 7, batch)] = 1.0
    dropoff = rng.uniform(0, 1, (batch, n_nodes, config.T_dropoff)) if config.use_dropoff else None
    return Batch(rng.uniform(0, 1, (batch, n_nodes, config.T_demand)), keys, dropoff)


def randomize(model, seed, scale=1.0):
    """Overwrite every parameter and BN buffer with random values."""
    rng = np.random.default_rng(seed)
    for t in model.store.params.values():
        t.data = rng.normal(0, scale, t.data.shape)
    for s in model.store.bn.values():
        s.running_mean = rng.normal(0, 0.5, s.running_mean.shape)
        s.running_var = rng.uniform(0.5, 2.0, s.running_var.shape)
    # keep the output unit live, as the model's own init does
    model.store["out.w"].data = np.abs(model.store["out.w"].data)
    model.store["out.b"].data = np.abs(model.store["out.b"].data)
    return model


def shuffled_graph(graph, rng):
    return RegionGraph(graph.n_nodes, tuple(tuple(rng.permutation(nb).tolist()) for nb in graph.neighbors))


def build(config, shape=(2, 2), seed=0):
    return TGNetModel(config, shape, seed=seed)
