"""Small deterministic problems shared by several test files."""

import numpy as np

from fedcpsl.client import ClientState, RoundSettings
from fedcpsl.data import PartitionConfig, build_clients, gen_synthetic_blobs
from fedcpsl.nn import ModelSpec, init_params
from fedcpsl.objective import SemiSupHyper


def blob_clients(n_clients=4, n_classes=3, dim=4, per_class=40, epsilon=0.5, seed=0):
    data = gen_synthetic_blobs(n_classes, dim, per_class, 1.0, seed=seed)
    return build_clients(data, PartitionConfig(n_clients, 2, epsilon, 0.2), seed)


def make_states(datas, spec, theta_lc, beta=0.75, weights=None):
    c = spec.n_classes
    n = len(datas)
    weights = np.full(n, 1.0 / n) if weights is None else weights
    zeros = np.zeros(spec.n_params)
    return [ClientState(i, theta_lc.copy(), zeros.copy(), np.full((len(d.unlabeled), c), 1.0 / c),
                        float(weights[i]), beta, d) for i, d in enumerate(datas)]


def small_setup(n_clients=4, seed=0, full_batch=True, hidden=6, hyper=(1.0, 0.5)):
    datas = blob_clients(n_clients, seed=seed)
    spec = ModelSpec((datas[0].labeled.inputs.shape[1], hidden, 3), "tanh")
    settings = RoundSettings(spec, SemiSupHyper(*hyper), s_l=8, s_u=8, full_batch=full_batch)
    theta = init_params(spec, np.random.default_rng(seed))
    return spec, settings, theta, make_states(datas, spec, theta)
