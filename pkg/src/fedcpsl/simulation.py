"""Round orchestration for FedCPSL and the baselines."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import baselines
from .baselines import AlgorithmKind
from .client import (
    ClientState,
    DivergenceError,
    LocalPlan,
    RoundSettings,
    check_finite,
    client_round,
    plan_local_steps,
    steps_per_epoch,
)
from .config import ExperimentConfig
from .data import PartitionConfig, build_clients, gen_synthetic_blobs, load_mnist, mnist_subset
from .metrics import (
    TraceRecord,
    mean_test_accuracy,
    optimality_gap_global,
    optimality_gap_personalized,
    pseudo_label_accuracy,
    train_loss,
)
from .nn import ModelSpec, init_params
from .objective import SemiSupHyper
from .server import (ServerState, aggregate, client_weights, resolve_eta_g, sample_participants,
                     update_server_control)

DATA_DIR_ENV = "FEDCPSL_DATA_DIR"

# stream tags for seed derivation
_INIT, _SAMPLE, _CLIENT = 11, 23, 37


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator determined only by ``(seed, *keys)``."""
    return np.random.default_rng([seed, *keys])


def load_dataset(config: ExperimentConfig):
    if config.dataset == "blobs":
        return gen_synthetic_blobs(config.blob_classes, config.blob_dim, config.blob_per_class,
                                   config.blob_spread, seed=config.seed)
    return mnist_subset(load_mnist(os.environ.get(DATA_DIR_ENV)), config.n_samples)


@dataclass
class Problem:
    """Everything fixed for the duration of a run."""

    config: ExperimentConfig
    spec: ModelSpec
    settings: RoundSettings
    weights: np.ndarray
    spe: list  # steps per epoch, per client


@dataclass
class TrainingResult:
    records: list
    server: ServerState
    clients: list
    failure: Optional[str] = None
    participants: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failure is None


def setup(config: ExperimentConfig, dataset=None):
    """Build the problem, the initial server state and the initial client states."""
    kind = config.kind
    dataset = load_dataset(config) if dataset is None else dataset
    part = PartitionConfig(config.n_clients, config.shards_per_client, config.epsilon, config.test_frac)
    datas = build_clients(dataset, part, config.seed)
    spec = ModelSpec((dataset.inputs.shape[1], *config.hidden, dataset.n_classes), config.activation)
    settings = RoundSettings(spec, SemiSupHyper(config.alpha_p, config.alpha_r), config.s_l, config.s_u,
                             config.full_batch, config.pseudo_label_mode, use_unlabeled=True)
    if kind is AlgorithmKind.APFL:
        settings = baselines.labeled_only(settings)
    if config.weighting == "size":
        weights = client_weights([d.n_train for d in datas])
    else:
        weights = np.full(config.n_clients, 1.0 / config.n_clients)
    spe = [1 if config.full_batch else steps_per_epoch(d, config.s_l, config.s_u, settings.use_unlabeled)
           for d in datas]
    theta0 = init_params(spec, stream(config.seed, _INIT))
    zeros = np.zeros_like(theta0)
    c = dataset.n_classes
    clients = [
        ClientState(i, theta0.copy(), zeros.copy(), np.full((len(d.unlabeled), c), 1.0 / c),
                    float(weights[i]), float(b), d)
        for i, (d, b) in enumerate(zip(datas, config.betas()))
    ]
    return Problem(config, spec, settings, weights, spe), ServerState(theta0, zeros.copy(), 0), clients


def _local_plan(problem: Problem, cid: int, rng: np.random.Generator) -> LocalPlan:
    cfg = problem.config
    q = plan_local_steps(rng, (cfg.epoch_min, cfg.epoch_max), problem.spe[cid])
    gamma = cfg.gamma if cfg.kind is AlgorithmKind.FEDCPSL else 0.0
    return LocalPlan(q, gamma, cfg.eta, cfg.eta_c_value, cfg.eta_v)


def _run_client(problem, server, state, r, hook):
    rng = stream(problem.config.seed, _CLIENT, r, state.client_id)
    plan = _local_plan(problem, state.client_id, rng)
    kind, s = problem.config.kind, problem.settings
    if kind is AlgorithmKind.FEDCPSL:
        return client_round(state, server.theta, server.c, plan, rng, s, round_index=r, hook=hook)
    if kind is AlgorithmKind.FEDSHVRP:
        return baselines.fedshvrp_round(state, server.theta, server.c, plan, rng, s, round_index=r)
    if kind is AlgorithmKind.FEDAVG_SS:
        return baselines.fedavg_ss_round(state, server.theta, plan, rng, s, round_index=r)
    return baselines.apsfl_round(state, server.theta, plan, rng, s, round_index=r)


def run_round(problem: Problem, server: ServerState, clients: list, participants: list,
              hook=None, workers: int = 1, schedule: Optional[Callable] = None):
    """One synchronous round; returns the new server state and client list."""
    order = list(participants) if schedule is None else list(schedule(list(participants)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {cid: pool.submit(_run_client, problem, server, clients[cid], server.round, hook)
                       for cid in order}
            results = {cid: f.result() for cid, f in futures.items()}
    else:
        results = {cid: _run_client(problem, server, clients[cid], server.round, hook) for cid in order}

    reports = {cid: results[cid][0] for cid in sorted(results)}
    new_clients = list(clients)
    for cid in sorted(results):
        new_clients[cid] = results[cid][1]

    kind, w = problem.config.kind, problem.weights
    if kind is AlgorithmKind.FEDCPSL:
        eta_g = resolve_eta_g(problem.config.eta_g, reports)
        theta = aggregate(server, reports, w, eta_g, participants)
        c = update_server_control(server, reports, w, problem.config.eta, participants)
    elif kind is AlgorithmKind.FEDSHVRP:
        theta = baselines.average_models(server.theta, reports, w)
        c = baselines.scaffold_server_control(server.c, {i: clients[i] for i in results},
                                              {i: new_clients[i] for i in results}, w)
    else:
        theta = baselines.average_models(server.theta, reports, w)
        c = server.c
    check_finite(theta, "global model", round_index=server.round)
    return ServerState(theta, c, server.round + 1), new_clients


def evaluate(problem: Problem, server: ServerState, clients: list, nu_before: list, wall_ms: float) -> TraceRecord:
    kind, spec, s = problem.config.kind, problem.spec, problem.settings
    w = problem.weights
    datas = [st.data for st in clients]
    nus = [st.nu for st in clients]
    gradnorm2, nu_term, _ = optimality_gap_global(spec, server.theta, datas, nu_before, nus, w, s.hyper,
                                                  use_unlabeled=s.use_unlabeled)
    acc_global = mean_test_accuracy(spec, clients, server.theta, personalized=False)
    if kind.has_localized_model:
        gap_p = optimality_gap_personalized(spec, clients, server.theta, w, s.hyper, s.use_unlabeled)
        acc_p = mean_test_accuracy(spec, clients, server.theta, personalized=True)
    else:
        gap_p, acc_p = 0.0, acc_global
    return TraceRecord(
        round=server.round,
        gap_global_gradnorm2=gradnorm2,
        gap_nu_term=nu_term,
        gap_personalized=gap_p,
        train_loss=train_loss(spec, server.theta, clients, w, s.hyper, s.use_unlabeled),
        test_acc_global=acc_global,
        test_acc_personalized=acc_p,
        pseudo_label_acc=pseudo_label_accuracy(clients),
        wall_ms=wall_ms,
    )


def run_training(config: ExperimentConfig, dataset=None, hook=None, workers: int = 1,
                 schedule: Optional[Callable] = None, round_callback: Optional[Callable] = None) -> TrainingResult:
    """Run ``config.rounds`` rounds and collect one trace record per round.

    On divergence the trace stops at the last good round and ``failure``
    describes where training blew up. ``round_callback(server, clients)`` is
    invoked after every completed round.
    """
    problem, server, clients = setup(config, dataset)
    records, history = [], []
    for r in range(config.rounds):
        start = time.perf_counter()
        participants = sample_participants(config.n_clients, config.participants, stream(config.seed, _SAMPLE, r))
        nu_before = [st.nu for st in clients]
        try:
            server, clients = run_round(problem, server, clients, participants, hook, workers, schedule)
        except DivergenceError as exc:
            return TrainingResult(records, server, clients, failure=f"round {r}: {exc}", participants=history)
        history.append(participants)
        wall_ms = (time.perf_counter() - start) * 1000.0 if config.record_timing else 0.0
        records.append(evaluate(problem, server, clients, nu_before, wall_ms))
        if round_callback is not None:
            round_callback(server, clients)
    return TrainingResult(records, server, clients, participants=history)
