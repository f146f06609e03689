"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as the tests run (visible with ``-s``) and repeated in
the terminal summary by ``conftest.py``.
"""

import time

import numpy as np
import pytest

from fedcpsl.cli import main, rounds_to_threshold
from fedcpsl.client import ClientState, LocalPlan, RoundSettings, client_round, effective_steps, momentum_weights
from fedcpsl.config import ExperimentConfig
from fedcpsl.data import full_batch
from fedcpsl.nn import ModelSpec, forward, init_params
from fedcpsl.objective import (Batch, SemiSupHyper, grad_F_thetalc, grad_f_nu, grad_f_theta, loss_F, loss_f,
                               solve_pseudo_labels)
from fedcpsl.simulation import load_dataset, run_training, setup

from helpers import blob_clients
from oracles import pseudo_labels_projected_gradient, scaffold_reference

RESULTS = []


def report(number, ok, detail):
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def central_difference(fn, x, step=1e-5):
    x = np.array(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        keep = x.flat[j]
        x.flat[j] = keep + step
        up = fn(x)
        x.flat[j] = keep - step
        down = fn(x)
        x.flat[j] = keep
        out.flat[j] = (up - down) / (2 * step)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_criterion_1_gradients_match_finite_differences():
    start = time.perf_counter()
    worst = {"theta": 0.0, "nu": 0.0, "theta_lc": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_in, n_hid, n_cls = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        spec = ModelSpec((n_in, n_hid, n_cls), ("tanh", "relu")[seed % 2])
        hyper = SemiSupHyper(float(rng.uniform(0, 2)), float(rng.uniform(0.1, 2)))
        n_l, n_u = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        batch = Batch(rng.normal(size=(n_l, n_in)), np.eye(n_cls)[rng.integers(0, n_cls, n_l)],
                      rng.normal(size=(n_u, n_in)), np.arange(n_u))
        theta, theta_lc = init_params(spec, rng), init_params(spec, rng)
        nu = rng.dirichlet(np.full(n_cls, 3.0), size=n_u)
        beta = float(rng.uniform(0, 1))

        fd = central_difference(lambda p: loss_f(spec, p, nu, batch, hyper), theta)
        worst["theta"] = max(worst["theta"], rel_err(grad_f_theta(spec, theta, nu, batch, hyper), fd))
        fd = central_difference(lambda v: loss_f(spec, theta, v, batch, hyper), nu, step=1e-6)
        g = grad_f_nu(forward(spec, theta, batch.x_u), nu, hyper)
        worst["nu"] = max(worst["nu"], rel_err(g, fd))
        fd = central_difference(lambda p: loss_F(spec, p, theta, nu, batch, hyper, beta), theta_lc)
        g = grad_F_thetalc(spec, theta_lc, theta, nu, batch, hyper, beta)
        worst["theta_lc"] = max(worst["theta_lc"], rel_err(g, fd))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 30
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    report(1, ok, f"worst relative errors {detail}; {elapsed:.1f}s")


def test_criterion_2_effective_step_identity():
    worst = 0.0
    for q in range(1, 51):
        for gamma in np.round(np.arange(10) * 0.1, 1):
            # weight of gradient t is 1 + gamma + ... + gamma^(q-1-t)
            direct = sum(sum(gamma ** k for k in range(q - t)) for t in range(q))
            b = momentum_weights(q, float(gamma))
            closed = effective_steps(q, float(gamma))
            worst = max(worst, abs(closed - b.sum()), abs(closed - direct))
    report(2, worst <= 1e-12, f"max |closed form - sum of weights| {worst:.2e} over 500 (q, gamma) pairs")


def test_criterion_3_algebraic_identities():
    worst_delta = worst_c = 0.0
    datas = blob_clients(n_clients=4, seed=2)
    spec = ModelSpec((4, 6, 3), "tanh")
    settings = RoundSettings(spec, SemiSupHyper(1.0, 0.5), full_batch=True)
    for k in range(20):
        rng = np.random.default_rng(1000 + k)
        theta = init_params(spec, rng)
        c_i, c = rng.normal(scale=0.1, size=(2, theta.size))
        data = datas[k % 4]
        state = ClientState(k % 4, theta.copy(), c_i, np.full((len(data.unlabeled), 3), 1 / 3), 0.25, 0.75, data)
        q, gamma = int(rng.integers(1, 20)), float(rng.uniform(0, 0.95))
        eta = 0.05
        grads = []
        rep, new = client_round(state, theta, c, LocalPlan(q, gamma, eta, 0.1), rng, settings,
                                hook=lambda t, info: grads.append(info["grad"]))
        b = [sum(gamma ** j for j in range(q - t)) for t in range(q)]
        q_eff = sum(b)
        delta = -eta * sum(bt * (g + c - c_i) for bt, g in zip(b, grads))
        c_new = sum(bt / q_eff * g for bt, g in zip(b, grads))
        worst_delta = max(worst_delta, np.max(np.abs(rep.delta - delta)))
        worst_c = max(worst_c, np.max(np.abs(new.c_i - c_new)))
    ok = worst_delta <= 1e-9 and worst_c <= 1e-9
    report(3, ok, f"telescoped update residual {worst_delta:.2e}, control rewrite residual {worst_c:.2e}")


def test_criterion_4_control_variate_mean():
    cfg = ExperimentConfig(n_clients=10, participants=2, rounds=100, blob_per_class=100, eta=0.05)
    problem, _, _ = setup(cfg)
    gaps = []

    def check(server, clients):
        mean = sum(w * st.c_i for w, st in zip(problem.weights, clients))
        gaps.append(float(np.max(np.abs(server.c - mean))))

    res = run_training(cfg, round_callback=check)
    ok = res.ok and len(gaps) == 100 and max(gaps) <= 1e-9
    report(4, ok, f"max |c - sum w_i c_i| {max(gaps):.2e} over {len(gaps)} rounds (m = 0.2 N)")


def test_criterion_5_scaffold_reduction():
    q, rounds = 4, 20
    cfg = ExperimentConfig(n_clients=6, participants=3, rounds=rounds, blob_per_class=40, gamma=0.0, eta=0.1,
                           epoch_min=q, epoch_max=q, full_batch=True, weighting="uniform", hidden=(6,))
    problem, server0, clients0 = setup(cfg)
    ours = []
    res = run_training(cfg, round_callback=lambda s, cl: ours.append((s.theta, s.c, [st.c_i for st in cl])))
    spec, hyper = problem.spec, problem.settings.hyper
    datas = [st.data for st in clients0]

    def grad_fn(i, theta, nu):
        return grad_f_theta(spec, theta, nu, full_batch(datas[i].labeled, datas[i].unlabeled), hyper)

    def label_fn(i, theta):
        return solve_pseudo_labels(forward(spec, theta, datas[i].unlabeled.inputs), hyper)

    ref = scaffold_reference(datas, server0.theta, rounds, res.participants, q, cfg.eta, 1.0, grad_fn, label_fn)
    worst = 0.0
    for (t_a, c_a, ci_a), (t_b, c_b, ci_b) in zip(ours, ref):
        worst = max(worst, np.max(np.abs(t_a - t_b)), np.max(np.abs(c_a - c_b)),
                    max(np.max(np.abs(x - y)) for x, y in zip(ci_a, ci_b)))
    ok = res.ok and len(ours) == rounds and worst <= 1e-10
    report(5, ok, f"max deviation from the reference loop {worst:.2e} over {len(ours)} rounds")


def test_criterion_6_pseudo_label_oracle():
    rng = np.random.default_rng(6)
    n, c = 1000, 4
    h = rng.dirichlet(np.full(c, 2.0), size=n)
    ar = rng.uniform(0.2, 2.0, size=n)
    ap = ar * rng.uniform(0.0, 2.0, size=n)
    # corners: alpha_p = alpha_r gives nu = h, alpha_p = 0 gives the uniform row
    ap[:20] = ar[:20]
    ap[20:40] = 0.0
    start = time.perf_counter()
    oracle = pseudo_labels_projected_gradient(h, ap, ar, tol=1e-8)
    ours = np.vstack([solve_pseudo_labels(h[i:i + 1], SemiSupHyper(ap[i], ar[i])) for i in range(n)])
    err = float(np.max(np.abs(ours - oracle)))
    corner = max(float(np.max(np.abs(ours[:20] - h[:20]))), float(np.max(np.abs(ours[20:40] - 1 / c))))
    ok = err <= 1e-6 and corner <= 1e-12
    report(6, ok, f"L-inf gap to projected gradient {err:.2e}, corner error {corner:.2e} "
                  f"({n} rows, {time.perf_counter() - start:.1f}s)")


def test_criterion_7_deterministic_convergence():
    cfg = ExperimentConfig(n_clients=10, participants=2, rounds=200, blob_classes=3, full_batch=True, eta=0.1)
    start = time.perf_counter()
    res = run_training(cfg)
    elapsed = time.perf_counter() - start
    first, last = res.records[0].gap_global_gradnorm2, res.records[-1].gap_global_gradnorm2
    ratio = first / last
    ok = res.ok and len(res.records) == 200 and ratio >= 100 and elapsed < 60
    report(7, ok, f"gradnorm2 {first:.3e} -> {last:.3e} ({ratio:.3g}x) in {elapsed:.1f}s")


# tuned once on the subset; the learning rate and unlabeled weights are ledgered with the project notes
MNIST_TASK = dict(dataset="mnist_subset", n_samples=2000, n_clients=10, participants=2, rounds=100,
                  shards_per_client=2, epsilon=0.9, beta=0.75, eta=0.05, alpha_p=0.1, alpha_r=0.02)
ALGORITHMS = ("fedcpsl", "fedavg_ss", "fedshvrp", "apfl", "apsfl")
SEEDS = range(5)


@pytest.fixture(scope="module")
def mnist_runs():
    base = ExperimentConfig(**MNIST_TASK)
    dataset = load_dataset(base)
    start = time.perf_counter()
    runs = {(a, s): run_training(base.with_overrides(algorithm=a, seed=s), dataset=dataset).records
            for a in ALGORITHMS for s in SEEDS}
    elapsed = time.perf_counter() - start
    no_momentum = {s: run_training(base.with_overrides(seed=s, gamma=0.0), dataset=dataset).records for s in SEEDS}
    return runs, no_momentum, elapsed, base.accuracy_threshold


@pytest.mark.slow
def test_criterion_8_ordering(mnist_runs):
    runs, _, elapsed, _ = mnist_runs
    wins = 0
    per_seed = []
    for s in SEEDS:
        final = {a: runs[(a, s)][-1].test_acc_personalized for a in ALGORITHMS}
        win = all(final["fedcpsl"] >= final[a] for a in ALGORITHMS[1:])
        wins += win
        per_seed.append(f"{final['fedcpsl']:.3f}{'' if win else '*'}")
    ok = wins >= 3 and elapsed < 300
    report(8, ok, f"FedCPSL at least as accurate as every baseline in {wins}/5 seeds "
                  f"(final acc {' '.join(per_seed)}; * = beaten); {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_9_momentum_speedup(mnist_runs):
    runs, no_momentum, _, threshold = mnist_runs

    def rounds(records):
        r = rounds_to_threshold(records, threshold)
        return np.inf if r == -1 else r

    pairs = [(rounds(runs[("fedcpsl", s)]), rounds(no_momentum[s])) for s in SEEDS]
    wins = sum(a <= b for a, b in pairs)
    shown = " ".join(f"{a:g}/{b:g}" for a, b in pairs)
    report(9, wins >= 3, f"gamma=0.8 needs no more rounds than gamma=0 in {wins}/5 seeds "
                         f"(rounds to {threshold}: {shown})")


def test_criterion_10_byte_identical_traces(tmp_path):
    identical = []
    for alg in ALGORITHMS:
        args = ["run", "--algorithm", alg, "--rounds", "10", "--n_clients", "10", "--seed", "3"]
        assert main([*args, "--out", str(tmp_path / f"{alg}-a.csv")]) == 0
        assert main([*args, "--out", str(tmp_path / f"{alg}-b.csv")]) == 0
        identical.append((tmp_path / f"{alg}-a.csv").read_bytes() == (tmp_path / f"{alg}-b.csv").read_bytes())
    report(10, all(identical), f"byte-identical traces for {sum(identical)}/{len(identical)} algorithms")
