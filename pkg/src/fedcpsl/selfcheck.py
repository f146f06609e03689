"""Cheap numerical self-tests used by ``fedcpsl check``."""

from __future__ import annotations

import numpy as np

from .client import ClientState, LocalPlan, RoundSettings, client_round, momentum_weights
from .data import PartitionConfig, build_clients, gen_synthetic_blobs
from .nn import ModelSpec, finite_diff_grad, forward, init_params
from .objective import (Batch, SemiSupHyper, grad_F_thetalc, grad_f_nu, grad_f_theta, loss_F, loss_f,
                        solve_pseudo_labels)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def _pseudo_label_loss(h_u, nu, hyper):
    """Only the ``nu``-dependent terms of the cost, per unlabeled row average."""
    m, c = h_u.shape
    ce = -np.sum(nu * np.log(h_u)) / m
    kl = np.sum(nu * np.log(nu * c)) / m
    return hyper.alpha_p * ce + hyper.alpha_r * kl


def gradient_selftest(seed: int, n_labeled: int = 6, n_unlabeled: int = 5) -> dict:
    """Relative errors of the three analytic gradients against central differences."""
    rng = np.random.default_rng(seed)
    n_in, n_cls = 4, 3
    spec = ModelSpec((n_in, 5, n_cls), "tanh")
    hyper = SemiSupHyper(float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0)))
    theta = init_params(spec, rng)
    theta_lc = init_params(spec, rng)
    x_l = rng.normal(size=(n_labeled, n_in))
    y_l = np.eye(n_cls)[rng.integers(0, n_cls, n_labeled)]
    x_u = rng.normal(size=(n_unlabeled, n_in))
    nu = rng.dirichlet(np.ones(n_cls), size=n_unlabeled)
    batch = Batch(x_l, y_l, x_u, np.arange(n_unlabeled))
    beta = float(rng.uniform(0.1, 0.9))

    g_theta = grad_f_theta(spec, theta, nu, batch, hyper)
    fd_theta = finite_diff_grad(lambda p: loss_f(spec, p, nu, batch, hyper), theta)

    h_u = forward(spec, theta, x_u)
    g_nu = grad_f_nu(h_u, nu, hyper)
    fd_nu = finite_diff_grad(lambda v: _pseudo_label_loss(h_u, v.reshape(nu.shape), hyper), nu.ravel())

    g_lc = grad_F_thetalc(spec, theta_lc, theta, nu, batch, hyper, beta)
    fd_lc = finite_diff_grad(lambda p: loss_F(spec, p, theta, nu, batch, hyper, beta), theta_lc)
    return {
        "grad_f_theta": relative_error(g_theta, fd_theta),
        "grad_f_nu": relative_error(g_nu.ravel(), fd_nu),
        "grad_F_thetalc": relative_error(g_lc, fd_lc),
    }


def identity_selftest(seed: int) -> dict:
    """Residuals of the telescoped local update and the control-variate rewrite on one full-batch round."""
    rng = np.random.default_rng(seed)
    data = gen_synthetic_blobs(3, 4, 20, 1.0, seed=seed)
    client = build_clients(data, PartitionConfig(2, 2, 0.5, 0.2), seed)[0]
    spec = ModelSpec((4, 6, 3), "tanh")
    settings = RoundSettings(spec, SemiSupHyper(1.0, 0.5), full_batch=True)
    theta = init_params(spec, rng)
    c_i = rng.normal(scale=0.1, size=theta.size)
    c = rng.normal(scale=0.1, size=theta.size)
    state = ClientState(0, theta.copy(), c_i, np.full((len(client.unlabeled), 3), 1 / 3), 0.5, 0.75, client)
    q, gamma = int(rng.integers(1, 12)), float(rng.uniform(0.0, 0.95))
    plan = LocalPlan(q, gamma, 0.05, 0.1)

    grads = []
    report, new = client_round(state, theta, c, plan, rng, settings, hook=lambda t, info: grads.append(info["grad"]))
    b = momentum_weights(q, gamma)
    telescoped = -plan.eta * sum(bt * (g + c - c_i) for bt, g in zip(b, grads))
    c_rewrite = sum(bt / report.q_eff * g for bt, g in zip(b, grads))
    return {
        "telescoped_update": float(np.max(np.abs(report.delta - telescoped))),
        "control_rewrite": float(np.max(np.abs(new.c_i - c_rewrite))),
    }


def pseudo_label_selftest(seed: int) -> float:
    """First-order optimality residual of the closed-form pseudo labels on random rows."""
    rng = np.random.default_rng(seed)
    h = rng.dirichlet(np.ones(4), size=16)
    hyper = SemiSupHyper(float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 2)))
    nu = solve_pseudo_labels(h, hyper)
    g = grad_f_nu(h, nu, hyper)
    # at an interior optimum the gradient is constant along each row
    return float(np.max(np.ptp(g, axis=1)))
