"""Semi-supervised local cost, its personalized variant and pseudo-label updates.

For client ``i`` with model output ``h`` the local cost is

    f = CE(h(x), y) + alpha_p * CE(h(u), nu) + alpha_r * [KL(nu, d) + KL(h(u), d)]

averaged per term over the labeled and unlabeled parts of a batch, with
``d`` the uniform distribution over the ``C`` classes. The personalized cost
``F`` is the same expression evaluated on the mixed output
``z = beta * h(theta_lc) + (1 - beta) * h(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import PROB_FLOOR, ModelSpec, backprop, forward


@dataclass(frozen=True)
class SemiSupHyper:
    alpha_p: float = 1.0
    alpha_r: float = 0.5

    def __post_init__(self):
        if self.alpha_p < 0 or self.alpha_r < 0:
            raise ValueError(f"alpha_p and alpha_r must be nonnegative, got {self.alpha_p}, {self.alpha_r}")


@dataclass(frozen=True)
class Batch:
    """Labeled rows with one-hot targets plus unlabeled rows indexing the pseudo labels."""

    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray
    u_idx: np.ndarray

    @property
    def n_labeled(self) -> int:
        return self.x_l.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_u.shape[0]


def _slog(p):
    return np.log(np.maximum(p, PROB_FLOOR))


def _dslog(p):
    # derivative of the floored log; zero on the floor
    return np.where(p > PROB_FLOOR, 1.0 / np.maximum(p, PROB_FLOOR), 0.0)


def _validate(batch: Batch, nu_rows: np.ndarray):
    if batch.n_labeled == 0 and batch.n_unlabeled == 0:
        raise ValueError("batch has neither labeled nor unlabeled samples")
    if batch.n_unlabeled:
        idx = np.asarray(batch.u_idx)
        if idx.min() < 0 or idx.max() >= nu_rows.shape[0]:
            raise IndexError("unlabeled index out of range of the pseudo-label matrix")


def _cost_and_output_grads(out_l, y_l, out_u, nu_b, hyper, need_grad=True):
    """Cost value and its gradient w.r.t. the model outputs of both batch parts."""
    n_l, n_u = out_l.shape[0], out_u.shape[0]
    c = out_l.shape[1] if n_l else out_u.shape[1]
    log_c = np.log(c)
    value = 0.0
    g_l = g_u = None
    if n_l:
        value += -np.sum(y_l * _slog(out_l)) / n_l
        if need_grad:
            g_l = -y_l * _dslog(out_l) / n_l
    if n_u:
        slog_u = _slog(out_u)
        ce_u = -np.sum(nu_b * slog_u)
        kl_nu = np.sum(nu_b * (_slog(nu_b) + log_c))
        kl_h = np.sum(out_u * (slog_u + log_c))
        value += (hyper.alpha_p * ce_u + hyper.alpha_r * (kl_nu + kl_h)) / n_u
        if need_grad:
            d_u = _dslog(out_u)
            g_u = (-hyper.alpha_p * nu_b * d_u
                   + hyper.alpha_r * (slog_u + log_c + out_u * d_u)) / n_u
    return value, g_l, g_u


def _stack(batch: Batch):
    if batch.n_labeled and batch.n_unlabeled:
        return np.vstack([batch.x_l, batch.x_u])
    return batch.x_l if batch.n_labeled else batch.x_u


def _split(out, n_l):
    return out[:n_l], out[n_l:]


def _stack_grads(g_l, g_u):
    parts = [g for g in (g_l, g_u) if g is not None]
    return parts[0] if len(parts) == 1 else np.vstack(parts)


def loss_f(spec: ModelSpec, theta: np.ndarray, nu_rows: np.ndarray, batch: Batch, hyper: SemiSupHyper) -> float:
    _validate(batch, nu_rows)
    out_l, out_u = _split(forward(spec, theta, _stack(batch)), batch.n_labeled)
    value, _, _ = _cost_and_output_grads(out_l, batch.y_l, out_u, nu_rows[batch.u_idx], hyper, need_grad=False)
    return float(value)


def grad_f_theta(spec: ModelSpec, theta: np.ndarray, nu_rows: np.ndarray, batch: Batch,
                 hyper: SemiSupHyper) -> np.ndarray:
    _validate(batch, nu_rows)
    inputs = _stack(batch)
    out_l, out_u = _split(forward(spec, theta, inputs), batch.n_labeled)
    _, g_l, g_u = _cost_and_output_grads(out_l, batch.y_l, out_u, nu_rows[batch.u_idx], hyper)
    return backprop(spec, theta, inputs, _stack_grads(g_l, g_u))


def grad_f_nu(h_u: np.ndarray, nu_rows: np.ndarray, hyper: SemiSupHyper) -> np.ndarray:
    """Gradient of the cost w.r.t. the pseudo labels of the rows in ``h_u``.

    ``h_u`` and ``nu_rows`` are aligned row by row; averaging is over their
    row count.
    """
    h_u = np.asarray(h_u, dtype=np.float64)
    nu_rows = np.asarray(nu_rows, dtype=np.float64)
    if h_u.shape != nu_rows.shape:
        raise ValueError(f"h_u has shape {h_u.shape} but nu_rows has shape {nu_rows.shape}")
    m = h_u.shape[0]
    log_c = np.log(h_u.shape[1])
    return (-hyper.alpha_p * _slog(h_u) + hyper.alpha_r * (_slog(nu_rows) + log_c + 1.0)) / m


def solve_pseudo_labels(h_u: np.ndarray, hyper: SemiSupHyper) -> np.ndarray:
    """Row-wise minimizer of ``alpha_p CE(h, nu) + alpha_r KL(nu, d)`` on the simplex.

    The minimizer is ``nu_c ~ h_c ** (alpha_p / alpha_r)``; it only exists in
    closed form for ``alpha_r > 0``.
    """
    if hyper.alpha_r <= 0:
        raise ValueError("closed-form pseudo labels need alpha_r > 0; use gd_pseudo_label_step instead")
    logits = (hyper.alpha_p / hyper.alpha_r) * _slog(np.asarray(h_u, dtype=np.float64))
    logits -= logits.max(axis=1, keepdims=True)
    nu = np.exp(logits)
    return nu / nu.sum(axis=1, keepdims=True)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n, c = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, c + 1)
    cond = u - css / ks > 0
    rho = c - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


def gd_pseudo_label_step(nu_rows: np.ndarray, grad_rows: np.ndarray, eta_v: float) -> np.ndarray:
    """One projected gradient step on the pseudo labels."""
    if eta_v <= 0:
        raise ValueError("eta_v must be positive")
    return project_simplex(np.asarray(nu_rows) - eta_v * np.asarray(grad_rows))


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"mixture coefficient beta must lie in [0, 1], got {beta}")


def _mixed_outputs(spec, theta_lc, theta, inputs, beta):
    h_lc = forward(spec, theta_lc, inputs)
    h_g = forward(spec, theta, inputs)
    return beta * h_lc + (1.0 - beta) * h_g


def loss_F(spec: ModelSpec, theta_lc: np.ndarray, theta: np.ndarray, nu_rows: np.ndarray, batch: Batch,
           hyper: SemiSupHyper, beta: float) -> float:
    _check_beta(beta)
    _validate(batch, nu_rows)
    z_l, z_u = _split(_mixed_outputs(spec, theta_lc, theta, _stack(batch), beta), batch.n_labeled)
    value, _, _ = _cost_and_output_grads(z_l, batch.y_l, z_u, nu_rows[batch.u_idx], hyper, need_grad=False)
    return float(value)


def grad_F_thetalc(spec: ModelSpec, theta_lc: np.ndarray, theta: np.ndarray, nu_rows: np.ndarray, batch: Batch,
                   hyper: SemiSupHyper, beta: float) -> np.ndarray:
    """Gradient of :func:`loss_F` w.r.t. ``theta_lc``; ``theta`` is held constant."""
    _check_beta(beta)
    _validate(batch, nu_rows)
    if beta == 0.0:
        return np.zeros_like(theta_lc, dtype=np.float64)
    inputs = _stack(batch)
    z_l, z_u = _split(_mixed_outputs(spec, theta_lc, theta, inputs, beta), batch.n_labeled)
    _, g_l, g_u = _cost_and_output_grads(z_l, batch.y_l, z_u, nu_rows[batch.u_idx], hyper)
    return backprop(spec, theta_lc, inputs, beta * _stack_grads(g_l, g_u))


def predict_personalized(spec: ModelSpec, theta_lc: np.ndarray, theta: np.ndarray, beta: float,
                         inputs: np.ndarray) -> np.ndarray:
    """Class indices of the mixed model; ties go to the lowest index."""
    _check_beta(beta)
    return np.argmax(_mixed_outputs(spec, theta_lc, theta, inputs, beta), axis=1)
