"""Server-side FedCPSL operations: sampling, normalized aggregation, control variate, step-size checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .client import ClientReport, normalized_progress


@dataclass(frozen=True)
class ServerState:
    theta: np.ndarray
    c: np.ndarray
    round: int = 0


def sample_participants(n_clients: int, m: int, rng: np.random.Generator) -> list[int]:
    """Uniform ``m``-subset of ``range(n_clients)`` without replacement, sorted."""
    if not 1 <= m <= n_clients:
        raise ValueError(f"participant count m={m} must lie in [1, {n_clients}]")
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def _checked_reports(reports: Mapping[int, ClientReport], participants):
    if participants is not None:
        missing = sorted(set(participants) - set(reports))
        if missing:
            raise KeyError(f"missing reports from participants {missing}")
        extra = sorted(set(reports) - set(participants))
        if extra:
            raise KeyError(f"reports from non-participants {extra}")
    for cid in sorted(reports):
        rep = reports[cid]
        if not np.all(np.isfinite(rep.delta)):
            raise FloatingPointError(f"client {cid} reported a non-finite update")
        if not rep.q_eff > 0:
            raise ValueError(f"client {cid} reported q_eff={rep.q_eff}, must be positive")
    # fixed summation order makes the result independent of mapping order
    return [(cid, reports[cid]) for cid in sorted(reports)]


def resolve_eta_g(eta_g: Optional[float], reports: Mapping[int, ClientReport]) -> float:
    """A fixed global step, or the mean effective step count of this round's reports when ``None``."""
    if eta_g is not None:
        return float(eta_g)
    return float(np.mean([reports[cid].q_eff for cid in sorted(reports)]))


def aggregate(server: ServerState, reports: Mapping[int, ClientReport], weights: Sequence[float],
              eta_g: float, participants=None) -> np.ndarray:
    """New global model from step-normalized client updates."""
    items = _checked_reports(reports, participants)
    n, m = len(weights), len(items)
    step = np.zeros_like(server.theta, dtype=np.float64)
    for cid, rep in items:
        step += weights[cid] * (rep.delta / rep.q_eff)
    return server.theta + eta_g * (n / m) * step


def update_server_control(server: ServerState, reports: Mapping[int, ClientReport], weights: Sequence[float],
                          eta: float, participants=None) -> np.ndarray:
    items = _checked_reports(reports, participants)
    total = np.zeros_like(server.c, dtype=np.float64)
    for cid, rep in items:
        total += weights[cid] * (server.c + normalized_progress(rep.delta, eta, rep.q_eff))
    return server.c - total


def client_weights(sizes: Sequence[int]) -> np.ndarray:
    """Weights proportional to each client's training-set size."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("every client needs at least one training sample")
    return sizes / sizes.sum()


@dataclass(frozen=True)
class BoundCheck:
    name: str
    value: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.value <= self.bound


@dataclass(frozen=True)
class StepSizes:
    eta: float
    eta_c: float
    eta_v: float
    eta_g: float


def stepsize_bounds(steps: StepSizes, L: float, n_clients: int, m: int, q_bounds: tuple[float, float], *,
                    L_F: Optional[float] = None, L_tilde: Optional[float] = None, L_h: Optional[float] = None,
                    gamma_bound: Optional[float] = None, betas: Optional[Sequence[float]] = None,
                    weights: Optional[Sequence[float]] = None) -> list[BoundCheck]:
    """Every step-size condition of the convergence guarantees that the given constants allow evaluating.

    ``q_bounds`` holds the smallest and largest effective step counts.
    Conditions needing ``L_F`` or the output-smoothness constants are skipped
    when those are absent.
    """
    q_min, q_max = q_bounds
    N, eg = n_clients, steps.eta_g
    checks = [
        BoundCheck("eta <= m/(48 eta_g N L)", steps.eta, m / (48 * eg * N * L)),
        BoundCheck("eta <= 1/(8 L Qmax)", steps.eta, 1.0 / (8 * L * q_max)),
        BoundCheck("eta <= 3 eta_g N/(100 m L Qmax^2)", steps.eta, 3 * eg * N / (100 * m * L * q_max ** 2)),
        BoundCheck("eta <= m/(32 eta_g N L) (1 + 2N/m)^-1/2", steps.eta,
                   m / (32 * eg * N * L) * (1 + 2 * N / m) ** -0.5),
        BoundCheck("eta_v <= 1/(4L)", steps.eta_v, 1.0 / (4 * L)),
    ]
    if L_F is not None:
        eta_tilde = steps.eta * eg
        checks += [
            BoundCheck("eta_c <= 1/(2 Qmax L_F)", steps.eta_c, 1.0 / (2 * q_max * L_F)),
            BoundCheck("eta_c <= eta eta_g N L^2/(Qmin m L_F^2)", steps.eta_c,
                       eta_tilde * N * L ** 2 / (q_min * m * L_F ** 2)),
            BoundCheck("eta_c <= eta eta_g N/(Qmin m)", steps.eta_c, eta_tilde * N / (q_min * m)),
        ]
    if None not in (L_tilde, L_h, gamma_bound, betas, weights):
        d0 = 0.25 * sum(w * (1 - b) * (4 * b * L_tilde * L_h * gamma_bound + 5 * L)
                        for w, b in zip(weights, betas))
        checks += [
            BoundCheck("eta <= m/(48 eta_g N D0)", steps.eta, m / (48 * eg * N * d0) if d0 > 0 else np.inf),
            BoundCheck("D0 <= 11L/8 + 11m/(2N)", d0, 11 * L / 8 + 11 * m / (2 * N)),
        ]
    return checks


def validate_stepsizes(steps: StepSizes, L: Optional[float], n_clients: int, m: int,
                       q_bounds: tuple[float, float], **constants) -> list[str]:
    """Warnings for every violated step-size condition; never raises."""
    if L is None:
        return ["conditions unchecked: no smoothness estimate L supplied"]
    return [f"violated: {c.name} (value {c.value:.6g} > bound {c.bound:.6g})"
            for c in stepsize_bounds(steps, L, n_clients, m, q_bounds, **constants) if not c.ok]
