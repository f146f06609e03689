"""Optimality gaps, accuracies and trace files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .client import ClientState
from .data import ClientData, full_batch
from .nn import ModelSpec, forward
from .objective import SemiSupHyper, grad_F_thetalc, grad_f_theta, loss_f, predict_personalized


@dataclass(frozen=True)
class TraceRecord:
    round: int
    gap_global_gradnorm2: float
    gap_nu_term: float
    gap_personalized: float
    train_loss: float
    test_acc_global: float
    test_acc_personalized: float
    pseudo_label_acc: float
    wall_ms: float


TRACE_FIELDS = tuple(f.name for f in fields(TraceRecord))


def _full(data: ClientData, use_unlabeled: bool):
    return full_batch(data.labeled, data.unlabeled, use_unlabeled)


def global_gradient(spec: ModelSpec, theta, datas: Sequence[ClientData], nus, weights, hyper: SemiSupHyper,
                    use_unlabeled: bool = True) -> np.ndarray:
    """Full-batch gradient of the weighted global cost."""
    total = np.zeros_like(theta, dtype=np.float64)
    for data, nu, w in zip(datas, nus, weights):
        total += w * grad_f_theta(spec, theta, nu, _full(data, use_unlabeled), hyper)
    return total


def optimality_gap_global(spec: ModelSpec, theta, datas: Sequence[ClientData], nu_before, nu_after, weights,
                          hyper: SemiSupHyper, L_est: Optional[float] = None, use_unlabeled: bool = True):
    """``(gradnorm2, nu_term, combined)``.

    The gradient is taken at ``(theta, nu_after)``; ``nu_term`` is the weighted
    squared pseudo-label movement. ``combined`` adds ``31 L / 64`` times the
    movement and is ``None`` without an ``L`` estimate.
    """
    g = global_gradient(spec, theta, datas, nu_after, weights, hyper, use_unlabeled)
    gradnorm2 = float(g @ g)
    nu_term = float(sum(w * np.sum((a - b) ** 2) for w, a, b in zip(weights, nu_after, nu_before)))
    combined = None if L_est is None else gradnorm2 + 31.0 * L_est / 64.0 * nu_term
    return gradnorm2, nu_term, combined


def optimality_gap_personalized(spec: ModelSpec, states: Sequence[ClientState], theta, weights,
                                hyper: SemiSupHyper, use_unlabeled: bool = True) -> float:
    total = 0.0
    for st, w in zip(states, weights):
        g = grad_F_thetalc(spec, st.theta_lc, theta, st.nu, _full(st.data, use_unlabeled), hyper, st.beta)
        total += w * float(g @ g)
    return float(total)


def train_loss(spec: ModelSpec, theta, states: Sequence[ClientState], weights, hyper: SemiSupHyper,
               use_unlabeled: bool = True) -> float:
    return float(sum(w * loss_f(spec, theta, st.nu, _full(st.data, use_unlabeled), hyper)
                     for st, w in zip(states, weights)))


def accuracy(predictions, true_labels) -> float:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if true_labels.size == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    if predictions.shape != true_labels.shape:
        raise ValueError(f"{predictions.shape} predictions for {true_labels.shape} labels")
    return float(np.mean(predictions == true_labels))


def client_accuracies(spec: ModelSpec, states: Sequence[ClientState], theta, personalized: bool) -> list[float]:
    accs = []
    for st in states:
        test = st.data.test
        if len(test) == 0:
            continue
        if personalized:
            pred = predict_personalized(spec, st.theta_lc, theta, st.beta, test.inputs)
        else:
            pred = np.argmax(forward(spec, theta, test.inputs), axis=1)
        accs.append(accuracy(pred, test.class_ids))
    return accs


def mean_test_accuracy(spec: ModelSpec, states: Sequence[ClientState], theta, personalized: bool) -> float:
    """Client-uniform average of per-client test accuracies."""
    accs = client_accuracies(spec, states, theta, personalized)
    return float(np.mean(accs)) if accs else float("nan")


def pseudo_label_accuracy(states: Sequence[ClientState]) -> float:
    """Client-uniform agreement of ``argmax(nu)`` with the hidden labels (diagnostics only)."""
    accs = [accuracy(np.argmax(st.nu, axis=1), st.data.unlabeled.diagnostic_labels())
            for st in states if len(st.data.unlabeled)]
    return float(np.mean(accs)) if accs else float("nan")


def _format(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_trace(records: Iterable[TraceRecord], path, fmt: str = "csv") -> None:
    """Write a trace as header-exact CSV or as JSON lines (UTF-8, LF)."""
    path = Path(path)
    records = list(records)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fmt == "csv":
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_FIELDS)
            for rec in records:
                writer.writerow([_format(getattr(rec, k)) for k in TRACE_FIELDS])
        elif fmt in ("jsonl", "json"):
            for rec in records:
                f.write(json.dumps(asdict(rec)) + "\n")
        else:
            raise ValueError(f"unknown trace format {fmt!r}")


def read_trace(path, fmt: str = "csv") -> list[TraceRecord]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        if fmt == "csv":
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != TRACE_FIELDS:
                raise ValueError(f"unexpected trace header {header}")
            rows = [dict(zip(header, row)) for row in reader]
        else:
            rows = [json.loads(line) for line in f if line.strip()]
    return [TraceRecord(round=int(r["round"]), **{k: float(r[k]) for k in TRACE_FIELDS[1:]}) for r in rows]
