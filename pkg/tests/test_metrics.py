from dataclasses import replace

import numpy as np
import pytest

from fedcpsl.data import ClientData, LabeledDataset, UnlabeledDataset, full_batch, one_hot
from fedcpsl.metrics import (
    TRACE_FIELDS,
    TraceRecord,
    accuracy,
    client_accuracies,
    global_gradient,
    mean_test_accuracy,
    optimality_gap_global,
    optimality_gap_personalized,
    read_trace,
    write_trace,
)
from fedcpsl.nn import ModelSpec, finite_diff_grad
from fedcpsl.objective import SemiSupHyper, grad_f_theta, loss_f

from helpers import small_setup


def _record(r, x=0.5):
    return TraceRecord(r, x, 0.0, x / 2, 1.25, 0.75, 0.8, 0.6, 12.0)


def test_global_gradient_against_finite_differences():
    spec, s, theta, states = small_setup(hidden=3)
    w = [0.1, 0.2, 0.3, 0.4]
    datas = [st.data for st in states]
    nus = [st.nu for st in states]

    def cost(t):
        return sum(wi * loss_f(spec, t, nu, full_batch(d.labeled, d.unlabeled), s.hyper)
                   for wi, nu, d in zip(w, nus, datas))

    g = global_gradient(spec, theta, datas, nus, w, s.hyper)
    np.testing.assert_allclose(g, finite_diff_grad(cost, theta), rtol=1e-5, atol=1e-8)


def test_gap_two_clients_direct():
    spec, s, theta, states = small_setup(n_clients=2)
    datas = [st.data for st in states]
    before = [st.nu for st in states]
    after = [np.roll(nu + np.eye(3)[0], 1, axis=1) / 2 for nu in before]
    w = [0.25, 0.75]
    g = sum(wi * grad_f_theta(spec, theta, nu, full_batch(d.labeled, d.unlabeled), s.hyper)
            for wi, nu, d in zip(w, after, datas))
    move = sum(wi * np.sum((a - b) ** 2) for wi, a, b in zip(w, after, before))
    gn, nt, comb = optimality_gap_global(spec, theta, datas, before, after, w, s.hyper, L_est=2.0)
    assert gn == pytest.approx(float(g @ g), rel=1e-12)
    assert nt == pytest.approx(move, rel=1e-12) and nt > 0
    assert comb == pytest.approx(gn + 31 * 2.0 / 64 * nt, rel=1e-12)
    assert optimality_gap_global(spec, theta, datas, before, before, w, s.hyper)[1:] == (0.0, None)


def test_gap_vanishes_at_known_stationary_point():
    # constant inputs: the cross-entropy minimizer puts the softmax at the label frequencies
    spec = ModelSpec((2, 3))
    hyper = SemiSupHyper(0.0, 0.0)
    freqs = np.array([0.2, 0.3, 0.5])
    ids = np.repeat([0, 1, 2], [2, 3, 5])
    lab = LabeledDataset(np.zeros((10, 2)), one_hot(ids, 3))
    empty_u = UnlabeledDataset(np.zeros((0, 2)), np.zeros(0, int))
    datas = [ClientData(lab, empty_u, lab), ClientData(lab, empty_u, lab)]
    theta = np.concatenate([np.zeros(6), np.log(freqs)])
    nus = [np.zeros((0, 3))] * 2
    gn, nt, _ = optimality_gap_global(spec, theta, datas, nus, nus, [0.5, 0.5], hyper)
    assert gn < 1e-10 and nt == 0.0
    gn_off, _, _ = optimality_gap_global(spec, np.zeros(9), datas, nus, nus, [0.5, 0.5], hyper)
    assert gn_off > 1e-3


def test_personalized_gap_edge_cases():
    spec, s, theta, states = small_setup()
    w = np.full(4, 0.25)
    frozen = [replace(st, beta=0.0, theta_lc=theta + 1.0) for st in states]
    assert optimality_gap_personalized(spec, frozen, theta, w, s.hyper) == 0.0
    st = replace(states[0], beta=1.0, theta_lc=theta + 0.2)
    g = grad_f_theta(spec, st.theta_lc, st.nu, full_batch(st.data.labeled, st.data.unlabeled), s.hyper)
    assert optimality_gap_personalized(spec, [st], theta, [1.0], s.hyper) == pytest.approx(float(g @ g), rel=1e-12)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 2, 2], [0, 1, 2, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_mean_accuracy_is_client_uniform():
    spec, s, theta, states = small_setup()
    accs = client_accuracies(spec, states, theta, personalized=False)
    assert mean_test_accuracy(spec, states, theta, False) == pytest.approx(np.mean(accs))
    # theta_lc starts at theta, so any mixture predicts like the global model
    assert client_accuracies(spec, [replace(st, beta=0.3) for st in states], theta, True) == accs
    nothing = [replace(st, data=replace(st.data, test=st.data.test.subset(np.arange(0)))) for st in states]
    assert np.isnan(mean_test_accuracy(spec, nothing, theta, False))


def test_trace_files(tmp_path):
    p = tmp_path / "t.csv"
    write_trace([], p)
    assert p.read_text() == ",".join(TRACE_FIELDS) + "\n"
    write_trace([_record(1)], p)
    lines = p.read_bytes().split(b"\n")
    assert len(lines) == 3 and lines[-1] == b"" and b"\r" not in p.read_bytes()
    recs = [_record(i, 0.1 * i) for i in range(1, 6)]
    write_trace(recs, p)
    assert read_trace(p) == recs
    write_trace(recs, tmp_path / "t.jsonl", fmt="jsonl")
    assert read_trace(tmp_path / "t.jsonl", fmt="jsonl") == recs
    with pytest.raises(ValueError):
        write_trace(recs, p, fmt="xml")
    p.write_text("round,other\n")
    with pytest.raises(ValueError):
        read_trace(p)
