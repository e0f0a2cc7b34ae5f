import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bonsai import autograd as ag
from bonsai.network import Hypernetwork, recount_live_bytes
from bonsai.pruner import (CompressionState, PrunerGate, apply_pruner, cell_compression,
                           compression_loss, deadhead, gate, lambda_schedule, pruner_health_report,
                           ratio_tensor, saw, write_health_csv)
from bonsai.space import hyperconnected_genotype

GIB = 2 ** 30


def oracle_saw(w, M):
    mw = Fraction(M * w)  # the float product, then exact arithmetic
    return float((mw - math.floor(mw)) / Fraction(M))


def oracle_factor(w, M):
    return (0.0 if w < 0 else 1.0) + oracle_saw(w, M)


def small_model(cells=4, nodes=2, rng=None):
    plan = hyperconnected_genotype(cells, nodes, 4, (3, 8, 8), 3)
    net = Hypernetwork(plan, 4, rng or np.random.default_rng(0))
    net.place_cells(range(cells))
    net.add_tower()
    return net


def test_gate_cases():
    assert gate(-0.5) == 0.0
    assert gate(0.0) == 1.0
    assert gate(0.3) == 1.0


def test_saw_cases():
    assert saw(0.0, 123.0) == 0.0
    assert saw(0.2503, 1000) == pytest.approx(0.0003, rel=1e-9)
    assert saw(0.5, 1000) == 0.0


def test_pruner_math_matches_direct_evaluation():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        w = float(rng.uniform(-1, 1))
        M = float(10 ** rng.uniform(1, 6))
        x = rng.normal(size=int(rng.integers(1, 6)))
        assert gate(w) == (0.0 if w < 0 else 1.0)
        s = saw(w, M)
        ref = oracle_saw(w, M)
        assert abs(s - ref) <= 1e-12 * max(abs(ref), 1.0 / M)
        assert 0.0 <= s < 1.0 / M
        g = PrunerGate.create(8, M, w)
        out = apply_pruner(ag.Tensor(x), g).data
        np.testing.assert_allclose(out, oracle_factor(w, M) * x, rtol=1e-12, atol=0)


def test_pruner_examples():
    x = np.array([0.5, -3.0, 7.25])
    np.testing.assert_array_equal(apply_pruner(ag.Tensor(x), PrunerGate.create(1, 1000, 0.5)).data, x)
    np.testing.assert_array_equal(apply_pruner(ag.Tensor(x), PrunerGate.create(1, 1000, -0.25)).data, 0 * x)


def test_gate_weight_gradient_is_sum_of_x():
    g = PrunerGate.create(1, 1000, 0.3)
    x = ag.Tensor(np.array([1.0, 2.0, 3.0]))
    ag.total(apply_pruner(x, g)).backward()
    assert g.weight.grad[0] == 6.0
    # finite differences with a step far below 1/M, inside one saw tooth
    f = lambda w: float(np.sum(apply_pruner(x, PrunerGate.create(1, 1000, w)).data))
    assert (f(0.3004 + 1e-9) - f(0.3004 - 1e-9)) / 2e-9 == pytest.approx(6.0, rel=1e-5)


def test_gate_gradient_finite_differences_away_from_discontinuities():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 200:
        M = float(10 ** rng.uniform(2, 6))
        w = float(rng.uniform(-1, 1))
        frac = M * w - math.floor(M * w)
        if not 0.1 < frac < 0.9:
            continue
        x = rng.normal(size=5)
        h = 1e-2 / M
        f = lambda v: math.fsum(apply_pruner(ag.Tensor(x), PrunerGate.create(1, M, v)).data)
        fd = (f(w + h) - f(w - h)) / (2 * h)
        g = PrunerGate.create(1, M, w)
        ag.total(apply_pruner(ag.Tensor(x), g)).backward()
        assert g.weight.grad[0] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        checked += 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(10, 1e6), st.lists(st.floats(-100, 100), min_size=1, max_size=5))
def test_pruner_output_bounded_by_saw(w, M, xs):
    x = np.array(xs)
    out = apply_pruner(ag.Tensor(x), PrunerGate.create(1, M, w)).data
    assert np.all(np.abs(out - gate(w) * x) <= np.abs(x).max() / M + 1e-15)


def test_dead_gate_yields_zeros_and_no_gradient():
    g = PrunerGate.create(4, 1000, 0.3)
    g.alive = False
    x = ag.Tensor(np.ones(3), requires_grad=True)
    out = apply_pruner(x, g)
    np.testing.assert_array_equal(out.data, 0.0)
    assert not out.requires_grad


def test_compression_examples():
    gates = [PrunerGate.create(GIB, 1e5, 0.1) for _ in range(8)]
    gates[0].weight.data[0] = -1.0
    gates[1].weight.data[0] = -2.0
    assert cell_compression(gates) == 0.75
    assert cell_compression([PrunerGate.create(4, 1e5, 0.0) for _ in range(3)]) == 1.0
    half = [PrunerGate.create(4, 1e5, 0.0), PrunerGate.create(4, 1e5, -0.5)]
    assert cell_compression(half) == 0.5
    half[1].alive = False
    assert cell_compression(half) == 0.5


def test_compression_loss_examples():
    assert compression_loss([0.75], 0.5, 0.01).item() == pytest.approx(0.0025, rel=1e-12)
    assert compression_loss([0.75, 0.75], 0.5, 0.01).item() == pytest.approx(0.01 * math.sqrt(2 * 0.25 ** 2))
    assert compression_loss([0.003536], 0.003536, 0.01).item() == 0.0
    assert compression_loss([0.5, 0.9], [0.5, 0.9], 1.0).item() == 0.0
    for bad in (0.0, 1.5, -0.1, None):
        with pytest.raises(ValueError):
            compression_loss([0.5], bad, 0.01)


def test_compression_loss_reaches_every_live_gate():
    net = small_model()
    loss = compression_loss([ratio_tensor(c) for c in net.cells], 0.5, 0.01)
    loss.backward()
    for cell in net.cells:
        for g in cell.gates:
            assert g.weight.grad is not None and g.weight.grad[0] > 0


def test_lambda_schedule():
    assert lambda_schedule(0, 0.01) == 0.01
    assert lambda_schedule(16, 0.01) == 0.02
    assert lambda_schedule(40, 0.01) == 0.04
    assert lambda_schedule(40, 0.01, target_met=True) == 0.0
    trace = [lambda_schedule(e, 0.01) for e in range(100)]
    assert all(a <= b for a, b in zip(trace, trace[1:]))
    with pytest.raises(ValueError):
        lambda_schedule(0, 0.0)


def test_deadhead_bookkeeping():
    net = small_model()
    assert deadhead(net) == 0
    before = net.accounted_bytes()
    victim = net.cells[2].connections[3]
    victim.gate.weight.data[0] = -0.1
    assert deadhead(net) == 1
    assert net.accounted_bytes() == before - victim.gate.size_bytes
    assert not victim.gate.alive and victim.module is None


def test_compression_oracle_under_random_updates():
    rng = np.random.default_rng(2024)
    net = small_model(rng=rng)
    gates = [(c, g) for c in net.cells for g in c.gates]
    for step in range(1000):
        cell, g = gates[rng.integers(len(gates))]
        if g.alive:
            g.weight.data[0] = rng.uniform(-0.2, 0.2)
        if step % 50 == 49:
            before = [c.live_bytes for c in net.cells]
            deadhead(net)
            assert all(c.live_bytes <= b for c, b in zip(net.cells, before))
        for c in net.cells:
            assert c.live_bytes == recount_live_bytes(c)
            brute = [conn.gate for conn in c.inputs] + \
                [op.gate for edges in c.nodes for e in edges for op in e.ops]
            total = sum(x.size_bytes for x in brute)
            expected = math.fsum(x.size_bytes * (gate(x.w) + saw(x.w, x.M)) for x in reversed(brute)
                                 if x.alive) / total
            assert cell_compression(c) == expected
    ratios = CompressionState.measure(net.cells).per_cell_ratio
    assert all(0.0 <= r <= 1.0 for r in ratios)


def test_health_report(tmp_path):
    net = small_model()
    rows = pruner_health_report(net)
    assert all(r.closed == 0 and r.deadheaded == 0 for r in rows)
    for conn in net.cells[1].connections[:3]:
        conn.gate.weight.data[0] = -1.0
    net.cells[3].connections[0].gate.weight.data[0] = -1.0
    assert deadhead(net) == 4
    rows = pruner_health_report(net)
    assert sum(r.deadheaded for r in rows) == 4
    for r, cell in zip(rows, net.cells):
        assert r.open + r.closed + r.deadheaded == len(cell.connections)
        assert r.total_bytes == sum(g.size_bytes for g in cell.gates)
        assert r.open_bytes == recount_live_bytes(cell)
    write_health_csv(rows, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "cell_index,open,closed,deadheaded,open_bytes,total_bytes"
    assert len(lines) == 5


def test_gate_rejects_non_positive_size():
    with pytest.raises(ValueError):
        PrunerGate.create(0)
