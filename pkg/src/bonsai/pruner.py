"""Binary trainable gates and per-cell memory compression.

A gate multiplies a connection's output by ``G(w) + S(w)``: a unit step in
``w`` plus a sawtooth of amplitude below ``1/M``. The sum is 0 or 1 up to the
saw ripple, and its slope is 1 almost everywhere, so gradient descent sees
the effect of gating.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter

DEFAULT_M = 1e5
GATE_INIT = 0.1
LAMBDA_PERIOD = 16


def gate(w):
    return 0.0 if w < 0 else 1.0


def saw(w, M):
    mw = M * w
    return (mw - math.floor(mw)) / M


def gate_factor(w, M):
    return gate(w) + saw(w, M)


@dataclass(eq=False)
class PrunerGate:
    weight: Parameter
    size_bytes: int
    M: float = DEFAULT_M
    alive: bool = True
    name: str = ""

    @classmethod
    def create(cls, size_bytes, M=DEFAULT_M, init=GATE_INIT, name="", learnable=True):
        if size_bytes <= 0:
            raise ValueError(f"gate {name}: size must be positive, got {size_bytes}")
        w = Parameter(np.array([init]), name=f"{name}.gate", learnable=learnable)
        return cls(w, int(size_bytes), M, True, name)

    @property
    def w(self):
        return float(self.weight.data[0])

    @property
    def is_open(self):
        return self.alive and self.w >= 0

    def factor(self):
        return gate_factor(self.w, self.M) if self.alive else 0.0


def apply_pruner(x, g):
    """``(G(w) + S(w)) * x``; a deadheaded gate yields zeros without touching ``x``."""
    if not g.alive:
        return ag.Tensor(np.zeros(x.shape))
    return ag.gate_scale(x, g.weight, g.factor())


def _gates_of(cell):
    return cell if isinstance(cell, (list, tuple)) else cell.gates


def cell_compression(cell):
    """Unclamped ratio sum_j s_j (G+S)(w_j) / sum_j s_j over a cell's gates."""
    gates = _gates_of(cell)
    total = sum(g.size_bytes for g in gates)
    if total <= 0:
        raise ValueError("cell has no gated connections (zero total size)")
    return math.fsum(g.size_bytes * g.factor() for g in gates) / total


def ratio_tensor(cell):
    """Differentiable version of ``cell_compression``."""
    gates = _gates_of(cell)
    total = sum(g.size_bytes for g in gates)
    if total <= 0:
        raise ValueError("cell has no gated connections (zero total size)")
    live = [g for g in gates if g.alive]
    return ag.weighted_ratio([g.weight for g in live], [g.size_bytes for g in live],
                             [g.factor() for g in live], total)


@dataclass
class CompressionState:
    per_cell_ratio: list = field(default_factory=list)
    target: float | None = None
    lam: float = 0.0

    @classmethod
    def measure(cls, cells, target=None, lam=0.0):
        ratios = [min(max(cell_compression(c), 0.0), 1.0) for c in cells]
        return cls(ratios, target, lam)


def compression_loss(ratios, target, lam):
    """``lam * ||target - ratios||_2`` as a scalar tensor.

    ``ratios`` is a list of scalar tensors (from ``ratio_tensor``) or floats;
    ``target`` is one value for every cell or one value per cell.
    """
    if target is None:
        raise ValueError("compression target must lie in (0, 1], got None")
    goal = np.asarray(target, dtype=float)
    if goal.ndim > 1 or not np.all((goal > 0.0) & (goal <= 1.0)):
        raise ValueError(f"compression target must lie in (0, 1], got {target}")
    if not len(ratios):
        raise ValueError("no cells to compress")
    if goal.ndim == 1 and len(goal) != len(ratios):
        raise ValueError(f"{len(goal)} targets for {len(ratios)} cells")
    vec = ag.stack([r if isinstance(r, ag.Tensor) else ag.Tensor(r) for r in ratios])
    diff = ag.add(vec, ag.Tensor(-np.broadcast_to(goal, (len(ratios),)).copy()))
    return ag.scale(ag.l2norm(diff), float(lam))


def lambda_schedule(epochs_in_phase, lambda0, target_met=False):
    """Compression weight inside a prune phase: doubles every 16 epochs while
    the target is unmet. Once the target is met no pressure is applied."""
    if lambda0 <= 0:
        raise ValueError("lambda0 must be positive")
    if target_met:
        return 0.0
    return lambda0 * 2 ** (epochs_in_phase // LAMBDA_PERIOD)


def deadhead(model):
    """Permanently remove every live gated connection whose gate is closed.

    Returns the number of connections removed.
    """
    removed = 0
    for cell in model.cells:
        for conn in cell.connections:
            if conn.gate.alive and conn.gate.w < 0:
                conn.remove()
                cell.live_bytes -= conn.gate.size_bytes
                removed += 1
    return removed


@dataclass
class CellHealth:
    cell_index: int
    open: int
    closed: int
    deadheaded: int
    open_bytes: int
    total_bytes: int


def pruner_health_report(model):
    rows = []
    for cell in model.cells:
        gates = cell.gates
        rows.append(CellHealth(
            cell_index=cell.index,
            open=sum(1 for g in gates if g.is_open),
            closed=sum(1 for g in gates if g.alive and g.w < 0),
            deadheaded=sum(1 for g in gates if not g.alive),
            open_bytes=sum(g.size_bytes for g in gates if g.is_open),
            total_bytes=sum(g.size_bytes for g in gates),
        ))
    return rows


HEALTH_COLUMNS = ["cell_index", "open", "closed", "deadheaded", "open_bytes", "total_bytes"]


def write_health_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEALTH_COLUMNS)
        for r in rows:
            writer.writerow([getattr(r, c) for c in HEALTH_COLUMNS])
