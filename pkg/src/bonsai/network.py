"""The live, trainable over-parameterized model.

A ``Hypernetwork`` is built from a planned genotype (usually the
hyper-connected one) but only instantiates the cells that have been placed;
the scheduler places them section by section. Each prunable connection owns
a ``PrunerGate`` and the module it guards. Removing a connection drops the
module, so its parameters stop being trained and counted.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .ops import ClassifierHead, ReduceAdapter, Stem, make_edge_op
from .pruner import DEFAULT_M, GATE_INIT, PrunerGate, apply_pruner
from .space import (PREV, SKIP, CellSpec, EdgeSpec, Layout, ModelGenotype, NodeSpec,
                    genotype_connections)

CLASSIFICATION = "classification"
AUXILIARY = "auxiliary"


class Connection:
    def __init__(self, key, gate, module):
        self.key = key
        self.gate = gate
        self.module = module

    def remove(self):
        self.gate.alive = False
        self.module = None

    def params(self):
        if self.module is None:
            return []
        ps = self.module.params() if not isinstance(self.module, list) else \
            [p for m in self.module for p in m.params()]
        return ps


class Edge:
    def __init__(self, source):
        self.source = source
        self.ops = []  # Connection per gated op
        self.base = None  # ungated spine path, edges from ``prev`` only


def _run_chain(chain, x, training):
    for adapter in chain:
        x = adapter(x, training)
    return x


class Cell:
    def __init__(self, spec, layout, rng, M, gate_init, trainable_gates):
        self.index = spec.index
        self.kind = spec.kind
        self.shape = layout.shapes[spec.index]
        s = self.shape
        n = spec.index
        stride = 2 if s.c_out != s.c_in else 1

        def new_gate(key, name):
            return PrunerGate.create(layout.connection_bytes(key), M, gate_init, name,
                                     learnable=trainable_gates)

        self.inputs = []
        for j in spec.optional_inputs:
            key = ("in", n, j)
            name = f"cell{n}.in{j}"
            chain = [ReduceAdapter(ci, co, 2, rng, f"{name}.adapt{i}")
                     for i, (ci, co) in enumerate(layout.adapter_chain(j, n))]
            self.inputs.append(Connection(key, new_gate(key, name), chain))
        # relu-conv1x1-bn on each input slot keeps every cell's inputs at unit scale
        self.preprocess = {PREV: ReduceAdapter(s.c_in, s.c_in, 1, rng, f"cell{n}.pre.prev")}
        self.stem_path = []
        if n > 0:
            self.preprocess[SKIP] = ReduceAdapter(s.c_in, s.c_in, 1, rng, f"cell{n}.pre.skip")
            self.stem_path = [ReduceAdapter(ci, co, 2, rng, f"cell{n}.stem.adapt{i}")
                              for i, (ci, co) in enumerate(layout.adapter_chain(-1, n))]

        self.nodes = []
        for k, node in enumerate(spec.nodes):
            edges = {e.source: e for e in node.edges}
            if PREV not in edges:
                edges = {PREV: EdgeSpec(PREV, ()), **edges}
            built = []
            for src, espec in edges.items():
                edge = Edge(src)
                c_src, c_out, e_stride = layout.edge_geometry(n, src)
                for kind in espec.ops:
                    key = ("op", n, k, src, kind)
                    name = f"cell{n}.node{k}.{src}.{kind.value}"
                    op = make_edge_op(kind, c_src, c_out, e_stride, rng, name)
                    edge.ops.append(Connection(key, new_gate(key, name), op))
                if src == PREV:
                    edge.base = (ReduceAdapter(c_src, c_out, 2, rng, f"cell{n}.node{k}.base")
                                 if stride == 2 else None)
                built.append(edge)
            self.nodes.append(built)

        self.connections = self.inputs + [c for edges in self.nodes for e in edges for c in e.ops]
        self.total_bytes = layout.hyper_gated_bytes(n)
        self.live_bytes = sum(c.gate.size_bytes for c in self.connections)
        self.fixed_bytes = layout.cell_fixed_bytes(n)

    @property
    def gates(self):
        return [c.gate for c in self.connections]

    def params(self):
        ps = [p for a in self.stem_path for p in a.params()]
        for pre in self.preprocess.values():
            ps.extend(pre.params())
        for edges in self.nodes:
            for e in edges:
                if e.base is not None:
                    ps.extend(e.base.params())
        for c in self.connections:
            ps.extend(c.params())
            if c.gate.alive and c.gate.weight.learnable:
                ps.append(c.gate.weight)
        return ps

    def forward(self, prev, stem, earlier, training, rng, drop_p):
        slots = {PREV: self.preprocess[PREV](prev, training)}
        if self.index > 0:
            parts = [_run_chain(self.stem_path, stem, training)]
            for conn in self.inputs:
                if conn.gate.alive:
                    j = conn.key[2]
                    parts.append(apply_pruner(_run_chain(conn.module, earlier[j], training), conn.gate))
            slots[SKIP] = self.preprocess[SKIP](ag.add_n(parts), training)
        outs = []
        for k, edges in enumerate(self.nodes):
            terms = []
            for edge in edges:
                x = slots[edge.source] if edge.source in slots else outs[int(edge.source[1:])]
                gated = [apply_pruner(c.module(x, training), c.gate)
                         for c in edge.ops if c.gate.alive]
                if gated:
                    terms.append(ag.drop_path(ag.add_n(gated), drop_p, training, rng))
                if edge.source == PREV:
                    terms.append(edge.base(x, training) if edge.base is not None else x)
            outs.append(ag.add_n(terms))
        return ag.add_n(outs)

    def to_spec(self):
        """Structure of the cell counting only open (alive, w >= 0) connections."""
        n = self.index
        incoming = [n - 1] if n > 0 else []
        incoming += [c.key[2] for c in self.inputs if c.gate.is_open]
        nodes = []
        for edges in self.nodes:
            especs = []
            for e in edges:
                ops = tuple(c.key[4] for c in e.ops if c.gate.is_open)
                if ops:
                    especs.append(EdgeSpec(e.source, ops))
            nodes.append(NodeSpec(tuple(especs)))
        return CellSpec(n, self.kind, tuple(incoming), tuple(nodes))


@dataclass(eq=False)
class Tower:
    position: int
    kind: str
    weight: float
    head: ClassifierHead


class Hypernetwork:
    def __init__(self, plan, batch_size, rng, M=DEFAULT_M, gate_init=GATE_INIT,
                 trainable_gates=True):
        self.plan = plan
        self.layout = Layout(plan, batch_size)
        self.rng = rng
        self.M = M
        self.gate_init = gate_init
        self.trainable_gates = trainable_gates
        self.stem = Stem(plan.input_shape[0], plan.channels0, rng)
        self.cells = []
        self.towers = []

    # -- construction ------------------------------------------------------

    def place_cells(self, indices):
        for i in indices:
            if i != len(self.cells):
                raise ValueError(f"cells must be placed in order; next is {len(self.cells)}, got {i}")
            self.cells.append(Cell(self.plan.cells[i], self.layout, self.rng, self.M,
                                   self.gate_init, self.trainable_gates))

    def add_tower(self, kind=CLASSIFICATION, weight=1.0, position=None):
        if kind == CLASSIFICATION and self.classification_tower() is not None:
            raise ValueError("a classification tower already exists")
        position = len(self.cells) - 1 if position is None else position
        c = self.layout.shapes[position].c_out
        head = ClassifierHead(c, self.plan.class_count, self.rng,
                              name=f"tower{len(self.towers)}@{position}")
        tower = Tower(position, kind, weight, head)
        self.towers.append(tower)
        return tower

    def classification_tower(self):
        for t in self.towers:
            if t.kind == CLASSIFICATION:
                return t
        return None

    # -- forward -----------------------------------------------------------

    def forward(self, x, training=False, rng=None, drop_p=0.0):
        """Returns a list of (tower, logits) in tower order."""
        if not isinstance(x, ag.Tensor):
            x = ag.Tensor(x)
        stem = self.stem(x, training)
        outs = []
        prev = stem
        for cell in self.cells:
            prev = cell.forward(prev, stem, outs, training, rng, drop_p)
            outs.append(prev)
        return [(t, t.head(outs[t.position])) for t in self.towers]

    def logits(self, x):
        results = self.forward(x, training=False)
        for tower, out in results:
            if tower.kind == CLASSIFICATION:
                return out
        raise ValueError("no classification tower")

    # -- bookkeeping -------------------------------------------------------

    def params(self):
        ps = list(self.stem.params())
        for cell in self.cells:
            ps.extend(cell.params())
        for t in self.towers:
            ps.extend(t.head.params())
        return ps

    def gate_weights(self):
        return [g.weight for cell in self.cells for g in cell.gates if g.alive]

    def accounted_bytes(self):
        """Stem + towers + per-cell fixed paths + live gated connections."""
        total = self.layout.stem_bytes()
        total += sum(cell.fixed_bytes + cell.live_bytes for cell in self.cells)
        total += sum(self.layout.tower_bytes(t.position) for t in self.towers)
        return total

    def genotype(self):
        cells = tuple(c.to_spec() for c in self.cells)
        return ModelGenotype(cells, self.plan.channels0, self.plan.input_shape,
                             self.plan.class_count)

    def open_ratios(self):
        """Per-cell fraction of hyper-connected gated bytes that are open."""
        return [sum(g.size_bytes for g in c.gates if g.is_open) / c.total_bytes
                for c in self.cells]


def build_hypernetwork(plan, batch_size, rng, M=DEFAULT_M, gate_init=GATE_INIT,
                       trainable_gates=True, towers=None):
    """Build every cell of ``plan`` at once with a classification tower at the end.

    ``towers`` optionally lists (position, weight) auxiliary towers to attach
    first.
    """
    net = Hypernetwork(plan, batch_size, rng, M, gate_init, trainable_gates)
    net.place_cells(range(len(plan.cells)))
    for position, weight in towers or ():
        net.add_tower(AUXILIARY, weight, position)
    net.add_tower()
    return net


def param_snapshot(net):
    return {id(p): p.data.copy() for p in net.params()}


def recount_live_bytes(cell):
    """Independent walk over a cell's structure (used as an oracle)."""
    total = 0
    for conn in cell.inputs:
        if conn.gate.alive:
            total += conn.gate.size_bytes
    for edges in cell.nodes:
        for e in edges:
            for conn in e.ops:
                if conn.gate.alive:
                    total += conn.gate.size_bytes
    return total


def genotype_open_bytes(genotype, layout, cell):
    return sum(layout.connection_bytes(k) for k in genotype_connections(genotype.cells[cell]))
