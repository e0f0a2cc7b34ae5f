"""The relaxed cell-based search space.

Each cell n >= 1 has two input slots:

    prev  the output of cell n-1 (mandatory, never gated)
    skip  the stem output plus a gated sum of cells 0..n-2

Cell 0 has only ``prev``, fed by the stem. Node k of a cell may take an edge
from either slot and from any earlier node; every edge carries a subset of
the seven edge ops. Each optional cell input and each op instance is a
prunable connection. Edges from ``prev`` additionally keep an ungated
identity (or ReduceAdapter, in reduction cells) so the spine from stem to
classifier can never be severed.

Counting model
--------------
``count_cell_configurations(N, K, I)``: node k chooses, for each of its
I + k candidate sources, either no edge or one of the 2^K - 1 nonempty op
subsets, giving 2^(K * sum_k (I + k)) cells. With N=4, K=7, I=2 this is
2^98 ~ 3.17e29.

``count_connection_sets(L)``: cell n >= 2 may take any subset of cells
0..n-2 (cell n-1 is mandatory), giving 2^((L-1)(L-2)/2) wiring patterns.
For L=8 this is 2^21 = 2097152, which does not match the 254 quoted for
8 cells; both numbers are reported side by side.
"""
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .ops import EDGE_OPS, SEPARABLE, OpKind, edge_op_from_name, edge_param_count

NORMAL = "normal"
REDUCTION = "reduction"
PREV = "prev"
SKIP = "skip"
BYTES_PER_ELEMENT = 4

QUOTED_CELL_COUNT = 3e29
QUOTED_RESTRICTED_CELL_COUNT = 6e11
QUOTED_CONNECTION_SETS = 254


def node_source(k):
    return f"n{k}"


def _ops_key(ops):
    return tuple(sorted(set(ops), key=EDGE_OPS.index))


@dataclass(frozen=True)
class EdgeSpec:
    source: str
    ops: tuple

    def __post_init__(self):
        object.__setattr__(self, "ops", _ops_key(self.ops))


@dataclass(frozen=True)
class NodeSpec:
    edges: tuple


@dataclass(frozen=True)
class CellSpec:
    index: int
    kind: str
    incoming_cells: tuple
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "incoming_cells", tuple(sorted(set(self.incoming_cells))))

    @property
    def node_count(self):
        return len(self.nodes)

    @property
    def optional_inputs(self):
        return tuple(j for j in self.incoming_cells if j != self.index - 1)


@dataclass(frozen=True)
class ModelGenotype:
    cells: tuple
    channels0: int
    input_shape: tuple
    class_count: int


def reduction_positions(cell_count):
    return sorted({cell_count // 3, (2 * cell_count) // 3})


def candidate_sources(cell_index, node_index):
    slots = [PREV] if cell_index == 0 else [PREV, SKIP]
    return slots + [node_source(i) for i in range(node_index)]


def hyperconnected_cell(index, kind, node_count):
    nodes = tuple(
        NodeSpec(tuple(EdgeSpec(src, EDGE_OPS) for src in candidate_sources(index, k)))
        for k in range(node_count)
    )
    return CellSpec(index, kind, tuple(range(index)), nodes)


def hyperconnected_genotype(cells, nodes, channels0, input_shape, class_count):
    if cells < 1 or nodes < 1:
        raise ValueError(f"need at least one cell and one node (got {cells} cells, {nodes} nodes)")
    reductions = reduction_positions(cells)
    specs = tuple(hyperconnected_cell(i, REDUCTION if i in reductions else NORMAL, nodes)
                  for i in range(cells))
    g = ModelGenotype(specs, channels0, tuple(input_shape), class_count)
    Layout(g, 1)  # validates spatial sizes
    return g


def validate_genotype(g):
    for pos, cell in enumerate(g.cells):
        if cell.index != pos:
            raise ValueError(f"cell at position {pos} has index {cell.index}")
        if cell.kind not in (NORMAL, REDUCTION):
            raise ValueError(f"cell {pos}: unknown kind {cell.kind!r}")
        if pos > 0 and pos - 1 not in cell.incoming_cells:
            raise ValueError(f"cell {pos}: mandatory input from cell {pos - 1} missing")
        if any(not 0 <= j < pos for j in cell.incoming_cells):
            raise ValueError(f"cell {pos}: incoming cells must precede it, got {cell.incoming_cells}")
        if cell.node_count < 1:
            raise ValueError(f"cell {pos}: needs at least one node")
        for k, node in enumerate(cell.nodes):
            allowed = candidate_sources(pos, k)
            for edge in node.edges:
                if edge.source not in allowed:
                    raise ValueError(f"cell {pos} node {k}: source {edge.source!r} not in {allowed}")
                for op in edge.ops:
                    if op not in EDGE_OPS:
                        raise ValueError(f"cell {pos} node {k}: {op} is not an edge op")


# --------------------------------------------------------------------------
# shapes and memory sizes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CellShape:
    c_in: int
    hw_in: int
    c_out: int
    hw_out: int


class Layout:
    """Tensor shapes and connection memory sizes for a genotype's skeleton.

    A connection's size is its output activation at the configured batch
    size times 4 bytes, plus 4 bytes per parameter.
    """

    def __init__(self, genotype, batch_size):
        c, h, w = genotype.input_shape
        if h != w:
            raise ValueError(f"square inputs only, got {h}x{w}")
        self.genotype = genotype
        self.batch_size = batch_size
        self.shapes = []
        ch, hw = genotype.channels0, h
        for cell in genotype.cells:
            if cell.kind == REDUCTION:
                if hw < 2 or hw % 2:
                    raise ValueError(
                        f"input spatial size {h} cannot survive the reduction at cell {cell.index}")
                shape = CellShape(ch, hw, 2 * ch, hw // 2)
            else:
                shape = CellShape(ch, hw, ch, hw)
            self.shapes.append(shape)
            ch, hw = shape.c_out, shape.hw_out

    def _activation(self, channels, hw):
        return self.batch_size * channels * hw * hw * BYTES_PER_ELEMENT

    def edge_geometry(self, cell, source):
        s = self.shapes[cell]
        from_slot = source in (PREV, SKIP)
        c_src = s.c_in if from_slot else s.c_out
        stride = 2 if (from_slot and s.c_out != s.c_in) else 1
        return c_src, s.c_out, stride

    def op_bytes(self, cell, source, kind):
        c_src, c_out, stride = self.edge_geometry(cell, source)
        s = self.shapes[cell]
        params = edge_param_count(kind, c_src, c_out, stride)
        return self._activation(c_out, s.hw_out) + params * BYTES_PER_ELEMENT

    def source_shape(self, j):
        """Output (channels, size) of cell j; j = -1 is the stem."""
        if j < 0:
            return self.genotype.channels0, self.genotype.input_shape[1]
        s = self.shapes[j]
        return s.c_out, s.hw_out

    def adapter_chain(self, j, cell):
        """(c_in, c_out) for each ReduceAdapter taking cell j's output to cell's input."""
        c, hw = self.source_shape(j)
        target = self.shapes[cell]
        chain = []
        while hw > target.hw_in:
            chain.append((c, 2 * c))
            c, hw = 2 * c, hw // 2
        if (c, hw) != (target.c_in, target.hw_in):
            raise ValueError(f"cannot adapt cell {j} output to cell {cell} input")
        return chain

    def _chain_params(self, chain):
        return sum(ci * co + 2 * co for ci, co in chain)

    def inter_bytes(self, cell, j):
        s = self.shapes[cell]
        params = self._chain_params(self.adapter_chain(j, cell))
        return self._activation(s.c_in, s.hw_in) + params * BYTES_PER_ELEMENT

    def connection_bytes(self, key):
        if key[0] == "op":
            _, cell, _node, source, kind = key
            return self.op_bytes(cell, source, kind)
        if key[0] == "in":
            _, cell, j = key
            return self.inter_bytes(cell, j)
        raise ValueError(f"unresolvable connection {key!r}")

    def stem_bytes(self):
        c_in = self.genotype.input_shape[0]
        c0, h = self.genotype.channels0, self.genotype.input_shape[1]
        return self._activation(c0, h) + (c0 * c_in * 9 + 2 * c0) * BYTES_PER_ELEMENT

    def base_path_bytes(self, cell):
        s = self.shapes[cell]
        params = s.c_in * s.c_out + 2 * s.c_out if s.c_out != s.c_in else 0
        return self._activation(s.c_out, s.hw_out) + params * BYTES_PER_ELEMENT

    def cell_fixed_bytes(self, cell):
        """Ungated memory: slot preprocessing, one base path per node, and the
        stem path into ``skip``."""
        spec = self.genotype.cells[cell]
        s = self.shapes[cell]
        slots = 1 if cell == 0 else 2
        pre = self._activation(s.c_in, s.hw_in) + (s.c_in * s.c_in + 2 * s.c_in) * BYTES_PER_ELEMENT
        fixed = slots * pre + spec.node_count * self.base_path_bytes(cell)
        if cell > 0:
            params = self._chain_params(self.adapter_chain(-1, cell))
            fixed += self._activation(s.c_in, s.hw_in) + params * BYTES_PER_ELEMENT
        return fixed

    def tower_bytes(self, cell):
        k = self.genotype.class_count
        c = self.shapes[cell].c_out
        return (c * k + k) * BYTES_PER_ELEMENT + self.batch_size * k * BYTES_PER_ELEMENT

    def hyper_connections(self, cell):
        """Keys of every prunable connection of ``cell`` in the hyper-connected state."""
        spec = self.genotype.cells[cell]
        keys = [("in", cell, j) for j in range(cell - 1)]
        for k in range(spec.node_count):
            for src in candidate_sources(cell, k):
                keys.extend(("op", cell, k, src, kind) for kind in EDGE_OPS)
        return keys

    def hyper_gated_bytes(self, cell):
        return sum(self.connection_bytes(k) for k in self.hyper_connections(cell))


def genotype_connections(cell_spec):
    """Keys of the prunable connections present in a cell spec."""
    n = cell_spec.index
    keys = [("in", n, j) for j in sorted(cell_spec.optional_inputs)]
    for k, node in enumerate(cell_spec.nodes):
        for edge in node.edges:
            keys.extend(("op", n, k, edge.source, kind) for kind in edge.ops)
    return keys


def memory_size(connection, layout):
    return layout.connection_bytes(connection)


def genotype_cell_ratio(genotype, layout, cell):
    """Fraction of the hyper-connected gated bytes present in ``genotype``'s cell."""
    present = sum(layout.connection_bytes(k) for k in genotype_connections(genotype.cells[cell]))
    return present / layout.hyper_gated_bytes(cell)


# --------------------------------------------------------------------------
# counting
# --------------------------------------------------------------------------

def count_cell_configurations(node_count, op_count, cell_inputs):
    if min(node_count, op_count, cell_inputs) < 1:
        raise ValueError("all arguments must be >= 1")
    sources = sum(cell_inputs + k for k in range(node_count))
    return 2 ** (op_count * sources)


def enumerate_cell_configurations(node_count, op_count, cell_inputs):
    """Yield every distinct cell as a canonical nested tuple (exhaustive)."""
    op_subsets = [()]
    for r in range(1, op_count + 1):
        op_subsets.extend(itertools.combinations(range(op_count), r))
    per_node = []
    for k in range(node_count):
        per_node.append(list(itertools.product(op_subsets, repeat=cell_inputs + k)))
    for choice in itertools.product(*per_node):
        yield choice


def count_connection_sets(cell_count):
    if cell_count < 2:
        raise ValueError("need at least two cells")
    return 2 ** ((cell_count - 1) * (cell_count - 2) // 2)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

class GenotypeParseError(ValueError):
    pass


def genotype_to_dict(g):
    return {
        "channels0": g.channels0,
        "input_shape": list(g.input_shape),
        "class_count": g.class_count,
        "cells": [
            {
                "index": c.index,
                "kind": c.kind,
                "incoming_cells": sorted(c.incoming_cells),
                "nodes": [
                    {"sources": [{"from": e.source, "ops": [op.value for op in e.ops]}
                                 for e in node.edges]}
                    for node in c.nodes
                ],
            }
            for c in g.cells
        ],
    }


def serialize_genotype(g):
    return json.dumps(genotype_to_dict(g), indent=1) + "\n"


def _field(obj, key, where, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise GenotypeParseError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise GenotypeParseError(f"{where}.{key}: expected an integer, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise GenotypeParseError(f"{where}.{key}: expected a list, got {type(value).__name__}")
    if kind is str and not isinstance(value, str):
        raise GenotypeParseError(f"{where}.{key}: expected a string, got {value!r}")
    return value


def genotype_from_dict(doc):
    channels0 = _field(doc, "channels0", "genotype", int)
    shape = _field(doc, "input_shape", "genotype", list)
    if len(shape) != 3 or not all(isinstance(v, int) for v in shape):
        raise GenotypeParseError(f"genotype.input_shape: expected [C, H, W], got {shape!r}")
    classes = _field(doc, "class_count", "genotype", int)
    cells = []
    for ci, cdoc in enumerate(_field(doc, "cells", "genotype", list)):
        where = f"cells[{ci}]"
        index = _field(cdoc, "index", where, int)
        kind = _field(cdoc, "kind", where, str)
        incoming = _field(cdoc, "incoming_cells", where, list)
        nodes = []
        for ni, ndoc in enumerate(_field(cdoc, "nodes", where, list)):
            nwhere = f"{where}.nodes[{ni}]"
            edges = []
            for si, sdoc in enumerate(_field(ndoc, "sources", nwhere, list)):
                swhere = f"{nwhere}.sources[{si}]"
                src = _field(sdoc, "from", swhere, str)
                ops = []
                for oi, token in enumerate(_field(sdoc, "ops", swhere, list)):
                    try:
                        ops.append(edge_op_from_name(token))
                    except ValueError:
                        raise GenotypeParseError(
                            f"{swhere}.ops[{oi}]: unknown op {token!r}") from None
                edges.append(EdgeSpec(src, _ops_key(ops)))
            nodes.append(NodeSpec(tuple(edges)))
        cells.append(CellSpec(index, kind, tuple(sorted(incoming)), tuple(nodes)))
    g = ModelGenotype(tuple(cells), channels0, tuple(shape), classes)
    try:
        validate_genotype(g)
    except ValueError as exc:
        raise GenotypeParseError(str(exc)) from None
    return g


def parse_genotype(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return genotype_from_dict(doc)


# --------------------------------------------------------------------------
# genotype surgery and random sampling
# --------------------------------------------------------------------------

def genotype_with_connections(g, cell, keep):
    """Copy of ``g`` whose cell ``cell`` keeps only the connection keys in ``keep``."""
    spec = g.cells[cell]
    keep = set(keep)
    incoming = tuple(j for j in spec.incoming_cells
                     if j == cell - 1 or ("in", cell, j) in keep)
    nodes = []
    for k, node in enumerate(spec.nodes):
        edges = []
        for e in node.edges:
            ops = tuple(op for op in e.ops if ("op", cell, k, e.source, op) in keep)
            if ops:
                edges.append(EdgeSpec(e.source, ops))
        nodes.append(NodeSpec(tuple(edges)))
    cells = list(g.cells)
    cells[cell] = CellSpec(spec.index, spec.kind, incoming, tuple(nodes))
    return ModelGenotype(tuple(cells), g.channels0, g.input_shape, g.class_count)


def _sample_cell(layout, cell, target, tol, rng, tries=400):
    keys = layout.hyper_connections(cell)
    sizes = np.array([layout.connection_bytes(k) for k in keys], dtype=np.int64)
    total = int(sizes.sum())
    if target >= 1.0 - tol:
        return keys
    if target < 0.0:
        raise ValueError(f"cell {cell}: ratio {target} is below the floor 0.0")
    best = None
    for _ in range(tries):
        order = rng.permutation(len(keys))
        kept = np.ones(len(keys), dtype=bool)
        open_bytes = total
        for i in order:
            if open_bytes / total <= target + tol:
                break
            if (open_bytes - sizes[i]) / total >= target - tol:
                kept[i] = False
                open_bytes -= int(sizes[i])
        err = abs(open_bytes / total - target)
        if best is None or err < best[0]:
            best = (err, kept)
        if err <= tol:
            break
    if best[0] > tol:
        raise ValueError(
            f"cell {cell}: ratio {target:.4f} unattainable within +-{tol} "
            f"(closest {best[0]:.4f} away; connection granularity too coarse)")
    return [k for k, keep in zip(keys, best[1]) if keep]


def sample_random_genotype(level, reference, hyper, batch_size, rng, tol=0.02, per_section=False):
    """Random architecture for the Level-1 / Level-2 ablations.

    ``reference`` is a dict with ``cell_ratios`` (per-cell open-byte ratios of
    a finished search) and ``sections`` (lists of cell indices). Level 1
    randomizes every section but the last and leaves the last hyper-connected;
    Level 2 randomizes every cell.
    """
    if level not in (1, 2):
        raise ValueError(f"level must be 1 or 2, got {level}")
    layout = Layout(hyper, batch_size)
    ratios = list(reference["cell_ratios"])
    sections = [list(s) for s in reference["sections"]]
    if len(ratios) != len(hyper.cells):
        raise ValueError(f"reference has {len(ratios)} cell ratios, model has {len(hyper.cells)} cells")
    randomized = [c for s in (sections[:-1] if level == 1 else sections) for c in s]
    if per_section:
        targets = {}
        for s in sections:
            total = sum(layout.hyper_gated_bytes(c) for c in s)
            pooled = sum(ratios[c] * layout.hyper_gated_bytes(c) for c in s) / total
            targets.update({c: pooled for c in s})
    else:
        targets = {c: ratios[c] for c in range(len(ratios))}
    g = hyper
    for cell in randomized:
        keep = _sample_cell(layout, cell, targets[cell], tol, rng)
        g = genotype_with_connections(g, cell, keep)
    return g


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

@dataclass
class ArchitectureStats:
    op_frequency: dict  # cell kind -> {op name: count}
    distance_histogram: dict  # distance -> count, optional inputs only
    mandatory_inputs: int
    resnet_edges: int

    def total_ops(self):
        return sum(sum(row.values()) for row in self.op_frequency.values())


def architecture_statistics(g):
    freq = {kind: {op.value: 0 for op in EDGE_OPS} for kind in (NORMAL, REDUCTION)}
    hist = {}
    mandatory = 0
    resnet = 0
    for cell in g.cells:
        for node in cell.nodes:
            for edge in node.edges:
                for op in edge.ops:
                    freq[cell.kind][op.value] += 1
                if OpKind.IDENTITY in edge.ops and any(op in SEPARABLE for op in edge.ops):
                    resnet += 1
        for j in cell.incoming_cells:
            if j == cell.index - 1:
                mandatory += 1
            else:
                d = cell.index - j
                hist[d] = hist.get(d, 0) + 1
    return ArchitectureStats(freq, dict(sorted(hist.items())), mandatory, resnet)
