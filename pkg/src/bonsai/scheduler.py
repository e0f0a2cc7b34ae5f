"""Grow the hypernetwork section by section under a memory budget.

The model starts with its first section hyper-connected. While any placed
cell's compression ratio is above the current section target, the model
trains with the compression term in the loss. Once every placed cell is at or
below target, closed connections are deadheaded, the classification tower
becomes an auxiliary tower, the next section is appended hyper-connected and
gets a new classification tower. After the last append the remaining epochs
train with no compression term. The total epoch count is fixed.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .network import AUXILIARY, CLASSIFICATION, Hypernetwork, param_snapshot
from .ops import cosine_lr
from .pruner import CompressionState, deadhead, lambda_schedule, LAMBDA_PERIOD
from .space import Layout, hyperconnected_genotype, sample_random_genotype
from .trainer import OptimConfig, count_parameters, evaluate, train_epoch

log = logging.getLogger(__name__)

FREE = "free"
PRUNE = "prune"


class BudgetError(ValueError):
    def __init__(self, message, minimum):
        super().__init__(message)
        self.minimum = minimum


@dataclass
class Section:
    index: int
    cells: list
    gated_bytes: int
    fixed_bytes: int
    target_ratio: float | None = None

    @property
    def bytes_hyperconnected(self):
        return self.gated_bytes + self.fixed_bytes


def partition_cells(cell_count, section_count):
    """Contiguous, in-order ranges whose sizes differ by at most one."""
    if not 1 <= section_count <= cell_count:
        raise ValueError(f"cannot split {cell_count} cells into {section_count} sections")
    base, extra = divmod(cell_count, section_count)
    ranges, start = [], 0
    for i in range(section_count):
        size = base + (1 if i < extra else 0)
        ranges.append(list(range(start, start + size)))
        start += size
    return ranges


def solve_targets(gated, fixed, budget, base_fixed=0):
    """Per-phase compression targets.

    ``gated[n]`` / ``fixed[n]`` are section n's prunable and unprunable bytes
    when hyper-connected. Target c_n is the largest uniform ratio such that
    the placed sections pruned to c_n, plus section n+1 at full size, fit the
    budget. The last entry is None (free training).
    """
    placed_fixed = base_fixed + fixed[0]
    placed_gated = gated[0]
    if placed_fixed + placed_gated > budget:
        need = placed_fixed + placed_gated
        raise BudgetError(f"first section needs {need} bytes hyper-connected; budget is {budget}", need)
    targets = []
    for n in range(len(gated) - 1):
        incoming = gated[n + 1] + fixed[n + 1]
        c = (budget - placed_fixed - incoming) / placed_gated
        if c <= 0:
            need = placed_fixed + incoming + 1
            raise BudgetError(
                f"section {n + 1} cannot be appended even with every prunable connection "
                f"removed; minimum budget is {need} bytes, budget is {budget}", need)
        targets.append(min(c, 1.0))
        placed_fixed += fixed[n + 1]
        placed_gated += gated[n + 1]
    return targets + [None]


def plan_sections(plan, budget_bytes, section_count, batch_size):
    layout = Layout(plan, batch_size)
    sections = []
    for i, cells in enumerate(partition_cells(len(plan.cells), section_count)):
        gated = sum(layout.hyper_gated_bytes(c) for c in cells)
        fixed = sum(layout.cell_fixed_bytes(c) for c in cells) + layout.tower_bytes(cells[-1])
        sections.append(Section(i, cells, gated, fixed))
    targets = solve_targets([s.gated_bytes for s in sections], [s.fixed_bytes for s in sections],
                            budget_bytes, layout.stem_bytes())
    for s, t in zip(sections, targets):
        s.target_ratio = t
    return sections


def hyperconnected_bytes(plan, batch_size, section_count):
    """Accounted bytes of the whole model hyper-connected, one tower per section."""
    layout = Layout(plan, batch_size)
    total = layout.stem_bytes()
    for cells in partition_cells(len(plan.cells), section_count):
        total += sum(layout.hyper_gated_bytes(c) + layout.cell_fixed_bytes(c) for c in cells)
        total += layout.tower_bytes(cells[-1])
    return total


def convert_tower(model, aux_weight):
    tower = model.classification_tower()
    if tower is None:
        raise ValueError("no classification tower to convert")
    tower.kind = AUXILIARY
    tower.weight = aux_weight
    return tower


def append_section(model, section, budget_bytes):
    """Place ``section``'s cells hyper-connected and attach a new classification tower."""
    need = model.accounted_bytes() + section.bytes_hyperconnected
    if need > budget_bytes:
        raise BudgetError(f"appending section {section.index} needs {need} bytes, budget is {budget_bytes}",
                          need)
    model.place_cells(section.cells)
    model.add_tower(CLASSIFICATION, 1.0)


@dataclass
class RunResult:
    model: Hypernetwork
    genotype: object
    history: list
    sections: list
    failed: bool = False
    append_checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _budget(cfg, plan):
    if cfg.budget_bytes is not None:
        return int(cfg.budget_bytes)
    return int(cfg.budget_fraction * hyperconnected_bytes(plan, cfg.batch_size, cfg.sections))


def build_plan(cfg):
    shape = (cfg.image_channels, cfg.image_size, cfg.image_size)
    return hyperconnected_genotype(cfg.cells, cfg.nodes_per_cell, cfg.channels0, shape, cfg.classes)


def _autoscaled_lambda(cfg, ratios, target, ce):
    if not cfg.lambda_autoscale:
        return cfg.lambda0
    targets = np.broadcast_to(np.asarray(target, dtype=float), (len(ratios),))
    gap = math.sqrt(sum((t - r) ** 2 for t, r in zip(targets, ratios)))
    if gap <= 0:
        return cfg.lambda0
    # compression term ~1% of the classification loss
    return 0.01 * ce / gap


def _history_row(cfg, epoch, phase, section, metrics, ratios, target, accounted, removed, params):
    row = {
        "epoch": epoch,
        "phase": phase,
        "section": section,
        "loss_main": metrics.loss_main,
        "loss_aux": metrics.loss_aux,
        "loss_comp": metrics.loss_comp,
        "lambda": metrics.lam,
        "lr": metrics.lr,
        "train_acc": metrics.train_accuracy,
        "val_acc": metrics.val_accuracy,
        "target": "" if target is None else (target if np.isscalar(target) else max(target)),
        "accounted_bytes": accounted,
        "deadheaded": removed,
        "params": params,
    }
    for i in range(cfg.cells):
        row[f"ratio_{i}"] = ratios[i] if i < len(ratios) else ""
    return row


def _train_phases(cfg, model, data, rng, phases, budget, on_exit=None):
    """Shared epoch loop.

    ``phases`` is a list of per-phase targets (scalar, per-cell vector, or
    None for free training). A prune phase ends after an epoch in which every
    placed cell's clamped ratio is within 1/M of its target; ``on_exit`` then
    runs (deadhead, append ...). Returns (history, finished_all_prune_phases).
    """
    train, val = data
    aug = cfg_augmentation(cfg, train)
    optim = OptimConfig(cfg.lr_max, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.drop_path_p)
    history = []
    phase = 0
    epochs_in_phase = 0
    lam_base = cfg.lambda0
    last_ce = math.log(cfg.classes)
    for epoch in range(cfg.epoch_budget):
        optim.lr = cosine_lr(epoch, cfg.epoch_budget, cfg.lr_max)
        target = phases[phase]
        if target is not None:
            if epochs_in_phase == 0:
                current = CompressionState.measure(model.cells).per_cell_ratio
                lam_base = _autoscaled_lambda(cfg, current, target, last_ce)
            lam = lambda_schedule(epochs_in_phase, lam_base)
        else:
            lam = 0.0
        metrics = train_epoch(model, train, optim, target, lam, rng, aug, epoch, val)
        last_ce = metrics.loss_main
        epochs_in_phase += 1
        removed = 0
        state = CompressionState.measure(model.cells)
        phase_now = phase
        if target is not None:
            targets = np.broadcast_to(np.asarray(target, dtype=float), (len(state.per_cell_ratio),))
            # 1/M of slack absorbs the saw term riding on an open gate
            if all(r <= t + 1.0 / cfg.M for r, t in zip(state.per_cell_ratio, targets)):
                removed += deadhead(model)
                if on_exit is not None:
                    on_exit(phase, epoch)
                phase += 1
                epochs_in_phase = 0
            elif epochs_in_phase % LAMBDA_PERIOD == 0:
                removed += deadhead(model)
        if not budget_ok(model, budget):
            raise RuntimeError(f"epoch {epoch}: accounted bytes {model.accounted_bytes()} exceed budget {budget}")
        row = _history_row(cfg, epoch, PRUNE if target is not None else FREE, phase_now, metrics,
                           CompressionState.measure(model.cells).per_cell_ratio, target,
                           model.accounted_bytes(), removed, count_parameters(model))
        history.append(row)
        log.info("epoch %d %s loss %.4f comp %.5f lam %.4g val %.3f ratios %s",
                 epoch, row["phase"], metrics.loss_main, metrics.loss_comp, lam,
                 metrics.val_accuracy, " ".join(f"{r:.3f}" for r in state.per_cell_ratio))
    finished = all(t is None for t in phases[phase:])
    return history, finished


def budget_ok(model, budget):
    return budget is None or model.accounted_bytes() <= budget


def cfg_augmentation(cfg, train):
    from .data import AugmentationConfig, channel_stats
    mean, std = channel_stats(train)
    return AugmentationConfig(cfg.random_crop_pad, cfg.horizontal_flip, cfg.cutout_size, mean, std)


def run_bonsai(cfg, data):
    """Search and train in one pass. ``data`` is (train, val)."""
    rng = np.random.default_rng(cfg.seed)
    plan = build_plan(cfg)
    budget = _budget(cfg, plan)
    sections = plan_sections(plan, budget, cfg.sections, cfg.batch_size)
    model = Hypernetwork(plan, cfg.batch_size, rng, cfg.M, cfg.gate_init)
    model.place_cells(sections[0].cells)
    model.add_tower()
    checks = []

    def grow(phase, epoch):
        convert_tower(model, cfg.aux_weight)
        before = param_snapshot(model)
        append_section(model, sections[phase + 1], budget)
        after = {id(p): p for p in model.params()}
        same = all(k in after and np.array_equal(v, after[k].data) for k, v in before.items())
        checks.append({"epoch": epoch, "section": phase + 1, "weights_preserved": same,
                       "accounted_bytes": model.accounted_bytes()})

    phases = [s.target_ratio for s in sections]
    history, finished = _train_phases(cfg, model, data, rng, phases, budget, grow)
    final_removed = deadhead(model)
    genotype = model.genotype()
    summary = _summary(cfg, model, data, history, not finished, budget)
    summary.update({
        "sections": [s.cells for s in sections],
        "section_targets": [s.target_ratio for s in sections],
        "aux_positions": [t.position for t in model.towers if t.kind == AUXILIARY],
        "final_deadheaded": final_removed,
        "append_checks": checks,
    })
    return RunResult(model, genotype, history, sections, not finished, checks, summary)


def run_random(cfg, level, reference, data):
    """Level-1 / Level-2 random baselines trained with the search's hyperparameters.

    ``reference`` is a finished search summary (``cell_ratios``, ``sections``,
    ``aux_positions``).
    """
    rng = np.random.default_rng(cfg.seed)
    plan = build_plan(cfg)
    sampled = sample_random_genotype(level, reference, plan, cfg.batch_size,
                                     np.random.default_rng([cfg.seed, level]),
                                     per_section=cfg.per_section_reference)
    model = Hypernetwork(sampled, cfg.batch_size, rng, cfg.M, cfg.gate_init,
                         trainable_gates=(level == 1))
    model.place_cells(range(len(sampled.cells)))
    for position in reference.get("aux_positions", []):
        model.add_tower(AUXILIARY, cfg.aux_weight, position)
    model.add_tower()
    if level == 1:
        # compress toward the reference's per-cell profile, then train freely
        targets = [min(max(r, 1e-6), 1.0) for r in reference["cell_ratios"]]
        phases = [targets, None]
    else:
        phases = [None]
    history, finished = _train_phases(cfg, model, data, rng, phases, None)
    final_removed = deadhead(model) if level == 1 else 0
    summary = _summary(cfg, model, data, history, not finished, None)
    summary.update({
        "level": level,
        "sections": reference["sections"],
        "aux_positions": reference.get("aux_positions", []),
        "sampled_cell_ratios": [r for r in _open_ratios_of(sampled, cfg)],
        "final_deadheaded": final_removed,
    })
    return RunResult(model, model.genotype(), history, [], not finished, [], summary)


def _open_ratios_of(genotype, cfg):
    from .space import genotype_cell_ratio
    layout = Layout(genotype, cfg.batch_size)
    return [genotype_cell_ratio(genotype, layout, c) for c in range(len(genotype.cells))]


def _summary(cfg, model, data, history, failed, budget):
    train, val = data
    aug = cfg_augmentation(cfg, train)
    return {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "failed_to_converge": failed,
        "epochs": len(history),
        "budget_bytes": budget,
        "final_accounted_bytes": model.accounted_bytes(),
        "final_val_acc": evaluate(model, val, 256, aug),
        "parameters": count_parameters(model),
        "cell_ratios": model.open_ratios(),
    }
