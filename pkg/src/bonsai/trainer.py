"""Epoch-level training and evaluation shared by searches and baselines."""
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import augment, normalize
from .network import CLASSIFICATION
from .ops import sgd_step
from .pruner import compression_loss, ratio_tensor


@dataclass
class EpochMetrics:
    epoch: int
    loss_main: float
    loss_aux: float
    loss_comp: float
    train_accuracy: float
    val_accuracy: float
    lr: float
    lam: float


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 64
    drop_path: float = 0.0


def batch_indices(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def assemble_loss(outputs, labels, comp=None):
    """CE of the classification tower + weighted auxiliary CEs + compression term.

    Returns (total, main, aux, comp) with the parts as floats.
    """
    terms = []
    main = aux = 0.0
    main_logits = None
    for tower, logits in outputs:
        ce = ag.cross_entropy(logits, labels)
        if tower.kind == CLASSIFICATION:
            main = ce.item()
            main_logits = logits
            terms.append(ce)
        elif tower.weight:
            aux += tower.weight * ce.item()
            terms.append(ag.scale(ce, tower.weight))
    comp_value = 0.0
    if comp is not None:
        comp_value = comp.item()
        terms.append(comp)
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return total, main, aux, comp_value, main_logits


def compression_term(model, target, lam):
    if not lam or target is None:
        return None
    return compression_loss([ratio_tensor(c) for c in model.cells], target, lam)


def train_epoch(model, data, optim, target, lam, rng, aug=None, epoch=0, val=None):
    """One pass over ``data``; every learnable weight, gate weights included,
    is stepped once per batch."""
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    sums = np.zeros(3)
    correct = 0
    params = model.params()
    for b, idx in enumerate(batch_indices(n, optim.batch_size, rng)):
        x = data.images[idx]
        if aug is not None:
            x = augment(x, aug, rng)
            x = normalize(x, aug)
        y = data.labels[idx]
        outputs = model.forward(x, training=True, rng=rng, drop_p=optim.drop_path)
        comp = compression_term(model, target, lam)
        total, main, aux, comp_value, logits = assemble_loss(outputs, y, comp)
        for name, value in (("main", main), ("aux", aux), ("compression", comp_value)):
            if not math.isfinite(value):
                raise FloatingPointError(f"epoch {epoch} batch {b}: non-finite {name} loss ({value})")
        total.backward()
        sgd_step(params, optim.lr, optim.momentum, optim.weight_decay)
        sums += np.array([main, aux, comp_value]) * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    sums /= n
    val_acc = evaluate(model, val, optim.batch_size, aug) if val is not None else float("nan")
    return EpochMetrics(epoch, float(sums[0]), float(sums[1]), float(sums[2]),
                        correct / n, val_acc, optim.lr, float(lam or 0.0))


def predict(model, images, batch_size=256, aug=None):
    preds = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        if aug is not None:
            x = normalize(x, aug)
        preds.append(model.logits(x).data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model, data, batch_size=256, aug=None):
    """Fraction of correct argmax predictions of the classification tower
    (eval mode: running BN statistics, no drop-path)."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, data.images, batch_size, aug) == data.labels).mean())


def count_parameters(model):
    """Learnable elements over live connections and towers, gate weights excluded."""
    gate_ids = {id(w) for w in model.gate_weights()}
    return sum(p.data.size for p in model.params() if id(p) not in gate_ids)
