"""Evaluation protocols for learngenes on classes they never trained on.

* :func:`finetune_compare` trains a gene-inherited network and a scratch twin
  under one budget and reports both holdout accuracies.
* :func:`probe_instinct` records holdout accuracy after a handful of update
  iterations, for the gene and for a random-init baseline.
* :func:`episodic_eval` averages n-way k-shot episodes and attaches a 95%
  normal-approximation interval.

None of them modify the gene they are given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import Batch, TrainBudget, evaluate, init_weights, train
from .evolution import make_batch, split_per_class
from .genome import LearngeneWeights
from .inheritance import inherit
from .netspec import NetworkSpec


class ProtocolError(ValueError):
    pass


def _class_indices(labels: np.ndarray, classes: Sequence[int]) -> dict[int, np.ndarray]:
    out = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ProtocolError(f"class {c} has no samples")
        out[int(c)] = idx
    return out


def _descendant(gene, spec, rng, dtype=np.float32):
    return init_weights(spec, rng, dtype) if gene is None else inherit(gene, spec, rng, dtype=dtype)


# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    seeds: list[int]
    gene_acc: list[float]
    scratch_acc: list[float]

    @property
    def wins(self) -> int:
        return sum(g > s for g, s in zip(self.gene_acc, self.scratch_acc))


def finetune_compare(gene: LearngeneWeights, images: np.ndarray, labels: np.ndarray, classes: Sequence[int],
                     spec: NetworkSpec, budget: TrainBudget, seeds: Sequence[int],
                     train_fraction: float = 0.5) -> FinetuneResult:
    """Per seed: same split, same shuffling, gene-inherited vs He-initialised network."""
    classes = tuple(int(c) for c in classes)
    per_class = _class_indices(labels, classes)
    spec = spec.with_head(len(classes))
    out = FinetuneResult(list(seeds), [], [])
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tr, ho = split_per_class(per_class, classes, train_fraction, rng)
        train_b, hold_b = make_batch(images, labels, tr, classes), make_batch(images, labels, ho, classes)
        shuffle_seed = int(rng.integers(2**31))
        for g, acc in ((gene, out.gene_acc), (None, out.scratch_acc)):
            w = _descendant(g, spec, np.random.default_rng([seed, 1]))
            w, _ = train(w, train_b, budget, seed=shuffle_seed)
            acc.append(evaluate(w, hold_b))
    return out


# ---------------------------------------------------------------------------

@dataclass
class ProbeTable:
    iterations: list[int]
    seeds: list[int]
    gene: np.ndarray        # (seeds, iterations)
    baseline: np.ndarray    # (seeds, iterations)

    def summary(self) -> list[dict]:
        rows = []
        for j, it in enumerate(self.iterations):
            rows.append({
                "iterations": it,
                "gene_mean": float(self.gene[:, j].mean()), "gene_std": float(self.gene[:, j].std()),
                "baseline_mean": float(self.baseline[:, j].mean()),
                "baseline_std": float(self.baseline[:, j].std()),
            })
        return rows

    def format(self) -> str:
        lines = [f"{'iters':>6}  {'learngene':>15}  {'random init':>15}"]
        for r in self.summary():
            lines.append(f"{r['iterations']:>6}  {100 * r['gene_mean']:6.2f} +- {100 * r['gene_std']:5.2f}  "
                         f"{100 * r['baseline_mean']:6.2f} +- {100 * r['baseline_std']:5.2f}")
        return "\n".join(lines)


def _accuracy_trace(weights, train_b: Batch, hold_b: Batch, iterations: Sequence[int], lr: float,
                    batch_size: int, seed: int, momentum: float = 0.0) -> list[float]:
    marks = {}
    if 0 in iterations:
        marks[0] = evaluate(weights, hold_b)
    last = max(iterations)
    if last > 0:
        def record(step, w):
            if step in iterations:
                marks[step] = evaluate(w, hold_b)
        epochs = math.ceil(last * batch_size / len(train_b)) + 1
        train(weights, train_b, TrainBudget(epochs, lr, batch_size, momentum, max_iterations=last), seed=seed, callback=record)
    return [marks[it] for it in iterations]


def probe_instinct(gene: LearngeneWeights, images: np.ndarray, labels: np.ndarray, classes: Sequence[int],
                   spec: NetworkSpec, iterations: Sequence[int], seeds: Sequence[int], lr: float = 0.05,
                   batch_size: int = 16, train_fraction: float = 0.5, momentum: float = 0.0) -> ProbeTable:
    """Holdout accuracy after each listed number of SGD updates, gene vs random init."""
    iterations = [int(i) for i in iterations]
    if not iterations or iterations != sorted(iterations) or iterations[0] < 0:
        raise ProtocolError("iterations must be a non-empty ascending list of non-negative counts")
    classes = tuple(int(c) for c in classes)
    if len(classes) < 2:
        raise ProtocolError("need at least two classes")
    per_class = _class_indices(labels, classes)
    spec = spec.with_head(len(classes))
    gene_rows, base_rows = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tr, ho = split_per_class(per_class, classes, train_fraction, rng)
        if len(tr) == 0 or len(ho) == 0:
            raise ProtocolError("empty split")
        train_b, hold_b = make_batch(images, labels, tr, classes), make_batch(images, labels, ho, classes)
        shuffle_seed = int(rng.integers(2**31))
        for g, rows in ((gene, gene_rows), (None, base_rows)):
            w = _descendant(g, spec, np.random.default_rng([seed, 1]))
            rows.append(_accuracy_trace(w, train_b, hold_b, iterations, lr, batch_size, shuffle_seed, momentum))
    return ProbeTable(iterations, list(seeds), np.array(gene_rows), np.array(base_rows))


# ---------------------------------------------------------------------------

@dataclass
class EpisodicResult:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        """Half-width of the normal-approximation 95% interval of the mean."""
        n = len(self.accuracies)
        return 0.0 if n < 2 else float(1.96 * np.std(self.accuracies, ddof=1) / math.sqrt(n))

    def format(self) -> str:
        return f"{100 * self.mean:.2f} +- {100 * self.ci95:.2f} ({len(self.accuracies)} episodes)"


def episodic_eval(gene: LearngeneWeights | None, images: np.ndarray, labels: np.ndarray, classes: Sequence[int],
                  n_way: int, k_shot: int, episodes: int, budget: TrainBudget, target_spec: NetworkSpec,
                  seed: int = 0, query_per_class: int | None = 15) -> EpisodicResult:
    """Mean query accuracy over n-way k-shot episodes drawn from ``classes``.

    ``gene=None`` evaluates a randomly initialised network. ``query_per_class``
    of None uses every non-support image as a query.
    """
    classes = [int(c) for c in classes]
    if n_way < 2 or n_way > len(classes):
        raise ProtocolError(f"n_way={n_way} needs between 2 and {len(classes)} classes")
    if k_shot < 1 or episodes < 1:
        raise ProtocolError("k_shot and episodes must be positive")
    per_class = _class_indices(labels, classes)
    need = k_shot + (1 if query_per_class is None else query_per_class)
    short = [c for c in classes if len(per_class[c]) < need]
    if short:
        raise ProtocolError(f"classes {short} have fewer than {need} samples")
    spec = target_spec.with_head(n_way)
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(episodes):
        chosen = [int(c) for c in rng.choice(classes, size=n_way, replace=False)]
        support, query = [], []
        for c in chosen:
            idx = rng.permutation(per_class[c])
            support.append(idx[:k_shot])
            query.append(idx[k_shot:] if query_per_class is None else idx[k_shot:k_shot + query_per_class])
        s_b = make_batch(images, labels, np.concatenate(support), chosen)
        q_b = make_batch(images, labels, np.concatenate(query), chosen)
        w = _descendant(gene, spec, np.random.default_rng(rng.integers(2**31)))
        w, _ = train(w, s_b, budget, seed=int(rng.integers(2**31)))
        accs.append(evaluate(w, q_b))
    return EpisodicResult(accs)
