"""The generational loop that evolves learngenes.

Each generation samples parents from the Gene Pool, lets every individual
inherit its parent's gene, trains it on a random k-class task, extracts (and
mutates) the gene, scores it with a critic trained on held-out classes, runs
tournaments, credits ancestors and admits winners to the pool.

All randomness flows from ``master_seed``: the stream for (generation, role,
index) is ``SeedSequence(master_seed, spawn_key=(generation, role, index))``,
role 0 being the coordinator and role 1 the individual. Results therefore do
not depend on how many worker processes run the individuals.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import Batch, TrainBudget, TrainingError, evaluate, init_weights, train
from .genome import LearngeneStructure, LearngeneWeights, extract_learngene, init_random_structure, mutate
from .inheritance import inherit
from .netspec import NetworkSpec, builtin_spec, parameter_fraction

log = logging.getLogger(__name__)

COORDINATOR, INDIVIDUAL = 0, 1
ABLATIONS = ("no_mutation", "random_tournaments_and_pool", "population_one", "no_evolution")
EVICTION_SCORES = ("accumulated", "critic")


class ConfigError(ValueError):
    pass


class PoolError(ValueError):
    pass


def stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class EvolutionConfig:
    population_size: int = 20            # n_p
    tournament_size: int = 3             # delta
    pool_capacity: int = 10              # rho_max
    admissions: int = 2                  # epsilon
    parental_decay: float = 0.5          # eta
    mutation_prob: float = 0.2           # p_m
    growth_alpha: float = 0.9            # alpha
    init_fraction: float = 0.45          # c; about 20% of conv weights in a plain stack
    task_classes: int = 4                # k at generation 0
    task_classes_final: int = 0          # >k ramps k linearly to this value; 0 keeps k constant
    generations: int = 10
    n_train_classes: int = 8
    n_val_classes: int = 2
    spec: str = "mini-vgg-6"
    train_epochs: int = 3
    train_lr: float = 0.05
    train_batch_size: int = 32
    momentum: float = 0.0
    critic_epochs: int = 3
    critic_lr: float = 0.05
    critic_batch_size: int = 32
    critic_iterations: int = 0           # >0 caps critic SGD updates
    pretrain_epochs: int = 10
    task_train_fraction: float = 0.8
    val_train_fraction: float = 0.5
    master_seed: int = 0
    workers: int = 1
    allow_empty_layers: bool = False
    eviction_score: str = "critic"       # or "accumulated": rank pool entries by credited score when evicting
    no_mutation: bool = False
    random_tournaments_and_pool: bool = False
    population_one: bool = False
    no_evolution: bool = False

    def problems(self) -> list[str]:
        out = []
        n_p = self.effective_population
        if n_p < 1:
            out.append("population_size must be positive")
        if self.tournament_size < 2:
            out.append("tournament_size must be at least 2")
        if not self.population_one and self.tournament_size > n_p:
            out.append("tournament_size must not exceed population_size")
        if self.pool_capacity < 1:
            out.append("pool_capacity must be positive")
        if self.admissions < 1:
            out.append("admissions must be positive")
        if not 0 < self.parental_decay < 1:
            out.append("parental_decay must lie in (0, 1)")
        if not 0 <= self.mutation_prob < 1:
            out.append("mutation_prob must lie in [0, 1)")
        if self.growth_alpha < 0:
            out.append("growth_alpha must be non-negative")
        if not 0 < self.init_fraction <= 1:
            out.append("init_fraction must lie in (0, 1]")
        if self.task_classes < 2:
            out.append("task_classes must be at least 2")
        if self.task_classes_final and self.task_classes_final < self.task_classes:
            out.append("task_classes_final must be 0 or at least task_classes")
        if max(self.task_classes, self.task_classes_final) > self.n_train_classes:
            out.append("task_classes exceeds n_train_classes")
        if self.n_val_classes < 2:
            out.append("n_val_classes must be at least 2")
        if self.generations < 0:
            out.append("generations must be non-negative")
        for name in ("train_lr", "critic_lr"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        for name in ("task_train_fraction", "val_train_fraction"):
            if not 0 < getattr(self, name) < 1:
                out.append(f"{name} must lie in (0, 1)")
        if self.workers < 1:
            out.append("workers must be positive")
        if self.eviction_score not in EVICTION_SCORES:
            out.append(f"eviction_score must be one of {', '.join(EVICTION_SCORES)}")
        return out

    def validate(self) -> "EvolutionConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def effective_population(self) -> int:
        return 1 if self.population_one else self.population_size

    def k_for(self, generation: int) -> int:
        """Task size for a generation: constant, or a linear ramp up to ``task_classes_final``."""
        if not self.task_classes_final or self.generations <= 1:
            return self.task_classes
        frac = min(1.0, generation / (self.generations - 1))
        return int(round(self.task_classes + frac * (self.task_classes_final - self.task_classes)))

    @property
    def train_budget(self) -> TrainBudget:
        return TrainBudget(self.train_epochs, self.train_lr, self.train_batch_size, self.momentum)

    @property
    def critic_budget(self) -> TrainBudget:
        return TrainBudget(self.critic_epochs, self.critic_lr, self.critic_batch_size, self.momentum,
                           self.critic_iterations or None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvolutionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


# ---------------------------------------------------------------------------
# world and tasks

@dataclass
class World:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    novelty_classes: tuple[int, ...]
    class_indices: dict[int, np.ndarray]
    val_train_idx: np.ndarray
    val_holdout_idx: np.ndarray
    seed: int = 0

    @property
    def n_t(self) -> int:
        return len(self.train_classes)

    @property
    def n_v(self) -> int:
        return len(self.val_classes)


@dataclass
class Task:
    classes: tuple[int, ...]
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.classes)


def _labels_of(dataset) -> np.ndarray:
    return np.asarray(dataset.labels if hasattr(dataset, "labels") else dataset)


def split_per_class(class_indices: dict[int, np.ndarray], classes: Sequence[int], fraction: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle each class and cut it at ``fraction``; both sides keep at least one sample."""
    train, hold = [], []
    for c in classes:
        idx = rng.permutation(class_indices[c])
        cut = min(max(1, int(round(fraction * len(idx)))), max(1, len(idx) - 1))
        train.append(idx[:cut])
        hold.append(idx[cut:])
    return np.concatenate(train), np.concatenate(hold)


def partition_world(dataset, n_t: int, n_v: int, seed: int, val_train_fraction: float = 0.5) -> World:
    """Split the classes of ``dataset`` into disjoint train / val / novelty sets.

    Classes beyond ``n_t + n_v`` are reserved as novelty classes.
    """
    labels = _labels_of(dataset)
    classes = np.unique(labels)
    if n_t < 1 or n_v < 1:
        raise ValueError("n_t and n_v must be positive")
    if len(classes) < n_t + n_v:
        raise ValueError(f"dataset has {len(classes)} classes, need at least {n_t + n_v}")
    rng = stream(seed, 7)
    order = [int(c) for c in rng.permutation(classes)]
    train = tuple(sorted(order[:n_t]))
    val = tuple(sorted(order[n_t:n_t + n_v]))
    novelty = tuple(sorted(order[n_t + n_v:]))
    class_indices = {int(c): np.flatnonzero(labels == c) for c in classes}
    vt, vh = split_per_class(class_indices, val, val_train_fraction, stream(seed, 8))
    return World(train, val, novelty, class_indices, vt, vh, seed)


def sample_task(world: World, k: int, rng: np.random.Generator, train_fraction: float = 0.8) -> Task:
    """k distinct training classes drawn uniformly, each split train/holdout."""
    if k > world.n_t:
        raise ValueError(f"task needs {k} classes but the world has {world.n_t} training classes")
    if k < 2:
        raise ValueError("a task needs at least 2 classes")
    classes = tuple(sorted(int(c) for c in rng.choice(world.train_classes, size=k, replace=False)))
    seed = int(rng.integers(2**31))
    train_idx, hold_idx = split_per_class(world.class_indices, classes, train_fraction, np.random.default_rng(seed))
    return Task(classes, train_idx, hold_idx, seed)


def make_batch(images: np.ndarray, labels: np.ndarray, idx: np.ndarray, classes: Sequence[int]) -> Batch:
    """Batch over ``idx`` with labels remapped to positions in ``classes``."""
    lookup = {c: i for i, c in enumerate(classes)}
    return Batch(images[idx], np.array([lookup[int(y)] for y in labels[idx]], dtype=np.int64))


# ---------------------------------------------------------------------------
# scoring

def score_learngene(gene: LearngeneWeights, world: World, images: np.ndarray, labels: np.ndarray,
                    spec: NetworkSpec, budget: TrainBudget, rng: np.random.Generator) -> float:
    """Holdout accuracy of a fresh critic that inherits ``gene`` and trains on the val classes.

    A critic whose training diverges scores 0.
    """
    if world.n_v == 0:
        raise ValueError("world has no validation classes")
    critic_spec = spec.with_head(world.n_v)
    weights = inherit(gene, critic_spec, rng)
    train_batch = make_batch(images, labels, world.val_train_idx, world.val_classes)
    hold_batch = make_batch(images, labels, world.val_holdout_idx, world.val_classes)
    try:
        weights, _ = train(weights, train_batch, budget, seed=int(rng.integers(2**31)))
    except TrainingError:
        return 0.0
    return evaluate(weights, hold_batch)


# ---------------------------------------------------------------------------
# selection

def _rank_key(item):
    gene, score = item
    return (-score, gene.num_params(), gene.gene_id)


def tournament_select(scored: Sequence[tuple[LearngeneWeights, float]], delta: int, rng: np.random.Generator,
                      random_winners: bool = False) -> list[tuple[LearngeneWeights, float]]:
    """Split the population into ceil(n / delta) random groups and keep each group's best.

    Ties go to the smaller gene, then the smaller gene_id. With
    ``random_winners`` the same number of winners is drawn uniformly instead.
    """
    n = len(scored)
    if n == 0:
        raise ValueError("no individuals to select from")
    if delta < 2:
        raise ValueError("tournament size must be at least 2")
    n_groups = math.ceil(n / delta)
    order = rng.permutation(n)
    if random_winners:
        return [scored[i] for i in order[:n_groups]]
    winners = []
    for g in range(n_groups):
        group = [scored[i] for i in order[g * delta:(g + 1) * delta]]
        winners.append(min(group, key=_rank_key))
    return winners


# ---------------------------------------------------------------------------
# pool and tree

@dataclass
class GeneTree:
    """Ancestry forest; ``parents[node]`` is None for roots."""

    parents: dict[str, str | None] = field(default_factory=dict)
    born: dict[str, int] = field(default_factory=dict)

    def add(self, node: str, parent: str | None, generation: int = 0) -> None:
        if node in self.parents:
            raise PoolError(f"node {node} already in the tree")
        if parent is not None and parent not in self.parents:
            raise PoolError(f"parent {parent} of {node} is not in the tree")
        self.parents[node] = parent
        self.born[node] = generation

    def __contains__(self, node) -> bool:
        return node in self.parents

    def path_to_root(self, node: str) -> list[str]:
        path, seen = [], set()
        while node is not None:
            if node in seen:
                raise PoolError("cycle in gene tree")
            seen.add(node)
            path.append(node)
            node = self.parents[node]
        return path

    def roots(self) -> list[str]:
        return [n for n, p in self.parents.items() if p is None]

    def copy(self) -> "GeneTree":
        return GeneTree(dict(self.parents), dict(self.born))


@dataclass
class GenePoolEntry:
    gene: LearngeneWeights
    score: float                 # accumulated s-hat
    critic_score: float          # the gene's own critic score
    tree_node: str
    generation_admitted: int


def update_ancestor_scores(pool: list[GenePoolEntry], tree: GeneTree, parent_id: str | None, s_i: float,
                           eta: float) -> list[GenePoolEntry]:
    """Credit every pooled ancestor of a winner with eta**tau * s_i.

    The walk starts at the winner's parent (tau = 0) and climbs to the root;
    ancestors that left the pool are skipped but still count toward tau.
    """
    if parent_id is None or parent_id not in tree:
        if parent_id is not None:
            log.warning("winner parent %s not in gene tree; skipping score update", parent_id)
        return list(pool)
    by_node = {e.tree_node: i for i, e in enumerate(pool)}
    out = list(pool)
    for tau, node in enumerate(tree.path_to_root(parent_id)):
        i = by_node.get(node)
        if i is not None:
            out[i] = replace(out[i], score=out[i].score + eta ** tau * s_i)
    return out


def admit_to_pool(pool: list[GenePoolEntry], tree: GeneTree, winners: Sequence[tuple[LearngeneWeights, float]],
                  epsilon: int, generation: int, capacity: int, random_policy: bool = False,
                  rng: np.random.Generator | None = None, eviction_score: str = "critic"):
    """Add winners to the pool and the tree; returns ``(pool, tree, admitted_ids)``.

    An empty pool takes every winner (best first) up to capacity, as roots.
    Otherwise the top-epsilon winners become tree leaves under their parents,
    and each enters the pool if there is room or if its score beats the
    current minimum, which it then evicts. ``random_policy`` takes the first
    epsilon winners as given and evicts a uniformly random entry instead.

    ``eviction_score="critic"`` ranks pool entries by their own critic score
    rather than the ancestor-credited pool score, so credited ancestors can
    still be displaced.
    """
    if eviction_score not in EVICTION_SCORES:
        raise PoolError(f"unknown eviction_score {eviction_score!r}")
    rank = (lambda e: e.score) if eviction_score == "accumulated" else (lambda e: e.critic_score)
    pool, tree = list(pool), tree.copy()
    admitted = []
    if not pool:
        ranked = list(winners) if random_policy else sorted(winners, key=_rank_key)
        for gene, s in ranked[:capacity]:
            parent = gene.parent_id if gene.parent_id in tree else None
            tree.add(gene.gene_id, parent, generation)
            pool.append(GenePoolEntry(gene, float(s), float(s), gene.gene_id, generation))
            admitted.append(gene.gene_id)
        return pool, tree, admitted
    candidates = list(winners)[:epsilon] if random_policy else sorted(winners, key=_rank_key)[:epsilon]
    for gene, s in candidates:
        tree.add(gene.gene_id, gene.parent_id if gene.parent_id in tree else None, generation)
        entry = GenePoolEntry(gene, float(s), float(s), gene.gene_id, generation)
        if len(pool) < capacity:
            pool.append(entry)
            admitted.append(gene.gene_id)
        elif random_policy:
            pool[int(rng.integers(len(pool)))] = entry
            admitted.append(gene.gene_id)
        else:
            worst = min(range(len(pool)), key=lambda i: (rank(pool[i]), -pool[i].generation_admitted))
            if s > rank(pool[worst]):
                pool[worst] = entry
                admitted.append(gene.gene_id)
    return pool, tree, admitted


def parent_probabilities(scores) -> np.ndarray:
    """Sampling weights proportional to pool scores; uniform when all are zero."""
    s = np.array([e.score if isinstance(e, GenePoolEntry) else e for e in scores], dtype=np.float64)
    if s.size == 0:
        raise PoolError("pool is empty")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise PoolError("pool scores must be finite and non-negative")
    total = s.sum()
    if total == 0:
        return np.full(s.size, 1.0 / s.size)
    return s / total


# ---------------------------------------------------------------------------
# individuals

@dataclass
class _Job:
    index: int
    generation: int
    gene_id: str
    parent: LearngeneWeights | None
    config: EvolutionConfig
    world: World
    spec: NetworkSpec


@dataclass
class IndividualResult:
    index: int
    gene: LearngeneWeights
    task_classes: tuple[int, ...]
    train_acc: float
    score: float
    failed: bool = False


_WORKER_DATA: tuple | None = None


def _init_worker(images, labels):
    global _WORKER_DATA
    _WORKER_DATA = (images, labels)


def _run_job(job: _Job, data=None) -> IndividualResult:
    images, labels = data if data is not None else _WORKER_DATA
    cfg = job.config
    rng = stream(cfg.master_seed, job.generation, INDIVIDUAL, job.index)
    task = sample_task(job.world, cfg.k_for(job.generation), rng, cfg.task_train_fraction)
    spec = job.spec.with_head(task.k)
    batch = make_batch(images, labels, task.train_idx, task.classes)
    parent_id = None if job.parent is None else job.parent.gene_id
    if job.parent is None:
        weights = init_weights(spec, rng)
    else:
        weights = inherit(job.parent, spec, rng)
    failed = False
    try:
        trained, train_acc = train(weights, batch, cfg.train_budget, seed=int(rng.integers(2**31)))
    except TrainingError:
        trained, train_acc, failed = weights, 0.0, True
    if job.parent is None:
        structure = init_random_structure(job.spec, cfg.init_fraction, rng)
    else:
        structure = job.parent.structure
        if not cfg.no_mutation:
            structure = mutate(structure, job.spec, cfg.mutation_prob, cfg.growth_alpha, rng,
                               cfg.allow_empty_layers)
    gene = extract_learngene(trained, structure, job.gene_id, parent_id, allow_empty=cfg.allow_empty_layers)
    score = 0.0 if failed else score_learngene(gene, job.world, images, labels, job.spec,
                                               cfg.critic_budget, rng)
    return IndividualResult(job.index, gene, task.classes, float(train_acc), float(score), failed)


def run_individuals(jobs: list[_Job], images, labels, workers: int = 1) -> list[IndividualResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job, (images, labels)) for job in jobs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(images, labels)) as ex:
        return list(ex.map(_run_job, jobs))


# ---------------------------------------------------------------------------
# generations

@dataclass
class EvolutionState:
    next_generation: int = 0
    pool: list[GenePoolEntry] = field(default_factory=list)
    tree: GeneTree = field(default_factory=GeneTree)


def gene_record(gene: LearngeneWeights) -> dict:
    return {
        "gene_id": gene.gene_id,
        "parent_id": gene.parent_id,
        "params": gene.num_params(),
        "kernel_sizes": gene.structure.sizes(),
        "channel_sizes": [len(c) for c in gene.structure.channels],
        "skip_sizes": [[len(k), len(c)] for k, c in zip(gene.structure.skip_kernels, gene.structure.skip_channels)],
        "structure": gene.structure.signature(),
    }


def run_generation(state: EvolutionState, config: EvolutionConfig, generation: int, world: World,
                   images: np.ndarray, labels: np.ndarray, spec: NetworkSpec | None = None):
    """One pass of the loop; returns ``(new_state, generation_record)``."""
    spec = spec or _config_spec(config, images)
    coord = stream(config.master_seed, generation, COORDINATOR)
    n = config.effective_population
    if not state.pool:
        parents = [None] * n
    else:
        probs = (np.full(len(state.pool), 1.0 / len(state.pool)) if config.random_tournaments_and_pool
                 else parent_probabilities(state.pool))
        picks = coord.choice(len(state.pool), size=n, p=probs)
        parents = [state.pool[int(i)].gene for i in picks]
    jobs = [_Job(i, generation, f"g{generation:03d}-{i:03d}", parents[i], config, world, spec) for i in range(n)]
    results = run_individuals(jobs, images, labels, config.workers)
    scored = [(r.gene, r.score) for r in results]
    winners = tournament_select(scored, config.tournament_size, coord, config.random_tournaments_and_pool)

    pool = state.pool
    for gene, s in winners:
        pool = update_ancestor_scores(pool, state.tree, gene.parent_id, s, config.parental_decay)
    pool, tree, admitted = admit_to_pool(pool, state.tree, winners, config.admissions, generation,
                                         config.pool_capacity, config.random_tournaments_and_pool, coord,
                                         config.eviction_score)
    new_state = EvolutionState(generation + 1, pool, tree)
    return new_state, _generation_record(generation, config, spec, results, winners, admitted, new_state)


def _generation_record(generation, config, spec, results, winners, admitted, state) -> dict:
    scores = [r.score for r in results]
    params = [r.gene.num_params() for r in results]
    best = max(state.pool, key=lambda e: (e.score, -e.gene.num_params(), e.tree_node)) if state.pool else None
    record = {
        "generation": generation,
        "k": config.k_for(generation),
        "individuals": [
            dict(gene_record(r.gene), task_classes=list(r.task_classes), train_acc=r.train_acc,
                 score=r.score, failed=r.failed)
            for r in results
        ],
        "winners": [g.gene_id for g, _ in winners],
        "admitted": admitted,
        "pool": [
            {"gene_id": e.tree_node, "score": e.score, "critic_score": e.critic_score,
             "params": e.gene.num_params(), "generation_admitted": e.generation_admitted}
            for e in state.pool
        ],
        "population_score_mean": float(np.mean(scores)),
        "population_score_max": float(np.max(scores)),
        "population_score_min": float(np.min(scores)),
        "mean_gene_params": float(np.mean(params)),
        "pool_mean_critic_score": float(np.mean([e.critic_score for e in state.pool])) if state.pool else 0.0,
        "pool_mean_score": float(np.mean([e.score for e in state.pool])) if state.pool else 0.0,
    }
    if best is not None:
        record["best_gene"] = gene_record(best.gene)
        record["best_param_fraction"] = parameter_fraction(best.gene.structure, spec.with_head(1))
    return record


def _config_spec(config: EvolutionConfig, images: np.ndarray) -> NetworkSpec:
    c, h, w = images.shape[1:]
    return builtin_spec(config.spec, input_shape=(c, h, w), head_classes=config.task_classes)


# ---------------------------------------------------------------------------
# full runs

@dataclass
class EvolutionResult:
    pool: list[GenePoolEntry]
    tree: GeneTree
    records: list[dict]
    world: World
    spec: NetworkSpec

    def best(self) -> GenePoolEntry:
        return max(self.pool, key=lambda e: (e.score, -e.gene.num_params(), e.tree_node))


def dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    """Float NCHW images in [0, 1] and integer labels from an ImageDataset."""
    images = np.ascontiguousarray(dataset.images.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255)
    return images, np.asarray(dataset.labels, dtype=np.int64)


def record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def evolve(config: EvolutionConfig, dataset, out_dir: str | os.PathLike | None = None,
           resume: str | os.PathLike | None = None,
           reference_structure: LearngeneStructure | None = None,
           on_generation: Callable[[dict], None] | None = None) -> EvolutionResult:
    """Run ``config.generations`` generations (generation 0 included).

    With ``out_dir`` every generation appends one JSON line to
    ``generations.jsonl`` and writes ``checkpoints/gen_XXXX.lgck``. ``resume``
    continues from such a checkpoint. Under ``no_evolution`` a single network
    is trained on all training classes and the gene with ``reference_structure``
    (or the best structure of a normal run) is cut out of it.
    """
    from . import checkpoint

    config.validate()
    images, labels = dataset_arrays(dataset)
    spec = _config_spec(config, images)
    world = partition_world(labels, config.n_train_classes, config.n_val_classes, config.master_seed,
                            config.val_train_fraction)
    if config.no_evolution:
        return _pretrained_baseline(config, images, labels, spec, world, out_dir, reference_structure, dataset)

    state = EvolutionState()
    records: list[dict] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "generations.jsonl"
        checkpoint.atomic_write_text(out_dir / "run.json", json.dumps(
            {"config": config.to_dict(), "spec": json.loads(_spec_json(spec))}, sort_keys=True, indent=1))
    if resume is not None:
        state, saved_seed = checkpoint.load_state(resume)
        if saved_seed != config.master_seed:
            raise ConfigError(f"checkpoint was written with master_seed {saved_seed}, config has {config.master_seed}")
        if log_path is not None and log_path.exists():
            kept = [line for line in log_path.read_text().splitlines()
                    if line and json.loads(line)["generation"] < state.next_generation]
            records = [json.loads(line) for line in kept]
            checkpoint.atomic_write_text(log_path, "".join(line + "\n" for line in kept))
    elif log_path is not None:
        checkpoint.atomic_write_text(log_path, "")

    for generation in range(state.next_generation, config.generations):
        state, record = run_generation(state, config, generation, world, images, labels, spec)
        records.append(record)
        log.info("generation %d: pool critic mean %.4f, mean gene params %.0f", generation,
                 record["pool_mean_critic_score"], record["mean_gene_params"])
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(record_line(record) + "\n")
            checkpoint.save_state(out_dir / "checkpoints" / f"gen_{generation:04d}.lgck", state, config.master_seed)
        if on_generation is not None:
            on_generation(record)
    return EvolutionResult(state.pool, state.tree, records, world, spec)


def _spec_json(spec: NetworkSpec) -> str:
    from .netspec import spec_to_json
    return spec_to_json(spec)


def _pretrained_baseline(config, images, labels, spec, world, out_dir, reference_structure, dataset):
    if reference_structure is None:
        reference_structure = evolve(replace(config, no_evolution=False), dataset).best().gene.structure
    rng = stream(config.master_seed, 10**6, COORDINATOR)
    full = spec.with_head(world.n_t)
    idx = np.concatenate([world.class_indices[c] for c in world.train_classes])
    batch = make_batch(images, labels, idx, world.train_classes)
    budget = replace(config.train_budget, epochs=config.pretrain_epochs)
    weights, acc = train(init_weights(full, rng), batch, budget, seed=int(rng.integers(2**31)))
    gene = extract_learngene(weights, reference_structure, "pretrained-000", None,
                             allow_empty=config.allow_empty_layers)
    score = score_learngene(gene, world, images, labels, spec, config.critic_budget, rng)
    result = IndividualResult(0, gene, world.train_classes, float(acc), float(score))
    pool, tree, admitted = admit_to_pool([], GeneTree(), [(gene, score)], 1, 0, config.pool_capacity)
    state = EvolutionState(1, pool, tree)
    record = _generation_record(0, config, spec, [result], [(gene, score)], admitted, state)
    if out_dir is not None:
        from . import checkpoint
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        checkpoint.atomic_write_text(out_dir / "generations.jsonl", record_line(record) + "\n")
        checkpoint.save_state(out_dir / "checkpoints" / "gen_0000.lgck", state, config.master_seed)
    return EvolutionResult(pool, tree, [record], world, spec)
