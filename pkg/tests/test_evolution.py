import json
from dataclasses import replace

import numpy as np
import pytest

from learngene.data import synthetic_dataset
from learngene.engine import TrainBudget, init_weights, train, zeros_like_spec
from learngene.evolution import (
    ConfigError, EvolutionConfig, EvolutionState, GenePoolEntry, GeneTree, PoolError, World, admit_to_pool,
    dataset_arrays, evolve, make_batch, parent_probabilities, partition_world, run_generation, sample_task,
    score_learngene, tournament_select, update_ancestor_scores,
)
from learngene.genome import LearngeneStructure, LearngeneWeights, extract_learngene, init_random_structure
from learngene.netspec import builtin_spec
from oracles import ancestor_increments


class FakeGene:
    def __init__(self, gene_id, params=10, parent_id=None):
        self.gene_id, self._params, self.parent_id = gene_id, params, parent_id

    def num_params(self):
        return self._params


# world and tasks

def test_partition_20_classes():
    labels = np.repeat(np.arange(20), 3)
    w = partition_world(labels, 14, 4, seed=0)
    assert (w.n_t, w.n_v, len(w.novelty_classes)) == (14, 4, 2)
    assert not set(w.train_classes) & set(w.val_classes)
    assert not (set(w.train_classes) | set(w.val_classes)) & set(w.novelty_classes)
    again = partition_world(labels, 14, 4, seed=0)
    assert (again.train_classes, again.val_classes) == (w.train_classes, w.val_classes)
    full = partition_world(labels, 16, 4, seed=0)
    assert full.novelty_classes == ()
    with pytest.raises(ValueError):
        partition_world(labels, 18, 4, seed=0)


def _world(n_t=14, per=10):
    labels = np.repeat(np.arange(n_t + 2), per)
    return partition_world(labels, n_t, 2, seed=0)


def test_task_covering_all_and_errors():
    w = _world()
    t = sample_task(w, 14, np.random.default_rng(0))
    assert sorted(t.classes) == sorted(w.train_classes)
    assert len(t.train_idx) + len(t.holdout_idx) == 14 * 10
    with pytest.raises(ValueError):
        sample_task(w, 15, np.random.default_rng(0))


def test_task_inclusion_frequency_hypergeometric():
    w = _world()
    rng = np.random.default_rng(0)
    counts = np.zeros(16)
    n = 10_000
    for _ in range(n):
        for c in sample_task(w, 5, rng).classes:
            counts[c] += 1
    p = 5 / 14
    sigma = np.sqrt(n * p * (1 - p))
    for c in w.train_classes:
        assert abs(counts[c] - n * p) <= 3 * sigma


def test_tasks_differ_across_seeds():
    w = _world()
    a = [sample_task(w, 5, np.random.default_rng(s)).classes for s in range(20)]
    assert len(set(a)) > 10


# scoring

@pytest.fixture(scope="module")
def digits_arrays():
    from learngene.data import digits_dataset
    return dataset_arrays(digits_dataset())


def test_zero_gene_zero_budget_is_chance(digits_arrays):
    images, labels = digits_arrays
    world = partition_world(labels, 8, 2, seed=0)
    spec = builtin_spec("mini-vgg-6", input_shape=(1, 16, 16), head_classes=2)
    gene = extract_learngene(zeros_like_spec(spec), init_random_structure(spec, 0.25, np.random.default_rng(0)))
    scores = [score_learngene(gene, world, images, labels, spec, TrainBudget(0), np.random.default_rng(s))
              for s in range(5)]
    n = len(world.val_holdout_idx)
    assert abs(np.mean(scores) - 0.5) <= 3 * np.sqrt(0.25 / (5 * n))


def test_score_deterministic(digits_arrays):
    images, labels = digits_arrays
    world = partition_world(labels, 8, 2, seed=0)
    spec = builtin_spec("mini-vgg-6", input_shape=(1, 16, 16), head_classes=2)
    gene = extract_learngene(init_weights(spec, np.random.default_rng(0)),
                             init_random_structure(spec, 0.25, np.random.default_rng(0)))
    b = TrainBudget(1, 0.05, 16, max_iterations=5)
    s1 = score_learngene(gene, world, images, labels, spec, b, np.random.default_rng(3))
    s2 = score_learngene(gene, world, images, labels, spec, b, np.random.default_rng(3))
    assert s1 == s2 and 0 <= s1 <= 1


def test_pretrained_gene_beats_random(digits_arrays):
    images, labels = digits_arrays
    world = partition_world(labels, 8, 2, seed=0)
    spec = builtin_spec("mini-vgg-6", input_shape=(1, 16, 16), head_classes=2)
    structure = init_random_structure(spec, 1.0, np.random.default_rng(0))
    tr = make_batch(images, labels, world.val_train_idx, world.val_classes)
    trained, _ = train(init_weights(spec, np.random.default_rng(0)), tr, TrainBudget(5, 0.05, 16), seed=0)
    good = extract_learngene(trained, structure)
    rand = extract_learngene(init_weights(spec, np.random.default_rng(1)), structure)
    b = TrainBudget(1, 0.05, 16, max_iterations=3)
    wins = sum(score_learngene(good, world, images, labels, spec, b, np.random.default_rng(s)) >
               score_learngene(rand, world, images, labels, spec, b, np.random.default_rng(s)) for s in range(5))
    assert wins == 5


# tournaments

def test_tournament_counts():
    scored = [(FakeGene(f"g{i}"), float(i)) for i in range(20)]
    assert len(tournament_select(scored, 3, np.random.default_rng(0))) == 7
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, d = int(rng.integers(1, 60)), int(rng.integers(2, 10))
        scored = [(FakeGene(f"g{i}"), float(rng.random())) for i in range(n)]
        assert len(tournament_select(scored, d, rng)) == -(-n // d)


def test_tournament_brute_force():
    scored = [(FakeGene(f"g{i}"), s) for i, s in enumerate([0.3, 0.9, 0.1, 0.5, 0.7, 0.2])]
    winners = tournament_select(scored, 3, np.random.default_rng(7))
    order = np.random.default_rng(7).permutation(6)
    expect = [max((scored[i] for i in order[g * 3:(g + 1) * 3]), key=lambda t: t[1]) for g in range(2)]
    assert [w[0].gene_id for w in winners] == [e[0].gene_id for e in expect]


def test_tournament_tie_break():
    scored = [(FakeGene("b", 5), 0.5), (FakeGene("a", 5), 0.5), (FakeGene("c", 3), 0.5), (FakeGene("d", 9), 0.5)]
    winners = tournament_select(scored, 4, np.random.default_rng(0))
    assert [w[0].gene_id for w in winners] == ["c"]
    scored = scored[:2]
    assert tournament_select(scored, 2, np.random.default_rng(3))[0][0].gene_id == "a"
    with pytest.raises(ValueError):
        tournament_select([], 2, np.random.default_rng(0))


# pool, tree, scores

def _entry(node, score, gen=0):
    return GenePoolEntry(FakeGene(node), score, score, node, gen)


def _chain_tree(nodes):
    t = GeneTree()
    parent = None
    for n in nodes:
        t.add(n, parent)
        parent = n
    return t


def test_update_parent_and_grandparent():
    tree = _chain_tree(["gp", "p"])
    pool = [_entry("p", 1.0)]
    assert update_ancestor_scores(pool, tree, "p", 0.8, 0.5)[0].score == pytest.approx(1.8)
    pool = [_entry("gp", 1.0)]
    assert update_ancestor_scores(pool, tree, "p", 0.8, 0.5)[0].score == pytest.approx(1.4)


def test_update_chain_of_three():
    tree = _chain_tree(["a", "b", "c"])
    pool = [_entry(n, 0.0) for n in "abc"]
    out = {e.tree_node: e.score for e in update_ancestor_scores(pool, tree, "c", 1.0, 0.5)}
    assert out == {"c": 1.0, "b": 0.5, "a": 0.25}


def test_update_orphan_is_skipped(caplog):
    pool = [_entry("a", 1.0)]
    assert update_ancestor_scores(pool, GeneTree({"a": None}), "zz", 1.0, 0.5)[0].score == 1.0
    assert "not in gene tree" in caplog.text


def _random_tree(rng, n):
    tree = GeneTree()
    names = []
    for i in range(n):
        parent = None if not names or rng.random() < 0.1 else names[int(rng.integers(len(names)))]
        tree.add(f"n{i}", parent)
        names.append(f"n{i}")
    return tree, names


def test_update_matches_oracle_on_random_trees():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tree, names = _random_tree(rng, int(rng.integers(2, 40)))
        pooled = set(rng.choice(names, size=int(rng.integers(1, len(names) + 1)), replace=False))
        pool = [_entry(n, float(rng.random())) for n in sorted(pooled)]
        parent, s, eta = names[int(rng.integers(len(names)))], float(rng.random()), float(rng.uniform(0.1, 0.9))
        want = ancestor_increments(tree.parents, pooled, parent, s, eta)
        out = update_ancestor_scores(pool, tree, parent, s, eta)
        for before, after in zip(pool, out):
            assert after.score == before.score + want.get(before.tree_node, 0.0)


def _gene(gid, parent=None):
    return FakeGene(gid, parent_id=parent)


def test_admit_generation_zero():
    winners = [(_gene(f"w{i}"), 0.1 * i) for i in range(7)]
    pool, tree, admitted = admit_to_pool([], GeneTree(), winners, 2, 0, 10)
    assert len(pool) == 7 and len(tree.roots()) == 7 and len(admitted) == 7


def test_admit_full_pool_low_candidate():
    pool = [_entry(f"p{i}", 0.5 + i) for i in range(3)]
    tree = GeneTree({f"p{i}": None for i in range(3)})
    new_pool, new_tree, admitted = admit_to_pool(pool, tree, [(_gene("c", "p0"), 0.1)], 1, 1, 3)
    assert [e.tree_node for e in new_pool] == ["p0", "p1", "p2"] and admitted == []
    assert new_tree.parents["c"] == "p0"


def test_admit_top_epsilon_and_eviction():
    pool = [_entry(f"p{i}", 0.5) for i in range(3)]
    tree = GeneTree({f"p{i}": None for i in range(3)})
    winners = [(_gene(f"w{i}", "p1"), s) for i, s in enumerate([0.2, 0.9, 0.4, 0.95, 0.1, 0.3, 0.6])]
    new_pool, new_tree, admitted = admit_to_pool(pool, tree, winners, 2, 1, 3)
    assert admitted == ["w3", "w1"]
    assert set(new_tree.parents) == {"p0", "p1", "p2", "w3", "w1"}
    assert sorted(e.tree_node for e in new_pool) == ["p2", "w1", "w3"]


def test_credited_ancestor_blocks_or_yields_by_eviction_score():
    # both entries carry ancestor credit; p0's own critic score is only 0.3
    pool = [GenePoolEntry(FakeGene("p0"), 1.6, 0.3, "p0", 0), GenePoolEntry(FakeGene("p1"), 0.9, 0.7, "p1", 0)]
    tree = GeneTree({"p0": None, "p1": None})
    winners = [(_gene("c", "p1"), 0.8)]
    _, _, admitted = admit_to_pool(pool, tree, winners, 1, 1, 2, eviction_score="accumulated")
    assert admitted == []
    new_pool, _, admitted = admit_to_pool(pool, tree, winners, 1, 1, 2, eviction_score="critic")
    assert admitted == ["c"] and sorted(e.tree_node for e in new_pool) == ["c", "p1"]
    with pytest.raises(PoolError):
        admit_to_pool(pool, tree, winners, 1, 1, 2, eviction_score="age")


def test_parent_probabilities():
    assert np.allclose(parent_probabilities([1, 2, 2]), [0.2, 0.4, 0.4])
    assert np.allclose(parent_probabilities([3.0]), [1.0])
    assert np.allclose(parent_probabilities([0, 0]), [0.5, 0.5])
    with pytest.raises(PoolError):
        parent_probabilities([1, -1])


def test_parent_sampling_frequencies():
    scores = np.array([0.5, 1.5, 2.0, 0.0, 1.0])
    p = parent_probabilities(scores)
    n = 100_000
    counts = np.bincount(np.random.default_rng(0).choice(len(p), size=n, p=p), minlength=len(p))
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)) + 1e-9)


def test_tree_rejects_bad_links():
    t = GeneTree({"a": None})
    with pytest.raises(PoolError):
        t.add("a", None)
    with pytest.raises(PoolError):
        t.add("b", "nope")


# config

def test_config_validation():
    EvolutionConfig().validate()
    with pytest.raises(ConfigError):
        EvolutionConfig(tournament_size=30).validate()
    with pytest.raises(ConfigError):
        EvolutionConfig(parental_decay=1.0).validate()
    with pytest.raises(ConfigError):
        EvolutionConfig(task_classes=9).validate()
    with pytest.raises(ConfigError):
        EvolutionConfig.from_dict({"bogus": 1})
    cfg = EvolutionConfig(task_classes=2, task_classes_final=6, generations=5)
    assert [cfg.k_for(g) for g in range(5)] == [2, 3, 4, 5, 6]


# full runs

SMOKE = EvolutionConfig(population_size=4, tournament_size=2, generations=3, n_train_classes=6, n_val_classes=2,
                        train_epochs=1, critic_epochs=1, spec="mini-vgg-6")


@pytest.fixture(scope="module")
def smoke_data():
    return synthetic_dataset(n_classes=8, per_class=12, size=16)


def test_generations_zero(smoke_data):
    r = evolve(replace(SMOKE, generations=0), smoke_data)
    assert r.pool == [] and r.records == []


def test_smoke_run_and_invariants(smoke_data, tmp_path):
    r = evolve(SMOKE, smoke_data, out_dir=tmp_path)
    assert len(r.records) == 3
    lines = (tmp_path / "generations.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["generation"] == 0
    for rec in r.records:
        assert len(rec["pool"]) <= SMOKE.pool_capacity
        assert all(e["score"] >= 0 for e in rec["pool"])
        assert len(rec["winners"]) == 2
        assert "mean_gene_params" in rec and "best_param_fraction" in rec
    for node in r.tree.parents:
        r.tree.path_to_root(node)
    assert (tmp_path / "checkpoints" / "gen_0002.lgck").exists()


def test_determinism_and_resume(smoke_data, tmp_path):
    a = evolve(SMOKE, smoke_data, out_dir=tmp_path / "a")
    b = evolve(SMOKE, smoke_data, out_dir=tmp_path / "b")
    text = (tmp_path / "a" / "generations.jsonl").read_bytes()
    assert text == (tmp_path / "b" / "generations.jsonl").read_bytes()
    evolve(replace(SMOKE, generations=1), smoke_data, out_dir=tmp_path / "c")
    evolve(SMOKE, smoke_data, out_dir=tmp_path / "c", resume=tmp_path / "c" / "checkpoints" / "gen_0000.lgck")
    assert (tmp_path / "c" / "generations.jsonl").read_bytes() == text


def test_workers_do_not_change_records(smoke_data, tmp_path):
    evolve(SMOKE, smoke_data, out_dir=tmp_path / "one")
    evolve(replace(SMOKE, workers=2), smoke_data, out_dir=tmp_path / "two")
    assert (tmp_path / "one" / "generations.jsonl").read_bytes() == (tmp_path / "two" / "generations.jsonl").read_bytes()


def test_population_one(smoke_data):
    r = evolve(replace(SMOKE, population_one=True), smoke_data)
    assert all(len(rec["individuals"]) == 1 and len(rec["winners"]) == 1 for rec in r.records)


def test_no_mutation_keeps_root_structures(smoke_data):
    r = evolve(replace(SMOKE, no_mutation=True, generations=4), smoke_data)
    sig = {}
    for rec in r.records:
        for ind in rec["individuals"]:
            sig[ind["gene_id"]] = ind["structure"]
    for rec in r.records[1:]:
        for ind in rec["individuals"]:
            root = r.tree.path_to_root(ind["parent_id"])[-1] if ind["parent_id"] in r.tree else None
            if root is not None:
                assert ind["structure"] == sig[root]


def test_no_evolution_baseline(smoke_data):
    base = evolve(SMOKE, smoke_data)
    ref = base.best().gene.structure
    r = evolve(replace(SMOKE, no_evolution=True, pretrain_epochs=1), smoke_data, reference_structure=ref)
    assert len(r.pool) == 1 and r.pool[0].gene.structure == ref
    assert len(r.records) == 1


def test_run_generation_directly(smoke_data):
    images, labels = dataset_arrays(smoke_data)
    world = partition_world(labels, 6, 2, 0)
    state, rec = run_generation(EvolutionState(), SMOKE, 0, world, images, labels)
    assert state.next_generation == 1 and len(state.pool) == 2
    state2, rec2 = run_generation(state, SMOKE, 1, world, images, labels)
    assert all(ind["parent_id"] in state.tree for ind in rec2["individuals"])
