"""Few-step accuracy on classes no gene has seen: gene vs random init.

Uses the gene written by 02_evolve_small.py.

    python demos/03_probe_unseen_classes.py [out_dir]
"""

import json
import sys
from pathlib import Path

from learngene import EvolutionConfig, TrainBudget, builtin_spec
from learngene.checkpoint import load_gene
from learngene.data import digits_dataset
from learngene.evolution import dataset_arrays, partition_world
from learngene.protocols import finetune_compare, probe_instinct

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
gene = load_gene(out / "best_gene.lg")
cfg = EvolutionConfig.from_dict(json.loads((out / "run.json").read_text())["config"])

images, labels = dataset_arrays(digits_dataset(size=16))
world = partition_world(labels, cfg.n_train_classes, cfg.n_val_classes, cfg.master_seed)
unseen = sorted(world.novelty_classes)
print(f"novelty classes: {unseen}")
spec = builtin_spec(cfg.spec, images.shape[1:], len(unseen))

table = probe_instinct(gene, images, labels, unseen, spec, iterations=[0, 5, 15, 30], seeds=range(5))
print(table.format())

res = finetune_compare(gene, images, labels, unseen, spec, TrainBudget(2, 0.05, 32), seeds=range(5))
print(f"fine-tune: learngene wins {res.wins}/5")
