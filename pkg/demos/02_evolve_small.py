"""A short evolutionary run on the scikit-learn digits, then a report.

Six train classes feed the population, two validation classes feed the
critic, and the remaining two stay unseen. Takes a few minutes on one core.

    python demos/02_evolve_small.py [out_dir]
"""

import sys
from pathlib import Path

from learngene import EvolutionConfig, evolve
from learngene.checkpoint import save_gene
from learngene.data import digits_dataset
from learngene.report import write_report

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
config = EvolutionConfig(population_size=6, tournament_size=2, pool_capacity=4, generations=5,
                         n_train_classes=6, n_val_classes=2, task_classes=3,
                         train_epochs=2, critic_iterations=10, critic_batch_size=16, master_seed=0)

result = evolve(config, digits_dataset(size=16), out_dir=out,
                on_generation=lambda r: print(f"gen {r['generation']}: pool critic mean "
                                              f"{r['pool_mean_critic_score']:.3f}, "
                                              f"population mean {r['population_score_mean']:.3f}"))
best = result.best()
save_gene(out / "best_gene.lg", best.gene)
print(write_report(out).summary, end="")
print(f"saved {best.gene.gene_id} to {out / 'best_gene.lg'}")
