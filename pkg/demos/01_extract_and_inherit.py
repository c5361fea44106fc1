"""Train a small network, pull a learngene out of it, and grow descendants.

The gene keeps 45% of each layer's kernels, about a fifth of the conv
weights. It is inherited into the same spec, a wider one and a deeper one
(which gets identity-initialised PIM layers), then each descendant trains for one epoch next to a scratch twin.

A slice cut at random from one ancestor usually gives no head start: its
kernels were trained on all channels and now see only the gene channels.
Genes earn their advantage by surviving many rounds of inherit, train and
extract; see 02 and 03.

    python demos/01_extract_and_inherit.py
"""

import numpy as np

from learngene import (Batch, TrainBudget, builtin_spec, evaluate, extract_learngene, inherit, init_weights,
                       parameter_fraction, train)
from learngene.data import digits_dataset
from learngene.evolution import dataset_arrays
from learngene.genome import init_random_structure
from learngene.inheritance import inherit_with_plan

ds = digits_dataset(size=16)
images, labels = dataset_arrays(ds)
rng = np.random.default_rng(0)
order = rng.permutation(len(labels))
tr, te = order[:1200], order[1200:]

spec = builtin_spec("mini-vgg-6", images.shape[1:], head_classes=10)
ancestor = init_weights(spec, rng)
ancestor, _ = train(ancestor, Batch(images[tr], labels[tr]), TrainBudget(epochs=3, lr=0.05, batch_size=32), seed=1)
print(f"ancestor accuracy on held-back digits: {evaluate(ancestor, Batch(images[te], labels[te])):.3f}")

structure = init_random_structure(spec, 0.45, rng)
gene = extract_learngene(ancestor, structure, gene_id="demo")
print(f"gene kernels per layer {structure.sizes()}, {gene.num_params()} weights, "
      f"{100 * parameter_fraction(structure, spec):.1f}% of conv weights")

short = TrainBudget(epochs=1, lr=0.01, batch_size=32, momentum=0.9)
for name in ("mini-vgg-6", "mini-vgg-6-W", "mini-vgg-8"):
    target = builtin_spec(name, images.shape[1:], head_classes=10)
    child, plan, _ = inherit_with_plan(gene, target, np.random.default_rng(2))
    child, _ = train(child, Batch(images[tr], labels[tr]), short, seed=3)
    print(f"{name:14s} PIM at {plan.pim_positions or '-'}: accuracy after 1 epoch "
          f"{evaluate(child, Batch(images[te], labels[te])):.3f}")

scratch = init_weights(spec, np.random.default_rng(2))
scratch, _ = train(scratch, Batch(images[tr], labels[tr]), short, seed=3)
print(f"{'scratch':14s} accuracy after 1 epoch {evaluate(scratch, Batch(images[te], labels[te])):.3f}")
