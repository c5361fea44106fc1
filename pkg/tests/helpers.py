"""Shared builders for the gene-level forward comparisons."""

from __future__ import annotations

import numpy as np

from learngene.engine import NetworkWeights, forward, init_weights, zeros_like_spec
from learngene.genome import extract_learngene, init_random_structure
from learngene.inheritance import _with_widths
from learngene.netspec import builtin_spec


def trained_like_gene(name="mini-vgg-6", c=0.3, seed=0, shape=(3, 16, 16), head=4):
    """A gene cut from a randomly initialised network with random biases."""
    rng = np.random.default_rng(seed)
    spec = builtin_spec(name, input_shape=shape, head_classes=head)
    w = init_weights(spec, rng)
    for b in w.conv_b + w.skip_b:
        b[:] = rng.normal(0, 0.1, size=b.shape)
    return extract_learngene(w, init_random_structure(spec, c, rng), gene_id="g")


def gene_activations(weights: NetworkWeights, kernels, x) -> list[np.ndarray]:
    acts = forward(weights, x).activations
    return [a[:, list(ks)] for a, ks in zip(acts, kernels)]


def gene_only_network(gene) -> NetworkWeights:
    """A network holding nothing but the gene: each conv is exactly |K_l| wide."""
    spec = _with_widths(gene.source_spec, gene.structure.sizes())
    w = zeros_like_spec(spec)
    for l in range(gene.depth):
        w.conv_w[l][:] = gene.conv_values[l]
        w.conv_b[l][:] = gene.conv_bias[l]
    for s in range(len(gene.skip_values)):
        w.skip_w[s][:] = gene.skip_values[s]
        w.skip_b[s][:] = gene.skip_bias[s]
    return w
