"""Injecting a learngene into descendant networks of other widths, depths and architectures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .engine import NetworkWeights, he_uniform, init_weights
from .genome import LearngeneStructure, LearngeneWeights, StructureError, validate_structure
from .netspec import CONV, SKIP, LayerSpec, NetworkSpec, Spatial


class InheritanceError(ValueError):
    pass


@dataclass
class InheritancePlan:
    """Audit record of how one gene was mapped onto one target spec."""

    source_gene_id: str
    target_spec: str
    reindex: list[list[tuple[int, int]]] = field(default_factory=list)   # per target conv: (old, new)
    pim_positions: list[int] = field(default_factory=list)
    cross_arch_rules: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "source_gene_id": self.source_gene_id,
            "target_spec": self.target_spec,
            "reindex": [[list(p) for p in layer] for layer in self.reindex],
            "pim_positions": self.pim_positions,
            "cross_arch_rules": self.cross_arch_rules,
        }, sort_keys=True)


# ---------------------------------------------------------------------------
# width

def _with_widths(spec: NetworkSpec, widths: Sequence[int]) -> NetworkSpec:
    """Copy of ``spec`` whose conv (and dependent skip) widths are replaced."""
    by_conv = {layer.layer_id: int(w) for layer, w in zip(spec.conv_layers, widths)}
    layers, prev = [], spec.input_shape[0]
    for layer in spec.layers:
        if layer.kind == CONV:
            layer = replace(layer, kernel_count=by_conv[layer.layer_id], channel_count=prev)
            prev = layer.kernel_count
        elif layer.kind == SKIP:
            src, dst = layer.skip_endpoints
            layer = replace(layer, kernel_count=by_conv[dst], channel_count=by_conv[src])
        layers.append(layer)
    return replace(spec, layers=tuple(layers))


def reindex_structure(gene: LearngeneWeights, target_widths: Sequence[int]) -> LearngeneWeights:
    """Sort every index set down to ``0 .. |K_l| - 1``, carrying weights by rank.

    Values are stored in ascending index order already, so only the index sets
    change; the k-th smallest old index becomes new index k.
    """
    sizes = gene.structure.sizes()
    if len(target_widths) != len(sizes):
        raise InheritanceError(f"gene has {len(sizes)} layers, {len(target_widths)} target widths given")
    for l, (size, width) in enumerate(zip(sizes, target_widths)):
        if size > width:
            raise InheritanceError(f"layer {l + 1}: gene owns {size} kernels but the target has only {width}")
    spec = _with_widths(gene.source_spec, target_widths)
    structure = LearngeneStructure.from_kernels(spec, [range(s) for s in sizes])
    structure = replace(structure, spec_name=gene.structure.spec_name)
    return gene.copy(structure=structure, source_spec=spec)


# ---------------------------------------------------------------------------
# depth

def pim_kernel(k: int, kernel_set, spatial=(3, 3), rng: np.random.Generator | None = None,
               n_channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """One kernel of a partial-identity layer, shape ``(n_channels, kh, kw)``.

    For ``k`` in the gene set: a single 1 at the spatial centre of channel ``k``,
    zeros elsewhere. Otherwise a fan-in scaled random kernel.
    """
    kh, kw = spatial
    if kh % 2 == 0 or kw % 2 == 0:
        raise InheritanceError(f"identity kernel needs odd spatial size, got {kh}x{kw}")
    kernel_set = set(int(i) for i in kernel_set)
    if n_channels is None:
        n_channels = max(kernel_set | {k}) + 1
    if k in kernel_set:
        out = np.zeros((n_channels, kh, kw), dtype=dtype)
        out[k, kh // 2, kw // 2] = 1.0
        return out
    rng = rng if rng is not None else np.random.default_rng()
    return he_uniform((1, n_channels, kh, kw), rng, dtype)[0]


def default_pim_positions(n_layers: int, count: int) -> list[int]:
    """Spread ``count`` insertions evenly; position p means "after gene layer p" (1-based).

    Halfway cases round toward the later layer.
    """
    if count <= 0:
        return []
    last = max(1, n_layers - 1)
    return [min(last, max(1, int(np.floor(i * n_layers / (count + 1) + 0.5)))) for i in range(1, count + 1)]


def _insert_convs(spec: NetworkSpec, positions: Sequence[int], spatial: tuple[int, int]) -> NetworkSpec:
    """Insert plain conv layers after the given 1-based conv ordinals.

    A new layer goes right before the next conv (after any pools), so pooling
    stays where it was. A skip whose source conv gains inserted layers takes the
    last of them as its new source: identity layers leave the block input of
    the gene channels unchanged.
    """
    convs = spec.conv_layers
    counts: dict[int, int] = {}
    for p in positions:
        counts[p] = counts.get(p, 0) + 1
    before = {convs[p].layer_id: p for p in counts if p < len(convs)}
    at_end = [p for p in counts if p >= len(convs)]
    widths = spec.widths
    layers: list[LayerSpec] = []
    old_to_new: dict[int, int] = {}
    last_inserted: dict[int, int] = {}

    def add(p):
        w = widths[p - 1]
        for _ in range(counts[p]):
            layers.append(LayerSpec(len(layers) + 1, CONV, w, w, Spatial(tuple(spatial), 1, spatial[0] // 2)))
        last_inserted[convs[p - 1].layer_id] = len(layers)

    for layer in spec.layers:
        if layer.kind == CONV and layer.layer_id in before:
            add(before[layer.layer_id])
        if layer.kind == "fully_connected" and at_end:
            add(at_end.pop())
        old_to_new[layer.layer_id] = len(layers) + 1
        layers.append(replace(layer, layer_id=len(layers) + 1))
    if at_end:
        add(at_end.pop())
    fixed = []
    for layer in layers:
        if layer.kind == SKIP:
            s, d = layer.skip_endpoints
            src = last_inserted.get(s, old_to_new[s])
            if src < old_to_new[d]:
                layer = replace(layer, skip_endpoints=(src, old_to_new[d]))
            else:
                layer = replace(layer, skip_endpoints=(old_to_new[s], old_to_new[d]))
        fixed.append(layer)
    return replace(spec, name=spec.name + "+pim", layers=tuple(fixed))


def insert_pim_layers(gene: LearngeneWeights, target_depth: int, positions: Sequence[int] | None = None,
                      spatial=(3, 3)) -> LearngeneWeights:
    """Deepen a gene with partial-identity layers until it has ``target_depth`` conv layers.

    A layer inserted after gene layer l has n_K^l kernels and channels and owns
    K_l on both axes, with identity kernels for the owned pairs.
    """
    n_a = gene.depth
    count = target_depth - n_a
    if count < 0:
        raise InheritanceError(f"cannot shrink a {n_a}-layer gene to {target_depth} layers")
    if count == 0:
        if positions:
            raise InheritanceError("positions given but no layers to insert")
        return gene.copy()
    positions = default_pim_positions(n_a, count) if positions is None else [int(p) for p in positions]
    if len(positions) != count:
        raise InheritanceError(f"need {count} PIM positions, got {len(positions)}")
    if any(p < 1 or p > n_a for p in positions):
        raise InheritanceError(f"PIM positions must lie in [1, {n_a}], got {positions}")
    positions = sorted(positions)
    spec = _insert_convs(gene.source_spec, positions, tuple(spatial))

    kernels, values, bias = [], [], []
    dtype = gene.conv_values[0].dtype if gene.conv_values else np.float32
    for l in range(n_a):
        kernels.append(gene.structure.kernels[l])
        values.append(gene.conv_values[l].copy())
        bias.append(gene.conv_bias[l].copy())
        for _ in range(positions.count(l + 1)):
            ks = list(gene.structure.kernels[l])
            width = gene.source_spec.widths[l]
            block = np.stack([pim_kernel(k, ks, spatial, n_channels=width, dtype=dtype)[ks] for k in ks]) \
                if ks else np.zeros((0, 0) + tuple(spatial), dtype=dtype)
            kernels.append(tuple(ks))
            values.append(block)
            bias.append(np.zeros(len(ks), dtype=dtype))
    structure = replace(LearngeneStructure.from_kernels(spec, kernels), spec_name=gene.structure.spec_name)
    return gene.copy(structure=structure, source_spec=spec, conv_values=values, conv_bias=bias)


# ---------------------------------------------------------------------------
# placement

def plan_inheritance(gene: LearngeneWeights, target: NetworkSpec, pim_positions: Sequence[int] | None = None):
    """Adapt ``gene`` to ``target``'s depth and widths; returns ``(adapted_gene, plan)``."""
    plan = InheritancePlan(gene.gene_id, target.name)
    if gene.source_spec is None:
        raise InheritanceError("gene carries no source layout")
    if target.input_shape[0] != gene.source_spec.input_shape[0]:
        raise InheritanceError(
            f"target takes {target.input_shape[0]} input channels, gene expects {gene.source_spec.input_shape[0]}")
    n_a, n_d = gene.depth, len(target.conv_layers)
    if n_d < n_a:
        raise InheritanceError(f"depth reduction is unsupported: gene has {n_a} layers, target {n_d}")
    adapted = gene
    if n_d > n_a:
        positions = default_pim_positions(n_a, n_d - n_a) if pim_positions is None else list(pim_positions)
        adapted = insert_pim_layers(gene, n_d, positions)
        plan.pim_positions = sorted(positions)
    for l, (glayer, tlayer) in enumerate(zip(adapted.source_spec.conv_layers, target.conv_layers)):
        if tuple(glayer.spatial.kernel) != tuple(tlayer.spatial.kernel):
            raise InheritanceError(
                f"layer {l + 1}: gene kernel {glayer.spatial.kernel} vs target kernel {tlayer.spatial.kernel}")
    old_sets = adapted.structure.kernels
    if adapted.source_spec.widths != target.widths:
        adapted = reindex_structure(adapted, target.widths)
    plan.reindex = [list(zip(map(int, old), map(int, new)))
                    for old, new in zip(old_sets, adapted.structure.kernels)]
    return adapted, plan


def inherit(gene: LearngeneWeights, target: NetworkSpec, rng: np.random.Generator,
            pim_positions: Sequence[int] | None = None, dtype=np.float32) -> NetworkWeights:
    return inherit_with_plan(gene, target, rng, pim_positions, dtype)[0]


def inherit_with_plan(gene: LearngeneWeights, target: NetworkSpec, rng: np.random.Generator,
                      pim_positions: Sequence[int] | None = None, dtype=np.float32):
    """Build a descendant: random init everywhere, then the gene, zero-filled.

    Missing channels of every gene kernel are set to exactly 0 so only gene
    channels feed gene kernels. Skip layers of the target that the gene does
    not carry get zeroed kernels on the gene's target indices; gene skips
    with no counterpart in the target are dropped.
    """
    adapted, plan = plan_inheritance(gene, target, pim_positions)
    weights = init_weights(target, rng, dtype)
    st = adapted.structure
    for l in range(adapted.depth):
        ks, cs = list(st.kernels[l]), list(st.channels[l])
        w = weights.conv_w[l]
        w[ks] = 0.0
        w[np.ix_(ks, cs)] = adapted.conv_values[l]
        weights.conv_b[l][ks] = adapted.conv_bias[l]

    gene_skips = {pair: s for s, pair in enumerate(adapted.source_spec.skip_ordinals())}
    target_skips = target.skip_ordinals()
    for t, (src, dst) in enumerate(target_skips):
        ks, cs = list(st.kernels[dst]), list(st.kernels[src])
        w = weights.skip_w[t]
        w[ks] = 0.0
        weights.skip_b[t][ks] = 0.0
        s = gene_skips.get((src, dst))
        if s is not None and tuple(adapted.skip_values[s].shape[2:]) == tuple(w.shape[2:]):
            w[np.ix_(ks, cs)] = adapted.skip_values[s]
            weights.skip_b[t][ks] = adapted.skip_bias[s]
            plan.cross_arch_rules.append({"skip": t, "action": "copied", "endpoints": [src + 1, dst + 1]})
        else:
            plan.cross_arch_rules.append({"skip": t, "action": "zero_filled", "endpoints": [src + 1, dst + 1]})
    target_set = set(target_skips)
    for pair in gene_skips:
        if pair not in target_set:
            plan.cross_arch_rules.append({"skip": None, "action": "dropped",
                                          "endpoints": [pair[0] + 1, pair[1] + 1]})
    problems = validate_structure(st.rederive(target), target)
    if problems:
        raise StructureError("; ".join(map(str, problems)))
    return weights, plan, adapted
