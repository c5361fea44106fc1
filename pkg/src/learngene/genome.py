"""Learngene structures: per-layer kernel/channel index sets and their weights.

Indices are 0-based. For main-path conv layer ``l`` the structure holds
``kernels[l]`` (K_l) and ``channels[l]`` (C_l), tied by ``channels[l + 1] ==
kernels[l]``; ``channels[0]`` is always every input channel. Skip layers carry
``skip_kernels[s] == kernels[target]`` and ``skip_channels[s] ==
kernels[source]`` and are never edited directly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .netspec import NetworkSpec

IndexSet = tuple[int, ...]


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class GeneViolation:
    layers: tuple[int, ...]
    reason: str
    skip: bool = False

    def __str__(self) -> str:
        where = f"skip layer {self.layers[0]}" if self.skip else "layers " + ", ".join(map(str, self.layers))
        return f"{where}: {self.reason}"


@dataclass(frozen=True)
class LearngeneStructure:
    spec_name: str
    kernels: tuple[IndexSet, ...]
    channels: tuple[IndexSet, ...]
    skip_kernels: tuple[IndexSet, ...] = ()
    skip_channels: tuple[IndexSet, ...] = ()

    @classmethod
    def from_kernels(cls, spec: NetworkSpec, kernels: Sequence[Sequence[int]]) -> "LearngeneStructure":
        """Derive channel and skip sets from the kernel sets alone."""
        kernels = tuple(tuple(sorted(int(k) for k in ks)) for ks in kernels)
        channels = (tuple(range(spec.input_shape[0])),) + kernels[:-1]
        pairs = spec.skip_ordinals()
        return cls(
            spec.name, kernels, channels,
            tuple(kernels[dst] for _, dst in pairs),
            tuple(kernels[src] for src, _ in pairs),
        )

    def sizes(self) -> list[int]:
        return [len(k) for k in self.kernels]

    def rederive(self, spec: NetworkSpec) -> "LearngeneStructure":
        return LearngeneStructure.from_kernels(spec, self.kernels)

    def signature(self) -> str:
        """Short digest of every index set; equal digests mean equal structures."""
        h = hashlib.sha1()
        for group in (self.kernels, self.channels, self.skip_kernels, self.skip_channels):
            for s in group:
                h.update(repr(s).encode())
            h.update(b"|")
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "spec_name": self.spec_name,
            "kernels": [list(s) for s in self.kernels],
            "channels": [list(s) for s in self.channels],
            "skip_kernels": [list(s) for s in self.skip_kernels],
            "skip_channels": [list(s) for s in self.skip_channels],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LearngeneStructure":
        def sets(key):
            return tuple(tuple(int(i) for i in s) for s in data.get(key, []))
        return cls(data["spec_name"], sets("kernels"), sets("channels"), sets("skip_kernels"), sets("skip_channels"))


@dataclass
class LearngeneWeights:
    """A structure plus the kh x kw slice for every owned (kernel, channel) pair.

    ``conv_values[l]`` has shape ``(|K_l|, |C_l|, kh, kw)`` with rows and columns
    in ascending index order. Kernel biases travel with their kernels.
    ``source_spec`` records the layer layout the indices refer to.
    """

    structure: LearngeneStructure
    conv_values: list[np.ndarray]
    conv_bias: list[np.ndarray]
    skip_values: list[np.ndarray] = field(default_factory=list)
    skip_bias: list[np.ndarray] = field(default_factory=list)
    gene_id: str = ""
    parent_id: str | None = None
    source_spec: NetworkSpec | None = None

    def num_params(self) -> int:
        return int(sum(v.size for v in self.conv_values) + sum(v.size for v in self.skip_values))

    def copy(self, **changes) -> "LearngeneWeights":
        out = replace(
            self,
            conv_values=[v.copy() for v in self.conv_values],
            conv_bias=[v.copy() for v in self.conv_bias],
            skip_values=[v.copy() for v in self.skip_values],
            skip_bias=[v.copy() for v in self.skip_bias],
        )
        return replace(out, **changes) if changes else out

    @property
    def depth(self) -> int:
        return len(self.structure.kernels)


# ---------------------------------------------------------------------------

def validate_structure(
    structure: LearngeneStructure, spec: NetworkSpec, allow_empty: bool = False
) -> list[GeneViolation]:
    """Every broken alignment, bound, or skip derivation; conv layers are named 1-based."""
    found: list[GeneViolation] = []
    convs, skips = spec.conv_layers, spec.skip_layers
    if len(structure.kernels) != len(convs) or len(structure.channels) != len(convs):
        return [GeneViolation((0,), f"structure has {len(structure.kernels)} kernel sets and "
                                    f"{len(structure.channels)} channel sets, spec has {len(convs)} conv layers")]
    if len(structure.skip_kernels) != len(skips) or len(structure.skip_channels) != len(skips):
        return [GeneViolation((0,), f"structure has {len(structure.skip_kernels)} skip sets, "
                                    f"spec has {len(skips)} skip layers")]

    def bad_set(s, bound):
        return list(s) != sorted(set(s)) or any((not isinstance(i, (int, np.integer))) or i < 0 or i >= bound
                                                for i in s)

    for l, layer in enumerate(convs):
        ks, cs = structure.kernels[l], structure.channels[l]
        if bad_set(ks, layer.kernel_count):
            found.append(GeneViolation((l + 1,), f"kernel indices {ks} not sorted/unique within [0, {layer.kernel_count})"))
        if bad_set(cs, layer.channel_count):
            found.append(GeneViolation((l + 1,), f"channel indices not sorted/unique within [0, {layer.channel_count})"))
        if not ks and not allow_empty:
            found.append(GeneViolation((l + 1,), "empty kernel set"))
        if l == 0:
            if tuple(cs) != tuple(range(spec.input_shape[0])):
                found.append(GeneViolation((1,), "first layer must own every input channel"))
        elif tuple(cs) != tuple(structure.kernels[l - 1]):
            found.append(GeneViolation((l, l + 1), f"channels of layer {l + 1} differ from kernels of layer {l}"))
    for s, (layer, (src, dst)) in enumerate(zip(skips, spec.skip_ordinals())):
        if tuple(structure.skip_kernels[s]) != tuple(structure.kernels[dst]):
            found.append(GeneViolation((layer.layer_id,), f"skip kernels differ from kernels of layer {dst + 1}", True))
        if tuple(structure.skip_channels[s]) != tuple(structure.kernels[src]):
            found.append(GeneViolation((layer.layer_id,), f"skip channels differ from kernels of layer {src + 1}", True))
    return found


def _require_valid(structure, spec, allow_empty=False):
    problems = validate_structure(structure, spec, allow_empty)
    if problems:
        raise StructureError("; ".join(str(p) for p in problems))


def init_random_structure(spec: NetworkSpec, c: float, rng: np.random.Generator) -> LearngeneStructure:
    """Pick ceil(c * n_K) kernels uniformly at random in every conv layer."""
    if not 0 < c <= 1:
        raise ValueError(f"init fraction c must lie in (0, 1], got {c}")
    kernels = []
    for layer in spec.conv_layers:
        n = layer.kernel_count
        size = math.ceil(c * n)
        kernels.append(sorted(int(i) for i in rng.choice(n, size=size, replace=False)))
    return LearngeneStructure.from_kernels(spec, kernels)


def full_structure(spec: NetworkSpec) -> LearngeneStructure:
    return LearngeneStructure.from_kernels(spec, [range(w) for w in spec.widths])


def extract_learngene(weights, structure: LearngeneStructure, gene_id: str = "", parent_id: str | None = None,
                      allow_empty: bool = False) -> LearngeneWeights:
    """Copy the (kernel, channel) slices owned by ``structure`` out of ``weights``."""
    spec = weights.spec
    _require_valid(structure, spec, allow_empty)
    conv_values, conv_bias, skip_values, skip_bias = [], [], [], []
    for l in range(len(structure.kernels)):
        ks, cs = list(structure.kernels[l]), list(structure.channels[l])
        conv_values.append(weights.conv_w[l][np.ix_(ks, cs)].copy())
        conv_bias.append(weights.conv_b[l][ks].copy())
    for s in range(len(structure.skip_kernels)):
        ks, cs = list(structure.skip_kernels[s]), list(structure.skip_channels[s])
        skip_values.append(weights.skip_w[s][np.ix_(ks, cs)].copy())
        skip_bias.append(weights.skip_b[s][ks].copy())
    return LearngeneWeights(structure, conv_values, conv_bias, skip_values, skip_bias,
                            gene_id, parent_id, spec)


# ---------------------------------------------------------------------------
# mutation

def growth_probability(gene_size: int, layer_width: int, alpha: float) -> float:
    """Chance that a mutation event adds a kernel: alpha * |K| / (n_K - |K|), clamped to [0, 1].

    A saturated layer (|K| == n_K) returns 1.
    """
    if layer_width <= 0:
        raise ValueError("layer_width must be positive")
    if not 0 <= gene_size <= layer_width:
        raise ValueError(f"gene_size {gene_size} outside [0, {layer_width}]")
    if gene_size == layer_width:
        return 1.0
    return float(min(1.0, max(0.0, alpha * gene_size / (layer_width - gene_size))))


def mutate_with_events(
    structure: LearngeneStructure,
    spec: NetworkSpec,
    p_m: float,
    alpha: float,
    rng: np.random.Generator,
    allow_empty_layers: bool = False,
) -> tuple[LearngeneStructure, list[tuple[int, int]]]:
    """Run the per-layer mutation loop; also return ``(layer, delta)`` per event.

    ``delta`` is +1 / -1 for an accepted grow / shrink and 0 for a no-op event
    (grow on a full layer, shrink at the minimum size).
    """
    _require_valid(structure, spec, allow_empty_layers)
    min_size = 0 if allow_empty_layers else 1
    kernels = [set(ks) for ks in structure.kernels]
    events = []
    for l, layer in enumerate(spec.conv_layers):
        n = layer.kernel_count
        r = rng.random()
        while p_m > 0 and r <= p_m:
            s = rng.random()
            if s <= growth_probability(len(kernels[l]), n, alpha):
                free = sorted(set(range(n)) - kernels[l])
                if free:
                    kernels[l].add(free[rng.integers(len(free))])
                    events.append((l, 1))
                else:
                    events.append((l, 0))
            else:
                if len(kernels[l]) > min_size:
                    owned = sorted(kernels[l])
                    kernels[l].discard(owned[rng.integers(len(owned))])
                    events.append((l, -1))
                else:
                    events.append((l, 0))
            r = rng.random()
    out = LearngeneStructure.from_kernels(spec, kernels)
    return replace(out, spec_name=structure.spec_name), events


def mutate(structure, spec, p_m, alpha, rng, allow_empty_layers=False) -> LearngeneStructure:
    return mutate_with_events(structure, spec, p_m, alpha, rng, allow_empty_layers)[0]
