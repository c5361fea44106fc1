"""Declarative convolutional architectures that learngenes live in.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries plus an
implicit fully-connected classification head with ``head_classes`` outputs.
Main-path conv layers are numbered by their position among conv layers; that
ordinal is the layer index used by learngene structures.

Skip connections are 1x1 (or any odd-sized) convolutions whose source is the
feature map entering the first conv after ``source`` (i.e. the block input) and
whose output is added to the pre-activation of ``target``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

SPEC_FORMAT_VERSION = 1

CONV = "conv"
POOL = "pool"
FULLY_CONNECTED = "fully_connected"
SKIP = "skip_connection"
LAYER_KINDS = (CONV, POOL, FULLY_CONNECTED, SKIP)


class SpecError(ValueError):
    """Raised when a spec is malformed or a name is unknown."""


@dataclass(frozen=True)
class Spatial:
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    kind: str
    kernel_count: int | None = None
    channel_count: int | None = None
    spatial: Spatial = field(default_factory=Spatial)
    skip_endpoints: tuple[int, int] | None = None


@dataclass(frozen=True)
class Violation:
    layer_id: int
    reason: str

    def __str__(self) -> str:
        return f"layer {self.layer_id}: {self.reason}"


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (3, 16, 16)
    head_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == CONV]

    @property
    def skip_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == SKIP]

    @property
    def widths(self) -> list[int]:
        return [layer.kernel_count for layer in self.conv_layers]

    def conv_ordinal(self, layer_id: int) -> int:
        """0-based position of conv ``layer_id`` among the main-path convs."""
        for i, layer in enumerate(self.conv_layers):
            if layer.layer_id == layer_id:
                return i
        raise SpecError(f"layer {layer_id} is not a conv layer of {self.name!r}")

    def skip_ordinals(self) -> list[tuple[int, int]]:
        """(source, target) conv ordinals of every skip layer, in layer order."""
        return [
            (self.conv_ordinal(s.skip_endpoints[0]), self.conv_ordinal(s.skip_endpoints[1]))
            for s in self.skip_layers
        ]

    def with_head(self, head_classes: int) -> "NetworkSpec":
        return replace(self, head_classes=int(head_classes))

    def with_input_shape(self, input_shape: Sequence[int]) -> "NetworkSpec":
        """Same layers on a different input; the first conv adopts the new channel count."""
        input_shape = tuple(int(v) for v in input_shape)
        first = self.conv_layers[0].layer_id if self.conv_layers else None
        layers = [
            replace(layer, channel_count=input_shape[0]) if layer.layer_id == first else layer
            for layer in self.layers
        ]
        return replace(self, layers=tuple(layers), input_shape=input_shape)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def validate_network_spec(spec: NetworkSpec) -> list[Violation]:
    """Return every violated invariant, ordered by layer_id.

    Violations are data: an empty list means the network is usable.
    """
    found: list[Violation] = []
    ids = [layer.layer_id for layer in spec.layers]
    if ids != list(range(1, len(ids) + 1)):
        found.append(Violation(0, f"layer ids must be 1..{len(ids)} in order, got {ids}"))
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        found.append(Violation(0, f"input_shape must be (channels, height, width), got {spec.input_shape}"))
        return found
    if spec.head_classes < 1:
        found.append(Violation(0, "head_classes must be positive"))
    if not spec.conv_layers:
        found.append(Violation(0, "spec has no conv layers"))

    by_id = {layer.layer_id: layer for layer in spec.layers}
    channels, height, width = spec.input_shape
    prev_conv: LayerSpec | None = None
    seen_fc = False
    # feature-map shape entering each conv, and the conv preceding it
    block_input: dict[int, tuple[int, int, int]] = {}
    after_conv: dict[int, tuple[int, int, int]] = {}
    for layer in spec.layers:
        lid = layer.layer_id
        if layer.kind not in LAYER_KINDS:
            found.append(Violation(lid, f"unknown kind {layer.kind!r}"))
            continue
        if layer.kind == CONV:
            if seen_fc:
                found.append(Violation(lid, "conv layer after a fully_connected layer"))
            if not _positive(layer.kernel_count) or not _positive(layer.channel_count):
                found.append(Violation(lid, "conv layer needs positive kernel_count and channel_count"))
                continue
            if prev_conv is not None:
                block_input.setdefault(prev_conv.layer_id, (channels, height, width))
            if layer.channel_count != channels:
                if prev_conv is None:
                    found.append(Violation(
                        lid, f"channel_count {layer.channel_count} != input channels {channels}"))
                else:
                    found.append(Violation(
                        lid, f"channel_count {layer.channel_count} != kernel_count "
                             f"{prev_conv.kernel_count} of conv layer {prev_conv.layer_id}"))
            kh, kw = layer.spatial.kernel
            height = conv_output_size(height, kh, layer.spatial.stride, layer.spatial.padding)
            width = conv_output_size(width, kw, layer.spatial.stride, layer.spatial.padding)
            if height < 1 or width < 1:
                found.append(Violation(lid, "feature map shrinks below 1x1"))
                return sorted(found, key=lambda v: v.layer_id)
            channels = layer.kernel_count
            after_conv[lid] = (channels, height, width)
            prev_conv = layer
        elif layer.kind == POOL:
            kh, kw = layer.spatial.kernel
            if height % kh or width % kw:
                found.append(Violation(lid, f"pool {kh}x{kw} does not tile a {height}x{width} map"))
            height, width = height // kh, width // kw
            if height < 1 or width < 1:
                found.append(Violation(lid, "feature map shrinks below 1x1"))
                return sorted(found, key=lambda v: v.layer_id)
        elif layer.kind == FULLY_CONNECTED:
            seen_fc = True
            if not _positive(layer.kernel_count):
                found.append(Violation(lid, "hidden fully_connected layer needs a positive kernel_count"))
        elif layer.kind == SKIP:
            found.extend(_check_skip(layer, by_id))

    # skip shape checks need the whole main path
    for layer in spec.skip_layers:
        ends = layer.skip_endpoints
        if ends is None or ends[0] not in after_conv or ends[1] not in after_conv or ends[1] <= ends[0]:
            continue
        src = block_input.get(ends[0])
        dst = after_conv[ends[1]]
        if src is None:
            found.append(Violation(layer.layer_id, f"skip source {ends[0]} has no following conv"))
            continue
        kh, kw = layer.spatial.kernel
        sh = conv_output_size(src[1], kh, layer.spatial.stride, layer.spatial.padding)
        sw = conv_output_size(src[2], kw, layer.spatial.stride, layer.spatial.padding)
        if (sh, sw) != dst[1:]:
            found.append(Violation(
                layer.layer_id,
                f"skip output {sh}x{sw} does not match layer {ends[1]} map {dst[1]}x{dst[2]}"))
    return sorted(found, key=lambda v: v.layer_id)


def _positive(value) -> bool:
    return isinstance(value, int) and value > 0


def _check_skip(layer: LayerSpec, by_id: dict[int, LayerSpec]) -> list[Violation]:
    lid = layer.layer_id
    ends = layer.skip_endpoints
    if ends is None or len(ends) != 2:
        return [Violation(lid, "skip_connection needs (source, target) endpoints")]
    src, dst = by_id.get(ends[0]), by_id.get(ends[1])
    if src is None or dst is None or src.kind != CONV or dst.kind != CONV:
        return [Violation(lid, f"skip endpoints {ends} must reference main-path conv layers")]
    if ends[1] <= ends[0]:
        return [Violation(lid, f"skip target {ends[1]} must come after source {ends[0]}")]
    out = []
    if layer.kernel_count != dst.kernel_count:
        out.append(Violation(
            lid, f"skip kernel_count {layer.kernel_count} != kernel_count {dst.kernel_count} of layer {ends[1]}"))
    if layer.channel_count != src.kernel_count:
        out.append(Violation(
            lid, f"skip channel_count {layer.channel_count} != kernel_count {src.kernel_count} of layer {ends[0]}"))
    return out


# ---------------------------------------------------------------------------
# builtin desk-scale architectures

_BUILTIN_BASE = {
    # (conv widths, pool after these conv ordinals (1-based), skips as conv ordinals)
    "mini-vgg-6": ([16, 32, 64, 64, 128, 128], (1, 2, 4, 6), ()),
    "mini-vgg-8": ([16, 32, 32, 64, 64, 64, 128, 128], (1, 3, 6, 8), ()),
    "mini-res-6": ([16, 32, 64, 64, 128, 128], (1, 2, 4, 6), ((2, 4), (4, 6))),
    "mini-res-8": ([16, 32, 32, 64, 64, 64, 128, 128], (1, 3, 6, 8), ((3, 5), (6, 8))),
}
_WIDTH_VARIANTS = {"": 1.0, "-N": 0.5, "-W": 1.25}


def builtin_names() -> list[str]:
    names = []
    for base in _BUILTIN_BASE:
        names.append(base)
        if base.endswith("-6"):
            names += [base + "-N", base + "-W"]
    return names


def builtin_spec(name: str, input_shape: Sequence[int] = (3, 16, 16), head_classes: int = 10) -> NetworkSpec:
    """Fixed desk-scale analogs of the VGG/ResNet shapes.

    ``-N`` halves every width, ``-W`` scales widths by 1.25 (rounded half up).
    """
    if name not in builtin_names():
        raise SpecError(f"unknown builtin spec {name!r}; valid names: {', '.join(builtin_names())}")
    base, scale = name, 1.0
    for suffix, factor in _WIDTH_VARIANTS.items():
        if suffix and name.endswith(suffix):
            base, scale = name[: -len(suffix)], factor
    widths, pools, skips = _BUILTIN_BASE[base]
    widths = [max(1, int(math.floor(w * scale + 0.5))) for w in widths]
    return build_spec(name, widths, pools, skips, input_shape=input_shape, head_classes=head_classes)


def build_spec(
    name: str,
    widths: Sequence[int],
    pool_after: Iterable[int] = (),
    skips: Iterable[tuple[int, int]] = (),
    input_shape: Sequence[int] = (3, 16, 16),
    head_classes: int = 10,
    kernel: int = 3,
) -> NetworkSpec:
    """Assemble a spec from conv widths; ``pool_after`` and ``skips`` use 1-based conv ordinals.

    Each skip is listed right after its target conv.
    """
    pool_after = set(pool_after)
    skip_by_target: dict[int, list[int]] = {}
    for src, dst in skips:
        skip_by_target.setdefault(dst, []).append(src)
    layers: list[LayerSpec] = []
    conv_ids: dict[int, int] = {}
    in_channels = int(input_shape[0])
    for ordinal, w in enumerate(widths, start=1):
        layer_id = len(layers) + 1
        conv_ids[ordinal] = layer_id
        layers.append(LayerSpec(layer_id, CONV, int(w), in_channels,
                                Spatial((kernel, kernel), 1, kernel // 2)))
        in_channels = int(w)
        for src in skip_by_target.get(ordinal, []):
            layers.append(LayerSpec(
                len(layers) + 1, SKIP, int(w), int(widths[src - 1]),
                Spatial((1, 1), 1, 0), (conv_ids[src], layer_id)))
        if ordinal in pool_after:
            layers.append(LayerSpec(len(layers) + 1, POOL, spatial=Spatial((2, 2), 2, 0)))
    return NetworkSpec(name, tuple(layers), tuple(int(v) for v in input_shape), int(head_classes))


# ---------------------------------------------------------------------------
# parameter accounting

def conv_weight_count(spec: NetworkSpec) -> int:
    total = 0
    for layer in spec.layers:
        if layer.kind in (CONV, SKIP):
            kh, kw = layer.spatial.kernel
            total += layer.kernel_count * layer.channel_count * kh * kw
    return total


def parameter_fraction(structure, spec: NetworkSpec) -> float:
    """Share of conv+skip weights owned by the gene; the head is excluded."""
    from .genome import StructureError, validate_structure

    problems = validate_structure(structure, spec, allow_empty=True)
    if problems:
        raise StructureError("; ".join(str(p) for p in problems))
    owned = 0
    for layer, ks, cs in zip(spec.conv_layers, structure.kernels, structure.channels):
        kh, kw = layer.spatial.kernel
        owned += len(ks) * len(cs) * kh * kw
    for layer, ks, cs in zip(spec.skip_layers, structure.skip_kernels, structure.skip_channels):
        kh, kw = layer.spatial.kernel
        owned += len(ks) * len(cs) * kh * kw
    total = conv_weight_count(spec)
    return owned / total if total else 0.0


# ---------------------------------------------------------------------------
# JSON

def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "format_version": SPEC_FORMAT_VERSION,
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "head_classes": spec.head_classes,
        "layers": [
            {
                "layer_id": layer.layer_id,
                "kind": layer.kind,
                "kernel_count": layer.kernel_count,
                "channel_count": layer.channel_count,
                "spatial": {
                    "kernel": list(layer.spatial.kernel),
                    "stride": layer.spatial.stride,
                    "padding": layer.spatial.padding,
                },
                "skip_endpoints": list(layer.skip_endpoints) if layer.skip_endpoints else None,
            }
            for layer in spec.layers
        ],
    }


def spec_from_dict(data: dict) -> NetworkSpec:
    version = data.get("format_version")
    if version != SPEC_FORMAT_VERSION:
        raise SpecError(f"unsupported spec format_version {version!r} (expected {SPEC_FORMAT_VERSION})")
    layers = []
    for item in data["layers"]:
        sp = item.get("spatial") or {}
        ends = item.get("skip_endpoints")
        layers.append(LayerSpec(
            layer_id=int(item["layer_id"]),
            kind=item["kind"],
            kernel_count=item.get("kernel_count"),
            channel_count=item.get("channel_count"),
            spatial=Spatial(tuple(sp.get("kernel", (3, 3))), int(sp.get("stride", 1)), int(sp.get("padding", 1))),
            skip_endpoints=tuple(ends) if ends else None,
        ))
    return NetworkSpec(data["name"], tuple(layers), tuple(data["input_shape"]), int(data["head_classes"]))


def spec_to_json(spec: NetworkSpec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True)


def spec_from_json(text: str) -> NetworkSpec:
    return spec_from_dict(json.loads(text))
