"""Binary checkpoints for networks, genes and evolution state.

Layout: ``b"LGCK"``, a little-endian u32 manifest length, the UTF-8 JSON
manifest, the float32 little-endian blobs back to back, then a u32 CRC32 of
every preceding byte. The manifest lists each blob's name, shape and offset
relative to the start of the blob region.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .engine import NetworkWeights
from .genome import LearngeneStructure, LearngeneWeights
from .netspec import spec_from_dict, spec_to_dict

MAGIC = b"LGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# container

def encode(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blobs, index, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(manifest, format_version=FORMAT_VERSION, blobs=index)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {data[:4]!r} at offset 0")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checksum mismatch: checkpoint is corrupted")
    (n,) = struct.unpack_from("<I", data, 4)
    if 8 + n > len(data) - 4:
        raise CheckpointError(f"manifest length {n} at offset 4 runs past the end of the file")
    manifest = json.loads(data[8:8 + n].decode("utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not {FORMAT_VERSION}; migration refused")
    start, end = 8 + n, len(data) - 4
    arrays = {}
    for blob in manifest.pop("blobs"):
        shape = tuple(blob["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + blob["offset"]
        if lo + 4 * count > end:
            raise CheckpointError(f"blob {blob['name']} at offset {lo} runs past the blob region")
        arrays[blob["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=lo).reshape(shape).astype(np.float32)
    return manifest, arrays


def write(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(manifest, arrays))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def _expect_kind(manifest, kind, path):
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")


# ---------------------------------------------------------------------------
# networks

def weights_payload(weights: NetworkWeights, prefix: str = "") -> tuple[dict, dict]:
    arrays = {f"{prefix}{group}/{i}": arr for (group, i), arr in weights.params()}
    return {"spec": spec_to_dict(weights.spec)}, arrays


def weights_from_payload(meta: dict, arrays: dict, prefix: str = "") -> NetworkWeights:
    spec = spec_from_dict(meta["spec"])
    groups = {g: [] for g in ("conv_w", "conv_b", "skip_w", "skip_b", "fc_w", "fc_b")}
    for g, lst in groups.items():
        i = 0
        while f"{prefix}{g}/{i}" in arrays:
            lst.append(arrays[f"{prefix}{g}/{i}"])
            i += 1
    w = NetworkWeights(spec, **groups)
    w.check()
    return w


def save_weights(path, weights: NetworkWeights) -> None:
    meta, arrays = weights_payload(weights)
    write(path, dict(meta, kind="network"), arrays)


def load_weights(path) -> NetworkWeights:
    manifest, arrays = read(path)
    _expect_kind(manifest, "network", path)
    return weights_from_payload(manifest, arrays)


# ---------------------------------------------------------------------------
# genes

def gene_payload(gene: LearngeneWeights, prefix: str = "") -> tuple[dict, dict]:
    arrays = {}
    for group in ("conv_values", "conv_bias", "skip_values", "skip_bias"):
        for i, arr in enumerate(getattr(gene, group)):
            arrays[f"{prefix}{group}/{i}"] = arr
    meta = {
        "gene_id": gene.gene_id,
        "parent_id": gene.parent_id,
        "structure": gene.structure.to_dict(),
        "source_spec": None if gene.source_spec is None else spec_to_dict(gene.source_spec),
    }
    return meta, arrays


def gene_from_payload(meta: dict, arrays: dict, prefix: str = "") -> LearngeneWeights:
    structure = LearngeneStructure.from_dict(meta["structure"])
    n_conv, n_skip = len(structure.kernels), len(structure.skip_kernels)
    try:
        return LearngeneWeights(
            structure,
            [arrays[f"{prefix}conv_values/{i}"] for i in range(n_conv)],
            [arrays[f"{prefix}conv_bias/{i}"] for i in range(n_conv)],
            [arrays[f"{prefix}skip_values/{i}"] for i in range(n_skip)],
            [arrays[f"{prefix}skip_bias/{i}"] for i in range(n_skip)],
            meta["gene_id"], meta["parent_id"],
            None if meta["source_spec"] is None else spec_from_dict(meta["source_spec"]),
        )
    except KeyError as e:
        raise CheckpointError(f"gene blob {e.args[0]} missing") from None


def save_gene(path, gene: LearngeneWeights) -> None:
    meta, arrays = gene_payload(gene)
    write(path, dict(meta, kind="learngene"), arrays)


def load_gene(path) -> LearngeneWeights:
    manifest, arrays = read(path)
    _expect_kind(manifest, "learngene", path)
    return gene_from_payload(manifest, arrays)


# ---------------------------------------------------------------------------
# evolution state

RNG_RULE = "SeedSequence(master_seed, spawn_key=(generation, role, index)); role 0 coordinator, 1 individual"


def save_state(path, state, master_seed: int) -> None:
    manifest = {
        "kind": "evolution_state",
        "next_generation": state.next_generation,
        "rng": {"master_seed": int(master_seed), "rule": RNG_RULE},
        "tree": {"parents": state.tree.parents, "born": state.tree.born},
        "pool": [],
    }
    arrays = {}
    for i, entry in enumerate(state.pool):
        meta, blobs = gene_payload(entry.gene, prefix=f"pool/{i}/")
        manifest["pool"].append(dict(meta, score=entry.score, critic_score=entry.critic_score,
                                     tree_node=entry.tree_node, generation_admitted=entry.generation_admitted))
        arrays.update(blobs)
    write(path, manifest, arrays)


def load_state(path):
    """Returns ``(EvolutionState, master_seed)``."""
    from .evolution import EvolutionState, GenePoolEntry, GeneTree

    manifest, arrays = read(path)
    _expect_kind(manifest, "evolution_state", path)
    tree = GeneTree(dict(manifest["tree"]["parents"]), {k: int(v) for k, v in manifest["tree"]["born"].items()})
    pool = []
    for i, meta in enumerate(manifest["pool"]):
        gene = gene_from_payload(meta, arrays, prefix=f"pool/{i}/")
        pool.append(GenePoolEntry(gene, meta["score"], meta["critic_score"], meta["tree_node"],
                                  meta["generation_admitted"]))
    return EvolutionState(manifest["next_generation"], pool, tree), manifest["rng"]["master_seed"]
