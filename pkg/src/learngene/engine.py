"""Minimal reverse-mode compute for the conv networks described by :mod:`netspec`.

Forward passes record a tape of backward closures; :func:`backward` replays it.
Everything is plain numpy and dtype-agnostic: training runs in float32, the
finite-difference checks in float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netspec import CONV, FULLY_CONNECTED, POOL, SKIP, NetworkSpec


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Loss or gradients became non-finite."""


# ---------------------------------------------------------------------------
# containers

@dataclass
class NetworkWeights:
    """All trainable arrays of a network, laid out in spec order.

    Conv and skip kernels are ``(kernel, channel, kh, kw)``; fully-connected
    matrices (hidden layers, then the head last) are ``(out, in)``.
    """

    spec: NetworkSpec
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    skip_w: list[np.ndarray] = field(default_factory=list)
    skip_b: list[np.ndarray] = field(default_factory=list)
    fc_w: list[np.ndarray] = field(default_factory=list)
    fc_b: list[np.ndarray] = field(default_factory=list)

    @property
    def head_w(self) -> np.ndarray:
        return self.fc_w[-1]

    def params(self) -> list[tuple[tuple[str, int], np.ndarray]]:
        out = []
        for group in ("conv_w", "conv_b", "skip_w", "skip_b", "fc_w", "fc_b"):
            for i, arr in enumerate(getattr(self, group)):
                out.append(((group, i), arr))
        return out

    def copy(self) -> "NetworkWeights":
        return self.astype(None)

    def astype(self, dtype) -> "NetworkWeights":
        conv = (lambda a: a.copy()) if dtype is None else (lambda a: a.astype(dtype))
        return NetworkWeights(
            self.spec,
            [conv(a) for a in self.conv_w], [conv(a) for a in self.conv_b],
            [conv(a) for a in self.skip_w], [conv(a) for a in self.skip_b],
            [conv(a) for a in self.fc_w], [conv(a) for a in self.fc_b],
        )

    def num_params(self) -> int:
        return sum(a.size for _, a in self.params())

    def check(self) -> None:
        """Raise ShapeError if any array disagrees with the network layout or is non-finite."""
        expected = weight_shapes(self.spec)
        for (name, i), arr in self.params():
            want = expected[name][i] if i < len(expected[name]) else None
            if want is None or tuple(arr.shape) != want:
                raise ShapeError(f"{name}[{i}] has shape {arr.shape}, spec wants {want}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}[{i}] holds non-finite values")
        for name, shapes in expected.items():
            if len(getattr(self, name)) != len(shapes):
                raise ShapeError(f"{name}: {len(getattr(self, name))} arrays, spec wants {len(shapes)}")


@dataclass
class Batch:
    """Images as float NCHW in [0, 1] and task-local integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be 4-D, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError("images and labels differ in length")

    @classmethod
    def from_uint8(cls, images: np.ndarray, labels, dtype=np.float32) -> "Batch":
        """Build from ``(N, H, W, C)`` uint8 pixels."""
        x = np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2), dtype=dtype) / dtype(255.0)
        return cls(x.astype(dtype, copy=False), labels)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# initialization

def weight_shapes(spec: NetworkSpec) -> dict[str, list[tuple[int, ...]]]:
    shapes: dict[str, list] = {k: [] for k in ("conv_w", "conv_b", "skip_w", "skip_b", "fc_w", "fc_b")}
    c, h, w = spec.input_shape
    features = None
    for layer in spec.layers:
        if layer.kind == CONV:
            kh, kw = layer.spatial.kernel
            shapes["conv_w"].append((layer.kernel_count, layer.channel_count, kh, kw))
            shapes["conv_b"].append((layer.kernel_count,))
            s, p = layer.spatial.stride, layer.spatial.padding
            c, h, w = layer.kernel_count, (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
        elif layer.kind == SKIP:
            kh, kw = layer.spatial.kernel
            shapes["skip_w"].append((layer.kernel_count, layer.channel_count, kh, kw))
            shapes["skip_b"].append((layer.kernel_count,))
        elif layer.kind == POOL:
            kh, kw = layer.spatial.kernel
            h, w = h // kh, w // kw
        elif layer.kind == FULLY_CONNECTED:
            fan_in = features if features is not None else c * h * w
            shapes["fc_w"].append((layer.kernel_count, fan_in))
            shapes["fc_b"].append((layer.kernel_count,))
            features = layer.kernel_count
    fan_in = features if features is not None else c * h * w
    shapes["fc_w"].append((spec.head_classes, fan_in))
    shapes["fc_b"].append((spec.head_classes,))
    return shapes


def he_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled uniform draw, bound sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> NetworkWeights:
    shapes = weight_shapes(spec)
    arrays = {}
    for name, group in shapes.items():
        if name.endswith("_b"):
            arrays[name] = [np.zeros(s, dtype=dtype) for s in group]
        else:
            arrays[name] = [he_uniform(s, rng, dtype) for s in group]
    return NetworkWeights(spec, **arrays)


def zeros_like_spec(spec: NetworkSpec, dtype=np.float32) -> NetworkWeights:
    shapes = weight_shapes(spec)
    return NetworkWeights(spec, **{k: [np.zeros(s, dtype=dtype) for s in v] for k, v in shapes.items()})


# ---------------------------------------------------------------------------
# primitive ops (forward returns output plus a backward closure)

def conv2d(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv expects {c2} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(k, -1)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(dout):
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
        dw = (dmat.T @ cols).reshape(w.shape)
        db = dmat.sum(axis=0)
        dcols = (dmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw, db

    return np.ascontiguousarray(out), backward


def maxpool2d(x, kh=2, kw=2):
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    blocks = x[:, :, :ho * kh, :wo * kw].reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, kh * kw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(dout):
        dblocks = np.zeros((n, c, ho, wo, kh * kw), dtype=dout.dtype)
        np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros(x.shape, dtype=dout.dtype)
        dx[:, :, :ho * kh, :wo * kw] = dblocks.reshape(n, c, ho, wo, kh, kw) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        return dx

    return out, backward, arg


def relu(x):
    mask = x > 0
    return x * mask, (lambda dout: dout * mask), mask


def dense(x, w, b):
    out = x @ w.T + b

    def backward(dout):
        return dout @ w, dout.T @ x, dout.sum(axis=0)

    return out, backward


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardResult:
    logits: np.ndarray
    tape: list = field(default_factory=list)
    activations: list = field(default_factory=list)   # post-ReLU output of each main-path conv
    pattern: list = field(default_factory=list)       # ReLU masks and pool argmaxes, in order

    def pattern_digest(self) -> str:
        h = hashlib.sha1()
        for arr in self.pattern:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _as_input(batch) -> np.ndarray:
    return batch.images if isinstance(batch, Batch) else np.asarray(batch)


def forward(weights: NetworkWeights, batch, record: bool = False, keep_pattern: bool = False) -> ForwardResult:
    """Run the network; with ``record`` the result carries a tape for :func:`backward`.

    A skip layer adds its output to the pre-activation of its target conv.
    """
    spec = weights.spec
    x = _as_input(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"layer 1: input shape {x.shape[1:]} != spec input {spec.input_shape}")
    res = ForwardResult(logits=None)
    tape = res.tape
    skips_by_target: dict[int, list[int]] = {}
    for si, layer in enumerate(spec.skip_layers):
        skips_by_target.setdefault(layer.skip_endpoints[1], []).append(si)
    skip_specs = spec.skip_layers

    h = x
    # tensor slot ids let skip sources receive gradient from two consumers
    slot = 0
    block_input: dict[int, tuple[np.ndarray, int]] = {}
    prev_conv = None
    ci = fi = 0
    flat = False
    for layer in spec.layers:
        if layer.kind == CONV:
            if prev_conv is not None and prev_conv not in block_input:
                block_input[prev_conv] = (h, slot)
            w, b = weights.conv_w[ci], weights.conv_b[ci]
            if tuple(w.shape[:2]) != (layer.kernel_count, layer.channel_count):
                raise ShapeError(f"layer {layer.layer_id}: weight shape {w.shape} disagrees with spec")
            try:
                z, back = conv2d(h, w, b, layer.spatial.stride, layer.spatial.padding)
            except ShapeError as exc:
                raise ShapeError(f"layer {layer.layer_id}: {exc}") from None
            in_slot = slot
            slot += 1
            tape.append(("conv", ci, in_slot, slot, back))
            for si in skips_by_target.get(layer.layer_id, []):
                sl = skip_specs[si]
                src, src_slot = block_input[sl.skip_endpoints[0]]
                sz, sback = conv2d(src, weights.skip_w[si], weights.skip_b[si], sl.spatial.stride, sl.spatial.padding)
                if sz.shape != z.shape:
                    raise ShapeError(f"layer {sl.layer_id}: skip output {sz.shape} != target {z.shape}")
                z = z + sz
                tape.append(("skip", si, src_slot, slot, sback))
            h, rback, mask = relu(z)
            tape.append(("relu", None, slot, slot + 1, rback))
            slot += 1
            res.activations.append(h)
            if keep_pattern:
                res.pattern.append(mask)
            prev_conv = layer.layer_id
            ci += 1
        elif layer.kind == POOL:
            kh, kw = layer.spatial.kernel
            h, pback, arg = maxpool2d(h, kh, kw)
            tape.append(("pool", None, slot, slot + 1, pback))
            slot += 1
            if keep_pattern:
                res.pattern.append(arg)
        elif layer.kind == FULLY_CONNECTED:
            if not flat:
                shape = h.shape
                h = h.reshape(len(h), -1)
                tape.append(("flatten", shape, slot, slot + 1, None))
                slot += 1
                flat = True
            z, dback = dense(h, weights.fc_w[fi], weights.fc_b[fi])
            tape.append(("fc", fi, slot, slot + 1, dback))
            slot += 1
            h, rback, mask = relu(z)
            tape.append(("relu", None, slot, slot + 1, rback))
            slot += 1
            if keep_pattern:
                res.pattern.append(mask)
            fi += 1
        elif layer.kind == SKIP:
            continue
    if not flat:
        shape = h.shape
        h = h.reshape(len(h), -1)
        tape.append(("flatten", shape, slot, slot + 1, None))
        slot += 1
    head_w = weights.fc_w[fi]
    if head_w.shape[1] != h.shape[1]:
        raise ShapeError(f"head expects {head_w.shape[1]} features, got {h.shape[1]}")
    logits, hback = dense(h, head_w, weights.fc_b[fi])
    tape.append(("fc", fi, slot, slot + 1, hback))
    res.logits = logits
    if not record:
        res.tape = []
    return res


def backward(weights: NetworkWeights, result: ForwardResult, dlogits: np.ndarray) -> dict:
    """Replay the tape; returns gradients keyed like ``NetworkWeights.params``."""
    grads: dict[tuple[str, int], np.ndarray] = {}
    slot_grad: dict[int, np.ndarray] = {}
    last_out = result.tape[-1][3]
    slot_grad[last_out] = dlogits

    def add(key, g):
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for op, idx, in_slot, out_slot, back in reversed(result.tape):
        g = slot_grad.get(out_slot)
        if g is None:
            continue
        if op in ("conv", "skip"):
            dx, dw, db = back(g)
            prefix = "conv" if op == "conv" else "skip"
            add((f"{prefix}_w", idx), dw)
            add((f"{prefix}_b", idx), db)
        elif op == "fc":
            dx, dw, db = back(g)
            add(("fc_w", idx), dw)
            add(("fc_b", idx), db)
        elif op == "flatten":
            dx = g.reshape(idx)
        else:
            dx = back(g)
        if op != "skip":
            # a conv's output slot is shared with its skips; it is consumed once, here
            slot_grad.pop(out_slot, None)
        slot_grad[in_slot] = slot_grad[in_slot] + dx if in_slot in slot_grad else dx
    for key, arr in weights.params():
        if key not in grads:
            grads[key] = np.zeros_like(arr)
    return grads


def loss_and_grads(weights: NetworkWeights, batch: Batch):
    res = forward(weights, batch, record=True)
    loss, dlogits = softmax_cross_entropy(res.logits, batch.labels)
    return loss, backward(weights, res, dlogits.astype(res.logits.dtype, copy=False)), res.logits


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainBudget:
    epochs: int = 3
    lr: float = 0.05
    batch_size: int = 32
    momentum: float = 0.0
    max_iterations: int | None = None


def _sgd_update(weights, grads, lr, momentum=0.0, velocity=None):
    for key, arr in weights.params():
        g = grads[key]
        if momentum and velocity is not None:
            v = velocity.get(key)
            v = g if v is None else momentum * v + g
            velocity[key] = v
            g = v
        arr -= (lr * g).astype(arr.dtype, copy=False)


def train_step(weights: NetworkWeights, batch: Batch, lr: float):
    """One SGD update; returns ``(new_weights, loss_before_update)``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    loss, grads, _ = loss_and_grads(weights, batch)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    new = weights.copy()
    if lr > 0:
        _sgd_update(new, grads, lr)
    return new, loss


def train(
    weights: NetworkWeights,
    data: Batch,
    budget: TrainBudget,
    seed: int | np.random.SeedSequence = 0,
    callback: Callable[[int, NetworkWeights], None] | None = None,
):
    """Mini-batch SGD over ``data`` for ``budget.epochs`` epochs.

    Shuffling is driven by ``seed`` only, so reruns are bitwise identical.
    Returns ``(new_weights, accuracy over the final epoch's batches)``; with no
    updates at all, the accuracy of the unchanged weights.
    ``callback(step, weights)`` is invoked after every update.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty task")
    w = weights.copy()
    if budget.epochs <= 0 or budget.max_iterations == 0:
        return w, evaluate(w, data)
    rng = np.random.default_rng(seed)
    velocity = {} if budget.momentum else None
    step = 0
    correct = seen = 0
    for epoch in range(budget.epochs):
        order = rng.permutation(len(data))
        correct = seen = 0
        for start in range(0, len(order), budget.batch_size):
            idx = order[start:start + budget.batch_size]
            mb = data.take(idx)
            loss, grads, logits = loss_and_grads(w, mb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            correct += int((logits.argmax(axis=1) == mb.labels).sum())
            seen += len(idx)
            _sgd_update(w, grads, budget.lr, budget.momentum, velocity)
            step += 1
            if callback is not None:
                callback(step, w)
            if budget.max_iterations is not None and step >= budget.max_iterations:
                return w, correct / seen
    return w, correct / seen


def predict(weights: NetworkWeights, data, batch_size: int = 256) -> np.ndarray:
    x = _as_input(data)
    out = [forward(weights, x[i:i + batch_size]).logits.argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(weights: NetworkWeights, data: Batch, batch_size: int = 256) -> float:
    """Top-1 accuracy; never modifies ``weights``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(weights, data, batch_size) == data.labels).mean())


# ---------------------------------------------------------------------------
# gradient verification

def _param_kinds(spec: NetworkSpec) -> dict[str, list[tuple[str, int]]]:
    """Group weight arrays by the layer kind a gradient check should cover."""
    kinds: dict[str, list] = {"conv": [], "pool_path": [], "skip": [], "fc": []}
    convs = spec.conv_layers
    layers = list(spec.layers)
    for ci, layer in enumerate(convs):
        pos = layers.index(layer)
        nxt = next((l for l in layers[pos + 1:] if l.kind != SKIP), None)
        kind = "pool_path" if nxt is not None and nxt.kind == POOL else "conv"
        kinds[kind] += [("conv_w", ci), ("conv_b", ci)]
    for si in range(len(spec.skip_layers)):
        kinds["skip"] += [("skip_w", si), ("skip_b", si)]
    n_fc = sum(1 for l in spec.layers if l.kind == FULLY_CONNECTED) + 1
    for fi in range(n_fc):
        kinds["fc"] += [("fc_w", fi), ("fc_b", fi)]
    return {k: v for k, v in kinds.items() if v}


def gradient_check(
    weights: NetworkWeights,
    batch: Batch,
    coords_per_kind: int = 20,
    eps: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-6,
    max_tries: int = 50,
) -> dict[str, list[dict]]:
    """Compare backprop gradients with central differences, in float64.

    Coordinates whose +/-eps perturbation flips a ReLU mask or a pool argmax
    straddle a kink of the loss, where the derivative is undefined; those are
    redrawn. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    w64 = weights.astype(np.float64)
    b64 = Batch(batch.images.astype(np.float64), batch.labels)
    _, grads, _ = loss_and_grads(w64, b64)
    base_pattern = forward(w64, b64, keep_pattern=True).pattern_digest()
    rng = np.random.default_rng(seed)
    arrays = dict(w64.params())
    report: dict[str, list[dict]] = {}
    for kind, keys in _param_kinds(weights.spec).items():
        rows = []
        tries = 0
        while len(rows) < coords_per_kind and tries < coords_per_kind * max_tries:
            tries += 1
            key = keys[rng.integers(len(keys))]
            arr = arrays[key]
            flat_idx = int(rng.integers(arr.size))
            idx = np.unravel_index(flat_idx, arr.shape)
            orig = arr[idx]
            values = []
            kinked = False
            for sign in (1.0, -1.0):
                arr[idx] = orig + sign * eps
                res = forward(w64, b64, keep_pattern=True)
                if res.pattern_digest() != base_pattern:
                    kinked = True
                values.append(softmax_cross_entropy(res.logits, b64.labels)[0])
            arr[idx] = orig
            if kinked:
                continue
            numeric = (values[0] - values[1]) / (2 * eps)
            analytic = float(grads[key][idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            rows.append({"param": f"{key[0]}[{key[1]}]", "index": [int(i) for i in idx],
                         "analytic": analytic, "numeric": numeric, "rel_error": rel})
        report[kind] = rows
    return report
