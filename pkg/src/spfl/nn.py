"""Functional feed-forward networks over a flat parameter vector.

A network is described by a :class:`NetworkSpec` (a plain list of layer
descriptors) and evaluated against a :class:`ParamVector`.  Gradients come from
torch autograd; the layer set is deliberately small (conv, relu, max-pool,
residual block, global pool, flatten, linear).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ParameterError, StateError, FormatError

SPATIAL_KINDS = {"conv2d", "relu", "maxpool", "residual"}
LAYER_KINDS = SPATIAL_KINDS | {"globalpool", "flatten", "linear"}


@dataclass
class NetworkSpec:
    layers: list[dict]
    input_shape: tuple[int, int, int]
    num_classes: int
    attention_layers: tuple[int, ...] = ()

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        shapes = layer_shapes(self)
        if not self.attention_layers:
            self.attention_layers = (default_attention_layer(self, shapes),)
        self.attention_layers = tuple(int(i) for i in self.attention_layers)
        for idx in self.attention_layers:
            if not 0 <= idx < len(self.layers) or len(shapes[idx]) != 3:
                raise ConfigError(f"attention layer {idx} has no spatial activation map", layer=idx)

    def to_json(self) -> str:
        return json.dumps(
            {
                "layers": self.layers,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "attention_layers": list(self.attention_layers),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        return cls(
            layers=doc["layers"],
            input_shape=tuple(doc["input_shape"]),
            num_classes=int(doc["num_classes"]),
            attention_layers=tuple(doc.get("attention_layers", ())),
        )


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def layer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Output shape (without batch dim) of every layer; raises on a broken chain."""
    shape: tuple[int, ...] = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        kind = layer.get("type")
        if kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer type {kind!r}", layer=i)
        if kind in {"conv2d", "maxpool", "residual", "globalpool"}:
            if len(shape) != 3:
                raise ConfigError(f"{kind} expects a (C, H, W) input, got {shape}", layer=i)
        if kind == "conv2d":
            if shape[0] != layer["in"]:
                raise ConfigError(f"conv2d expects {layer['in']} channels, got {shape[0]}", layer=i)
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            shape = (layer["out"], _conv_out(shape[1], k, s, p), _conv_out(shape[2], k, s, p))
        elif kind == "maxpool":
            k = layer["kernel"]
            shape = (shape[0], shape[1] // k, shape[2] // k)
        elif kind == "residual":
            if shape[0] != layer["in"]:
                raise ConfigError(f"residual expects {layer['in']} channels, got {shape[0]}", layer=i)
            s = layer.get("stride", 1)
            shape = (layer["out"], _conv_out(shape[1], 3, s, 1), _conv_out(shape[2], 3, s, 1))
        elif kind == "globalpool":
            shape = (shape[0],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "linear":
            if shape != (layer["in"],):
                raise ConfigError(f"linear expects ({layer['in']},), got {shape}", layer=i)
            shape = (layer["out"],)
        if any(d <= 0 for d in shape):
            raise ConfigError(f"layer collapses the feature map to {shape}", layer=i)
        out.append(shape)
    if not out or out[-1] != (spec.num_classes,):
        raise ConfigError(
            f"network must end in {spec.num_classes} logits, ends in {out[-1] if out else None}",
            layer=len(spec.layers) - 1,
        )
    return out


def default_attention_layer(spec: NetworkSpec, shapes=None) -> int:
    """Last spatial feature layer that is not a pooling step."""
    shapes = shapes or layer_shapes(spec)
    candidates = [
        i for i, (layer, s) in enumerate(zip(spec.layers, shapes))
        if len(s) == 3 and layer["type"] in {"relu", "residual", "conv2d"}
    ]
    if not candidates:
        raise ConfigError("network has no spatial layer for attention maps")
    return candidates[-1]


def _layer_tensors(i: int, layer: dict) -> list[tuple[str, tuple[int, ...]]]:
    kind = layer["type"]
    if kind == "conv2d":
        k = layer["kernel"]
        return [(f"{i}.weight", (layer["out"], layer["in"], k, k)), (f"{i}.bias", (layer["out"],))]
    if kind == "linear":
        return [(f"{i}.weight", (layer["out"], layer["in"])), (f"{i}.bias", (layer["out"],))]
    if kind == "residual":
        cin, cout = layer["in"], layer["out"]
        tensors = [
            (f"{i}.conv1.weight", (cout, cin, 3, 3)), (f"{i}.conv1.bias", (cout,)),
            (f"{i}.conv2.weight", (cout, cout, 3, 3)), (f"{i}.conv2.bias", (cout,)),
        ]
        if cin != cout or layer.get("stride", 1) != 1:
            tensors += [(f"{i}.short.weight", (cout, cin, 1, 1)), (f"{i}.short.bias", (cout,))]
        return tensors
    return []


def build_manifest(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...], int]]:
    manifest = []
    offset = 0
    for i, layer in enumerate(spec.layers):
        for name, shape in _layer_tensors(i, layer):
            manifest.append((name, shape, offset))
            offset += int(np.prod(shape))
    return manifest


@dataclass
class ParamVector:
    """Flat view of all model parameters plus the manifest needed to unflatten it."""

    values: np.ndarray
    manifest: list[tuple[str, tuple[int, ...], int]]

    def __post_init__(self):
        self.values = np.asarray(self.values).reshape(-1)
        expected = sum(int(np.prod(shape)) for _, shape, _ in self.manifest)
        if expected != self.values.size:
            raise ConfigError(f"parameter vector has {self.values.size} values, manifest needs {expected}")

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        return {
            name: self.values[off:off + int(np.prod(shape))].reshape(shape)
            for name, shape, off in self.manifest
        }

    @classmethod
    def flatten(cls, tensors: dict[str, np.ndarray], manifest) -> "ParamVector":
        values = np.concatenate([np.asarray(tensors[name]).reshape(-1) for name, _, _ in manifest])
        return cls(values, manifest)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=self.values.dtype), self.manifest)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.manifest)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.values.astype(dtype), self.manifest)


@dataclass
class Batch:
    """Inputs in [0, 1] with shape (B, C, H, W) and one-hot labels (B, k)."""

    inputs: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_indices(cls, inputs: np.ndarray, classes: np.ndarray, num_classes: int) -> "Batch":
        return cls(inputs, one_hot(classes, num_classes))

    @property
    def classes(self) -> np.ndarray:
        return self.labels.argmax(axis=1)


def one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.size, num_classes), dtype=np.float32)
    out[np.arange(classes.size), classes] = 1.0
    return out


@dataclass
class ActivationCache:
    activations: dict[int, torch.Tensor] = field(default_factory=dict)
    gradients: dict[int, torch.Tensor] = field(default_factory=dict)
    # autograd handles kept for backward()
    _logits: torch.Tensor | None = None
    _flat: torch.Tensor | None = None


class Network:
    """Evaluates a :class:`NetworkSpec` functionally on flat parameter tensors."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.shapes = layer_shapes(spec)
        self.manifest = build_manifest(spec)
        self.num_params = sum(int(np.prod(s)) for _, s, _ in self.manifest)
        self._names = [name for name, _, _ in self.manifest]
        self._sizes = [int(np.prod(s)) for _, s, _ in self.manifest]

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParamVector:
        """He-normal weights (std sqrt(2 / fan_in)) and zero biases.

        The second conv of each residual block starts at zero, so blocks begin as
        the identity; there is no normalization layer to keep activations in range.
        """
        rng = np.random.default_rng(seed)
        values = np.zeros(self.num_params, dtype=dtype)
        for name, shape, off in self.manifest:
            if len(shape) < 2 or name.endswith("conv2.weight"):
                continue
            fan_in = int(np.prod(shape[1:]))
            n = int(np.prod(shape))
            values[off:off + n] = rng.normal(0.0, math.sqrt(2.0 / fan_in), n)
        return ParamVector(values, self.manifest)

    def check_params(self, params: ParamVector) -> None:
        if len(params) != self.num_params:
            raise ConfigError(f"expected {self.num_params} parameters, got {len(params)}")

    def tensors(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        pieces = torch.split(flat, self._sizes)
        return {name: p.view(shape) for (name, shape, _), p in zip(self.manifest, pieces)}

    def apply(self, flat: torch.Tensor, x: torch.Tensor, keep: Iterable[int] = ()):
        """Run the network; returns logits and the activations of layers in ``keep``."""
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ConfigError(f"batch shape {tuple(x.shape[1:])} does not match {self.spec.input_shape}", layer=0)
        w = self.tensors(flat)
        keep = set(keep)
        acts = {}
        h = x.to(flat.dtype)
        for i, layer in enumerate(self.spec.layers):
            kind = layer["type"]
            if kind == "conv2d":
                h = F.conv2d(h, w[f"{i}.weight"], w[f"{i}.bias"],
                             stride=layer.get("stride", 1), padding=layer.get("padding", 0))
            elif kind == "relu":
                h = F.relu(h)
            elif kind == "maxpool":
                h = F.max_pool2d(h, layer["kernel"])
            elif kind == "residual":
                s = layer.get("stride", 1)
                y = F.relu(F.conv2d(h, w[f"{i}.conv1.weight"], w[f"{i}.conv1.bias"], stride=s, padding=1))
                y = F.conv2d(y, w[f"{i}.conv2.weight"], w[f"{i}.conv2.bias"], padding=1)
                if f"{i}.short.weight" in w:
                    h = F.conv2d(h, w[f"{i}.short.weight"], w[f"{i}.short.bias"], stride=s)
                h = F.relu(y + h)
            elif kind == "globalpool":
                h = h.mean(dim=(2, 3))
            elif kind == "flatten":
                h = h.flatten(1)
            elif kind == "linear":
                h = F.linear(h, w[f"{i}.weight"], w[f"{i}.bias"])
            if i in keep:
                acts[i] = h
        return h, acts

    def logits(self, params: ParamVector, inputs: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Inference-only logits, evaluated in chunks."""
        flat = torch.from_numpy(params.values)
        out = []
        with torch.no_grad():
            for start in range(0, len(inputs), batch_size):
                x = torch.from_numpy(inputs[start:start + batch_size]).to(flat.dtype)
                out.append(self.apply(flat, x)[0].numpy())
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), dtype=params.values.dtype)


def forward(spec_or_net, params: ParamVector, batch: Batch, retain: bool = False):
    """Logits for ``batch``; with ``retain`` the cache keeps attention-layer activations and the graph."""
    net = spec_or_net if isinstance(spec_or_net, Network) else Network(spec_or_net)
    net.check_params(params)
    x = torch.as_tensor(batch.inputs)
    flat = torch.tensor(params.values, requires_grad=retain)
    x = x.to(flat.dtype)
    if retain:
        logits, acts = net.apply(flat, x, keep=net.spec.attention_layers)
        cache = ActivationCache(activations=acts, _logits=logits, _flat=flat)
    else:
        with torch.no_grad():
            logits, _ = net.apply(flat, x)
        cache = None
    if not torch.isfinite(logits).all():
        raise ParameterError("non-finite logits")
    return logits.detach().numpy(), cache


def backward(spec_or_net, params: ParamVector, batch: Batch, loss_grad, cache: ActivationCache | None) -> ParamVector:
    """Vector-Jacobian product of the logits with ``loss_grad`` (shape (B, k))."""
    net = spec_or_net if isinstance(spec_or_net, Network) else Network(spec_or_net)
    if cache is None or cache._logits is None:
        raise StateError("backward called without a retained forward cache")
    g = torch.as_tensor(np.asarray(loss_grad), dtype=cache._logits.dtype)
    layers = list(cache.activations)
    grads = torch.autograd.grad(
        cache._logits, [cache._flat] + [cache.activations[l] for l in layers],
        grad_outputs=g, retain_graph=True, allow_unused=True,
    )
    for l, ga in zip(layers, grads[1:]):
        cache.gradients[l] = ga if ga is not None else torch.zeros_like(cache.activations[l])
    return ParamVector(grads[0].detach().numpy().copy(), net.manifest)


def softmax(logits) -> np.ndarray:
    return softened(logits, 1.0)


def softened(logits, tau: float) -> np.ndarray:
    """Temperature-softened softmax over the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gradcam(acts: torch.Tensor, score: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Gradient-weighted channel map relu(sum_k alpha_k A_k), alpha = spatial mean of d score / d A_k.

    ``score`` is a scalar summing per-sample class scores, so each sample only
    receives gradient from its own term.
    """
    (grad,) = torch.autograd.grad(score, acts, create_graph=create_graph, retain_graph=True)
    alpha = grad.mean(dim=(2, 3), keepdim=True)
    return F.relu((alpha * acts).sum(dim=1))


def nad_map(acts: torch.Tensor) -> torch.Tensor:
    """Channel sum of absolute activations."""
    return acts.abs().sum(dim=1)


def _check_attention_layer(net: Network, layer: int) -> None:
    if not 0 <= layer < len(net.spec.layers) or len(net.shapes[layer]) != 3:
        raise ConfigError(f"layer {layer} has no spatial activation map", layer=layer)


def attention_map(spec_or_net, params: ParamVector, batch: Batch, class_index, layer: int | None = None) -> np.ndarray:
    """Per-sample class-discriminative maps, shape (B, U, V).

    ``class_index`` is an int or a per-sample array of classes.
    """
    net = spec_or_net if isinstance(spec_or_net, Network) else Network(spec_or_net)
    layer = net.spec.attention_layers[0] if layer is None else layer
    _check_attention_layer(net, layer)
    flat = torch.tensor(params.values, requires_grad=True)
    x = torch.as_tensor(batch.inputs).to(flat.dtype)
    logits, acts = net.apply(flat, x, keep=[layer])
    cls = torch.as_tensor(np.broadcast_to(np.asarray(class_index), (x.shape[0],)).copy(), dtype=torch.long)
    score = logits.gather(1, cls[:, None]).sum()
    return gradcam(acts[layer], score).detach().numpy()


def nad_attention(cache: ActivationCache, layer: int) -> np.ndarray:
    if layer not in cache.activations:
        raise ConfigError(f"layer {layer} not cached", layer=layer)
    acts = cache.activations[layer]
    if acts.dim() != 4:
        raise ConfigError(f"layer {layer} has no spatial activation map", layer=layer)
    return nad_map(acts).detach().numpy()


# ---------------------------------------------------------------------------
# Architectures


def mnist_cnn() -> NetworkSpec:
    """Two conv layers (ReLU + max-pool) and two linear layers, 184,586 parameters."""
    layers = [
        {"type": "conv2d", "in": 1, "out": 32, "kernel": 5},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "conv2d", "in": 32, "out": 64, "kernel": 5},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "flatten"},
        {"type": "linear", "in": 1024, "out": 128},
        {"type": "relu"},
        {"type": "linear", "in": 128, "out": 10},
    ]
    return NetworkSpec(layers, (1, 28, 28), 10)


def cifar_resnet(width: int = 16, blocks_per_stage: int = 2) -> NetworkSpec:
    """Reduced residual net: stem conv, three stages of basic blocks, global pool, linear."""
    layers: list[dict] = [{"type": "conv2d", "in": 3, "out": width, "kernel": 3, "padding": 1}, {"type": "relu"}]
    cin = width
    for stage in range(3):
        cout = width * 2 ** stage
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append({"type": "residual", "in": cin, "out": cout, "stride": stride})
            cin = cout
    layers += [{"type": "globalpool"}, {"type": "linear", "in": cin, "out": 10}]
    return NetworkSpec(layers, (3, 32, 32), 10)


def tiny_cnn(input_shape=(1, 8, 8), num_classes: int = 3, channels: int = 4) -> NetworkSpec:
    """Small net for gradient checks and fast unit tests."""
    c, h, w = input_shape
    layers = [
        {"type": "conv2d", "in": c, "out": channels, "kernel": 3, "padding": 1},
        {"type": "relu"},
        {"type": "conv2d", "in": channels, "out": channels, "kernel": 3, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "flatten"},
        {"type": "linear", "in": channels * (h // 2) * (w // 2), "out": num_classes},
    ]
    return NetworkSpec(layers, input_shape, num_classes, attention_layers=(3,))


ARCHITECTURES = {"mnist_cnn": mnist_cnn, "cifar_resnet": cifar_resnet, "tiny_cnn": tiny_cnn}


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all little-endian):
#   magic    4 bytes  b"SPPV"
#   version  u32      1
#   count    u32      number of manifest entries
#   entries  count x { name_len u16, name utf-8, ndim u8, dims u32*ndim, offset u64 }
#   length   u64      number of float32 values
#   data     length x f32

CKPT_MAGIC = b"SPPV"
CKPT_VERSION = 1


def save_params(params: ParamVector, path: str | Path) -> None:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(params.manifest))
    for name, shape, offset in params.manifest:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack("<Q", offset)
    out += struct.pack("<Q", len(params))
    out += params.values.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path: str | Path) -> ParamVector:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        manifest = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            manifest.append((name, tuple(shape), offset))
        (length,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if len(buf) - pos != 4 * length:
            raise FormatError(f"{path}: truncated checkpoint")
        values = np.frombuffer(buf, dtype="<f4", count=length, offset=pos).astype(np.float32)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return ParamVector(values, manifest)


def check_manifest(params: ParamVector, net: Network) -> None:
    got = [(n, tuple(s)) for n, s, _ in params.manifest]
    want = [(n, tuple(s)) for n, s, _ in net.manifest]
    if got != want:
        raise ConfigError("checkpoint manifest does not match the network spec")


def stack_values(vectors: Sequence[ParamVector]) -> np.ndarray:
    return np.stack([v.values for v in vectors])
