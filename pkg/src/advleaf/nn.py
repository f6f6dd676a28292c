"""Sequential convolutional classifiers: the baseline CNN, a distillation
student, larger teacher stand-ins, size/cost accounting and checkpoints."""
from __future__ import annotations

import contextlib
import copy
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .binio import Reader, check_crc, pack_str, with_crc
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

LAYER_KINDS = ("conv", "maxpool", "relu", "flatten", "linear", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``in_size``/``out_size`` are channels for conv and features for linear.
    """

    kind: str
    name: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")


def conv(name, cin, cout, kernel=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv", name, cin, cout, kernel, stride, padding)


def pool(name, kernel=2, stride=2) -> LayerSpec:
    return LayerSpec("maxpool", name, kernel=kernel, stride=stride)


def relu(name) -> LayerSpec:
    return LayerSpec("relu", name)


def flatten(name="flatten") -> LayerSpec:
    return LayerSpec("flatten", name)


def dense(name, fin, fout) -> LayerSpec:
    return LayerSpec("linear", name, fin, fout)


def dropout(name, rate) -> LayerSpec:
    return LayerSpec("dropout", name, rate=float(rate))


def infer_shapes(layers: Sequence[LayerSpec], input_shape) -> list[tuple]:
    """Per-sample output shape of every layer; raises if the chain breaks."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for layer in layers:
        k = layer.kind
        if k == "conv":
            if len(shape) != 3 or shape[0] != layer.in_size:
                raise ShapeError(f"layer {layer.name}: expects {layer.in_size} input channels, got shape {shape}")
            c, h, w = shape
            if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                raise ShapeError(f"layer {layer.name}: kernel {layer.kernel} too large for {shape}")
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            shape = (layer.out_size, ho, wo)
        elif k == "maxpool":
            if len(shape) != 3 or layer.kernel > shape[1] or layer.kernel > shape[2]:
                raise ShapeError(f"layer {layer.name}: pool window {layer.kernel} too large for {shape}")
            c, h, w = shape
            shape = (c, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "linear":
            if len(shape) != 1 or shape[0] != layer.in_size:
                raise ShapeError(f"layer {layer.name}: expects {layer.in_size} features, got shape {shape}")
            shape = (layer.out_size,)
        elif k == "dropout":
            if not 0.0 <= layer.rate < 1.0:
                raise ConfigError(f"layer {layer.name}: dropout rate {layer.rate} outside [0, 1)")
        out.append(shape)
    return out


class Model:
    """Ordered layer list with named parameters.

    Parameters are ``"<layer>.weight"`` / ``"<layer>.bias"``.  The model starts
    in eval mode; dropout is active only after :meth:`train`.
    """

    def __init__(self, layers: Sequence[LayerSpec], class_count: int, input_shape, seed: int = 0,
                 name: str = "model"):
        self.layers = list(layers)
        self.class_count = int(class_count)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.name = name
        self.seed = seed
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique: {names}")
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if not self.shapes or self.shapes[-1] != (self.class_count,):
            final = self.shapes[-1] if self.shapes else None
            raise ShapeError(f"model output shape {final} does not match class_count {class_count}")
        self.training = False
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        # Kaiming-uniform over fan-in, zero bias
        for layer in self.layers:
            if layer.kind == "conv":
                fan_in = layer.in_size * layer.kernel * layer.kernel
                wshape = (layer.out_size, layer.in_size, layer.kernel, layer.kernel)
            elif layer.kind == "linear":
                fan_in = layer.in_size
                wshape = (layer.in_size, layer.out_size)
            else:
                continue
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=wshape).astype(np.float32)
            self.params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True, name=f"{layer.name}.weight")
            self.params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_size, np.float32), requires_grad=True,
                                                       name=f"{layer.name}.bias")

    # ------------------------------------------------------------ mode / state
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def has_stochastic_layers(self) -> bool:
        return any(layer.kind == "dropout" and layer.rate > 0 for layer in self.layers)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError(f"state keys {sorted(state)} do not match model parameters {sorted(self.params)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(v, requires_grad=True, name=k)

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.layers = list(self.layers)
        other.rng = copy.deepcopy(self.rng)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    def astype(self, dtype) -> "Model":
        """Copy with parameters cast to ``dtype`` (used for float64 gradient checks)."""
        other = self.clone()
        with T.precision(dtype):
            other.params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def conv_layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "conv"]

    # ------------------------------------------------------------ forward
    def forward(self, x, capture: bool = False, rng: Optional[np.random.Generator] = None,
                stop_before: Optional[str] = None):
        """Run the layer stack on an [N, C, H, W] batch.

        With ``capture=True`` returns ``(logits, activations)`` where
        ``activations`` maps each layer name to its output tensor.
        ``stop_before`` halts before the named layer and returns that input.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.name}: input shape {x.shape[1:]} != declared {self.input_shape}")
        rng = self.rng if rng is None else rng
        acts = {}
        h = x
        for layer in self.layers:
            if layer.name == stop_before:
                break
            k = layer.kind
            if k == "conv":
                h = T.conv2d(h, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"],
                             stride=layer.stride, padding=layer.padding)
            elif k == "maxpool":
                h = T.maxpool2d(h, layer.kernel, layer.stride)
            elif k == "relu":
                h = T.relu(h)
            elif k == "flatten":
                h = T.flatten(h)
            elif k == "linear":
                h = T.linear(h, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
            elif k == "dropout":
                h = T.dropout(h, layer.rate, self.training, rng)
            if capture:
                acts[layer.name] = h
        return (h, acts) if capture else h

    __call__ = forward

    def logits(self, x, batch_size: int = 256) -> np.ndarray:
        """Inference-only logits for a float array, evaluated in chunks."""
        x = np.asarray(x)
        with T.no_grad():
            outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.class_count), np.float32)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        # argmax keeps the first maximum, so ties resolve to the lowest class
        return self.logits(x, batch_size).argmax(axis=1)

    def features(self, x, batch_size: int = 256) -> np.ndarray:
        """Penultimate representation: input of the final linear layer."""
        last = [layer.name for layer in self.layers if layer.kind == "linear"][-1]
        x = np.asarray(x)
        with T.no_grad():
            outs = [self.forward(x[i:i + batch_size], stop_before=last).data
                    for i in range(0, len(x), batch_size)]
        return np.concatenate(outs)

    def __repr__(self) -> str:
        return f"Model({self.name!r}, layers={len(self.layers)}, params={count_params(self)})"


@contextlib.contextmanager
def frozen(model: Model, training: bool = False):
    """Stop parameter gradients (input gradients only) and set the layer mode."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    was_training = model.training
    for p in model.params.values():
        p.requires_grad = False
    model.training = training
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
        model.training = was_training


# ---------------------------------------------------------------- builders


def build_paper_cnn(class_count: int = 39, input_shape=(3, 256, 256), seed: int = 0,
                    channels: Sequence[int] = (32, 64, 128, 256), hidden: int = 128) -> Model:
    """Four conv blocks (conv3x3 + ReLU + 2x2 max-pool), then a two-layer head.

    ``channels`` may be narrowed for desk-scale variants; the default is the
    3→32→64→128→256 feature extractor with a 128-unit hidden layer.
    """
    c, h, w = input_shape
    factor = 2 ** len(channels)
    if h % factor or w % factor:
        raise ConfigError(f"input height and width must be divisible by {factor}, got {h}x{w}")
    layers = []
    cin = c
    for i, cout in enumerate(channels, start=1):
        layers += [conv(f"conv{i}", cin, cout), relu(f"relu{i}"), pool(f"pool{i}")]
        cin = cout
    feat = cin * (h // factor) * (w // factor)
    layers += [flatten(), dense("fc1", feat, hidden), relu("relu_fc1"), dense("fc2", hidden, class_count)]
    return Model(layers, class_count, input_shape, seed=seed, name="paper_cnn")


def build_student(class_count: int, input_shape, width_multiplier: float = 0.5, seed: int = 0,
                  base_channels: Sequence[int] = (32, 64, 128), dropout_rate: float = 0.5) -> Model:
    """Compact conv stack with interleaved pooling; dropout then one linear head."""
    if width_multiplier <= 0:
        raise ConfigError(f"width_multiplier must be positive, got {width_multiplier}")
    channels = [int(round(ch * width_multiplier)) for ch in base_channels]
    if min(channels) < 1:
        raise ConfigError(f"width_multiplier {width_multiplier} yields zero channels: {channels}")
    c, h, w = input_shape
    factor = 2 ** len(channels)
    if h % factor or w % factor:
        raise ConfigError(f"input height and width must be divisible by {factor}, got {h}x{w}")
    layers = []
    cin = c
    for i, cout in enumerate(channels, start=1):
        layers += [conv(f"conv{i}", cin, cout), relu(f"relu{i}"), pool(f"pool{i}")]
        cin = cout
    feat = cin * (h // factor) * (w // factor)
    layers += [flatten(), dropout("dropout", dropout_rate), dense("fc", feat, class_count)]
    return Model(layers, class_count, input_shape, seed=seed, name="student")


def build_teacher(class_count: int, input_shape, depth_multiplier: int = 2, seed: int = 0,
                  channels: Sequence[int] = (32, 64, 128, 256), hidden: int = 128) -> Model:
    """Deeper baseline: each block stacks ``depth_multiplier`` conv+ReLU pairs."""
    if depth_multiplier < 1:
        raise ConfigError(f"depth_multiplier must be >= 1, got {depth_multiplier}")
    c, h, w = input_shape
    factor = 2 ** len(channels)
    if h % factor or w % factor:
        raise ConfigError(f"input height and width must be divisible by {factor}, got {h}x{w}")
    layers = []
    cin = c
    for i, cout in enumerate(channels, start=1):
        for j in range(1, depth_multiplier + 1):
            layers += [conv(f"conv{i}_{j}", cin, cout), relu(f"relu{i}_{j}")]
            cin = cout
        layers.append(pool(f"pool{i}"))
    feat = cin * (h // factor) * (w // factor)
    layers += [flatten(), dense("fc1", feat, hidden), relu("relu_fc1"), dense("fc2", hidden, class_count)]
    return Model(layers, class_count, input_shape, seed=seed, name=f"teacher_d{depth_multiplier}")


# ---------------------------------------------------------------- accounting


def count_params(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def estimate_flops(model: Model, input_shape=None) -> int:
    """Forward-pass operation count for one sample.

    A multiply-accumulate is 2 FLOPs (bias adds are not counted); ReLU and
    max-pool cost one comparison per input element; flatten and dropout are
    free.
    """
    shape = tuple(model.input_shape if input_shape is None else input_shape)
    shapes = infer_shapes(model.layers, shape)
    total = 0
    prev = shape
    for layer, out in zip(model.layers, shapes):
        if layer.kind == "conv":
            total += 2 * layer.kernel * layer.kernel * layer.in_size * layer.out_size * out[1] * out[2]
        elif layer.kind == "linear":
            total += 2 * layer.in_size * layer.out_size
        elif layer.kind in ("relu", "maxpool"):
            total += int(np.prod(prev))
        prev = out
    return int(total)


def ensemble_params(member_params: Iterable[float]) -> float:
    """Ensemble size: members are all kept, so parameters add up."""
    return sum(member_params)


def ensemble_flops(member_flops: Iterable[float]) -> float:
    """Ensemble cost as reported for parallel members: the largest member."""
    return max(member_flops)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ALFM"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, metadata: Optional[dict] = None) -> None:
    """Write a model checkpoint (layer table + little-endian f32 tensors)."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<I3I", model.class_count, *model.input_shape)
    out += pack_str(model.name)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        out += pack_str(layer.kind) + pack_str(layer.name)
        out += struct.pack("<5I", layer.in_size, layer.out_size, layer.kernel, layer.stride, layer.padding)
        out += np.float32(layer.rate).astype("<f4").tobytes()
    out += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        out += pack_str(name)
        out += struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    out += pack_str(json.dumps(metadata or {}, sort_keys=True))
    Path(path).write_bytes(with_crc(out))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`; returns (model, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {buf[:4]!r}")
    r = Reader(check_crc(buf, "checkpoint"), "checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    class_count, c, h, w = r.unpack("<I3I")
    name = r.string()
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        kind, lname = r.string(), r.string()
        in_size, out_size, kernel, stride, padding = r.unpack("<5I")
        rate = float(np.frombuffer(r.take(4), "<f4")[0])
        layers.append(LayerSpec(kind, lname, in_size, out_size, kernel, stride, padding, rate))
    model = Model(layers, class_count, (c, h, w), name=name)
    (n_params,) = r.unpack("<I")
    state = {}
    for _ in range(n_params):
        pname = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape))
        state[pname] = np.frombuffer(r.take(4 * count), "<f4").astype(np.float32).reshape(shape)
    model.load_state_dict(state)
    metadata = json.loads(r.string())
    r.expect_end()
    return model, metadata


def describe(model: Model) -> list[dict]:
    """Layer table with output shapes, for reports."""
    return [dict(asdict(layer), output_shape=list(s)) for layer, s in zip(model.layers, model.shapes)]
