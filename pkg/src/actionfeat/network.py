"""Sequential network: architecture configs, shape inference, forward passes
with feature taps, and the binary weight file.

Layers are numbered from 1 in config files, error messages and tap sets.
"""

import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import NamedTuple

import numpy as np

from . import layers as L
from .errors import (ConfigError, MagicError, ParseError, ShapeError,
                     TruncatedError, VersionError, WeightFileError,
                     WeightShapeError)
from .tensor import DTYPE, as_shape, element_count, format_shape

KINDS = ("conv", "relu", "maxpool", "lrn", "fc", "dropout", "softmax")

# kind -> {key: (type, default)}; default None means required.
PARAM_SCHEMA = {
    "conv": {"out": (int, None), "k": (int, None), "s": (int, 1), "p": (int, 0)},
    "relu": {},
    "maxpool": {"k": (int, None), "s": (int, None)},
    "lrn": {"n": (int, 5), "k": (float, 2.0), "alpha": (float, 1e-4), "beta": (float, 0.75)},
    "fc": {"out": (int, None)},
    "dropout": {"rate": (float, 0.5)},
    "softmax": {},
}

INIT_STD = 0.01


@dataclass
class LayerSpec:
    index: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PARAM_SCHEMA:
            raise ConfigError(f"layer {self.index}: unknown layer kind {self.kind!r}")
        schema = PARAM_SCHEMA[self.kind]
        extra = set(self.params) - set(schema)
        if extra:
            raise ConfigError(f"layer {self.index}: unexpected params {sorted(extra)} for {self.kind}")
        resolved = {}
        for key, (typ, default) in schema.items():
            if key in self.params:
                resolved[key] = typ(self.params[key])
            elif default is None:
                raise ConfigError(f"layer {self.index}: {self.kind} requires param {key!r}")
            else:
                resolved[key] = default
        self.params = resolved

    def lrn_params(self):
        p = self.params
        return L.LrnParams(k=p["k"], n=p["n"], alpha=p["alpha"], beta=p["beta"])


@dataclass
class ArchSpec:
    layers: list
    input_shape: tuple
    taps: tuple = ()

    def __post_init__(self):
        self.input_shape = as_shape(self.input_shape)
        self.taps = tuple(sorted(set(int(t) for t in self.taps)))
        for pos, layer in enumerate(self.layers, start=1):
            if layer.index != pos:
                raise ConfigError(f"layer numbering must be consecutive from 1; "
                                  f"found {layer.index} at position {pos}")
        for t in self.taps:
            if not 1 <= t <= len(self.layers) or self.layers[t - 1].kind != "fc":
                raise ConfigError(f"tap {t} does not name a fully connected layer")

    def layer(self, index):
        return self.layers[index - 1]

    def param_layers(self):
        return [l for l in self.layers if l.kind in ("conv", "fc")]

    def fc_indices(self):
        return [l.index for l in self.layers if l.kind == "fc"]

    def head_start(self):
        """Index of the first fully connected layer (start of the trainable head)."""
        fcs = self.fc_indices()
        if not fcs:
            raise ConfigError("architecture has no fully connected layer")
        return fcs[0]


def parse_arch(text):
    """Parse an architecture config and validate its shape chain."""
    layers, input_shape, taps = [], None, ()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        try:
            if head == "input":
                if len(tokens) != 2:
                    raise ParseError("expected 'input CxHxW'", lineno)
                input_shape = as_shape(tokens[1].lower().split("x"))
            elif head == "taps":
                joined = "".join(tokens[1:])
                taps = tuple(int(t) for t in joined.split(",") if t) if joined else ()
            else:
                if len(tokens) < 2:
                    raise ParseError("expected '<index> <kind> key=value...'", lineno)
                index = int(head)
                params = {}
                for tok in tokens[2:]:
                    if "=" not in tok:
                        raise ParseError(f"expected key=value, got {tok!r}", lineno)
                    key, value = tok.split("=", 1)
                    params[key] = value
                layers.append(LayerSpec(index, tokens[1], params))
        except ParseError:
            raise
        except (ValueError, ConfigError, ShapeError) as exc:
            raise ParseError(str(exc), lineno) from exc
    if input_shape is None:
        raise ParseError("missing 'input' line")
    if not layers:
        raise ParseError("no layers defined")
    try:
        spec = ArchSpec(layers, input_shape, taps)
    except ConfigError as exc:
        raise ParseError(str(exc)) from exc
    infer_shapes(spec)
    return spec


def format_arch(spec):
    lines = [f"input {format_shape(spec.input_shape)}"]
    if spec.taps:
        lines.append("taps " + ",".join(str(t) for t in spec.taps))
    for layer in spec.layers:
        parts = [str(layer.index), layer.kind]
        parts += [f"{k}={v!r}" for k, v in layer.params.items()]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def default_arch_text():
    return resources.files(__package__).joinpath("default_arch.txt").read_text("utf-8")


def default_arch():
    return parse_arch(default_arch_text())


def load_arch(path):
    with open(path, encoding="utf-8") as fh:
        return parse_arch(fh.read())


def infer_shapes(spec):
    """Output shape of every layer, in order. Raises ShapeError naming the layer."""
    shapes = []
    shape = spec.input_shape
    for layer in spec.layers:
        p = layer.params
        try:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"conv needs a C x H x W input, got {format_shape(shape)}")
                shape = (p["out"],
                         L.conv_output_size(shape[1], p["k"], p["s"], p["p"]),
                         L.conv_output_size(shape[2], p["k"], p["s"], p["p"]))
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeError(f"maxpool needs a C x H x W input, got {format_shape(shape)}")
                shape = (shape[0],
                         L.pool_output_size(shape[1], p["k"], p["s"]),
                         L.pool_output_size(shape[2], p["k"], p["s"]))
            elif layer.kind == "lrn" and len(shape) != 3:
                raise ShapeError("lrn needs a C x H x W input")
            elif layer.kind == "fc":
                shape = (p["out"],)
            elif layer.kind == "softmax" and len(shape) != 1:
                raise ShapeError("softmax needs a vector input")
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.index} ({layer.kind}): {exc}") from None
        shapes.append(shape)
    return shapes


def expected_param_shapes(spec):
    """``{layer index: (weight shape, bias shape)}`` for conv and fc layers."""
    shapes = infer_shapes(spec)
    out = {}
    prev = spec.input_shape
    for layer, shape in zip(spec.layers, shapes):
        p = layer.params
        if layer.kind == "conv":
            out[layer.index] = ((p["out"], prev[0], p["k"], p["k"]), (p["out"],))
        elif layer.kind == "fc":
            out[layer.index] = ((p["out"], element_count(prev)), (p["out"],))
        prev = shape
    return out


@dataclass
class FeatureVector:
    values: np.ndarray
    provenance: tuple  # ((layer index, length), ...)

    def __post_init__(self):
        self.provenance = tuple((int(i), int(n)) for i, n in self.provenance)
        if len(self.values) != sum(n for _, n in self.provenance):
            raise ShapeError("feature vector length does not match its provenance")


def concat_features(parts):
    """Concatenate tapped vectors in the given order."""
    parts = list(parts)
    if not parts:
        raise ConfigError("cannot concatenate an empty list of feature vectors")
    if len(parts) == 1:
        return parts[0]
    values = np.concatenate([p.values for p in parts])
    provenance = tuple(seg for p in parts for seg in p.provenance)
    return FeatureVector(values, provenance)


class ForwardResult(NamedTuple):
    logits: np.ndarray
    taps: dict
    probs: np.ndarray = None


@dataclass
class Network:
    spec: ArchSpec
    params: dict  # layer index -> ConvParams | FcParams

    def __post_init__(self):
        expected = expected_param_shapes(self.spec)
        if set(expected) != set(self.params):
            raise WeightShapeError("parameter layers do not match the architecture")
        for idx, (wshape, bshape) in expected.items():
            p = self.params[idx]
            if p.weights.shape != wshape or p.bias.shape != bshape:
                raise WeightShapeError(
                    f"layer {idx}: expected weights {wshape}, got {p.weights.shape}", layer=idx)

    def copy(self):
        params = {}
        for idx, p in self.params.items():
            if isinstance(p, L.ConvParams):
                params[idx] = L.ConvParams(p.weights.copy(), p.bias.copy(), p.stride, p.pad)
            else:
                params[idx] = L.FcParams(p.weights.copy(), p.bias.copy())
        return Network(self.spec, params)


def _make_params(layer, weights, bias):
    if layer.kind == "conv":
        return L.ConvParams(weights, bias, layer.params["s"], layer.params["p"])
    return L.FcParams(weights, bias)


def init_weights(spec, rng):
    """Gaussian(0, 0.01**2) weights and zero biases, drawn in layer order."""
    params = {}
    for idx, (wshape, bshape) in expected_param_shapes(spec).items():
        w = rng.standard_normal(wshape, dtype=DTYPE)
        w *= DTYPE(INIT_STD)
        params[idx] = _make_params(spec.layer(idx), w, np.zeros(bshape, dtype=DTYPE))
    return Network(spec, params)


def run_layer(net, layer, x, train=False, rng=None):
    kind = layer.kind
    if kind == "conv":
        return L.conv_forward(x, net.params[layer.index])
    if kind == "relu":
        return L.relu_forward(x)
    if kind == "maxpool":
        return L.maxpool_forward(x, layer.params["k"], layer.params["s"])
    if kind == "lrn":
        return L.lrn_forward(x, layer.lrn_params())
    if kind == "fc":
        return L.fc_forward(x.reshape(-1) if x.ndim == 3 else x, net.params[layer.index])
    if kind == "dropout":
        if train and rng is None:
            raise ConfigError("train-mode dropout needs a random generator")
        return L.dropout_forward(x, layer.params["rate"], train, rng)[0]
    if kind == "softmax":
        return L.softmax(x)
    raise ConfigError(f"unknown layer kind {kind!r}")


def forward_backbone(net, x):
    """Run the frozen layers before the first fc layer; returns a flat vector."""
    if tuple(x.shape) != net.spec.input_shape:
        raise ShapeError(f"input shape {format_shape(x.shape)} does not match "
                         f"{format_shape(net.spec.input_shape)}")
    stop = net.spec.head_start()
    for layer in net.spec.layers[:stop - 1]:
        x = run_layer(net, layer, x)
    return x.reshape(-1)


def forward(net, x, mode="infer", rng=None, taps=None):
    """Full forward pass.

    Tapped fc outputs are recorded after the affine map and before any
    following ReLU/dropout. ``logits`` is the output of the last fc layer;
    ``probs`` is set only when the network ends in softmax.
    """
    if mode not in ("infer", "train"):
        raise ConfigError(f"mode must be 'infer' or 'train', got {mode!r}")
    if tuple(x.shape) != net.spec.input_shape:
        raise ShapeError(f"input shape {format_shape(x.shape)} does not match "
                         f"{format_shape(net.spec.input_shape)}")
    want = set(net.spec.taps if taps is None else taps)
    for t in want:
        if t not in net.spec.fc_indices():
            raise ConfigError(f"tap {t} does not name a fully connected layer")
    train = mode == "train"
    recorded, logits, probs = {}, None, None
    for layer in net.spec.layers:
        x = run_layer(net, layer, x, train, rng)
        if layer.kind == "fc":
            logits = x
            if layer.index in want:
                recorded[layer.index] = FeatureVector(x.copy(), ((layer.index, len(x)),))
        elif layer.kind == "softmax":
            probs = x
    return ForwardResult(logits, recorded, probs)


def extract_features(net, x, taps):
    """Concatenation of the requested taps in ascending layer order."""
    taps = sorted(set(taps))
    res = forward(net, x, "infer", taps=taps)
    return concat_features([res.taps[t] for t in taps])


# --- weight file -----------------------------------------------------------

MAGIC = b"CNNW"
VERSION = 1
KIND_TAGS = {"conv": 1, "fc": 2}


def save_weights(net, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(net.params)))
        for idx in sorted(net.params):
            p = net.params[idx]
            kind = net.spec.layer(idx).kind
            dims = p.weights.shape
            fh.write(struct.pack("<IBB", idx, KIND_TAGS[kind], len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"weight file truncated at byte {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(spec, path):
    """Load a weight file, checking every layer against ``spec``."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise MagicError(f"{path}: not a weight file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported weight file version {version}")
    expected = expected_param_shapes(spec)
    if count != len(expected):
        raise WeightShapeError(
            f"{path}: file has {count} parameter layers, architecture has {len(expected)}")
    params = {}
    for _ in range(count):
        idx, tag, ndim = r.unpack("<IBB")
        dims = r.unpack(f"<{ndim}I")
        if idx not in expected:
            raise WeightShapeError(f"layer {idx}: not a parameter layer in the architecture",
                                   layer=idx)
        layer = spec.layer(idx)
        wshape, bshape = expected[idx]
        if tag != KIND_TAGS[layer.kind] or tuple(dims) != wshape:
            raise WeightShapeError(
                f"layer {idx}: file has kind tag {tag} weights {tuple(dims)}, "
                f"architecture expects {layer.kind} {wshape}", layer=idx)
        nw = int(np.prod(dims))
        w = np.frombuffer(r.take(4 * nw), dtype="<f4").astype(DTYPE).reshape(dims)
        b = np.frombuffer(r.take(4 * bshape[0]), dtype="<f4").astype(DTYPE)
        params[idx] = _make_params(layer, w, b)
    if r.pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Network(spec, params)


def with_input_shape(spec, shape):
    """Copy of ``spec`` with a different input shape (not shape-checked)."""
    return replace(spec, input_shape=shape)
