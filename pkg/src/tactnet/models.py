"""TactNet family graphs: construction, forward/backward, features, checkpoints.

A graph is an ordered list of layer objects plus two flat stores keyed by
``"<layer>.<param>"``: trainable ``params`` and non-trainable ``state``
(batch-norm running statistics). Layers are stateless; ``forward`` returns a
tape that ``backward`` consumes, so inference on shared parameters needs no
locking.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .image_ops import N_CLASSES

MIN_INPUT = 7
POOL = 2

VARIANTS = ("tactnet4", "tactnet6", "tactresnet")

# (filter size, output channels) per convolution stage
PLAIN_STACKS = {
    "tactnet4": [(5, 8), (3, 16), (3, 32)],
    "tactnet6": [(5, 8), (5, 16), (3, 32), (3, 64), (3, 128)],
}
RESNET_STEM = (3, 16)
# (output channels, stride) per residual block
RESNET_BLOCKS = [(32, 2), (64, 2), (128, 2), (128, 1)]


class Layer:
    kind = ""

    def __init__(self, name):
        self.name = name

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def param_shapes(self) -> dict:
        return {}

    def state_shapes(self) -> dict:
        return {}

    def out_shape(self, shape):
        return shape

    def init(self, rng, dtype) -> tuple[dict, dict]:
        return {}, {}

    def forward(self, x, params, state, mode):
        raise NotImplementedError

    def infer(self, x, params, state, mode):
        """Forward pass without keeping anything for backward."""
        return self.forward(x, params, state, mode)[0]

    def backward(self, dout, cache, params):
        """Return ``(dx, grads)`` with grads keyed by full parameter name."""
        raise NotImplementedError

    def key(self, p):
        return f"{self.name}.{p}"


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, size, in_ch, out_ch, stride=1):
        super().__init__(name)
        self.size, self.in_ch, self.out_ch, self.stride = size, in_ch, out_ch, stride

    def spec(self):
        return {**super().spec(), "size": self.size, "in_ch": self.in_ch,
                "out_ch": self.out_ch, "stride": self.stride}

    def param_shapes(self):
        return {self.key("w"): (self.size, self.size, self.in_ch, self.out_ch), self.key("b"): (self.out_ch,)}

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.in_ch:
            raise tc.ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        return (*tc.conv_output_shape(h, w, self.size, self.stride), self.out_ch)

    def init(self, rng, dtype):
        fan_in = self.size * self.size * self.in_ch
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=self.param_shapes()[self.key("w")])
        return {self.key("w"): w.astype(dtype), self.key("b"): np.zeros(self.out_ch, dtype)}, {}

    def forward(self, x, params, state, mode):
        return tc.conv2d(x, params[self.key("w")], params[self.key("b")], self.stride)

    def backward(self, dout, cache, params, need_dx=True):
        dx, dw, db = tc.conv2d_backward(dout, cache, need_dx)
        return dx, {self.key("w"): dw, self.key("b"): db}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, epsilon=tc.BN_EPSILON):
        super().__init__(name)
        self.channels, self.epsilon = channels, epsilon

    def spec(self):
        return {**super().spec(), "channels": self.channels, "epsilon": self.epsilon}

    def param_shapes(self):
        return {self.key("gamma"): (self.channels,), self.key("beta"): (self.channels,)}

    def state_shapes(self):
        return {self.key("mean"): (self.channels,), self.key("var"): (self.channels,)}

    def init(self, rng, dtype):
        c = self.channels
        return ({self.key("gamma"): np.ones(c, dtype), self.key("beta"): np.zeros(c, dtype)},
                {self.key("mean"): np.zeros(c, dtype), self.key("var"): np.ones(c, dtype)})

    def forward(self, x, params, state, mode):
        return tc.batchnorm(x, params[self.key("gamma")], params[self.key("beta")],
                            state[self.key("mean")], state[self.key("var")], mode, self.epsilon)

    def backward(self, dout, cache, params):
        dx, dg, db = tc.batchnorm_backward(dout, cache)
        if dg is None:
            return dx, {}
        return dx, {self.key("gamma"): dg, self.key("beta"): db}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params, state, mode):
        return tc.relu(x)

    def backward(self, dout, cache, params):
        return tc.relu_backward(dout, cache), {}


class MaxPool(Layer):
    kind = "maxpool"

    def out_shape(self, shape):
        h, w, c = shape
        return -(-h // POOL), -(-w // POOL), c

    def forward(self, x, params, state, mode):
        return tc.maxpool2d(x, POOL, POOL)

    def infer(self, x, params, state, mode):
        return tc.maxpool2d(x, POOL, POOL, return_index=False)[0]

    def backward(self, dout, cache, params):
        return tc.maxpool2d_backward(dout, cache), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params, state, mode):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, params):
        return dout.reshape(cache), {}


class Dense(Layer):
    kind = "fc"

    def __init__(self, name, in_dim, out_dim):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim

    def spec(self):
        return {**super().spec(), "in_dim": self.in_dim, "out_dim": self.out_dim}

    def param_shapes(self):
        return {self.key("w"): (self.in_dim, self.out_dim), self.key("b"): (self.out_dim,)}

    def out_shape(self, shape):
        if shape != (self.in_dim,):
            raise tc.ShapeError(f"{self.name}: expected a {self.in_dim}-vector, got {shape}")
        return (self.out_dim,)

    def init(self, rng, dtype):
        w = rng.normal(0.0, np.sqrt(2.0 / self.in_dim), size=(self.in_dim, self.out_dim))
        return {self.key("w"): w.astype(dtype), self.key("b"): np.zeros(self.out_dim, dtype)}, {}

    def forward(self, x, params, state, mode):
        return tc.fully_connected(x, params[self.key("w")], params[self.key("b")])

    def backward(self, dout, cache, params):
        dx, dw, db = tc.fully_connected_backward(dout, cache, params[self.key("w")])
        return dx, {self.key("w"): dw, self.key("b"): db}


class Residual(Layer):
    """Two 3x3 conv/BN stages plus a skip, followed by ReLU.

    The skip is the identity when shapes agree, otherwise a strided 1x1
    projection convolution.
    """

    kind = "residual"

    def __init__(self, name, in_ch, out_ch, stride=1):
        super().__init__(name)
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.main = [
            Conv(f"{name}.conv_a", 3, in_ch, out_ch, stride),
            BatchNorm(f"{name}.bn_a", out_ch),
            ReLU(f"{name}.relu_a"),
            Conv(f"{name}.conv_b", 3, out_ch, out_ch, 1),
            BatchNorm(f"{name}.bn_b", out_ch),
        ]
        self.proj = Conv(f"{name}.proj", 1, in_ch, out_ch, stride) if (stride != 1 or in_ch != out_ch) else None

    @property
    def sublayers(self):
        return self.main + ([self.proj] if self.proj else [])

    def spec(self):
        return {**super().spec(), "in_ch": self.in_ch, "out_ch": self.out_ch, "stride": self.stride}

    def param_shapes(self):
        out = {}
        for layer in self.sublayers:
            out.update(layer.param_shapes())
        return out

    def state_shapes(self):
        out = {}
        for layer in self.sublayers:
            out.update(layer.state_shapes())
        return out

    def out_shape(self, shape):
        s = shape
        for layer in self.main:
            s = layer.out_shape(s)
        skip = self.proj.out_shape(shape) if self.proj else shape
        if skip != s:
            raise tc.ShapeError(f"{self.name}: skip shape {skip} differs from main path {s}")
        return s

    def init(self, rng, dtype):
        params, state = {}, {}
        for layer in self.sublayers:
            p, s = layer.init(rng, dtype)
            params.update(p)
            state.update(s)
        return params, state

    def forward(self, x, params, state, mode):
        h = x
        caches = []
        for layer in self.main:
            h, c = layer.forward(h, params, state, mode)
            caches.append(c)
        if self.proj:
            skip, pc = self.proj.forward(x, params, state, mode)
        else:
            skip, pc = x, None
        out, mask = tc.relu(h + skip)
        return out, (caches, pc, mask)

    def backward(self, dout, cache, params):
        caches, pc, mask = cache
        d = tc.relu_backward(dout, mask)
        grads = {}
        g = d
        for layer, c in zip(reversed(self.main), reversed(caches)):
            g, lg = layer.backward(g, c, params)
            grads.update(lg)
        if self.proj:
            dskip, pg = self.proj.backward(d, pc, params)
            grads.update(pg)
        else:
            dskip = d
        return g + dskip, grads


LAYER_TYPES = {cls.kind: cls for cls in (Conv, BatchNorm, ReLU, MaxPool, Flatten, Dense, Residual)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = LAYER_TYPES[spec.pop("kind")]
    return cls(**spec)


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = "internal"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError("features must form an N x D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.features[idx], self.labels[idx], self.provenance)


class ModelGraph:
    """Ordered layers plus parameter and running-statistic stores."""

    def __init__(self, layers, input_shape, n_classes=N_CLASSES, variant="custom",
                 params=None, state=None, seed=0, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.n_classes = n_classes
        self.variant = variant
        self.seed = seed
        self.shapes = self._chain_shapes()
        if self.shapes[-1] != (n_classes,):
            raise tc.ShapeError(f"graph ends in {self.shapes[-1]}, expected {n_classes} logits")
        if params is None:
            rng = np.random.default_rng(seed)
            params, state = {}, {}
            for layer in self.layers:
                p, s = layer.init(rng, dtype)
                params.update(p)
                state.update(s)
        self.params = params
        self.state = state if state is not None else {}

    def _chain_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        return shapes

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def head_index(self) -> int:
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise ValueError("graph has no fully connected head")

    def param_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(layer.param_shapes())
        return names

    def state_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(layer.state_shapes())
        return names

    def to_spec(self) -> dict:
        return {"variant": self.variant, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "seed": self.seed,
                "layers": [layer.spec() for layer in self.layers]}

    @classmethod
    def from_spec(cls, spec, params=None, state=None, dtype=np.float32):
        layers = [layer_from_spec(s) for s in spec["layers"]]
        return cls(layers, spec["input_shape"], spec["n_classes"], spec.get("variant", "custom"),
                   params, state, spec.get("seed", 0), dtype)

    def copy(self, dtype=None) -> "ModelGraph":
        dtype = dtype or self.dtype
        return ModelGraph.from_spec(self.to_spec(),
                                    {k: v.astype(dtype, copy=True) for k, v in self.params.items()},
                                    {k: v.astype(dtype, copy=True) for k, v in self.state.items()})

    def astype(self, dtype) -> "ModelGraph":
        return self.copy(dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.param_names() + self.state_names():
            store = self.params if name in self.params else self.state
            h.update(name.encode())
            h.update(np.ascontiguousarray(store[name]).tobytes())
        return h.hexdigest()

    # -- execution ------------------------------------------------------------

    def _check_batch(self, x):
        x = np.asarray(x)
        if x.ndim == len(self.input_shape) and x.shape[-1] != self.input_shape[-1] and self.input_shape[-1] == 1:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise tc.ShapeError(f"batch shape {x.shape[1:]} does not match graph input {self.input_shape}")
        return x.astype(self.dtype, copy=False)

    def run(self, x, mode="infer", stop=None, record=False, start=0):
        """Run layers ``[start, stop)``; returns ``(output, tape)``.

        With ``start > 0`` the input is taken to be the activation entering
        that layer and is not shape-checked against the graph input.
        """
        x = self._check_batch(x) if start == 0 else x
        if not record:
            for layer in self.layers[start:stop]:
                x = layer.infer(x, self.params, self.state, mode)
            return x, None
        tape = []
        for layer in self.layers[start:stop]:
            x, cache = layer.forward(x, self.params, self.state, mode)
            tape.append((layer, cache))
        return x, tape

    def forward(self, x, mode="infer"):
        return self.run(x, mode)[0]

    def backward(self, dout, tape, need_input_grad=True, collect=None):
        """Backpropagate ``dout`` through a recorded tape; returns ``(dx, grads)``.

        With ``need_input_grad=False`` a leading convolution skips its input
        gradient and ``dx`` is None. A ``collect`` dict receives the gradient
        with respect to the input of each tape position.
        """
        grads = {}
        for pos in range(len(tape) - 1, -1, -1):
            layer, cache = tape[pos]
            if pos == 0 and not need_input_grad and isinstance(layer, Conv):
                dout, g = layer.backward(dout, cache, self.params, need_dx=False)
            else:
                dout, g = layer.backward(dout, cache, self.params)
            grads.update(g)
            if collect is not None:
                collect[pos] = dout
        return dout, grads

    def predict_logits(self, x, batch_size=256):
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.n_classes), self.dtype)
        return np.concatenate(out)

    def predict(self, x, batch_size=256):
        return self.predict_logits(x, batch_size).argmax(axis=1)


# -- builders -------------------------------------------------------------------

def _conv_stage(layers, idx, size, cin, cout, pool=True):
    layers += [Conv(f"conv{idx}", size, cin, cout), BatchNorm(f"bn{idx}", cout), ReLU(f"relu{idx}")]
    if pool:
        layers.append(MaxPool(f"pool{idx}"))


def build_tactnet(variant, input_rows=28, input_cols=50, n_classes=N_CLASSES, in_channels=1,
                  seed=0, dtype=np.float32) -> ModelGraph:
    """Build one of ``tactnet4``, ``tactnet6`` or ``tactresnet``.

    Every convolution is followed by batch norm and ReLU, and every
    convolution stage by a ceil-mode 2x2 max-pool. The residual variant pools
    after its stem and downsamples inside blocks 1-3 instead.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if input_rows < MIN_INPUT or input_cols < MIN_INPUT:
        raise tc.ShapeError(f"{variant} needs an input of at least {MIN_INPUT}x{MIN_INPUT}, "
                            f"got {input_rows}x{input_cols}")
    layers: list[Layer] = []
    cin = in_channels
    if variant in PLAIN_STACKS:
        for i, (size, cout) in enumerate(PLAIN_STACKS[variant], start=1):
            _conv_stage(layers, i, size, cin, cout)
            cin = cout
    else:
        size, cout = RESNET_STEM
        _conv_stage(layers, 1, size, cin, cout)
        cin = cout
        for i, (cout, stride) in enumerate(RESNET_BLOCKS, start=2):
            layers.append(Residual(f"res{i}", cin, cout, stride))
            cin = cout
    layers.append(Flatten("flatten"))
    shape = (input_rows, input_cols, in_channels)
    for layer in layers:
        shape = layer.out_shape(shape)
    head = len(PLAIN_STACKS[variant]) + 1 if variant in PLAIN_STACKS else len(RESNET_BLOCKS) + 2
    layers.append(Dense(f"fc{head}", shape[0], n_classes))
    return ModelGraph(layers, (input_rows, input_cols, in_channels), n_classes, variant, seed=seed, dtype=dtype)


def build_linear(in_dim, n_classes=N_CLASSES, seed=0, dtype=np.float32) -> ModelGraph:
    """A single fully connected layer over ``in_dim`` features."""
    return ModelGraph([Dense("fc", in_dim, n_classes)], (in_dim,), n_classes, "linear", seed=seed, dtype=dtype)


def parameter_count(graph: ModelGraph) -> int:
    """Trainable weights, biases and batch-norm affine terms (running stats excluded)."""
    return int(sum(graph.params[name].size for name in graph.param_names()))


def extract_features(graph: ModelGraph, batch, labels=None, cut="last-conv-stage",
                     batch_size=256) -> FeatureSet:
    """Flattened activations immediately before the head (or at layer ``cut``)."""
    head = graph.head_index
    if cut == "last-conv-stage":
        stop = head
    elif isinstance(cut, str):
        names = [layer.name for layer in graph.layers]
        if cut not in names:
            raise ValueError(f"no layer named {cut!r}")
        stop = names.index(cut) + 1
    else:
        stop = int(cut)
    if stop > head:
        raise ValueError(f"cut at layer {stop} lies beyond the classification head (layer {head})")
    batch = np.asarray(batch)
    chunks = [graph.run(batch[i:i + batch_size], "infer", stop)[0] for i in range(0, len(batch), batch_size)]
    feats = np.concatenate(chunks).reshape(len(batch), -1) if chunks else np.zeros((0, int(np.prod(graph.shapes[stop]))))
    if labels is None:
        labels = np.zeros(len(batch), dtype=np.int64)
    return FeatureSet(feats, labels, f"internal({graph.variant},{stop})")


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TNET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(graph: ModelGraph, path) -> None:
    """Write ``TNET | u16 version | u32 len | spec JSON | float32 LE tensors``.

    Tensors follow declaration order: every layer's params, then every
    layer's running statistics.
    """
    spec = json.dumps(graph.to_spec(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(spec)))
        fh.write(spec)
        for name in graph.param_names():
            fh.write(graph.params[name].astype("<f4").tobytes())
        for name in graph.state_names():
            fh.write(graph.state[name].astype("<f4").tobytes())


def load_checkpoint(path) -> ModelGraph:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a TNET checkpoint")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec = json.loads(data[10:10 + n].decode("utf-8"))
        layers = [layer_from_spec(s) for s in spec["layers"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed layer specification ({exc})") from None
    offset = 10 + n
    params, state = {}, {}
    for store, shapes in ((params, [l.param_shapes() for l in layers]), (state, [l.state_shapes() for l in layers])):
        for layer_shapes in shapes:
            for name, shape in layer_shapes.items():
                count = int(np.prod(shape))
                end = offset + 4 * count
                if end > len(data):
                    raise CheckpointError(f"{path}: truncated while reading {name}")
                store[name] = np.frombuffer(data, "<f4", count, offset).astype(np.float32).reshape(shape)
                offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return ModelGraph.from_spec(spec, params, state)
