"""Block-structured networks: residual MLP blocks and residual conv blocks.

Networks are stem -> blocks -> (optional mean-pool) -> head. Residual blocks
are the unit the packing pipeline partitions; the stem and head never join a
pack. Weight layout is chosen so per-output-channel quantization needs no
transposes: linear weights are [in, out] (channel axis 1), conv kernels
[out_c, in_c, kh, kw] (channel axis 0).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericalError, SchemaError, ShapeError
from .optim import Adam
from .tensor import Tensor

ARCH_PATTERNS = ("resmlp-<blocks>x<width>", "convnet-<blocks>[x<channels>]")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class Linear:
    w: Tensor  # [in, out]
    b: Tensor | None  # [out]
    kind: str = "linear"

    def forward(self, x: Tensor, w: Tensor | None = None) -> Tensor:
        out = T.matmul(x, w if w is not None else self.w)
        if self.b is not None:
            out = T.bias_add(out, self.b, axis=-1)
        return out

    @property
    def weight_count(self) -> int:
        return self.w.size


@dataclass
class Conv2d:
    w: Tensor  # [out_c, in_c, kh, kw]
    b: Tensor | None  # [out_c]
    kind: str = "conv2d"

    def forward(self, x: Tensor, w: Tensor | None = None) -> Tensor:
        out = T.conv2d(x, w if w is not None else self.w)
        if self.b is not None:
            out = T.bias_add(out, self.b, axis=1)
        return out

    @property
    def weight_count(self) -> int:
        return self.w.size


LAYER_ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu}


@dataclass
class Block:
    """A residual unit: layer -> activation -> layer (+ skip).

    kind "mlp" uses GELU, "conv" uses ReLU; kind "linear" is a degenerate
    single-layer block without an inner activation (used in tests and as the
    smallest reconstructable unit).
    """

    index: int  # 1-based position in the network
    kind: str
    layers: list
    residual: bool

    def forward(self, x: Tensor, weights: dict[int, Tensor] | None = None) -> Tensor:
        weights = weights or {}
        h = self.layers[0].forward(x, weights.get(0))
        if self.kind != "linear":
            act = LAYER_ACTIVATIONS["gelu" if self.kind == "mlp" else "relu"]
            h = act(h)
            h = self.layers[1].forward(h, weights.get(1))
        if self.residual:
            h = T.add(x, h)
        return h

    @property
    def param_count(self) -> int:
        # quantizable weight scalars only; biases stay full precision
        return sum(layer.weight_count for layer in self.layers)


@dataclass
class CaptureRecord:
    stem_output: np.ndarray
    block_outputs: list[np.ndarray]  # one per block, in block order
    logits: np.ndarray
    loss: float
    labels: np.ndarray


@dataclass
class Network:
    name: str
    input_shape: tuple[int, ...]  # per-sample shape
    class_count: int
    stem: Linear | Conv2d
    blocks: list[Block]
    head: Linear
    pool: str = "none"  # "mean" for conv nets: average over H, W before head

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.iter_layers():
            params.append(layer.w)
            if layer.b is not None:
                params.append(layer.b)
        return params

    def iter_layers(self):
        yield self.stem
        for block in self.blocks:
            yield from block.layers
        yield self.head

    def prepare_input(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        per_sample = int(np.prod(self.input_shape))
        if x.ndim >= 2 and x.shape[1:] == self.input_shape:
            return Tensor(x)
        if x.ndim == 2 and x.shape[1] == per_sample:
            return Tensor(x.reshape((x.shape[0],) + self.input_shape))
        raise ShapeError(
            f"input batch {x.shape} incompatible with model input shape {self.input_shape}"
        )

    def _pool_and_head(self, h: Tensor) -> Tensor:
        if self.pool == "mean":
            h = T.reduce_mean(T.reduce_mean(h, axis=3), axis=2)
        return self.head.forward(h)

    def forward(self, x: Tensor, override: dict[int, np.ndarray] | None = None) -> Tensor:
        """Full forward; ``override`` replaces block t's output (1-based t)."""
        h = self.stem.forward(x)
        for block in self.blocks:
            if override is not None and block.index in override:
                h = Tensor(np.asarray(override[block.index], dtype=np.float64))
            else:
                h = block.forward(h)
        return self._pool_and_head(h)

    def tail(self, t: int, z: Tensor) -> Tensor:
        """Run blocks t+1..n and the head on a given block-t output."""
        if not 1 <= t <= self.n_blocks:
            raise ConfigError(f"block index {t} out of range 1..{self.n_blocks}")
        h = z
        for block in self.blocks[t:]:
            h = block.forward(h)
        return self._pool_and_head(h)

    def forward_upstream(self, t: int, x: Tensor) -> Tensor:
        """Input of block t: stem output followed by blocks 1..t-1."""
        if not 1 <= t <= self.n_blocks:
            raise ConfigError(f"block index {t} out of range 1..{self.n_blocks}")
        h = self.stem.forward(x)
        for block in self.blocks[: t - 1]:
            h = block.forward(h)
        return h

    def forward_range(self, lo: int, hi: int, z: Tensor) -> Tensor:
        """Run blocks lo..hi (1-based, inclusive) on a given block input."""
        h = z
        for block in self.blocks[lo - 1 : hi]:
            h = block.forward(h)
        return h

    def logits_np(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        """Tape-free batched evaluation for prediction."""
        outs = []
        for lo in range(0, x.shape[0], batch):
            outs.append(self.forward(self.prepare_input(x[lo : lo + batch])).data)
        return np.concatenate(outs, axis=0)


def forward_capture(network: Network, x: np.ndarray, labels: np.ndarray) -> CaptureRecord:
    """Forward pass snapshotting every block output plus logits and task loss."""
    xt = network.prepare_input(x)
    h = network.stem.forward(xt)
    stem_out = h.data.copy()
    block_outputs = []
    for block in network.blocks:
        h = block.forward(h)
        block_outputs.append(h.data.copy())
    logits = network._pool_and_head(h)
    labels = np.asarray(labels, dtype=np.int64)
    loss = T.reduce_mean(T.softmax_cross_entropy(logits, labels)).item()
    return CaptureRecord(stem_out, block_outputs, logits.data.copy(), loss, labels.copy())


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def _init_linear(rng, n_in: int, n_out: int, bias: bool = True) -> Linear:
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
    return Linear(Tensor(w, requires_grad=True), b)

def _init_conv(rng, c_in: int, c_out: int, k: int = 3, bias: bool = True) -> Conv2d:
    fan_in = c_in * k * k
    w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    return Conv2d(Tensor(w, requires_grad=True), b)


def parse_architecture(name: str) -> dict:
    m = re.fullmatch(r"resmlp-(\d+)x(\d+)", name)
    if m:
        return {"family": "resmlp", "blocks": int(m.group(1)), "width": int(m.group(2))}
    m = re.fullmatch(r"convnet-(\d+)(?:x(\d+))?", name)
    if m:
        return {
            "family": "convnet",
            "blocks": int(m.group(1)),
            "channels": int(m.group(2)) if m.group(2) else 8,
        }
    raise ConfigError(
        f"unknown architecture '{name}'; registered specs: {', '.join(ARCH_PATTERNS)}"
    )


def build_model(name: str, input_shape: tuple[int, ...] = (2,), class_count: int = 10,
                seed: int = 0, train_data: Dataset | None = None,
                min_train_accuracy: float = 0.95, train_steps: int = 3000,
                train_batch: int = 64, train_lr: float = 5e-3) -> Network:
    """Construct (and optionally fit) a registered architecture.

    When ``train_data`` is given the model is trained with Adam + cosine decay
    and must reach ``min_train_accuracy`` on its training split.
    """
    arch = parse_architecture(name)
    if arch["blocks"] < 2:
        raise ConfigError(f"'{name}': need at least 2 blocks for packing to be meaningful")
    rng = np.random.default_rng(seed)
    input_shape = tuple(int(d) for d in input_shape)

    if arch["family"] == "resmlp":
        width = arch["width"]
        if len(input_shape) != 1:
            raise ConfigError(f"resmlp expects flat inputs, got shape {input_shape}")
        stem = _init_linear(rng, input_shape[0], width)
        blocks = [
            Block(i + 1, "mlp",
                  [_init_linear(rng, width, width), _init_linear(rng, width, width)],
                  residual=True)
            for i in range(arch["blocks"])
        ]
        head = _init_linear(rng, width, class_count)
        net = Network(name, input_shape, class_count, stem, blocks, head, pool="none")
    else:
        ch = arch["channels"]
        if len(input_shape) != 3:
            raise ConfigError(f"convnet expects [C, H, W] inputs, got shape {input_shape}")
        stem = _init_conv(rng, input_shape[0], ch)
        blocks = [
            Block(i + 1, "conv",
                  [_init_conv(rng, ch, ch), _init_conv(rng, ch, ch)],
                  residual=True)
            for i in range(arch["blocks"])
        ]
        head = _init_linear(rng, ch, class_count)
        net = Network(name, input_shape, class_count, stem, blocks, head, pool="mean")

    if train_data is not None:
        acc = train_network(net, train_data, steps=train_steps, batch_size=train_batch,
                            base_lr=train_lr, seed=seed)
        if acc < min_train_accuracy:
            raise NumericalError(
                f"training '{name}' reached accuracy {acc:.3f} < {min_train_accuracy}"
            )
    return net


def train_network(net: Network, data: Dataset, steps: int, batch_size: int,
                  base_lr: float, seed: int) -> float:
    """Adam + cosine training loop; returns final training accuracy."""
    rng = np.random.default_rng(seed)
    params = net.parameters()
    opt = Adam(params, base_lr, steps)
    n = data.n
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        xb = net.prepare_input(data.inputs[idx])
        logits = net.forward(xb)
        loss = T.reduce_mean(T.softmax_cross_entropy(logits, data.labels[idx]))
        T.backward(loss, params)
        opt.step()
    preds = net.logits_np(data.inputs).argmax(axis=1)
    return float((preds == data.labels).mean())


def training_accuracy(net: Network, data: Dataset) -> float:
    preds = net.logits_np(data.inputs).argmax(axis=1)
    return float((preds == data.labels).mean())


# ---------------------------------------------------------------------------
# model documents (exact float64 round trip via hex floats)
# ---------------------------------------------------------------------------

def _floats_to_hex(a: np.ndarray) -> list[str]:
    return [v.hex() for v in a.reshape(-1).tolist()]


def _hex_to_floats(values, shape, path: str) -> np.ndarray:
    try:
        arr = np.array([float.fromhex(v) for v in values], dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise SchemaError(f"bad hex float: {e}", path)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise SchemaError(f"expected {expected} values, got {arr.size}", path)
    return arr.reshape(shape)


def _layer_to_doc(layer) -> dict:
    return {
        "kind": layer.kind,
        "shape": list(layer.w.shape),
        "weights": _floats_to_hex(layer.w.data),
        "bias": _floats_to_hex(layer.b.data) if layer.b is not None else None,
    }


def _layer_from_doc(doc: dict, path: str):
    if not isinstance(doc, dict):
        raise SchemaError("layer must be an object", path)
    for key in ("kind", "shape", "weights"):
        if key not in doc:
            raise SchemaError(f"missing '{key}'", path)
    shape = doc["shape"]
    if not all(isinstance(d, int) and d > 0 for d in shape):
        raise SchemaError(f"dimensions must be positive integers, got {shape}", f"{path}/shape")
    w = Tensor(_hex_to_floats(doc["weights"], shape, f"{path}/weights"), requires_grad=True)
    b = None
    if doc.get("bias") is not None:
        bias_len = shape[1] if doc["kind"] == "linear" else shape[0]
        b = Tensor(_hex_to_floats(doc["bias"], (bias_len,), f"{path}/bias"), requires_grad=True)
    if doc["kind"] == "linear":
        if len(shape) != 2:
            raise SchemaError("linear weights must be 2-D", f"{path}/shape")
        return Linear(w, b)
    if doc["kind"] == "conv2d":
        if len(shape) != 4:
            raise SchemaError("conv2d weights must be 4-D", f"{path}/shape")
        return Conv2d(w, b)
    raise SchemaError(f"unknown layer kind '{doc['kind']}'", f"{path}/kind")


def serialize(net: Network) -> dict:
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "pool": net.pool,
        "stem": _layer_to_doc(net.stem),
        "blocks": [
            {
                "kind": b.kind,
                "residual": b.residual,
                "layers": [_layer_to_doc(layer) for layer in b.layers],
            }
            for b in net.blocks
        ],
        "head": _layer_to_doc(net.head),
    }


def deserialize(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise SchemaError("model document must be an object", "")
    for key in ("name", "input_shape", "class_count", "stem", "blocks", "head"):
        if key not in doc:
            raise SchemaError("missing required field", f"/{key}")
    input_shape = tuple(doc["input_shape"])
    if not all(isinstance(d, int) and d > 0 for d in input_shape):
        raise SchemaError("dimensions must be positive integers", "/input_shape")
    blocks_doc = doc["blocks"]
    if not isinstance(blocks_doc, list) or len(blocks_doc) < 1:
        raise SchemaError("blocks must be a non-empty list", "/blocks")
    blocks = []
    for i, bdoc in enumerate(blocks_doc):
        path = f"/blocks/{i}"
        if not isinstance(bdoc, dict) or "layers" not in bdoc:
            raise SchemaError(f"block {i + 1} missing its layers", path)
        kind = bdoc.get("kind", "mlp")
        expected_layers = 1 if kind == "linear" else 2
        if len(bdoc["layers"]) != expected_layers:
            raise SchemaError(
                f"block {i + 1} must have {expected_layers} layer(s)", f"{path}/layers"
            )
        layers = [
            _layer_from_doc(ldoc, f"{path}/layers/{j}") for j, ldoc in enumerate(bdoc["layers"])
        ]
        blocks.append(Block(i + 1, kind, layers, bool(bdoc.get("residual", True))))
    return Network(
        name=str(doc["name"]),
        input_shape=input_shape,
        class_count=int(doc["class_count"]),
        stem=_layer_from_doc(doc["stem"], "/stem"),
        blocks=blocks,
        head=_layer_from_doc(doc["head"], "/head"),
        pool=str(doc.get("pool", "none")),
    )
