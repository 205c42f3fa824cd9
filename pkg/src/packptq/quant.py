"""Uniform affine quantization with straight-through gradients.

The quantizer maps x to clamp(round(x/s + z0), 0, 2^k - 1) and back to
s * (q - z0). Rounding is half-to-even unless learnable rounding offsets are
active, in which case rounding becomes floor(x/s + z0 + 0.5 + offset) so an
offset in [-0.5, 0.5] can flip any round-up/round-down decision.

Weights are quantized per output channel, activations per tensor. The zero
point is kept continuous (never rounded to an integer grid).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .nets import Block, Network, forward_capture
from .tensor import Tensor

BYPASS_BITS = 32  # bit-widths >= this disable quantization at a site


@dataclass
class QuantParams:
    scale: np.ndarray        # broadcastable against the quantized tensor
    zero_point: np.ndarray   # same shape as scale, continuous
    bits: int
    per_channel: bool = False
    channel_axis: int | None = None

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.float64)
        if self.bits < 2:
            raise ConfigError(f"bit-width must be >= 2, got {self.bits}")
        if not (self.scale > 0).all():
            raise ConfigError("quantization scale must be positive")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class QuantizedTensor:
    ints: np.ndarray  # int64 in [0, 2^bits - 1]
    params: QuantParams
    original_shape: tuple[int, ...]


def _channel_reduce_axes(ndim: int, axis: int) -> tuple[int, ...]:
    return tuple(i for i in range(ndim) if i != axis)


def calibrate_minmax(x: np.ndarray, bits: int, per_channel: bool = False,
                     channel_axis: int = 0) -> QuantParams:
    """MinMax calibration: s = (max-min)/(2^k - 1), z0 = -min/s.

    Constant slices fall back to s = 1 so they dequantize exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("calibrate_minmax: empty tensor")
    if bits < 2:
        raise ConfigError(f"calibrate_minmax: bit-width must be >= 2, got {bits}")
    if per_channel:
        axes = _channel_reduce_axes(x.ndim, channel_axis)
        lo = x.min(axis=axes, keepdims=True)
        hi = x.max(axis=axes, keepdims=True)
    else:
        lo = np.asarray(x.min())
        hi = np.asarray(x.max())
    levels = (1 << bits) - 1
    span = hi - lo
    scale = np.where(span > 0, span / levels, 1.0)
    zero_point = -lo / scale
    return QuantParams(scale, zero_point, bits, per_channel,
                       channel_axis if per_channel else None)


def _round_ints(x: np.ndarray, params: QuantParams,
                offsets: np.ndarray | None) -> np.ndarray:
    v = x / params.scale + params.zero_point
    if offsets is None:
        return np.rint(v)
    return np.floor(v + 0.5 + offsets)


def quantize(x: np.ndarray, params: QuantParams,
             offsets: np.ndarray | None = None) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    r = _round_ints(x, params, offsets)
    ints = np.clip(r, 0, params.levels).astype(np.int64)
    return QuantizedTensor(ints, params, x.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.params.scale * (q.ints.astype(np.float64) - q.params.zero_point)


def fake_quant_np(x: np.ndarray, params: QuantParams,
                  offsets: np.ndarray | None = None) -> np.ndarray:
    """quantize-dequantize round trip on plain arrays."""
    return dequantize(quantize(x, params, offsets))


def fake_quant(x: Tensor, params: QuantParams, scale: Tensor | None = None,
               offsets: Tensor | None = None) -> Tensor:
    """Differentiable quantize-dequantize.

    Gradients: straight-through to x (masked to zero where the rounded value
    clips), d(out)/d(offset) = s on the same mask, and the scale gradient of
    LSQ, (q - z0) - x/s on unclipped elements and (q - z0) on clipped ones.
    ``scale`` overrides params.scale when the scale is a learnable tensor.
    """
    s = scale.data if scale is not None else params.scale
    z0 = params.zero_point
    v = x.data / s + z0
    if offsets is not None:
        r = np.floor(v + 0.5 + offsets.data)
    else:
        r = np.rint(v)
    q = np.clip(r, 0.0, float(params.levels))
    mask = (r >= 0.0) & (r <= params.levels)
    out_data = s * (q - z0)

    parents = tuple(t for t in (x, scale, offsets) if t is not None)

    def backward(g, x=x, scale=scale, offsets=offsets, s=s, z0=z0, q=q, mask=mask):
        if x._tracked:
            x.accumulate_grad(g * mask)
        if offsets is not None and offsets._tracked:
            offsets.accumulate_grad(g * mask * s)
        if scale is not None and scale._tracked:
            gs = g * ((q - z0) - np.where(mask, x.data / s, 0.0))
            # reduce over axes the scale broadcasts across
            if gs.shape != scale.data.shape:
                axes = tuple(
                    i for i in range(gs.ndim)
                    if i >= scale.data.ndim or scale.data.shape[i] == 1
                )
                gs = gs.sum(axis=axes, keepdims=True).reshape(scale.data.shape)
            scale.accumulate_grad(gs)

    return Tensor._from_op(out_data, parents, backward)


# ---------------------------------------------------------------------------
# quantized network view
# ---------------------------------------------------------------------------

@dataclass
class WeightSite:
    site_id: str
    params: QuantParams
    offsets: Tensor | None = None  # created when a pack is reconstructed

    def enable_offsets(self, shape: tuple[int, ...]) -> Tensor:
        if self.offsets is None:
            self.offsets = Tensor(np.zeros(shape), requires_grad=True)
        return self.offsets


@dataclass
class ActSite:
    site_id: str
    scale: Tensor  # 0-d learnable scale
    params: QuantParams  # zero_point/bits; scale field holds the calibration value

    def current_params(self) -> QuantParams:
        return replace(self.params, scale=self.scale.data)


def calibrate_activation(samples: np.ndarray, bits: int, sub_batches: int = 8) -> QuantParams:
    """Per-tensor activation range: min/max averaged over sub-batches."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n == 0:
        raise ConfigError("calibrate_activation: empty batch")
    k = min(sub_batches, n)
    chunks = np.array_split(samples, k, axis=0)
    lo = float(np.mean([c.min() for c in chunks]))
    hi = float(np.mean([c.max() for c in chunks]))
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels if hi > lo else 1.0
    return QuantParams(np.asarray(scale), np.asarray(-lo / scale), bits)


class QuantizedNetwork:
    """Fake-quantized view over a full-precision network.

    Sites with ``None`` are bypassed (identity), so a 32-bit configuration
    runs the exact full-precision op sequence.
    """

    def __init__(self, fp: Network,
                 weight_sites: dict[tuple, WeightSite | None],
                 act_sites: dict[object, ActSite | None]):
        self.fp = fp
        self.weight_sites = weight_sites
        self.act_sites = act_sites

    # -- forward ------------------------------------------------------------
    def _qw(self, key: tuple, layer) -> Tensor | None:
        site = self.weight_sites.get(key)
        if site is None:
            return None
        return fake_quant(layer.w, site.params, offsets=site.offsets)

    def _qact(self, key, h: Tensor) -> Tensor:
        site = self.act_sites.get(key)
        if site is None:
            return h
        return fake_quant(h, site.params, scale=site.scale)

    def _block_forward(self, block: Block, h: Tensor) -> Tensor:
        h = self._qact(block.index, h)
        weights = {}
        for li in range(len(block.layers)):
            qw = self._qw((block.index, li), block.layers[li])
            if qw is not None:
                weights[li] = qw
        return block.forward(h, weights)

    def forward(self, x: Tensor) -> Tensor:
        qw = self._qw(("stem", 0), self.fp.stem)
        h = self.fp.stem.forward(x, qw)
        for block in self.fp.blocks:
            h = self._block_forward(block, h)
        if self.fp.pool == "mean":
            from . import tensor as T
            h = T.reduce_mean(T.reduce_mean(h, axis=3), axis=2)
        h = self._qact("head", h)
        return self.fp.head.forward(h, self._qw(("head", 0), self.fp.head))

    def forward_pack(self, lo: int, hi: int, z: Tensor) -> Tensor:
        """Quantized forward through blocks lo..hi (1-based, inclusive)."""
        h = z
        for block in self.fp.blocks[lo - 1 : hi]:
            h = self._block_forward(block, h)
        return h

    def forward_upstream(self, t: int, x: Tensor) -> Tensor:
        """Quantized input of block t: quantized stem plus blocks 1..t-1."""
        qw = self._qw(("stem", 0), self.fp.stem)
        h = self.fp.stem.forward(x, qw)
        for block in self.fp.blocks[: t - 1]:
            h = self._block_forward(block, h)
        return h

    def logits_np(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        outs = []
        for i in range(0, x.shape[0], batch):
            outs.append(self.forward(self.fp.prepare_input(x[i : i + batch])).data)
        return np.concatenate(outs, axis=0)

    # -- learnable parameter access ------------------------------------------
    def pack_offsets(self, lo: int, hi: int) -> list[Tensor]:
        out = []
        for t in range(lo, hi + 1):
            block = self.fp.blocks[t - 1]
            for li, layer in enumerate(block.layers):
                site = self.weight_sites.get((t, li))
                if site is not None:
                    out.append(site.enable_offsets(layer.w.shape))
        return out

    def pack_act_scales(self, lo: int, hi: int) -> list[Tensor]:
        return [
            self.act_sites[t].scale
            for t in range(lo, hi + 1)
            if self.act_sites.get(t) is not None
        ]

    # -- documents ------------------------------------------------------------
    def to_document(self) -> dict:
        from .nets import _floats_to_hex, serialize

        sites = []
        for key in sorted(self.weight_sites, key=str):
            site = self.weight_sites[key]
            if site is None:
                continue
            sites.append({
                "site_id": site.site_id,
                "s": _floats_to_hex(site.params.scale),
                "z0": _floats_to_hex(site.params.zero_point),
                "k": site.params.bits,
                "per_channel": site.params.per_channel,
                "offsets": _floats_to_hex(site.offsets.data) if site.offsets is not None else None,
            })
        for key in sorted(self.act_sites, key=str):
            site = self.act_sites[key]
            if site is None:
                continue
            sites.append({
                "site_id": site.site_id,
                "s": _floats_to_hex(site.scale.data),
                "z0": _floats_to_hex(site.params.zero_point),
                "k": site.params.bits,
                "per_channel": False,
                "offsets": None,
            })
        return {"model": serialize(self.fp), "sites": sites}


def quantized_network_from_document(doc: dict) -> QuantizedNetwork:
    """Rebuild a quantized view (model + all site parameters) from its document."""
    from .errors import SchemaError
    from .nets import _hex_to_floats, deserialize

    if not isinstance(doc, dict) or "model" not in doc or "sites" not in doc:
        raise SchemaError("quantized-model document needs 'model' and 'sites'", "")
    fp = deserialize(doc["model"])
    weight_sites: dict[tuple, WeightSite | None] = {}
    act_sites: dict[object, ActSite | None] = {}
    for i, site in enumerate(doc["sites"]):
        path = f"/sites/{i}"
        sid = site.get("site_id", "")
        part, _, leaf = sid.partition("/")
        if part == "stem" or part == "head":
            owner = part
        elif part.startswith("block"):
            owner = int(part[len("block"):])
        else:
            raise SchemaError(f"unknown site_id '{sid}'", path)
        bits = int(site["k"])
        if leaf == "act":
            scale = _hex_to_floats(site["s"], (), f"{path}/s")
            z0 = _hex_to_floats(site["z0"], (), f"{path}/z0")
            params = QuantParams(scale, z0, bits)
            act_sites[owner] = ActSite(sid, Tensor(scale.copy(), requires_grad=True), params)
            continue
        if not leaf.startswith("w"):
            raise SchemaError(f"unknown site kind in '{sid}'", path)
        li = int(leaf[1:])
        if owner == "stem":
            layer, key = fp.stem, ("stem", 0)
        elif owner == "head":
            layer, key = fp.head, ("head", 0)
        else:
            layer, key = fp.blocks[owner - 1].layers[li], (owner, li)
        axis = 1 if layer.kind == "linear" else 0
        cshape = [1] * layer.w.data.ndim
        cshape[axis] = layer.w.shape[axis]
        scale = _hex_to_floats(site["s"], tuple(cshape), f"{path}/s")
        z0 = _hex_to_floats(site["z0"], tuple(cshape), f"{path}/z0")
        params = QuantParams(scale, z0, bits, per_channel=bool(site.get("per_channel")),
                             channel_axis=axis)
        ws = WeightSite(sid, params)
        if site.get("offsets") is not None:
            ws.offsets = Tensor(
                _hex_to_floats(site["offsets"], layer.w.shape, f"{path}/offsets"),
                requires_grad=True,
            )
        weight_sites[key] = ws
    return QuantizedNetwork(fp, weight_sites, act_sites)


def _weight_site(layer, site_id: str, bits: int | None) -> WeightSite | None:
    if bits is None or bits >= BYPASS_BITS:
        return None
    axis = 1 if layer.kind == "linear" else 0
    params = calibrate_minmax(layer.w.data, bits, per_channel=True, channel_axis=axis)
    return WeightSite(site_id, params)


def _act_site(samples: np.ndarray, site_id: str, bits: int | None) -> ActSite | None:
    if bits is None or bits >= BYPASS_BITS:
        return None
    params = calibrate_activation(samples, bits)
    scale = Tensor(params.scale.copy(), requires_grad=True)
    return ActSite(site_id, scale, params)


def calibrate_network(fp: Network, calib_inputs: np.ndarray, calib_labels: np.ndarray,
                      weight_bits: dict[tuple, int | None],
                      act_bits: dict[object, int | None]) -> QuantizedNetwork:
    """Build a MinMax-calibrated quantized view.

    ``weight_bits`` keys: ("stem", 0), (block_index, layer_index), ("head", 0);
    ``act_bits`` keys: block_index (its input activation) and "head".
    Missing or >= 32-bit entries mean bypass.
    """
    cap = forward_capture(fp, calib_inputs, calib_labels)
    block_inputs = {1: cap.stem_output}
    for t in range(2, fp.n_blocks + 1):
        block_inputs[t] = cap.block_outputs[t - 2]
    head_input = cap.block_outputs[-1]
    if fp.pool == "mean":
        head_input = head_input.mean(axis=(2, 3))

    weight_sites: dict[tuple, WeightSite | None] = {
        ("stem", 0): _weight_site(fp.stem, "stem/w0", weight_bits.get(("stem", 0))),
        ("head", 0): _weight_site(fp.head, "head/w0", weight_bits.get(("head", 0))),
    }
    for block in fp.blocks:
        for li, layer in enumerate(block.layers):
            key = (block.index, li)
            weight_sites[key] = _weight_site(
                layer, f"block{block.index}/w{li}", weight_bits.get(key)
            )

    act_sites: dict[object, ActSite | None] = {
        "head": _act_site(head_input, "head/act", act_bits.get("head"))
    }
    for t in range(1, fp.n_blocks + 1):
        act_sites[t] = _act_site(block_inputs[t], f"block{t}/act", act_bits.get(t))
    return QuantizedNetwork(fp, weight_sites, act_sites)


def quantize_network(fp: Network, allocation, calib_inputs: np.ndarray,
                     calib_labels: np.ndarray, act_bits: int) -> QuantizedNetwork:
    """Quantize every block at its pack's bit-width.

    The stem and head are quantized at max of the candidate set and never
    join a pack; every block input (and the head input) gets a per-tensor
    activation quantizer at the uniform ``act_bits``.
    """
    weight_bits: dict[tuple, int | None] = {}
    covered: set[int] = set()
    for (lo, hi), bits in zip(allocation.pack_ranges, allocation.bits):
        for t in range(lo, hi + 1):
            block = fp.blocks[t - 1]
            covered.add(t)
            for li in range(len(block.layers)):
                weight_bits[(t, li)] = bits
    missing = set(range(1, fp.n_blocks + 1)) - covered
    if missing:
        raise ConfigError(f"allocation does not cover blocks {sorted(missing)}")
    edge_bits = max(allocation.candidates)
    weight_bits[("stem", 0)] = edge_bits
    weight_bits[("head", 0)] = edge_bits

    act_map: dict[object, int | None] = {"head": act_bits}
    for t in range(1, fp.n_blocks + 1):
        act_map[t] = act_bits
    return calibrate_network(fp, calib_inputs, calib_labels, weight_bits, act_map)


def quantize_single_block(fp: Network, t: int, bits: int, calib_inputs: np.ndarray,
                          calib_labels: np.ndarray) -> QuantizedNetwork:
    """Quantize only block t (weights and its input activation) at ``bits``."""
    if not 1 <= t <= fp.n_blocks:
        raise ConfigError(f"block index {t} out of range 1..{fp.n_blocks}")
    weight_bits = {(t, li): bits for li in range(len(fp.blocks[t - 1].layers))}
    return calibrate_network(fp, calib_inputs, calib_labels, weight_bits, {t: bits})
