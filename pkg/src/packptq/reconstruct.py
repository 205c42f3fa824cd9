"""Pack-wise reconstruction: fit each pack's quantization parameters so the
quantized pack reproduces the full-precision pack's outputs.

The loss for pack l is the batch mean of per-sample Frobenius norms
|| P_q(x) - P(x) ||_F evaluated on the pack input x. Packs run strictly in
ascending order; by default x comes from the already-quantized upstream
(packs 1..l-1 with their final parameters), with a full-precision input mode
available for ablations.

Learnables per pack: weight rounding offsets (clamped to [-0.5, 0.5] after
every step) and activation scales of the pack's block-input sites.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericalError
from .nets import Network
from .optim import Adam
from .packing import PackPlan
from .quant import QuantizedNetwork, quantize_network
from .tensor import Tensor

INPUT_SOURCES = ("quantized-upstream", "full-precision")

_DIVERGENCE_FACTOR = 1e3
_DIVERGENCE_PATIENCE = 50
_MIN_SCALE = 1e-12


@dataclass
class ReconstructionConfig:
    iterations: int = 500          # desk-scale default; 2000 mirrors the full protocol
    batch_size: int = 32
    base_lr: float = 4e-5
    act_scale_lr_mult: float = 0.01  # activation scales move on a finer grid
    input_source: str = "quantized-upstream"
    log_interval: int = 25
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("reconstruction iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("reconstruction batch_size must be >= 1")
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(
                f"input_source must be one of {INPUT_SOURCES}, got '{self.input_source}'"
            )


@dataclass
class ReconstructionTrace:
    pack: tuple[int, int]
    initial_loss: float
    final_loss: float
    curve: list[float] = field(default_factory=list)
    seed: int = 0
    wall_time_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "pack": list(self.pack),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "curve": self.curve,
            "seed": self.seed,
            "wall_time_seconds": self.wall_time_seconds,
        }


def _chunked(fn, x: np.ndarray, batch: int = 512) -> np.ndarray:
    outs = [fn(Tensor(x[i : i + batch])).data for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs, axis=0)


def _rec_loss(qnet: QuantizedNetwork, lo: int, hi: int, x: Tensor, target: Tensor) -> Tensor:
    out = qnet.forward_pack(lo, hi, x)
    return T.reduce_mean(T.frobenius_rows(T.sub(out, target)))


def reconstruct_pack(qnet: QuantizedNetwork, lo: int, hi: int, x_pack: np.ndarray,
                     config: ReconstructionConfig,
                     rng: np.random.Generator) -> ReconstructionTrace:
    """Optimize one pack's quantization parameters against its FP outputs."""
    config.validate()
    t0 = time.perf_counter()
    targets = _chunked(lambda z: qnet.fp.forward_range(lo, hi, z), x_pack)

    offsets = qnet.pack_offsets(lo, hi)
    scales = qnet.pack_act_scales(lo, hi)
    params = offsets + scales

    def full_loss() -> float:
        preds = _chunked(lambda z: qnet.forward_pack(lo, hi, z), x_pack)
        diff = preds - targets
        return float(np.sqrt((diff.reshape(diff.shape[0], -1) ** 2).sum(axis=1)).mean())

    initial = full_loss()
    trace = ReconstructionTrace(pack=(lo, hi), initial_loss=initial, final_loss=initial)
    if not params:
        # fully bypassed pack: nothing to learn
        trace.wall_time_seconds = time.perf_counter() - t0
        return trace

    lr_mults = [1.0] * len(offsets) + [config.act_scale_lr_mult] * len(scales)
    opt = Adam(params, config.base_lr, config.iterations, lr_mults)
    n = x_pack.shape[0]
    batch = min(config.batch_size, n)
    diverged_logs = 0
    for it in range(config.iterations):
        idx = rng.choice(n, size=batch, replace=False)
        xb = Tensor(x_pack[idx])
        tb = Tensor(targets[idx])
        loss = _rec_loss(qnet, lo, hi, xb, tb)
        T.backward(loss, params)
        opt.step()
        for off in offsets:
            off.data = np.clip(off.data, -0.5, 0.5)
        for sc in scales:
            sc.data = np.maximum(sc.data, _MIN_SCALE)
        if (it + 1) % config.log_interval == 0 or it + 1 == config.iterations:
            val = loss.item()
            trace.curve.append(val)
            if not np.isfinite(val) or val > _DIVERGENCE_FACTOR * initial:
                diverged_logs += 1
                if diverged_logs >= _DIVERGENCE_PATIENCE:
                    raise NumericalError(
                        f"reconstruction of pack {lo}..{hi} diverged: loss {val:.3g} "
                        f"vs initial {initial:.3g} for {diverged_logs} consecutive logs"
                    )
            else:
                diverged_logs = 0

    trace.final_loss = full_loss()
    trace.wall_time_seconds = time.perf_counter() - t0
    return trace


def reconstruct_network(network: Network, plan: PackPlan, allocation, calibration: Dataset,
                        config: ReconstructionConfig, act_bits: int,
                        qnet: QuantizedNetwork | None = None,
                        ) -> tuple[QuantizedNetwork, list[ReconstructionTrace]]:
    """Quantize then reconstruct packs in ascending order."""
    config.validate()
    plan.validate()
    if plan.n_blocks != network.n_blocks:
        raise ConfigError(
            f"plan covers {plan.n_blocks} blocks, network has {network.n_blocks}"
        )
    if qnet is None:
        qnet = quantize_network(network, allocation, calibration.inputs,
                                calibration.labels, act_bits)
    seeds = np.random.SeedSequence(config.seed).spawn(plan.n_packs)
    traces = []
    x = network.prepare_input(calibration.inputs).data
    for j, (lo, hi) in enumerate(plan.packs):
        if config.input_source == "quantized-upstream":
            x_pack = _chunked(lambda z, lo=lo: qnet.forward_upstream(lo, z), x)
        else:
            x_pack = _chunked(lambda z, lo=lo: network.forward_upstream(lo, z), x)
        rng = np.random.default_rng(seeds[j])
        traces.append(reconstruct_pack(qnet, lo, hi, x_pack, config, rng))
    return qnet, traces


def evaluate_model(model, test: Dataset) -> dict:
    """Top-1 accuracy plus class-wise accuracies (and their mean)."""
    logits = model.logits_np(test.inputs)
    preds = logits.argmax(axis=1)
    correct = preds == test.labels
    per_class = []
    for c in range(test.class_count):
        m = test.labels == c
        per_class.append(float(correct[m].mean()) if m.any() else 0.0)
    return {
        "accuracy": float(correct.mean()),
        "per_class": per_class,
        "mean_class_accuracy": float(np.mean(per_class)),
        "n": int(test.n),
    }
