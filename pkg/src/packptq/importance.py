"""Block importance scores via Gaussian perturbations at block outputs.

Each block's score estimates the mean diagonal of the Hessian of the task
loss with respect to that block's output:

    S = E[2 * (L(z + dz) - L(z) - dz . g)] / E[dz . dz],    dz ~ N(0, s^2 I)

The quadratic form in the numerator has expectation s^2 tr(H) and the
denominator s^2 n, so the ratio converges to tr(H)/n. A second-order
finite-difference oracle computes tr(H)/n directly to certify the estimator
on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericalError
from .nets import CaptureRecord, Network, forward_capture
from .tensor import Tensor

ORACLE_MAX_DIM = 512


@dataclass
class PerturbationConfig:
    sigma: float | None = None     # absolute noise scale; None -> relative policy
    sigma_rel: float = 0.01        # sigma = sigma_rel * RMS(z) per block
    num_samples: int = 2000        # Gaussian draws, split across calibration items
    items: int = 16                # calibration items the expectation averages over
    seed: int = 0

    def validate(self) -> None:
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.sigma_rel <= 0:
            raise ConfigError(f"sigma_rel must be positive, got {self.sigma_rel}")
        if self.num_samples < 1 or self.items < 1:
            raise ConfigError("num_samples and items must be >= 1")


@dataclass
class BlockScoreEntry:
    block: int
    score: float
    numerator: float      # E[2 (L_q^b - dz.g)]
    denominator: float    # E[dz.dz]
    stderr: float         # standard error of the numerator
    stderr_score: float   # delta-method standard error of the ratio
    n: int                # dimension of the block output
    sigma: float
    num_samples: int

    def to_json(self) -> dict:
        return {
            "block": self.block,
            "score": self.score,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "stderr": self.stderr,
            "stderr_score": self.stderr_score,
            "n": self.n,
            "sigma": self.sigma,
            "num_samples": self.num_samples,
        }


# ---------------------------------------------------------------------------
# network plumbing
# ---------------------------------------------------------------------------

def _tail_losses(network: Network, t: int, z_batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row task losses after re-running blocks t+1..n and the head."""
    logits = network.tail(t, Tensor(z_batch))
    return T.softmax_cross_entropy(logits, labels).data


def _row_losses_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return T.softmax_cross_entropy(Tensor(logits), labels).data


def block_quant_loss(network: Network, capture: CaptureRecord, t: int,
                     delta: np.ndarray) -> float:
    """L_q^b: change in batch task loss when block t's output moves by delta."""
    if not 1 <= t <= network.n_blocks:
        raise ConfigError(f"block index {t} out of range 1..{network.n_blocks}")
    z = capture.block_outputs[t - 1]
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != z.shape:
        raise ConfigError(
            f"perturbation shape {delta.shape} does not match block output {z.shape}"
        )
    perturbed = float(_tail_losses(network, t, z + delta, capture.labels).mean())
    if not np.isfinite(perturbed):
        raise NumericalError("non-finite loss during perturbed forward")
    return perturbed - capture.loss


def block_output_gradient(network: Network, capture: CaptureRecord, t: int) -> Tensor:
    """Gradient of the batch task loss w.r.t. block t's output."""
    if not 1 <= t <= network.n_blocks:
        raise ConfigError(f"block index {t} out of range 1..{network.n_blocks}")
    z = Tensor(capture.block_outputs[t - 1].copy(), requires_grad=True)
    logits = network.tail(t, z)
    loss = T.reduce_mean(T.softmax_cross_entropy(logits, capture.labels))
    grads = T.backward(loss, [z])
    return grads[id(z)]


def _per_row_gradients(network: Network, t: int, z: np.ndarray,
                       labels: np.ndarray) -> np.ndarray:
    """d(per-row loss)/d(z row), all rows in one reverse sweep."""
    zt = Tensor(z.copy(), requires_grad=True)
    logits = network.tail(t, zt)
    total = T.reduce_sum(T.softmax_cross_entropy(logits, labels))
    grads = T.backward(total, [zt])
    return grads[id(zt)].data


# ---------------------------------------------------------------------------
# estimator core (shared by networks and synthetic losses)
# ---------------------------------------------------------------------------

def _split_counts(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def estimate_hessian_mean(loss_rows, z0: np.ndarray, grad0: np.ndarray, base_loss: float,
                          sigma: float, num_samples: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo samples of the score's numerator and denominator.

    loss_rows(Z [m, n]) must return the m per-row losses of the map being
    probed around the flat point z0 with gradient grad0.
    """
    n = z0.size
    dz = sigma * rng.standard_normal((num_samples, n))
    losses = np.asarray(loss_rows(z0[None, :] + dz))
    if not np.isfinite(losses).all():
        raise NumericalError(
            f"non-finite loss during perturbed forward (sigma={sigma:g}; try a smaller sigma)"
        )
    nums = 2.0 * (losses - base_loss - dz @ grad0)
    dens = (dz * dz).sum(axis=1)
    if not (np.isfinite(nums).all() and np.isfinite(dens).all()):
        raise NumericalError(
            f"perturbation statistics overflowed (sigma={sigma:g}; try a smaller sigma)"
        )
    return nums, dens


def _ratio_stats(nums: np.ndarray, dens: np.ndarray) -> dict:
    n_samp = nums.size
    num_mean = float(nums.mean())
    den_mean = float(dens.mean())
    if den_mean < 1e-30:
        raise NumericalError("perturbation energy vanished; denominator ~ 0")
    score = num_mean / den_mean
    var_n = float(nums.var(ddof=1)) if n_samp > 1 else 0.0
    var_d = float(dens.var(ddof=1)) if n_samp > 1 else 0.0
    cov = float(np.cov(nums, dens, ddof=1)[0, 1]) if n_samp > 1 else 0.0
    stderr_num = np.sqrt(var_n / n_samp)
    # delta method for the ratio of means; float64 powers overflow to inf
    # rather than raising, and the guard below catches that case
    d = np.float64(den_mean)
    var_score = float(
        (var_n / d**2 + num_mean**2 * var_d / d**4 - 2.0 * num_mean * cov / d**3) / n_samp
    )
    if not np.isfinite(var_score):
        raise NumericalError("score variance overflowed; perturbation scale too large")
    stderr_score = float(np.sqrt(max(var_score, 0.0)))
    return {
        "score": score,
        "numerator": num_mean,
        "denominator": den_mean,
        "stderr": float(stderr_num),
        "stderr_score": stderr_score,
        "num_samples": n_samp,
    }


def score_from_loss_rows(loss_rows, z0: np.ndarray, grad0: np.ndarray, base_loss: float,
                         sigma: float, num_samples: int, rng) -> dict:
    """Estimate tr(H)/n of a single loss map (used directly on synthetic losses)."""
    nums, dens = estimate_hessian_mean(loss_rows, z0, grad0, base_loss, sigma, num_samples, rng)
    return _ratio_stats(nums, dens)


def estimate_block_score(network: Network, calibration: Dataset, t: int,
                         config: PerturbationConfig,
                         seedseq: np.random.SeedSequence | None = None) -> BlockScoreEntry:
    """Monte-Carlo block score, averaging jointly over calibration items and draws."""
    config.validate()
    if not 1 <= t <= network.n_blocks:
        raise ConfigError(f"block index {t} out of range 1..{network.n_blocks}")
    items = min(config.items, calibration.n)
    x = calibration.inputs[:items]
    y = calibration.labels[:items]
    capture = forward_capture(network, x, y)
    z = capture.block_outputs[t - 1]
    n_dim = int(np.prod(z.shape[1:]))
    z_flat = z.reshape(items, n_dim)

    sigma = config.sigma
    if sigma is None:
        sigma = config.sigma_rel * float(np.sqrt((z_flat**2).mean()))
        if sigma <= 0.0:
            sigma = config.sigma_rel  # all-zero block output; fall back to absolute
    grads = _per_row_gradients(network, t, z, y).reshape(items, n_dim)
    base_losses = _row_losses_from_logits(capture.logits, y)

    rng = np.random.default_rng(seedseq if seedseq is not None else config.seed)
    counts = _split_counts(config.num_samples, items)
    all_nums, all_dens = [], []
    for i, m_i in enumerate(counts):
        if m_i == 0:
            continue

        def rows(zp, i=i):
            zb = zp.reshape((zp.shape[0],) + z.shape[1:])
            labels = np.full(zp.shape[0], y[i], dtype=np.int64)
            return _tail_losses(network, t, zb, labels)

        nums, dens = estimate_hessian_mean(
            rows, z_flat[i], grads[i], float(base_losses[i]), sigma, m_i, rng
        )
        all_nums.append(nums)
        all_dens.append(dens)
    stats = _ratio_stats(np.concatenate(all_nums), np.concatenate(all_dens))
    return BlockScoreEntry(block=t, n=n_dim, sigma=float(sigma), **stats)


def score_all_blocks(network: Network, calibration: Dataset,
                     config: PerturbationConfig) -> list[BlockScoreEntry]:
    """Score every block; each block gets its own spawned child of config.seed."""
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(network.n_blocks)
    return [
        estimate_block_score(network, calibration, t, config, seedseq=seeds[t - 1])
        for t in range(1, network.n_blocks + 1)
    ]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def fd_hessian_mean(loss_rows, z0: np.ndarray, h: float = 1e-3) -> float:
    """tr(H)/n via diagonal second-order central differences at z0 (flat)."""
    n = z0.size
    if n > ORACLE_MAX_DIM:
        raise ConfigError(f"oracle limited to dim <= {ORACLE_MAX_DIM}, got {n}")
    if h <= 0:
        raise ConfigError("fd step h must be positive")
    eye = np.eye(n)
    pts = np.concatenate([z0[None, :] + h * eye, z0[None, :] - h * eye, z0[None, :]], axis=0)
    losses = np.asarray(loss_rows(pts))
    if not np.isfinite(losses).all():
        raise NumericalError("non-finite second differences in Hessian oracle")
    lp, lm, l0 = losses[:n], losses[n : 2 * n], losses[-1]
    diag = (lp - 2.0 * l0 + lm) / (h * h)
    return float(diag.mean())


def hessian_mean_oracle(network: Network, calibration: Dataset, t: int,
                        h: float = 1e-3, items: int = 16) -> float:
    """Average tr(H)/n over calibration items; pairs with estimate_block_score."""
    items = min(items, calibration.n)
    x = calibration.inputs[:items]
    y = calibration.labels[:items]
    capture = forward_capture(network, x, y)
    z = capture.block_outputs[t - 1]
    n_dim = int(np.prod(z.shape[1:]))
    if n_dim > ORACLE_MAX_DIM:
        raise ConfigError(f"oracle limited to dim <= {ORACLE_MAX_DIM}, got {n_dim}")
    z_flat = z.reshape(items, n_dim)
    vals = []
    for i in range(items):

        def rows(zp, i=i):
            zb = zp.reshape((zp.shape[0],) + z.shape[1:])
            labels = np.full(zp.shape[0], y[i], dtype=np.int64)
            return _tail_losses(network, t, zb, labels)

        vals.append(fd_hessian_mean(rows, z_flat[i], h))
    return float(np.mean(vals))


def report_to_json(report: list[BlockScoreEntry]) -> list[dict]:
    return [e.to_json() for e in report]
