"""Synthetic classification datasets used for calibration and evaluation.

All generators are deterministic given (kind, N, seed): the same call
reproduces byte-identical arrays. Labels are balanced and the calibration
and test splits come from disjoint draws of one seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError

DATASET_KINDS = ("gaussian-blobs", "concentric-rings", "two-moons-10class")

_DEFAULT_CLASS_COUNT = {
    "gaussian-blobs": 4,
    "concentric-rings": 3,
    "two-moons-10class": 10,
}

MIN_SAMPLES = 64


@dataclass
class Dataset:
    kind: str
    class_count: int
    seed: int
    inputs: np.ndarray  # [N, dim] float64
    labels: np.ndarray  # [N] int64

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def _class_sizes(n: int, class_count: int) -> list[int]:
    base, rem = divmod(n, class_count)
    return [base + (1 if c < rem else 0) for c in range(class_count)]


def _blob_samples(rng, n_c: int, mean: np.ndarray) -> np.ndarray:
    return mean[None, :] + 0.5 * rng.standard_normal((n_c, mean.shape[0]))


def _ring_samples(rng, n_c: int, radius: float) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_c)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return pts + 0.08 * rng.standard_normal((n_c, 2))


def _moon_samples(rng, n_c: int, c: int) -> np.ndarray:
    # 5 angular sectors, two interleaved arcs (inner/outer) per sector
    sector = 2.0 * np.pi / 5.0
    ring = c % 2
    radius = 1.0 + 0.45 * ring
    start = (c // 2) * sector + 0.5 * sector * ring
    theta = start + rng.uniform(0.0, 0.9 * sector, size=n_c)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return pts + 0.06 * rng.standard_normal((n_c, 2))


def _draw_split(kind: str, n: int, class_count: int, dim: int, rng,
                blob_means: np.ndarray | None, seed: int) -> Dataset:
    sizes = _class_sizes(n, class_count)
    xs, ys = [], []
    for c, n_c in enumerate(sizes):
        if kind == "gaussian-blobs":
            pts = _blob_samples(rng, n_c, blob_means[c])
        elif kind == "concentric-rings":
            pts = _ring_samples(rng, n_c, 0.7 * (c + 1))
        else:
            pts = _moon_samples(rng, n_c, c)
        xs.append(pts)
        ys.append(np.full(n_c, c, dtype=np.int64))
    inputs = np.concatenate(xs, axis=0)
    labels = np.concatenate(ys, axis=0)
    # deterministic shuffle so batches mix classes
    perm = rng.permutation(n)
    return Dataset(kind, class_count, seed, inputs[perm], labels[perm])


def generate_dataset(kind: str, n: int, seed: int, class_count: int | None = None,
                     dim: int = 2, test_n: int | None = None) -> tuple[Dataset, Dataset]:
    """Return (calibration, test) splits; deterministic given the arguments."""
    if kind not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind '{kind}'; known: {', '.join(DATASET_KINDS)}")
    if n < MIN_SAMPLES:
        raise ConfigError(f"dataset size {n} too small; need at least {MIN_SAMPLES}")
    if class_count is None:
        class_count = _DEFAULT_CLASS_COUNT[kind]
    if kind == "two-moons-10class" and class_count != 10:
        raise ConfigError("two-moons-10class is a fixed 10-class dataset")
    if kind != "gaussian-blobs" and dim != 2:
        raise ConfigError(f"{kind} is intrinsically 2-D; got dim={dim}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    if test_n is None:
        test_n = n

    rng = np.random.default_rng(seed)
    blob_means = None
    if kind == "gaussian-blobs":
        # class centers are part of the task definition, not of the draw:
        # fixed by (class_count, dim) so different seeds sample one distribution
        means_rng = np.random.default_rng([424242, class_count, dim])
        blob_means = 3.0 / np.sqrt(dim) * means_rng.standard_normal((class_count, dim))
    calib = _draw_split(kind, n, class_count, dim, rng, blob_means, seed)
    test = _draw_split(kind, test_n, class_count, dim, rng, blob_means, seed)
    return calib, test


# ---------------------------------------------------------------------------
# dataset documents
# ---------------------------------------------------------------------------

def dataset_to_document(calib: Dataset, test: Dataset) -> dict:
    return {
        "kind": calib.kind,
        "N": int(calib.n),
        "seed": int(calib.seed),
        "class_count": int(calib.class_count),
        "dim": int(calib.inputs.shape[1]),
        "test_n": int(test.n),
        "calibration_inputs": [float(v) for v in calib.inputs.reshape(-1)],
        "calibration_labels": [int(v) for v in calib.labels],
        "test_inputs": [float(v) for v in test.inputs.reshape(-1)],
        "test_labels": [int(v) for v in test.labels],
    }


def dataset_from_document(doc: dict) -> tuple[Dataset, Dataset]:
    for key in ("kind", "N", "seed", "class_count", "dim"):
        if key not in doc:
            raise SchemaError("missing required field", f"/{key}")
    kind = doc["kind"]
    if kind not in DATASET_KINDS:
        raise SchemaError(f"unknown dataset kind '{kind}'", "/kind")
    n, dim = int(doc["N"]), int(doc["dim"])
    test_n = int(doc.get("test_n", n))
    class_count = int(doc["class_count"])

    def split(prefix: str, count: int) -> Dataset:
        inputs = np.asarray(doc[f"{prefix}_inputs"], dtype=np.float64)
        labels = np.asarray(doc[f"{prefix}_labels"], dtype=np.int64)
        if inputs.size != count * dim:
            raise SchemaError(
                f"expected {count * dim} values, got {inputs.size}", f"/{prefix}_inputs"
            )
        if labels.shape[0] != count:
            raise SchemaError(
                f"expected {count} labels, got {labels.shape[0]}", f"/{prefix}_labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise SchemaError(
                f"labels outside [0, {class_count})", f"/{prefix}_labels"
            )
        return Dataset(kind, class_count, int(doc["seed"]), inputs.reshape(count, dim), labels)

    return split("calibration", n), split("test", test_n)
