#!/usr/bin/env python3
"""Regenerate the committed test fixtures (trained model documents).

Training is deterministic, so rerunning this script reproduces the committed
files byte-for-byte. The reference accuracy bands in
tests/fixtures/regression.json are recorded separately by
scripts/record_regression.py once the fixtures exist.
"""

from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"

from packptq.data import generate_dataset
from packptq.nets import build_model, serialize, training_accuracy
from packptq.pipeline import write_json

RECIPES = {
    # name -> (arch, dataset kind, class_count, train_n, train_seed, steps, batch, lr, net_seed)
    "resmlp-8x32_moons": ("resmlp-8x32", "two-moons-10class", 10, 2048, 7, 3000, 64, 5e-3, 0),
    "resmlp-8x32_blobs8": ("resmlp-8x32", "gaussian-blobs", 8, 2048, 7, 1500, 64, 3e-3, 0),
    "resmlp-4x16_rings": ("resmlp-4x16", "concentric-rings", 3, 2048, 7, 2000, 64, 5e-3, 0),
    "resmlp-4x16_rings2": ("resmlp-4x16", "concentric-rings", 2, 2048, 7, 1000, 64, 3e-3, 2),
}


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    for name, (arch, kind, cc, n, dseed, steps, batch, lr, nseed) in RECIPES.items():
        train, _ = generate_dataset(kind, n, dseed, class_count=cc)
        net = build_model(arch, input_shape=(2,), class_count=cc, seed=nseed,
                          train_data=train, train_steps=steps, train_batch=batch,
                          train_lr=lr)
        acc = training_accuracy(net, train)
        path = write_json(FIXTURES / f"{name}.json", serialize(net))
        print(f"{name}: train_accuracy={acc:.4f} -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
