"""End-to-end orchestration: score -> pack -> allocate -> quantize ->
reconstruct -> evaluate, plus the ablation grid runner.

Every stage is deterministic given (config, seed, fixtures); reports embed the
verbatim config so any number is one command away from regeneration. Timing
lives under dedicated keys ("timing", "wall_time_seconds") so reports can be
compared byte-for-byte after stripping them.
"""

from __future__ import annotations

import copy
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import (BitAllocation, SensitivityReport, allocate_bits,
                         compute_sensitivities, pack_param_counts, pack_quant_loss)
from .config import DatasetSpec, RunConfig
from .data import Dataset, dataset_from_document, dataset_to_document, generate_dataset
from .errors import ConfigError, PackPTQError
from .importance import BlockScoreEntry, PerturbationConfig, report_to_json, score_all_blocks
from .nets import Network, build_model, deserialize, serialize, train_network
from .packing import PackPlan, partition_fixed, partition_hada, partition_none, partition_random
from .quant import QuantizedNetwork, quantize_network
from .reconstruct import ReconstructionConfig, evaluate_model, reconstruct_network

TIMING_KEYS = ("timing", "wall_time_seconds")

ABLATION_DEFAULT_GRID = [
    ("none", False), ("random", False), ("hada", False),
    ("none", True), ("random", True), ("hada", True),
]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))
    return path


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return json.loads(path.read_text())


def strip_timing(obj):
    """Deep copy with all timing fields removed (for determinism comparisons)."""
    obj = copy.deepcopy(obj)

    def scrub(node):
        if isinstance(node, dict):
            for key in TIMING_KEYS:
                node.pop(key, None)
            for v in node.values():
                scrub(v)
        elif isinstance(node, list):
            for v in node:
                scrub(v)

    scrub(obj)
    return obj


def child_seeds(seed: int, n: int) -> list[int]:
    """Stable per-stage integer seeds derived from the run seed."""
    return [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def load_model(path: str | Path) -> Network:
    return deserialize(read_json(path))


def load_dataset_pair(spec: DatasetSpec | str) -> tuple[Dataset, Dataset]:
    if isinstance(spec, str):
        return dataset_from_document(read_json(spec))
    return generate_dataset(spec.kind, spec.n, spec.seed, class_count=spec.class_count,
                            dim=spec.dim, test_n=spec.test_n)


def _perturbation_config(cfg: RunConfig, seed: int) -> PerturbationConfig:
    s = cfg.score
    return PerturbationConfig(sigma=s.sigma, sigma_rel=s.sigma_rel,
                              num_samples=s.num_samples, items=s.items, seed=seed)


def _reconstruction_config(cfg: RunConfig, seed: int) -> ReconstructionConfig:
    r = cfg.reconstruction
    return ReconstructionConfig(iterations=r.iterations, batch_size=r.batch_size,
                                base_lr=r.base_lr, act_scale_lr_mult=r.act_scale_lr_mult,
                                input_source=r.input_source, log_interval=r.log_interval,
                                seed=seed)


# ---------------------------------------------------------------------------
# stages (pure, in-memory)
# ---------------------------------------------------------------------------

def _needs_scores(cfg: RunConfig) -> bool:
    if cfg.mixed_precision:
        return True
    if cfg.packing.strategy == "hada":
        return True
    return cfg.packing.strategy == "random" and cfg.packing.target_packs is None


def stage_scores(net: Network, calib: Dataset, cfg: RunConfig,
                 seed: int) -> list[BlockScoreEntry]:
    return score_all_blocks(net, calib, _perturbation_config(cfg, seed))


def stage_plan(net: Network, cfg: RunConfig, scores: list[BlockScoreEntry] | None,
               pack_seed: int) -> PackPlan:
    n = net.n_blocks
    strategy = cfg.packing.strategy
    if strategy == "hada":
        if scores is None:
            raise ConfigError("hada packing requires block scores")
        return partition_hada([e.score for e in scores], cfg.packing.max_pack_size)
    if strategy == "none":
        return partition_none(n)
    if strategy == "fixed":
        return partition_fixed(n, cfg.packing.fixed_size)
    target = cfg.packing.target_packs
    if target is None:
        if scores is None:
            raise ConfigError("random packing with target_packs=null requires block scores")
        target = partition_hada([e.score for e in scores]).n_packs
    return partition_random(n, target, pack_seed)


def stage_allocation(net: Network, calib: Dataset, cfg: RunConfig, plan: PackPlan,
                     scores: list[BlockScoreEntry] | None,
                     ) -> tuple[SensitivityReport | None, BitAllocation]:
    p = pack_param_counts(net, plan)
    budget = cfg.resolved_budget(sum(p))
    candidates = cfg.resolved_candidates()
    if not cfg.mixed_precision:
        w = cfg.weight_bits
        cost = w * sum(p)
        if cost > budget:
            raise ConfigError(
                f"uniform W{w} needs {cost} bits but budget is {budget}"
            )
        alloc = BitAllocation(bits=[w] * plan.n_packs, candidates=candidates, budget=budget,
                              p=p, objective=0.0, cost=cost, pack_ranges=list(plan.packs),
                              omegas=[0.0] * plan.n_packs)
        return None, alloc
    if scores is None:
        raise ConfigError("mixed precision requires block scores")
    losses = [pack_quant_loss(net, calib, t, cfg.weight_bits)
              for t in range(1, net.n_blocks + 1)]
    report = compute_sensitivities(plan, [e.score for e in scores], losses, cfg.weight_bits)
    return report, allocate_bits(report, p, candidates, budget)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def run_pipeline(cfg: RunConfig, write_artifacts: bool = True) -> dict:
    """Run every stage; returns the RunReport dict (also written to out_dir)."""
    out = Path(cfg.out_dir)
    stage = "setup"
    t_start = time.perf_counter()
    try:
        net = load_model(cfg.model)
        calib, test = load_dataset_pair(cfg.dataset)
        score_seed, pack_seed, recon_seed = child_seeds(cfg.seed, 3)
        timing: dict[str, float] = {}

        stage = "score"
        t0 = time.perf_counter()
        scores = stage_scores(net, calib, cfg, score_seed) if _needs_scores(cfg) else None
        timing["score_seconds"] = time.perf_counter() - t0

        stage = "pack"
        plan = stage_plan(net, cfg, scores, pack_seed)

        stage = "allocate"
        t0 = time.perf_counter()
        sens, alloc = stage_allocation(net, calib, cfg, plan, scores)
        timing["allocate_seconds"] = time.perf_counter() - t0

        stage = "quantize"
        t0 = time.perf_counter()
        qnet = quantize_network(net, alloc, calib.inputs, calib.labels, cfg.act_bits)
        fp_eval = evaluate_model(net, test)
        minmax_eval = evaluate_model(qnet, test)
        timing["quantize_seconds"] = time.perf_counter() - t0

        stage = "reconstruct"
        t0 = time.perf_counter()
        rcfg = _reconstruction_config(cfg, recon_seed)
        qnet, traces = reconstruct_network(net, plan, alloc, calib, rcfg,
                                           cfg.act_bits, qnet=qnet)
        timing["reconstruct_seconds"] = time.perf_counter() - t0

        stage = "evaluate"
        q_eval = evaluate_model(qnet, test)
        timing["total_seconds"] = time.perf_counter() - t_start

        report = {
            "config": cfg.model_dump(mode="json"),
            "seed": cfg.seed,
            "stage_seeds": {"score": score_seed, "pack": pack_seed,
                            "reconstruct": recon_seed},
            "versions": {"packptq": __version__, "numpy": np.__version__},
            "scores": report_to_json(scores) if scores is not None else None,
            "plan": plan.to_json(),
            "sensitivities": sens.to_json() if sens is not None else None,
            "allocation": alloc.to_json(),
            "fp_accuracy": fp_eval,
            "minmax_accuracy": minmax_eval,
            "quantized_accuracy": q_eval,
            "avg_bits": alloc.avg_bits,
            "traces": [t.to_json() for t in traces],
            "timing": timing,
        }
        if write_artifacts:
            if scores is not None:
                write_json(out / "scores.json", report_to_json(scores))
            write_json(out / "plan.json", plan.to_json())
            if sens is not None:
                write_json(out / "sensitivities.json", sens.to_json())
            write_json(out / "allocation.json", alloc.to_json())
            write_json(out / "quantized_model.json", qnet.to_document())
            write_json(out / "traces.json", [t.to_json() for t in traces])
            write_json(out / "report.json", report)
        return report
    except PackPTQError:
        if write_artifacts:
            write_json(out / "FAILED.json", {"stage": stage})
        raise


# ---------------------------------------------------------------------------
# single-stage commands (file-chained operator surface)
# ---------------------------------------------------------------------------

def cmd_score(cfg: RunConfig) -> dict:
    net = load_model(cfg.model)
    calib, _ = load_dataset_pair(cfg.dataset)
    score_seed = child_seeds(cfg.seed, 3)[0]
    scores = stage_scores(net, calib, cfg, score_seed)
    path = write_json(Path(cfg.out_dir) / "scores.json", report_to_json(scores))
    return {"scores": report_to_json(scores), "path": str(path)}


def _load_or_compute_scores(net, calib, cfg) -> list[BlockScoreEntry] | None:
    path = Path(cfg.out_dir) / "scores.json"
    if path.exists():
        raw = read_json(path)
        return [BlockScoreEntry(**e) for e in raw]
    if not _needs_scores(cfg):
        return None
    score_seed = child_seeds(cfg.seed, 3)[0]
    scores = stage_scores(net, calib, cfg, score_seed)
    write_json(path, report_to_json(scores))
    return scores


def cmd_pack(cfg: RunConfig) -> dict:
    net = load_model(cfg.model)
    calib, _ = load_dataset_pair(cfg.dataset)
    scores = _load_or_compute_scores(net, calib, cfg)
    pack_seed = child_seeds(cfg.seed, 3)[1]
    plan = stage_plan(net, cfg, scores, pack_seed)
    path = write_json(Path(cfg.out_dir) / "plan.json", plan.to_json())
    return {"plan": plan.to_json(), "path": str(path)}


def _load_or_compute_plan(net, calib, cfg) -> PackPlan:
    path = Path(cfg.out_dir) / "plan.json"
    if path.exists():
        return PackPlan.from_json(read_json(path))
    scores = _load_or_compute_scores(net, calib, cfg)
    plan = stage_plan(net, cfg, scores, child_seeds(cfg.seed, 3)[1])
    write_json(path, plan.to_json())
    return plan


def cmd_allocate(cfg: RunConfig) -> dict:
    net = load_model(cfg.model)
    calib, _ = load_dataset_pair(cfg.dataset)
    plan = _load_or_compute_plan(net, calib, cfg)
    scores = _load_or_compute_scores(net, calib, cfg)
    sens, alloc = stage_allocation(net, calib, cfg, plan, scores)
    out = Path(cfg.out_dir)
    if sens is not None:
        write_json(out / "sensitivities.json", sens.to_json())
    path = write_json(out / "allocation.json", alloc.to_json())
    return {"allocation": alloc.to_json(), "path": str(path)}


def _load_or_compute_allocation(net, calib, cfg, plan) -> BitAllocation:
    path = Path(cfg.out_dir) / "allocation.json"
    if path.exists():
        return BitAllocation.from_json(read_json(path))
    scores = _load_or_compute_scores(net, calib, cfg)
    sens, alloc = stage_allocation(net, calib, cfg, plan, scores)
    if sens is not None:
        write_json(Path(cfg.out_dir) / "sensitivities.json", sens.to_json())
    write_json(path, alloc.to_json())
    return alloc


def cmd_quantize(cfg: RunConfig) -> dict:
    """MinMax-only quantization (no reconstruction)."""
    net = load_model(cfg.model)
    calib, test = load_dataset_pair(cfg.dataset)
    plan = _load_or_compute_plan(net, calib, cfg)
    alloc = _load_or_compute_allocation(net, calib, cfg, plan)
    qnet = quantize_network(net, alloc, calib.inputs, calib.labels, cfg.act_bits)
    acc = evaluate_model(qnet, test)
    path = write_json(Path(cfg.out_dir) / "quantized_model.json", qnet.to_document())
    return {"accuracy": acc, "avg_bits": alloc.avg_bits, "path": str(path)}


def cmd_reconstruct(cfg: RunConfig) -> dict:
    net = load_model(cfg.model)
    calib, test = load_dataset_pair(cfg.dataset)
    plan = _load_or_compute_plan(net, calib, cfg)
    alloc = _load_or_compute_allocation(net, calib, cfg, plan)
    recon_seed = child_seeds(cfg.seed, 3)[2]
    qnet, traces = reconstruct_network(net, plan, alloc, calib,
                                       _reconstruction_config(cfg, recon_seed), cfg.act_bits)
    acc = evaluate_model(qnet, test)
    out = Path(cfg.out_dir)
    write_json(out / "traces.json", [t.to_json() for t in traces])
    path = write_json(out / "quantized_model.json", qnet.to_document())
    return {"accuracy": acc, "traces": [t.to_json() for t in traces], "path": str(path)}


def cmd_eval(cfg: RunConfig) -> dict:
    from .quant import quantized_network_from_document

    net = load_model(cfg.model)
    _, test = load_dataset_pair(cfg.dataset)
    result = {"fp_accuracy": evaluate_model(net, test)}
    qpath = Path(cfg.out_dir) / "quantized_model.json"
    if qpath.exists():
        qnet = quantized_network_from_document(read_json(qpath))
        result["quantized_accuracy"] = evaluate_model(qnet, test)
    write_json(Path(cfg.out_dir) / "eval.json", result)
    return result


def cmd_gen_data(spec: DatasetSpec, out_path: str) -> dict:
    calib, test = load_dataset_pair(spec)
    path = write_json(out_path, dataset_to_document(calib, test))
    return {"path": str(path), "n": calib.n, "test_n": test.n,
            "class_count": calib.class_count}


def cmd_gen_model(cfg: RunConfig, out_path: str) -> dict:
    spec = cfg.dataset
    if isinstance(spec, str):
        train_data, _ = load_dataset_pair(spec)
    else:
        train_data, _ = generate_dataset(spec.kind, cfg.train.train_n, cfg.train.train_seed,
                                         class_count=spec.class_count, dim=spec.dim,
                                         test_n=64)
    t = cfg.train
    input_shape = (train_data.inputs.shape[1],)
    net = build_model(t.arch, input_shape=input_shape, class_count=train_data.class_count,
                      seed=cfg.seed, train_data=train_data, min_train_accuracy=t.min_accuracy,
                      train_steps=t.steps, train_batch=t.batch_size, train_lr=t.lr)
    path = write_json(out_path, serialize(net))
    return {"path": str(path), "arch": t.arch,
            "train_accuracy": float(
                (net.logits_np(train_data.inputs).argmax(axis=1) == train_data.labels).mean()
            )}


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def _cell_id(strategy: str, mp: bool) -> str:
    return f"{strategy}-{'mp' if mp else 'uniform'}"


def run_ablation(cfg: RunConfig, grid: list[tuple[str, bool]] | None = None,
                 seeds: list[int] | None = None) -> dict:
    """Run every (strategy, precision) cell with shared seeds.

    Emits a Table-4-style JSON/CSV table plus a plot-data CSV. Cell failures
    are recorded and do not stop other cells.
    """
    grid = grid if grid is not None else list(ABLATION_DEFAULT_GRID)
    seeds = seeds if seeds is not None else [0, 1, 2, 3, 4]
    net = load_model(cfg.model)
    _, test = load_dataset_pair(cfg.dataset)
    fp_acc = evaluate_model(net, test)["accuracy"]

    jobs = []
    for strategy, mp in grid:
        for seed in seeds:
            run_cfg = cfg.model_copy(deep=True)
            run_cfg.packing.strategy = strategy
            run_cfg.mixed_precision = mp
            run_cfg.seed = seed
            run_cfg.out_dir = str(Path(cfg.out_dir) / _cell_id(strategy, mp) / f"seed{seed}")
            jobs.append((strategy, mp, seed, run_cfg))

    def run_one(job):
        strategy, mp, seed, run_cfg = job
        try:
            report = run_pipeline(run_cfg, write_artifacts=False)
            return {
                "cell": _cell_id(strategy, mp), "strategy": strategy, "mp": mp,
                "seed": seed,
                "minmax_accuracy": report["minmax_accuracy"]["accuracy"],
                "accuracy": report["quantized_accuracy"]["accuracy"],
                "avg_bits": report["avg_bits"],
                "packs": report["plan"]["packs"],
            }
        except PackPTQError as e:
            return {"cell": _cell_id(strategy, mp), "strategy": strategy, "mp": mp,
                    "seed": seed, "error": str(e)}

    workers = max(1, int(os.environ.get("PACKPTQ_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, jobs))
    else:
        rows = [run_one(j) for j in jobs]
    rows.sort(key=lambda r: (r["cell"], r["seed"]))

    cells = {}
    for strategy, mp in grid:
        cid = _cell_id(strategy, mp)
        accs = [r["accuracy"] for r in rows if r["cell"] == cid and "accuracy" in r]
        cells[cid] = {
            "strategy": strategy, "mp": mp,
            "median_accuracy": float(np.median(accs)) if accs else None,
            "median_minmax": float(np.median([
                r["minmax_accuracy"] for r in rows if r["cell"] == cid and "accuracy" in r
            ])) if accs else None,
            "errors": [r["error"] for r in rows if r["cell"] == cid and "error" in r],
        }
    table = {
        "config": cfg.model_dump(mode="json"),
        "seeds": seeds,
        "fp_accuracy": fp_acc,
        "rows": rows,
        "cells": cells,
    }

    out = Path(cfg.out_dir)
    write_json(out / "ablation.json", table)
    csv_lines = ["cell,strategy,mp,seed,minmax_accuracy,accuracy,avg_bits"]
    for r in rows:
        if "error" in r:
            csv_lines.append(f"{r['cell']},{r['strategy']},{int(r['mp'])},{r['seed']},,,")
        else:
            csv_lines.append(
                f"{r['cell']},{r['strategy']},{int(r['mp'])},{r['seed']},"
                f"{r['minmax_accuracy']},{r['accuracy']},{r['avg_bits']}"
            )
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
    plot_lines = ["cell,median_accuracy"]
    for cid, cell in sorted(cells.items()):
        if cell["median_accuracy"] is not None:
            plot_lines.append(f"{cid},{cell['median_accuracy']}")
    (out / "plot_data.csv").write_text("\n".join(plot_lines) + "\n")
    return table
