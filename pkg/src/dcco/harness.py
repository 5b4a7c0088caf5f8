"""Experiment orchestration: pretraining loop, checkpoints, probes, metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models, optim, probe, protocol
from .config import FEDAVG_METHODS, ExperimentConfig, dump_config
from .data import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    load_dataset,
    make_views,
    stratified_indices,
    synthetic_dataset,
    total_variation,
)
from .errors import InvalidConfig, NumericError, ParseError
from .models import EncoderConfig, ModelParams

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DCCO_OUTPUT_ROOT"
PLOT_COLUMNS = ("round", "loss", "lr", "probe_accuracy")
_CENTRAL_TAG = 0xCE27


@dataclass(frozen=True)
class MetricsRecord:
    round_index: int
    mean_client_loss: float
    lr: float
    wall_ms: float
    probe_accuracy: float | None = None

    def to_json(self) -> str:
        # Wall time lives in timing.jsonl so that metrics files are reproducible.
        body = {"round_index": self.round_index, "mean_client_loss": self.mean_client_loss,
                "lr": self.lr, "probe_accuracy": self.probe_accuracy}
        return json.dumps(body)


@dataclass
class ExperimentResult:
    output_dir: Path
    final_model: ModelParams
    reports: dict
    rounds_completed: int
    failed_at: int | None = None
    probe_errors: dict = dataclasses.field(default_factory=dict)


@dataclass(frozen=True)
class Splits:
    pool: Dataset
    test: Dataset
    pool_indices: np.ndarray
    test_indices: np.ndarray


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def build_splits(config: ExperimentConfig) -> Splits:
    """Pretraining pool and held-out test set, with disjoint global indices."""
    spec = config.dataset
    if spec.format == "synthetic":
        full = synthetic_dataset(spec.classes, spec.dim, spec.n + spec.test_size, spec.seed,
                                 spec.separation, spec.noise, spec.nuisance_rank,
                                 spec.nuisance_scale)
        pool_idx = np.arange(spec.n)
        test_idx = np.arange(spec.n, spec.n + spec.test_size)
        return Splits(full.subset(pool_idx), full.subset(test_idx), pool_idx, test_idx)
    if spec.path is None or spec.test_path is None:
        raise InvalidConfig("file datasets need dataset.path and dataset.test_path", "dataset.path")
    pool = load_dataset(spec.path, spec.format)
    test = load_dataset(spec.test_path, spec.format, num_classes=pool.num_classes)
    pool_idx = np.arange(len(pool))
    test_idx = np.arange(len(pool), len(pool) + len(test))
    return Splits(pool, test, pool_idx, test_idx)


def build_clients(config: ExperimentConfig, pool: Dataset) -> list[protocol.ClientState]:
    p = config.partition
    parts = dirichlet_partition(pool, PartitionSpec(p.num_clients, p.samples_per_client,
                                                    p.alpha, p.seed))
    return [protocol.ClientState(c.client_id, c) for c in parts]


def labeled_subset(splits: Splits, fraction: float, seed: int) -> tuple[Dataset, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1AB])
    idx = stratified_indices(splits.pool.labels, fraction, rng)
    global_idx = splits.pool_indices[idx]
    if np.intersect1d(global_idx, splits.test_indices).size:
        raise AssertionError("labeled training indices overlap the test split")
    return splits.pool.subset(idx), global_idx


def run_probe(encoder: ModelParams, splits: Splits, pc: probe.ProbeConfig) -> probe.EvalReport:
    labeled, _ = labeled_subset(splits, pc.labeled_fraction, pc.seed)
    if pc.protocol == "linear":
        return probe.linear_eval(encoder, labeled, splits.test, pc)
    if pc.protocol == "finetune":
        return probe.finetune(encoder, labeled, splits.test, pc)
    return probe.scratch_baseline(encoder.config, labeled, splits.test, pc)


def _server_optimizer(config: ExperimentConfig) -> optim.OptimizerState:
    so = config.server_optimizer
    return optim.make_optimizer(so.kind, momentum=so.momentum, weight_decay=so.weight_decay,
                                trust_coefficient=so.trust_coefficient)


def server_lr(config: ExperimentConfig, round_index: int) -> float:
    so = config.server_optimizer
    if so.schedule == "constant":
        return so.lr
    return optim.cosine_lr(so.lr, round_index, config.rounds)


def round_config(config: ExperimentConfig, round_index: int) -> protocol.RoundConfig:
    return protocol.RoundConfig(
        clients_per_round=config.clients_per_round,
        local_lr=config.local_lr,
        local_steps=config.local_steps,
        allow_multi_step=config.allow_multi_step,
        server_lr=server_lr(config, round_index),
        lam=config.lam,
        eps=config.eps,
        temperature=config.temperature,
        augment=config.augment,
        dropout_prob=config.dropout_prob,
        workers=config.workers,
    )


def centralized_round(server: protocol.ServerState, pool: Dataset, config: ExperimentConfig):
    """One large-batch step on a uniformly drawn batch of the round's size.

    The pseudo-gradient fed to the server optimizer is ``local_lr * grad``,
    which is what a DCCO round delivers when every sample sits on one client.
    """
    t0 = time.perf_counter()
    batch = config.clients_per_round * config.partition.samples_per_client
    rng = np.random.default_rng([server.rng_seed, server.round_index, _CENTRAL_TAG])
    idx = np.sort(rng.choice(len(pool), size=min(batch, len(pool)), replace=False))
    views = make_views(pool.features[idx], rng, config.augment)
    loss, grads = protocol.centralized_gradients(server.model, views, config.lam, config.eps)
    lr = server_lr(config, server.round_index)
    pseudo = ModelParams(((k, config.local_lr * g) for k, g in grads.items()), server.model.config)
    opt_state, model = optim.apply(server.optimizer, server.model, pseudo, lr)
    trace = protocol.RoundTrace(server.round_index, (), (len(idx),), "", len(idx), loss, lr,
                                {t: 0 for t in protocol.Tag}, 1, time.perf_counter() - t0)
    return dataclasses.replace(server, model=model, optimizer=opt_state,
                               round_index=server.round_index + 1), trace


def _cadence(total: int, fraction: float) -> int:
    return max(1, int(math.ceil(total * fraction)))


def _ckpt_path(out: Path, round_index: int) -> Path:
    return out / "checkpoints" / f"round_{round_index:07d}.ckpt"


def save_checkpoint(out: Path, server: protocol.ServerState) -> Path:
    path = _ckpt_path(out, server.round_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = server.optimizer
    slots = ModelParams(((f"slot/{k}", v) for k, v in opt.slots.items()))
    combined = ModelParams({**{f"model/{k}": v for k, v in server.model.items()}, **slots})
    meta = {"round_index": server.round_index, "rng_seed": server.rng_seed,
            "optimizer": opt.hyperparams(), "encoder_config": server.model.config.to_dict()}
    models.save_params(path, combined, meta)
    return path


def load_checkpoint(path: Path) -> protocol.ServerState:
    combined, meta = models.load_params(path)
    config = EncoderConfig.from_dict(meta["encoder_config"])
    model = ModelParams(((k[6:], v) for k, v in combined.items() if k.startswith("model/")), config)
    slots = {k[5:]: v for k, v in combined.items() if k.startswith("slot/")}
    opt = optim.OptimizerState(**meta["optimizer"], slots=slots)
    return protocol.ServerState(model, opt, meta["round_index"], meta["rng_seed"])


def latest_checkpoint(out: Path) -> Path | None:
    found = sorted((out / "checkpoints").glob("round_*.ckpt"))
    return found[-1] if found else None


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", f"{path}:{lineno}") from None
    return records


def _truncate_jsonl(path: Path, keep_before_round: int) -> None:
    kept = [r for r in _read_jsonl(path) if r["round_index"] < keep_before_round]
    path.write_text("".join(json.dumps(r) + "\n" for r in kept))


def run_experiment(config: ExperimentConfig, resume: bool = False) -> ExperimentResult:
    """Pretrain, checkpoint, probe periodically and at the end, write all artifacts.

    Artifacts under ``config.output_dir``: ``config.yaml``, ``metrics.jsonl``,
    ``timing.jsonl``, ``checkpoints/``, ``final_model.params``,
    ``best_model.params``, ``reports/*.json`` and ``summary.json``.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"

    splits = build_splits(config)
    clients = build_clients(config, splits.pool) if config.method != "centralized_cco" else []
    server = protocol.ServerState(models.init_params(config.encoder, config.seed),
                                  _server_optimizer(config), 0, config.seed)
    ckpt = latest_checkpoint(out) if resume else None
    if ckpt is not None:
        server = load_checkpoint(ckpt)
        logger.info("resuming from %s", ckpt)
    _truncate_jsonl(metrics_path, server.round_index)
    _truncate_jsonl(timing_path, server.round_index)

    linear_probes = [p for p in config.probes if p.protocol == "linear"]
    cadence_probe = linear_probes[0] if linear_probes else None
    ckpt_every = _cadence(config.rounds, config.checkpoint_every)
    probe_every = _cadence(config.rounds, config.probe_every)
    best_acc, best_round = -1.0, None
    for rec in _read_jsonl(metrics_path):
        if rec.get("probe_accuracy") is not None and rec["probe_accuracy"] > best_acc:
            best_acc, best_round = rec["probe_accuracy"], rec["round_index"]

    round_fn = protocol.ROUND_FUNCTIONS.get(config.method)
    failed_at = None
    with metrics_path.open("a") as metrics, timing_path.open("a") as timing:
        while server.round_index < config.rounds:
            r = server.round_index
            try:
                if round_fn is None:
                    server, trace = centralized_round(server, splits.pool, config)
                else:
                    server, trace = round_fn(server, clients, round_config(config, r))
            except NumericError as exc:
                logger.warning("round %d failed: %s", r, exc)
                failed_at = r
                break
            acc = None
            done = server.round_index
            if cadence_probe is not None and (done % probe_every == 0 or done == config.rounds):
                try:
                    acc = run_probe(server.model, splits, cadence_probe).accuracy
                except NumericError as exc:
                    logger.warning("periodic probe after round %d failed: %s", r, exc)
                if acc is not None and acc > best_acc:
                    best_acc, best_round = acc, r
                    models.save_params(out / "best_model.params", server.model, {"round_index": r})
            record = MetricsRecord(r, trace.mean_loss, trace.server_lr, trace.wall_time * 1e3, acc)
            metrics.write(record.to_json() + "\n")
            metrics.flush()
            timing.write(json.dumps({"round_index": r, "wall_ms": record.wall_ms}) + "\n")
            if done % ckpt_every == 0 or done == config.rounds:
                save_checkpoint(out, server)

    models.save_params(out / "final_model.params", server.model, {"round_index": server.round_index})
    # FedAvg baselines overfit, so they are scored at their best
    # periodic checkpoint. DCCO and centralized runs use the final model.
    selected = server.model
    if (config.method in FEDAVG_METHODS or failed_at is not None) and best_round is not None:
        selected, _ = models.load_params(out / "best_model.params")
    reports, probe_errors = {}, {}
    (out / "reports").mkdir(exist_ok=True)
    for i, pc in enumerate(config.probes):
        name = f"{i}_{pc.protocol}"
        try:
            report = run_probe(selected, splits, pc)
        except NumericError as exc:
            probe_errors[name] = str(exc)
            continue
        reports[name] = report
        (out / "reports" / f"{name}.json").write_text(report.to_json())
    summary = {
        "method": config.method,
        "rounds_completed": server.round_index,
        "failed_at": failed_at,
        "best_probe_round": best_round,
        "best_probe_accuracy": best_acc if best_round is not None else None,
        "selected": "best" if selected is not server.model else "final",
        "accuracy": {k: r.accuracy for k, r in reports.items()},
        "probe_errors": probe_errors,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return ExperimentResult(out, server.model, reports, server.round_index, failed_at,
                            probe_errors)


def export_plot_data(metrics_path, out_path) -> int:
    """Write ``round,loss,lr,probe_accuracy`` CSV; returns the record count."""
    records = _read_jsonl(Path(metrics_path))
    with Path(out_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for lineno, rec in enumerate(records, start=1):
            try:
                row = [rec["round_index"], rec["mean_client_loss"], rec["lr"],
                       "" if rec.get("probe_accuracy") is None else rec["probe_accuracy"]]
            except (KeyError, TypeError):
                raise ParseError("record is missing metrics fields", f"{metrics_path}:{lineno}") from None
            writer.writerow(row)
    return len(records)


@dataclass
class EquivalenceTrial:
    trial: int
    clients: int
    counts: list
    dim: int
    max_deviation: float
    passed: bool


def _random_encoder(rng) -> EncoderConfig:
    d = int(rng.choice([2, 4, 8]))
    groups = int(rng.choice([1, 2]))
    hidden = tuple(int(rng.integers(1, 4)) * 4 for _ in range(int(rng.integers(1, 3))))
    return EncoderConfig(input_dim=int(rng.integers(3, 9)), hidden_dims=hidden,
                         projection_dims=(8, d), groups=groups,
                         weight_standardization=bool(rng.integers(0, 2)))


def equivalence_trial(trial: int, seed: int, tolerance: float, lr: float = 1.0) -> EquivalenceTrial:
    """One randomized DCCO round against one centralized step on the union batch."""
    rng = np.random.default_rng([seed, trial])
    k = int(rng.choice([2, 4, 8]))
    counts = [int(rng.integers(1, 6)) for _ in range(k)]
    enc = _random_encoder(rng)
    clients = []
    for cid, n in enumerate(counts):
        x = rng.uniform(-1.0, 1.0, size=(n, enc.input_dim))
        ds = ClientDataset(cid, x, np.zeros(n, dtype=np.int64), np.arange(n), np.ones(1))
        clients.append(protocol.ClientState(cid, ds))
    model = models.init_params(enc, int(rng.integers(2**31)))
    server = protocol.ServerState(model, optim.make_optimizer("sgd"), 0, int(rng.integers(2**31)))
    rc = protocol.RoundConfig(clients_per_round=k, local_lr=lr, server_lr=1.0)
    new_server, _ = protocol.run_dcco_round(server, clients, rc)
    views = [protocol.client_views(c, server.rng_seed, 0, rc.augment) for c in clients]
    pooled = (np.concatenate([v[0] for v in views]), np.concatenate([v[1] for v in views]))
    central = protocol.centralized_cco_step(model, pooled, lr, rc.lam, rc.eps)
    dev = new_server.model.max_abs_diff(central)
    return EquivalenceTrial(trial, k, counts, enc.out_dim, dev, dev <= tolerance)


def verify_equivalence(trials: int = 100, seed: int = 0, tolerance: float = 1e-8,
                       echo=None) -> dict:
    if trials < 1:
        raise InvalidConfig("trials must be >= 1", "trials")
    results = []
    for t in range(trials):
        res = equivalence_trial(t, seed, tolerance)
        results.append(res)
        if echo is not None:
            echo(f"trial {t:3d}  K={res.clients}  N_k={res.counts}  d={res.dim}  "
                 f"max|dparam|={res.max_deviation:.3e}  {'ok' if res.passed else 'FAIL'}")
    worst = max(r.max_deviation for r in results)
    return {
        "trials": [dataclasses.asdict(r) for r in results],
        "max_deviation": worst,
        "tolerance": tolerance,
        "passed": all(r.passed for r in results),
    }


def partition_summary(config: ExperimentConfig) -> dict:
    splits = build_splits(config)
    p = config.partition
    parts = dirichlet_partition(splits.pool, PartitionSpec(p.num_clients, p.samples_per_client,
                                                           p.alpha, p.seed))
    prior = splits.pool.class_histogram() / len(splits.pool)
    single = sum(len(np.unique(c.labels)) == 1 for c in parts)
    tv = [total_variation(c.class_probs, prior) for c in parts]
    return {
        "num_clients": len(parts),
        "samples_per_client": p.samples_per_client,
        "alpha": p.alpha,
        "single_class_fraction": single / len(parts),
        "mean_tv_to_global": float(np.mean(tv)),
        "max_tv_to_global": float(np.max(tv)),
        "fallback_draws": parts.fallbacks,
    }


TREND_METHODS = ("dcco", "fedavg_cco", "fedavg_contrastive")


def compare_methods(base: dict, seeds, output_root, methods=TREND_METHODS, echo=None) -> dict:
    """Pretrain every method per seed and add a supervised-from-scratch baseline.

    ``base`` is a raw config mapping (for example a preset). Each seed sets
    the experiment, partition and dataset seeds together. Returns
    ``{method: {protocol: [accuracy per seed]}}`` with ``"scratch"`` added
    as its own method, trained with the settings of the finetune probe.
    """
    from .config import apply_overrides, config_from_dict

    root = Path(output_root)
    results: dict = {m: {} for m in (*methods, "scratch")}
    for seed in seeds:
        for method in methods:
            raw = apply_overrides(base, [f"method={method}", f"seed={seed}",
                                         f"partition.seed={seed}", f"dataset.seed={seed}"])
            raw["output_dir"] = str(root / f"{method}_seed{seed}")
            # Probes share the seed so every method sees the same labeled subset.
            raw["probes"] = [{**p, "seed": seed} for p in raw.get("probes", [])]
            config = config_from_dict(raw)
            result = run_experiment(config)
            for report in result.reports.values():
                proto = report.config["protocol"]
                results[method].setdefault(proto, []).append(report.accuracy)
            if echo is not None:
                echo(f"seed {seed} {method}: " + ", ".join(
                    f"{r.config['protocol']}={r.accuracy:.3f}" for r in result.reports.values()))
        finetune = [p for p in config.probes if p.protocol == "finetune"]
        pc = dataclasses.replace(finetune[0] if finetune else probe.ProbeConfig(seed=seed),
                                 protocol="scratch")
        splits = build_splits(config)
        report = run_probe(models.init_params(config.encoder, seed), splits, pc)
        results["scratch"].setdefault("scratch", []).append(report.accuracy)
        if echo is not None:
            echo(f"seed {seed} scratch: {report.accuracy:.3f}")
    return results
