"""Glue between a config and a run: topology, data preparation, model
construction and artifact writing."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import BUILTIN_SCHEDULES, ExperimentConfig
from .data import (ClientData, Dataset, NoiseSpec, load_client_data, load_mnist, make_multiview,
                   partition_indices, synth_blobs)
from .errors import ConfigError
from .federation import (METHODS, RunResult, TrainSettings, dense_param_count, new_padded_model,
                         run_schedule)
from .metrics import MetricsLog, emit_metrics_csv, write_accuracy_svg
from .pepi import count_parameters, new_scaled_model
from .topology import TopologySchedule, builtin_schedule, load_schedule

log = logging.getLogger(__name__)

# stream tags for SeedSequence
_PARTITION, _NOISE, _INIT, _SYNTH = 11, 13, 17, 19


def resolve_schedule(cfg: ExperimentConfig) -> TopologySchedule:
    if cfg.schedule in BUILTIN_SCHEDULES:
        return builtin_schedule(cfg.schedule, cfg.epochs // cfg.local_epochs, cfg.second_slot_rounds)
    return load_schedule(cfg.schedule)


def settings_for(cfg: ExperimentConfig) -> TrainSettings:
    return TrainSettings(cfg.lr, cfg.decay, cfg.train_batch, cfg.test_batch, cfg.local_epochs, cfg.test_every)


def check_method(cfg: ExperimentConfig, method: str, schedule: TopologySchedule) -> None:
    if method == "baseline1" and schedule.n != 1:
        raise ConfigError(
            f"baseline1 is a single client without neighbors; the schedule has {schedule.n} clients "
            "(use `compare`, which restricts baseline1 to the first client)"
        )


@dataclass
class PreparedData:
    clients: list[ClientData]
    source: str
    notes: list[str] = field(default_factory=list)


def _source_data(cfg: ExperimentConfig, n_clients: int) -> tuple[Dataset, Dataset, str]:
    if cfg.dataset == "synth":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SYNTH]))
        total = n_clients * (cfg.train_per_client + cfg.test_per_client)
        full = synth_blobs(cfg.classes, cfg.synth_dim, cfg.synth_separation, cfg.synth_sigma, total, rng)
        n_train = n_clients * cfg.train_per_client
        return full.subset(slice(0, n_train)), full.subset(slice(n_train, None)), "synth"
    return load_mnist(cfg.mnist_dir)


def prepare_data(cfg: ExperimentConfig, schedule: TopologySchedule) -> PreparedData:
    """Disjoint per-client train/test subsets, each image expanded into as
    many noisy views as the largest scale in the schedule."""
    if cfg.data_cache:
        clients = load_client_data(cfg.data_cache)
        if len(clients) != schedule.n:
            raise ConfigError(f"data cache holds {len(clients)} clients, schedule has {schedule.n}")
        return PreparedData(clients, f"cache:{cfg.data_cache}")
    train, test, source = _source_data(cfg, schedule.n)
    k = max(schedule.max_scale(), 1)
    noise = NoiseSpec(cfg.snr_db)
    notes = []
    clients = []
    train_parts = partition_indices(len(train), schedule.n, _seed(cfg.seed, _PARTITION, 0))
    test_parts = partition_indices(len(test), schedule.n, _seed(cfg.seed, _PARTITION, 1))
    for i, (tr, te) in enumerate(zip(train_parts, test_parts)):
        tr, te = tr[:cfg.train_per_client], te[:cfg.test_per_client]
        if len(tr) < cfg.train_per_client or len(te) < cfg.test_per_client:
            notes.append(f"client {schedule.clients[i]}: only {len(tr)} train / {len(te)} test samples available")
        rng_tr = np.random.default_rng(np.random.SeedSequence([cfg.seed, _NOISE, i, 0]))
        rng_te = np.random.default_rng(np.random.SeedSequence([cfg.seed, _NOISE, i, 1]))
        clients.append(ClientData(
            make_multiview(train.images[tr], train.labels[tr], k, noise, rng_tr),
            make_multiview(test.images[te], test.labels[te], k, noise, rng_te),
        ))
    for note in notes:
        log.warning(note)
    return PreparedData(clients, source, notes)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_model(cfg: ExperimentConfig, method: str, in_shape: tuple[int, int], max_views: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _INIT]))
    widths = [*cfg.hidden, cfg.classes]
    if method == "proposed":
        return new_scaled_model(in_shape, cfg.conv_channels, widths, 1, rng)
    if method in ("baseline1", "baseline2"):
        return new_padded_model(in_shape, cfg.conv_channels, widths, 1, rng, name=method)
    wide = [h * max_views for h in cfg.hidden] + [cfg.classes]
    return new_padded_model(in_shape, cfg.conv_channels, wide, max_views, rng, name=method)


def run_method(cfg: ExperimentConfig, method: str, schedule: TopologySchedule, data: PreparedData,
               checkpoint_dir: Path | None = None) -> RunResult:
    """Run one method. ``baseline1`` is restricted to the first client."""
    clients = data.clients
    if method == "baseline1" and schedule.n != 1:
        schedule = schedule.restricted_to(0)
        clients = clients[:1]
    check_method(cfg, method, schedule)
    in_shape = clients[0].train.views.shape[2:]
    model = build_model(cfg, method, in_shape, schedule.max_scale())
    return run_schedule(method, schedule, clients, model, settings_for(cfg), cfg.seed,
                        aggregation=method != "baseline1", checkpoint_dir=checkpoint_dir)


def param_report(cfg: ExperimentConfig, schedule: TopologySchedule, in_shape=(28, 28)) -> dict:
    """Trainable and effective parameter counts for every method."""
    kmax = max(schedule.max_scale(), 1)
    out = {}
    proposed = build_model(cfg, "proposed", in_shape, kmax)
    per_k = {}
    for k in range(1, kmax + 1):
        r = count_parameters(proposed, k)
        per_k[str(k)] = {"trainable": r.trainable, "effective": r.effective, "ratio": r.ratio,
                         "trainable_weights": r.trainable_weights, "effective_weights": r.effective_weights,
                         "weight_ratio": r.weight_ratio, "encoder": r.encoder}
    out["proposed"] = {"trainable": count_parameters(proposed, 1).trainable, "by_scale": per_k}
    for method in ("baseline1", "baseline2", "baseline3"):
        m = build_model(cfg, method, in_shape, kmax)
        n = dense_param_count(m)
        out[method] = {"trainable": n, "effective": n, "max_views": m.max_views}
    out["baseline3_over_proposed"] = out["baseline3"]["trainable"] / out["proposed"]["trainable"]
    return out


def _write_manifest(path: Path, cfg: ExperimentConfig, command: str, extra: dict) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def execute(cfg: ExperimentConfig, methods, out_dir, command: str, svg: bool = True) -> MetricsLog:
    """Run ``methods`` sequentially on shared data and write metrics.csv,
    manifest.json, accuracy.svg and per-slot checkpoints into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = resolve_schedule(cfg)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
        if command == "train":
            check_method(cfg, m, schedule)
    data = prepare_data(cfg, schedule)
    metrics = MetricsLog()
    wall, transitions = {}, {}
    for m in methods:
        t0 = time.perf_counter()
        result = run_method(cfg, m, schedule, data, checkpoint_dir=out / "checkpoints")
        wall[m] = round(time.perf_counter() - t0, 3)
        metrics.extend(result.log)
        transitions[m] = [t.__dict__ for t in result.transitions]
        log.info("%s finished in %.1fs", m, wall[m])
    emit_metrics_csv(metrics, out / "metrics.csv")
    if svg and len(metrics):
        write_accuracy_svg(metrics, out / "accuracy.svg")
    _write_manifest(out / "manifest.json", cfg, command, {
        "methods": list(methods),
        "data_source": data.source,
        "data_notes": data.notes,
        "schedule": schedule.to_dict(),
        "wall_time_s": wall,
        "transitions": transitions,
    })
    return metrics
