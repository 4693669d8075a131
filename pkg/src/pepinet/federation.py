"""Federated training over a time-varying client graph.

Each round every active client trains its model locally, the server
averages the uploaded parameters (weighted by sample count) and broadcasts
the result back. Proposed-method clients hold the same sub-matrices at
different scales, so their uploads always have the same shapes.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, engine
from .data import ClientData
from .errors import ConfigError, PreconditionError, ShapeError
from .metrics import MetricsLog
from .pepi import ScaledModel, encoder_size, new_scaled_model, rescale
from .topology import TopologySchedule

log = logging.getLogger(__name__)

METHODS = ("baseline1", "baseline2", "baseline3", "proposed")


# ---------------------------------------------------------------------------
# Zero-padded dense model (baselines)


@dataclass
class PaddedDenseModel:
    """Conv encoder shared across views, then plain dense layers over the
    concatenated features of ``max_views`` views. Clients with fewer views
    are padded with all-zero images. With ``max_views == 1`` this is the
    single-view network of the first two baselines."""

    encoder: list[engine.ConvLayer]
    dense: list[engine.DenseLayer]
    activations: tuple[str, ...]
    max_views: int
    scale_k: int = 1
    name: str = field(default="baseline3", compare=False)

    def __post_init__(self):
        if not 1 <= self.scale_k <= self.max_views:
            raise ValueError(f"scale {self.scale_k} outside 1..{self.max_views}")

    @property
    def layers(self) -> list:
        return [*self.encoder, *self.dense]

    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays]

    def with_layers(self, layers: Sequence) -> "PaddedDenseModel":
        n = len(self.encoder)
        return dataclasses.replace(self, encoder=list(layers[:n]), dense=list(layers[n:]))

    def with_params(self, params: Sequence[np.ndarray]) -> "PaddedDenseModel":
        layers, i = [], 0
        for layer in self.layers:
            n = len(layer.arrays)
            layers.append(layer.with_arrays(params[i:i + n]))
            i += n
        return self.with_layers(layers)

    def _forward(self, views: np.ndarray):
        b, k = views.shape[:2]
        if k != self.scale_k:
            raise ShapeError(f"model at scale {self.scale_k} received {k} views")
        if k < self.max_views:
            pad = np.zeros((b, self.max_views - k, *views.shape[2:]), dtype=views.dtype)
            views = np.concatenate([views, pad], axis=1)
        x = views.reshape(b * self.max_views, 1, *views.shape[2:])
        enc_caches = []
        for layer in self.encoder:
            x, c = engine.conv_block_apply(layer.kernels, layer.bias, x)
            enc_caches.append(c)
        enc_shape = x.shape
        h = x.reshape(b, -1)
        caches = []
        for layer, act in zip(self.dense, self.activations):
            h, c = engine.dense_apply(layer.weights, layer.bias, h, act)
            caches.append(c)
        return h, (enc_shape, enc_caches, caches)

    def logits(self, views: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(views))[0]

    def loss_and_grads(self, views: np.ndarray, labels: np.ndarray):
        logits, (enc_shape, enc_caches, caches) = self._forward(np.asarray(views))
        loss, _, g = engine.softmax_cross_entropy(logits, labels)
        dense_grads = []
        for layer, cache in zip(reversed(self.dense), reversed(caches)):
            dw, db, g = engine.dense_backward(layer.weights, cache, g)
            dense_grads.append((dw, db))
        enc_grads = []
        g = g.reshape(enc_shape)
        for layer, cache in zip(reversed(self.encoder), reversed(enc_caches)):
            dk, db, g = engine.conv_block_backward(layer.kernels, cache, g)
            enc_grads.append((dk, db))
        grads = [a for pair in reversed(enc_grads) for a in pair]
        grads += [a for pair in reversed(dense_grads) for a in pair]
        return loss, grads


def new_padded_model(in_shape, conv_channels, widths, max_views, rng, dtype=np.float32,
                     name="baseline3") -> PaddedDenseModel:
    encoder = []
    h, w = in_shape
    c = 1
    for f in conv_channels:
        encoder.append(engine.new_conv_layer(c, f, rng, dtype))
        _, _, h, w = engine.conv_output_shape(h, w)
        c = f
    feat = c * h * w * max_views
    dense = []
    for width in widths:
        dense.append(engine.new_dense_layer(feat, width, rng, dtype))
        feat = width
    acts = tuple(["relu"] * (len(widths) - 1) + ["identity"])
    return PaddedDenseModel(encoder, dense, acts, max_views, 1, name)


def with_scale(model, k: int):
    if isinstance(model, ScaledModel):
        return rescale(model, k)
    return model if model.scale_k == k else dataclasses.replace(model, scale_k=k)


def dense_param_count(model: PaddedDenseModel) -> int:
    return encoder_size(model.encoder) + sum(a.size for layer in model.dense for a in layer.arrays)


# ---------------------------------------------------------------------------
# Clients and aggregation


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.05
    decay: float = 0.99
    train_batch: int = 500
    test_batch: int = 128
    local_epochs: int = 1
    test_every: int = 2


@dataclass
class ClientState:
    client_id: int
    name: str
    model: object
    data: ClientData
    active: bool = True

    @property
    def sample_count(self) -> int:
        return len(self.data.train)

    def views_for(self, split: str) -> np.ndarray:
        s = self.data.train if split == "train" else self.data.test
        return s.first_views(self.model.scale_k)


@dataclass
class LocalUpdate:
    client_id: int
    layers: list
    weight: int
    train_loss: float = float("nan")


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, round_index]))


def local_train(client: ClientState, epochs: int, settings: TrainSettings, start_epoch: int,
                rng: np.random.Generator) -> LocalUpdate:
    """Mini-batch SGD on the client's own multi-view data.

    The learning rate of each epoch follows the global epoch counter, so
    decay continues across rounds.
    """
    if not client.active:
        raise PreconditionError(f"client {client.name} is inactive")
    if client.sample_count == 0:
        raise PreconditionError(f"client {client.name} has no training data")
    model = client.model
    views = client.views_for("train")
    labels = client.data.train.labels
    params = model.params()
    n = len(labels)
    loss_sum, seen = 0.0, 0
    for e in range(epochs):
        schedule = engine.SgdSchedule(settings.lr, settings.decay, start_epoch + e)
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, settings.train_batch):
            idx = np.sort(order[start:start + settings.train_batch])
            loss, grads = model.loss_and_grads(views[idx], labels[idx])
            params = engine.sgd_step(params, grads, schedule)
            model = model.with_params(params)
            loss_sum += loss * len(idx)
            seen += len(idx)
    train_loss = loss_sum / seen if seen else float("nan")
    return LocalUpdate(client.client_id, model.layers, client.sample_count, train_loss)


def aggregate(updates: Sequence[LocalUpdate]) -> list:
    """Sample-weighted elementwise mean of every parameter array.

    Summation runs in ascending client id with a 64-bit accumulator, so the
    result does not depend on the order of ``updates``.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    ref = updates[0].layers
    for u in updates[1:]:
        if len(u.layers) != len(ref):
            raise ShapeError(f"client {u.client_id} uploads {len(u.layers)} layers, expected {len(ref)}")
        for a, b in zip(u.layers, ref):
            if a.kind != b.kind or [x.shape for x in a.arrays] != [x.shape for x in b.arrays]:
                raise ShapeError(f"client {u.client_id} upload shapes differ")
    total = float(sum(u.weight for u in updates))
    if total <= 0:
        raise ValueError("aggregation weights must sum to a positive value")
    out = []
    for li, layer in enumerate(ref):
        arrays = []
        for ai, a in enumerate(layer.arrays):
            acc = np.zeros(a.shape, dtype=np.float64)
            for u in updates:
                acc += float(u.weight) * u.layers[li].arrays[ai].astype(np.float64)
            arrays.append((acc / total).astype(a.dtype))
        out.append(layer.with_arrays(arrays))
    return out


def payload_size(layers: Sequence) -> int:
    """Number of parameter values one client uploads (or receives)."""
    return sum(a.size for layer in layers for a in layer.arrays)


# ---------------------------------------------------------------------------
# Running a schedule


@dataclass(frozen=True)
class Transition:
    slot: str
    client: str
    old_k: int
    new_k: int
    params_identical: bool


@dataclass
class RunResult:
    log: MetricsLog
    transitions: list[Transition] = field(default_factory=list)
    final_layers: list = field(default_factory=list)


def evaluate(model, data_set_views: np.ndarray, labels: np.ndarray, batch: int) -> tuple[float, float]:
    correct, loss_sum = 0, 0.0
    for start in range(0, len(labels), batch):
        sl = slice(start, start + batch)
        logits = model.logits(data_set_views[sl])
        loss, probs, _ = engine.softmax_cross_entropy(logits, labels[sl])
        correct += int((probs.argmax(axis=1) == labels[sl]).sum())
        loss_sum += loss * len(labels[sl])
    n = len(labels)
    return correct / n, loss_sum / n


def _same_params(a, b) -> bool:
    pa, pb = a.params(), b.params()
    return len(pa) == len(pb) and all(
        x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(pa, pb)
    )


def model_scale(method: str, topology_k: int, max_views: int) -> int:
    if method in ("baseline1", "baseline2"):
        return 1
    if method == "baseline3":
        return min(topology_k, max_views)
    return topology_k


def run_schedule(method: str, schedule: TopologySchedule, client_data: Sequence[ClientData], initial_model,
                 settings: TrainSettings, seed: int, aggregation: bool = True,
                 checkpoint_dir: Path | None = None) -> RunResult:
    """Train ``initial_model`` (already built for ``method``) over every slot."""
    if len(client_data) != schedule.n:
        raise ConfigError(f"{len(client_data)} client datasets for {schedule.n} clients")
    max_views = getattr(initial_model, "max_views", None) or schedule.max_scale()
    for i, d in enumerate(client_data):
        need = max(model_scale(method, max(schedule.query(i, s).scale_k, 1), max_views)
                   for s in range(len(schedule.slots)))
        if d.train.k < need or d.test.k < need:
            raise ConfigError(f"client {schedule.clients[i]} needs {need} views, data has {d.train.k}")
    result = RunResult(MetricsLog())
    global_layers = initial_model.layers
    clients: dict[int, ClientState] = {}
    epoch = 0
    round_index = 0
    for s, slot in enumerate(schedule.slots):
        active = schedule.active_clients(s)
        for i in range(schedule.n):
            if i in clients:
                clients[i].active = i in active
        for i in active:
            k = model_scale(method, schedule.query(i, s).scale_k, max_views)
            if i not in clients:
                model = with_scale(initial_model.with_layers(global_layers), k)
                clients[i] = ClientState(i, schedule.clients[i], model, client_data[i])
                continue
            old = clients[i].model
            new = with_scale(old, k)
            if old.scale_k != new.scale_k:
                result.transitions.append(
                    Transition(slot.label, schedule.clients[i], old.scale_k, new.scale_k, _same_params(old, new))
                )
                log.info("slot %s: client %s rescaled %d -> %d", slot.label, schedule.clients[i], old.scale_k, k)
            clients[i].model = new
        if slot.rounds == 0:
            # inference-only slot: evaluate the current global model at the new scales
            for i in active:
                c = clients[i]
                acc, loss = evaluate(c.model, c.views_for("test"), c.data.test.labels, settings.test_batch)
                result.log.add(method, slot.label, 0, epoch, c.name, "accuracy", acc)
                result.log.add(method, slot.label, 0, epoch, c.name, "loss", loss)
        for r in range(1, slot.rounds + 1):
            updates = []
            for i in active:
                rng = client_rng(seed, i, round_index)
                updates.append(local_train(clients[i], settings.local_epochs, settings, epoch, rng))
            epoch += settings.local_epochs
            round_index += 1
            if aggregation:
                global_layers = aggregate(updates)
                for i in active:
                    clients[i].model = clients[i].model.with_layers(global_layers)
            else:
                for u in updates:
                    clients[u.client_id].model = clients[u.client_id].model.with_layers(u.layers)
                global_layers = updates[0].layers if len(updates) == 1 else global_layers
            if r % settings.test_every == 0 or r == slot.rounds:
                for u in updates:
                    c = clients[u.client_id]
                    acc, loss = evaluate(c.model, c.views_for("test"), c.data.test.labels, settings.test_batch)
                    result.log.add(method, slot.label, r, epoch, c.name, "accuracy", acc)
                    result.log.add(method, slot.label, r, epoch, c.name, "loss", loss)
                    result.log.add(method, slot.label, r, epoch, c.name, "train_loss", u.train_loss)
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            checkpoint.save_checkpoint(global_layers, checkpoint_dir / f"{method}-{slot.label}.ckpt")
    result.final_layers = list(global_layers)
    return result
