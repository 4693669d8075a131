"""Time-varying client graphs as a schedule of binary adjacency matrices.

The diagonal encodes activity: ``adjacency[i][i] == 1`` iff client ``i`` is
on during the slot, and an inactive client has an all-zero row and column.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

CLIENT_NAMES = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

# five-client scenario: all clients on, then client D switched off
TS1 = (
    (1, 1, 1, 0, 0),
    (1, 1, 1, 1, 0),
    (1, 1, 1, 1, 1),
    (0, 1, 1, 1, 0),
    (0, 0, 1, 0, 1),
)
TS2 = (
    (1, 1, 1, 0, 0),
    (1, 1, 1, 0, 0),
    (1, 1, 1, 0, 1),
    (0, 0, 0, 0, 0),
    (0, 0, 1, 0, 1),
)


@dataclass(frozen=True)
class Slot:
    label: str
    adjacency: np.ndarray
    rounds: int


@dataclass(frozen=True)
class ClientView:
    active: bool
    neighbors: frozenset[int]
    scale_k: int


@dataclass(frozen=True)
class TopologySchedule:
    clients: tuple[str, ...]
    slots: tuple[Slot, ...]

    @property
    def n(self) -> int:
        return len(self.clients)

    def query(self, client: int, slot: int) -> ClientView:
        if not 0 <= slot < len(self.slots):
            raise ValueError(f"slot {slot} out of range")
        if not 0 <= client < self.n:
            raise ValueError(f"client {client} out of range")
        adj = self.slots[slot].adjacency
        if adj[client, client] == 0:
            return ClientView(False, frozenset(), 0)
        nbrs = frozenset(int(j) for j in np.flatnonzero(adj[client]) if j != client)
        return ClientView(True, nbrs, 1 + len(nbrs))

    def scales(self, slot: int) -> list[int]:
        return [self.query(i, slot).scale_k for i in range(self.n)]

    def active_clients(self, slot: int) -> list[int]:
        return [i for i in range(self.n) if self.slots[slot].adjacency[i, i] == 1]

    def max_scale(self) -> int:
        return max(max(self.scales(s)) for s in range(len(self.slots)))

    def restricted_to(self, client: int) -> "TopologySchedule":
        """Single-client schedule with the same slot timing, no neighbors."""
        slots = tuple(
            Slot(s.label, np.array([[int(s.adjacency[client, client])]], dtype=np.int8), s.rounds)
            for s in self.slots
        )
        return TopologySchedule((self.clients[client],), slots)

    def to_dict(self) -> dict:
        return {
            "clients": list(self.clients),
            "slots": [
                {"label": s.label, "rounds": s.rounds, "adjacency": s.adjacency.tolist()} for s in self.slots
            ],
        }


def validate_matrix(adj, label: str = "") -> list[str]:
    where = f"slot {label}: " if label else ""
    try:
        a = np.asarray(adj)
    except Exception as exc:  # ragged nested lists
        return [f"{where}adjacency is not a matrix ({exc})"]
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        return [f"{where}adjacency must be a non-empty square matrix, got shape {a.shape}"]
    problems = []
    if not np.isin(a, (0, 1)).all():
        problems.append(f"{where}entries must be 0 or 1")
        return problems
    asym = np.argwhere(a != a.T)
    for i, j in asym:
        if i < j:
            problems.append(f"{where}not symmetric at ({i},{j})")
    for i in range(a.shape[0]):
        if a[i, i] == 0 and (a[i].any() or a[:, i].any()):
            problems.append(f"{where}client {i} is inactive but has links")
    return problems


def validate_schedule(data: dict) -> list[str]:
    """Every problem with a schedule document; empty list means valid."""
    problems = []
    if not isinstance(data, dict):
        return ["schedule must be an object"]
    unknown = set(data) - {"clients", "slots"}
    if unknown:
        problems.append(f"unknown schedule keys: {sorted(unknown)}")
    clients = data.get("clients")
    slots = data.get("slots")
    if isinstance(clients, int):
        n = clients
    elif isinstance(clients, list) and clients:
        n = len(clients)
    else:
        problems.append("clients must be a positive count or a non-empty list of names")
        n = None
    if not isinstance(slots, list) or not slots:
        problems.append("slots must be a non-empty list")
        return problems
    for idx, slot in enumerate(slots):
        label = str(slot.get("label", idx)) if isinstance(slot, dict) else str(idx)
        if not isinstance(slot, dict):
            problems.append(f"slot {label}: must be an object")
            continue
        rounds = slot.get("rounds")
        if not isinstance(rounds, int) or isinstance(rounds, bool) or rounds < 0:
            problems.append(f"slot {label}: rounds must be an integer >= 0 (0 = inference only)")
        adj = slot.get("adjacency")
        if adj is None:
            problems.append(f"slot {label}: missing adjacency")
            continue
        matrix_problems = validate_matrix(adj, label)
        problems += matrix_problems
        if not matrix_problems and n is not None and np.asarray(adj).shape[0] != n:
            problems.append(f"slot {label}: adjacency size {np.asarray(adj).shape[0]} != {n} clients")
    return problems


def schedule_from_dict(data: dict) -> TopologySchedule:
    problems = validate_schedule(data)
    if problems:
        raise ConfigError(problems)
    clients = data["clients"]
    if isinstance(clients, int):
        clients = list(CLIENT_NAMES[:clients]) if clients <= 26 else [str(i) for i in range(clients)]
    slots = tuple(
        Slot(str(s.get("label", f"TS{i + 1}")), np.array(s["adjacency"], dtype=np.int8), s["rounds"])
        for i, s in enumerate(data["slots"])
    )
    return TopologySchedule(tuple(str(c) for c in clients), slots)


def load_schedule(path) -> TopologySchedule:
    with open(path) as f:
        return schedule_from_dict(json.load(f))


def save_schedule(schedule: TopologySchedule, path) -> None:
    Path(path).write_text(json.dumps(schedule.to_dict(), indent=2) + "\n")


def builtin_schedule(name: str, rounds: int, second_rounds: int | None = None) -> TopologySchedule:
    """``ts1`` (fixed topology) or ``ts1-ts2`` (client D leaves after the first slot).

    ``second_rounds`` defaults to ``rounds``; 0 makes the second slot inference only.
    """
    clients = list(CLIENT_NAMES[:5])
    if name == "ts1":
        slots = [{"label": "TS1", "rounds": rounds, "adjacency": TS1}]
    elif name == "ts1-ts2":
        slots = [
            {"label": "TS1", "rounds": rounds, "adjacency": TS1},
            {"label": "TS2", "rounds": rounds if second_rounds is None else second_rounds, "adjacency": TS2},
        ]
    else:
        raise ValueError(f"unknown built-in schedule {name!r}")
    return schedule_from_dict({"clients": clients, "slots": [dict(s, adjacency=[list(r) for r in s["adjacency"]]) for s in slots]})
