"""Network abstraction, OD/count tensors and the flow normalizations.

Flattening convention used everywhere in the package: an OD sequence of shape
``(I, n_od, n_od)`` is flattened interval-major, then origin, then destination,
giving a vector of length ``I * n_od**2``.  Global production/attraction
vectors are interval-major, then node (length ``I * n_od``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

Kind = Literal["production", "attraction"]
Provenance = Literal["true", "inferred", "optimized"]

DIST_TOL = 1e-9


class ModelError(ValueError):
    """Raised when a domain object violates its invariants."""


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Section:
    id: int
    from_node: int
    to_node: int
    length: float
    free_flow_speed: float
    capacity: float

    @property
    def free_flow_time(self) -> float:
        return self.length / self.free_flow_speed


@dataclass(frozen=True)
class Network:
    """Aggregated network: OD nodes joined by at most one directed section per ordered pair.

    Node ids must be ``0..n_od-1`` and section ids ``0..n_sec-1``, both in list order.
    """

    od_nodes: tuple[Node, ...]
    sections: tuple[Section, ...]

    def __post_init__(self):
        object.__setattr__(self, "od_nodes", tuple(self.od_nodes))
        object.__setattr__(self, "sections", tuple(self.sections))
        for k, node in enumerate(self.od_nodes):
            if node.id != k:
                raise ModelError(f"node ids must be 0..n_od-1 in order, got {node.id} at {k}")
        seen = set()
        for k, sec in enumerate(self.sections):
            if sec.id != k:
                raise ModelError(f"section ids must be 0..n_sec-1 in order, got {sec.id} at {k}")
            if sec.from_node == sec.to_node:
                raise ModelError(f"section {sec.id} is a self loop")
            for n in (sec.from_node, sec.to_node):
                if not 0 <= n < len(self.od_nodes):
                    raise ModelError(f"section {sec.id} references unknown node {n}")
            if (sec.from_node, sec.to_node) in seen:
                raise ModelError(f"duplicate section {sec.from_node}->{sec.to_node}")
            seen.add((sec.from_node, sec.to_node))
            if not (sec.length > 0 and sec.free_flow_speed > 0 and sec.capacity > 0):
                raise ModelError(f"section {sec.id} has non-positive attributes")

    @property
    def n_od(self) -> int:
        return len(self.od_nodes)

    @property
    def n_sec(self) -> int:
        return len(self.sections)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in self.od_nodes],
            "sections": [
                {
                    "id": s.id,
                    "from_node": s.from_node,
                    "to_node": s.to_node,
                    "length": s.length,
                    "free_flow_speed": s.free_flow_speed,
                    "capacity": s.capacity,
                }
                for s in self.sections
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        try:
            nodes = [Node(int(n["id"]), float(n["x"]), float(n["y"])) for n in doc["nodes"]]
            secs = [
                Section(
                    int(s["id"]),
                    int(s["from_node"]),
                    int(s["to_node"]),
                    float(s["length"]),
                    float(s["free_flow_speed"]),
                    float(s["capacity"]),
                )
                for s in doc["sections"]
            ]
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed network document: {exc!r}") from exc
        return cls(tuple(nodes), tuple(secs))


@dataclass(frozen=True)
class TimeGrid:
    """I estimation intervals, each split into k = o / I observation intervals."""

    I: int
    o: int
    delta: int
    interval_seconds: float = 60.0

    def __post_init__(self):
        if self.I < 1 or self.o < 1 or self.o % self.I:
            raise ModelError(f"o={self.o} must be a positive multiple of I={self.I}")
        if self.delta < 0:
            raise ModelError("delta must be non-negative")
        if self.interval_seconds <= 0:
            raise ModelError("interval_seconds must be positive")

    @property
    def k(self) -> int:
        return self.o // self.I


@dataclass(frozen=True)
class GlobalDistribution:
    values: np.ndarray
    kind: Kind
    provenance: Provenance = "true"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or np.any(v < 0) or abs(v.sum() - 1.0) > DIST_TOL:
            raise ModelError("distribution must be a non-negative vector summing to 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


def check_od_sequence(seq: np.ndarray, n_od: int | None = None) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 3 or seq.shape[1] != seq.shape[2]:
        raise ModelError(f"OD sequence must have shape (I, n, n), got {seq.shape}")
    if n_od is not None and seq.shape[1] != n_od:
        raise ModelError(f"OD sequence has {seq.shape[1]} nodes, network has {n_od}")
    if np.any(seq < 0):
        raise ModelError("OD sequence has negative entries")
    if np.any(np.einsum("tii->ti", seq) != 0):
        raise ModelError("OD sequence has non-zero intra-node demand")
    return seq


def build_incidence(network: Network) -> np.ndarray:
    """Signed node/section incidence: +1 where the section enters the node, -1 where it leaves."""
    N = np.zeros((network.n_od, network.n_sec))
    for sec in network.sections:
        N[sec.to_node, sec.id] = 1.0
        N[sec.from_node, sec.id] = -1.0
    return N


def normalize_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if not total > 0:
        raise ModelError("empty observation")
    return counts / total


def production_attraction(seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    seq = np.asarray(seq, dtype=float)
    return seq.sum(axis=2).reshape(-1), seq.sum(axis=1).reshape(-1)


def to_distribution(flows: np.ndarray, kind: Kind, provenance: Provenance = "true") -> GlobalDistribution:
    flows = np.asarray(flows, dtype=float)
    total = flows.sum()
    if not total > 0:
        raise ModelError("degenerate flows")
    return GlobalDistribution(flows / total, kind, provenance)


def global_distributions(seq: np.ndarray, provenance: Provenance = "true"):
    p, a = production_attraction(seq)
    return to_distribution(p, "production", provenance), to_distribution(a, "attraction", provenance)


# ---------------------------------------------------------------------------
# serialization


def save_network(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network.to_dict(), indent=2) + "\n")


def load_network(path) -> Network:
    return Network.from_dict(json.loads(Path(path).read_text()))


def _write_table(path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def _read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ModelError(f"{path}: empty table")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r[1:]] for r in body], dtype=float)
    return header, data.reshape(len(body), len(header) - 1)


def save_od_sequence(seq: np.ndarray, path) -> None:
    seq = check_od_sequence(seq)
    n = seq.shape[1]
    header = ["interval"] + [f"{i}-{j}" for i in range(n) for j in range(n)]
    _write_table(path, header, ([t] + [repr(float(v)) for v in seq[t].ravel()] for t in range(len(seq))))


def load_od_sequence(path) -> np.ndarray:
    header, data = _read_table(path)
    n = int(round(np.sqrt(len(header) - 1)))
    if n * n != len(header) - 1:
        raise ModelError(f"{path}: column count is not a square")
    return check_od_sequence(data.reshape(-1, n, n))


def save_counts(counts: np.ndarray, path) -> None:
    counts = np.asarray(counts, dtype=float)
    header = ["interval"] + [f"s{e}" for e in range(counts.shape[1])]
    _write_table(path, header, ([t] + [repr(float(v)) for v in row] for t, row in enumerate(counts)))


def load_counts(path) -> np.ndarray:
    _, data = _read_table(path)
    if np.any(data < 0):
        raise ModelError(f"{path}: negative counts")
    return data


def save_distribution(dist: GlobalDistribution, path) -> None:
    doc = {"kind": dist.kind, "provenance": dist.provenance, "values": [float(v) for v in dist.values]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_distribution(path) -> GlobalDistribution:
    try:
        doc = json.loads(Path(path).read_text())
        return GlobalDistribution(np.array(doc["values"], dtype=float), doc["kind"], doc.get("provenance", "true"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: malformed distribution file ({exc})") from exc
