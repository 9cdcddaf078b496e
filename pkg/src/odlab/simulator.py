"""Deterministic mesoscopic loading of an OD sequence onto the aggregated network.

Every pair-interval demand M[t, i, j] is cut into k equal packets that depart at
the midpoints of the k observation intervals of t.  A packet is routed on the
shortest path under the travel times in force during its departure interval and
then moves section by section; the time to cross a section is fixed when the
packet enters it, from a BPR curve loaded with the flow that entered the same
section during the previous observation interval.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ModelError, Network, TimeGrid, check_od_sequence

BPR_ALPHA = 0.15
BPR_BETA = 4


class RoutingError(ModelError):
    pass


@dataclass(frozen=True)
class Packet:
    origin: int
    dest: int
    interval: int  # departure estimation interval t
    flow: float
    depart_time: float
    entries: tuple[tuple[int, int], ...]  # (section id, observation interval) in path order


@dataclass(frozen=True)
class TripLog:
    packets: tuple[Packet, ...]
    n_od: int
    n_sec: int
    grid: TimeGrid

    def __len__(self) -> int:
        return len(self.packets)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            head = {"n_od": self.n_od, "n_sec": self.n_sec, "I": self.grid.I, "o": self.grid.o,
                    "delta": self.grid.delta, "interval_seconds": self.grid.interval_seconds}
            fh.write(json.dumps(head) + "\n")
            for p in self.packets:
                fh.write(json.dumps({"od": [p.origin, p.dest], "t": p.interval, "flow": p.flow,
                                     "depart": p.depart_time, "entries": [list(e) for e in p.entries]}) + "\n")

    @classmethod
    def load(cls, path) -> "TripLog":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        grid = TimeGrid(head["I"], head["o"], head["delta"], head["interval_seconds"])
        packets = []
        for line in lines[1:]:
            r = json.loads(line)
            packets.append(Packet(r["od"][0], r["od"][1], r["t"], r["flow"], r["depart"],
                                  tuple(tuple(e) for e in r["entries"])))
        return cls(tuple(packets), head["n_od"], head["n_sec"], grid)


def bpr_time(free_flow: np.ndarray, load: np.ndarray, capacity: np.ndarray) -> np.ndarray:
    return free_flow * (1.0 + BPR_ALPHA * (load / capacity) ** BPR_BETA)


def shortest_tree(network: Network, weights: np.ndarray, origin: int) -> tuple[np.ndarray, np.ndarray]:
    """Dijkstra from ``origin``; equal-cost ties keep the smaller incoming section id.

    Returns (dist, pred_section) with pred_section = -1 for the origin and unreachable nodes.
    """
    out = [[] for _ in range(network.n_od)]
    for s in network.sections:
        out[s.from_node].append(s)
    dist = np.full(network.n_od, np.inf)
    pred = np.full(network.n_od, -1, dtype=int)
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    done = np.zeros(network.n_od, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for s in out[u]:
            nd = d + weights[s.id]
            v = s.to_node
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = s.id
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and s.id < pred[v]:
                pred[v] = s.id
    return dist, pred


def _path(network: Network, pred: np.ndarray, origin: int, dest: int) -> list[int]:
    path = []
    v = dest
    while v != origin:
        s = pred[v]
        if s < 0:
            raise RoutingError(f"no directed path from node {origin} to node {dest}")
        path.append(int(s))
        v = network.sections[s].from_node
    return path[::-1]


def check_reachable(network: Network, seq: np.ndarray) -> None:
    ones = np.ones(network.n_sec)
    for i in range(network.n_od):
        dist, _ = shortest_tree(network, ones, i)
        for j in range(network.n_od):
            if i != j and np.isinf(dist[j]) and np.any(seq[:, i, j] > 0):
                raise RoutingError(f"no directed path from node {i} to node {j}")


def simulate(network: Network, seq: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, TripLog]:
    """Load ``seq`` onto ``network``; returns (counts of shape (o, n_sec), trip log)."""
    seq = check_od_sequence(seq, network.n_od)
    if seq.shape[0] != grid.I:
        raise ModelError(f"sequence has {seq.shape[0]} intervals, grid expects {grid.I}")
    check_reachable(network, seq)
    k, dt = grid.k, grid.interval_seconds
    ff = np.array([s.free_flow_time for s in network.sections])
    cap = np.array([s.capacity for s in network.sections])

    entered: list[np.ndarray] = []  # per observation interval, grows on demand
    times: list[np.ndarray] = []
    trees: dict[tuple[int, int], np.ndarray] = {}

    def interval_of(time: float) -> int:
        return int(math.floor(time / dt))

    def travel_times(tau: int) -> np.ndarray:
        while len(times) <= tau:
            m = len(times)
            load = entered[m - 1] if m > 0 else np.zeros(network.n_sec)
            times.append(bpr_time(ff, load, cap))
        return times[tau]

    def record(tau: int, sec: int, flow: float) -> None:
        while len(entered) <= tau:
            entered.append(np.zeros(network.n_sec))
        entered[tau][sec] += flow

    # heap items: (time, packet index, hop); hop -1 means "departing now"
    specs = []
    heap = []
    for t in range(grid.I):
        for i in range(network.n_od):
            for j in range(network.n_od):
                demand = seq[t, i, j]
                if i == j or demand <= 0:
                    continue
                for s in range(k):
                    dep = (t * k + s + 0.5) * dt
                    heap.append((dep, len(specs), -1))
                    specs.append((i, j, t, demand / k, dep))
    heapq.heapify(heap)
    paths: list[list[int]] = [[] for _ in specs]
    logged: list[list[tuple[int, int]]] = [[] for _ in specs]

    while heap:
        time, pid, hop = heapq.heappop(heap)
        tau = interval_of(time)
        origin, dest, _, flow, _ = specs[pid]
        if hop < 0:
            key = (tau, origin)
            if key not in trees:
                trees[key] = shortest_tree(network, travel_times(tau), origin)[1]
            paths[pid] = _path(network, trees[key], origin, dest)
            hop = 0
        sec = paths[pid][hop]
        record(tau, sec, flow)
        logged[pid].append((sec, tau))
        if hop + 1 < len(paths[pid]):
            heapq.heappush(heap, (time + travel_times(tau)[sec], pid, hop + 1))

    counts = np.zeros((grid.o, network.n_sec))
    for tau, row in enumerate(entered[: grid.o]):
        counts[tau] = row
    packets = tuple(
        Packet(o_, d_, t_, f_, dep_, tuple(logged[p])) for p, (o_, d_, t_, f_, dep_) in enumerate(specs)
    )
    return counts, TripLog(packets, network.n_od, network.n_sec, grid)


def back_calculate(seq: np.ndarray, log: TripLog) -> np.ndarray:
    """Assignment proportions P[tau, t, e, i*n_od + j] of each pair-interval demand.

    Entries past the last observation interval are dropped, matching the counts.
    """
    seq = check_od_sequence(seq, log.n_od)
    n, grid = log.n_od, log.grid
    if seq.shape[0] != grid.I:
        raise ModelError("trip log and sequence disagree on the number of intervals")
    flows = np.zeros((grid.o, grid.I, log.n_sec, n * n))
    for p in log.packets:
        if not seq[p.interval, p.origin, p.dest] > 0:
            raise ModelError(f"trip log has a packet for zero-demand pair {p.origin}->{p.dest} at t={p.interval}")
        col = p.origin * n + p.dest
        for sec, tau in p.entries:
            if tau < grid.o:
                flows[tau, p.interval, sec, col] += p.flow
    demand = seq.reshape(grid.I, n * n)
    P = np.zeros_like(flows)
    np.divide(flows, demand[None, :, None, :], out=P, where=demand[None, :, None, :] > 0)
    return P


def reconstruct_counts(P: np.ndarray, seq: np.ndarray) -> np.ndarray:
    """Counts implied by assignment tensor ``P`` and sequence ``seq``."""
    I = seq.shape[0]
    return np.einsum("atek,tk->ae", P, np.asarray(seq, dtype=float).reshape(I, -1))
