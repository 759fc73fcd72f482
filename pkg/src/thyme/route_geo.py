"""Cluster-based geographic routing: grid cells as virtual nodes.

Greedy cell-level forwarding toward the destination cell's center with a
right-hand-rule perimeter mode around empty regions. A perimeter traversal
that closes its loop without getting closer redirects the message to the
populated cell closest to the destination seen on the loop — that cell is the
destination's proxy. Only stationary nodes forward; moving nodes may
originate and keep receiving.

Node-addressed messages that find their target gone from the destination cell
produce a NACK routed back to the source. Multi-destination messages carry
the destination list and only split when next hops diverge.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from typing import Optional

from .simnet import KIND_CTRL, KIND_DATA, MS, Simulator

BEACON_SIZE = 9      # type + origin + 3-byte location + flags
GEO_HEADER = 13      # type + origin + origin cell + seq + flags + dest count
GEO_DEST_SIZE = 2    # cell
GEO_PERIM_STATE = 8  # perimeter bookkeeping carried on the wire
GEO_FINAL_NODE = 4
NACK_BODY = 10       # referenced message id + failed node + cell

# 8-connected directions in counterclockwise order starting East.
DIRS8 = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0),
         (-1, -1), (0, -1), (1, -1))


class Grid:
    """Fixed cell grid over the deployment area; cells are virtual nodes."""

    def __init__(self, width: float, height: float, cell_size: float = 40.0):
        self.cell_size = cell_size
        self.cols = max(1, math.ceil(width / cell_size))
        self.rows = max(1, math.ceil(height / cell_size))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        col = min(self.cols - 1, max(0, int(x // self.cell_size)))
        row = min(self.rows - 1, max(0, int(y // self.cell_size)))
        return (col, row)

    def center(self, cell) -> tuple[float, float]:
        return ((cell[0] + 0.5) * self.cell_size,
                (cell[1] + 0.5) * self.cell_size)

    def cell_distance(self, a, b) -> float:
        """Euclidean distance between cell centers, meters."""
        return math.hypot((a[0] - b[0]) * self.cell_size,
                          (a[1] - b[1]) * self.cell_size)

    def contains(self, cell) -> bool:
        return 0 <= cell[0] < self.cols and 0 <= cell[1] < self.rows

    def neighbors8(self, cell):
        for dc, dr in DIRS8:
            cand = (cell[0] + dc, cell[1] + dr)
            if self.contains(cand):
                yield cand

    def hash_to_cell(self, key: str) -> tuple[int, int]:
        """Stable uniform-ish mapping of a key to a cell (same result on
        every node and every run)."""
        digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
        idx = int.from_bytes(digest, "big") % (self.cols * self.rows)
        return (idx % self.cols, idx // self.cols)

    @property
    def perimeter_cells(self) -> int:
        return 2 * (self.cols + self.rows)


@dataclass(frozen=True)
class BeaconMsg:
    origin: int
    cell: tuple[int, int]
    eligible: bool

    def wire_size(self) -> int:
        return BEACON_SIZE


@dataclass(frozen=True)
class DestState:
    """Per-destination routing state carried in the message.

    ``cell`` never changes (it is what the payload is addressed to);
    ``proxy_target`` redirects the physical goal once a perimeter loop proves
    the destination cell unpopulated. ``visited`` holds (cell, entered-from)
    pairs of the running perimeter walk; a repeat means the loop closed.
    ``final_node`` makes the destination node-addressed; ``token`` is an
    opaque per-destination discriminator for the upper layer (e.g. which
    subscription an aggregated notification serves).
    """

    cell: tuple[int, int]
    final_node: Optional[int] = None
    token: Optional[int] = None
    mode: str = "greedy"            # greedy | perimeter
    proxy_target: Optional[tuple] = None
    start_dist: float = 0.0
    best_cell: Optional[tuple] = None
    best_dist: float = math.inf
    last_cell: Optional[tuple] = None
    visited: tuple = ()

    def goal(self):
        return self.proxy_target if self.proxy_target is not None else self.cell

    def wire_size(self) -> int:
        size = GEO_DEST_SIZE
        if self.mode == "perimeter":
            size += GEO_PERIM_STATE
        if self.proxy_target is not None:
            size += GEO_DEST_SIZE
        if self.final_node is not None:
            size += GEO_FINAL_NODE
        if self.token is not None:
            size += 4
        return size


@dataclass(frozen=True)
class NackInfo:
    ref_seq: int
    ref_payload: object
    missing_node: int
    dest_cell: tuple[int, int]
    token: Optional[int] = None

    def wire_size(self) -> int:
        return NACK_BODY


@dataclass(frozen=True)
class GeoMsg:
    origin: int
    origin_cell: tuple[int, int]
    seq: int
    payload: object
    dests: tuple[DestState, ...]
    want_nack: bool = False
    is_nack: bool = False
    intra: bool = False
    hops: int = 0
    meters: float = 0.0  # bookkeeping, not on the wire

    def wire_size(self) -> int:
        return GEO_HEADER + sum(d.wire_size() for d in self.dests) \
            + self.payload.wire_size()


@dataclass(frozen=True)
class Delivery:
    """Handed to the stack when a geo message reaches its (proxy) cell or its
    target node."""

    origin: int
    origin_cell: tuple[int, int]
    payload: object
    dest_cell: tuple[int, int]
    arrived_cell: tuple[int, int]
    final_node: Optional[int]
    token: Optional[int]
    hops: int
    meters: float
    intra: bool


class CellView:
    """Beacon-derived neighborhood: node -> (cell, last heard, eligible).

    Forwarding candidates are kept in per-cell buckets maintained on beacon
    arrival; expiry of silent nodes happens on a lazy prune (at most one
    timeout late), so a just-died forwarder may be tried once and recovered
    from by the send-failure path. Node-addressed freshness checks stay
    exact."""

    def __init__(self, timeout_ms: float):
        self.timeout_ms = timeout_ms
        self.entries: dict[int, tuple] = {}
        self._buckets: dict[tuple, set] = {}
        self._last_prune = 0.0

    def update(self, node: int, cell, eligible: bool, now: float):
        old = self.entries.get(node)
        self.entries[node] = (cell, now, eligible)
        if old is not None and (old[0] != cell or old[2] != eligible):
            if old[2]:
                bucket = self._buckets.get(old[0])
                if bucket is not None:
                    bucket.discard(node)
                    if not bucket:
                        del self._buckets[old[0]]
        if eligible and (old is None or old[0] != cell or not old[2]):
            self._buckets.setdefault(cell, set()).add(node)
        if now - self._last_prune > self.timeout_ms:
            self.prune(now)

    def forget(self, node: int):
        entry = self.entries.pop(node, None)
        if entry is not None and entry[2]:
            bucket = self._buckets.get(entry[0])
            if bucket is not None:
                bucket.discard(node)
                if not bucket:
                    del self._buckets[entry[0]]

    def prune(self, now: float):
        self._last_prune = now
        horizon = now - self.timeout_ms
        for node in [n for n, e in self.entries.items() if e[1] < horizon]:
            self.forget(node)

    def fresh(self, node: int, now: float):
        entry = self.entries.get(node)
        if entry is None or entry[1] < now - self.timeout_ms:
            return None
        return entry

    def eligible_by_cell(self, now: float) -> dict:
        """Read-only view of the forwarding candidates per cell."""
        return self._buckets

    def members_of(self, cell, now: float) -> list[int]:
        horizon = now - self.timeout_ms
        bucket = self._buckets.get(cell)
        if not bucket:
            return []
        return sorted(n for n in bucket if self.entries[n][1] >= horizon)


def _octant(dx: float, dy: float) -> int:
    angle = math.atan2(dy, dx)
    return round(angle / (math.pi / 4)) % 8


class GeoRouter:
    """Per-node geographic router.

    deliver(Delivery) fires for messages arriving at this node's cell (or at
    this node as final target); nack(NackInfo) fires at the *source* when a
    node-addressed message could not be handed over.
    """

    def __init__(self, kernel: Simulator, node: int, grid: Grid,
                 deliver, nack, self_eligible):
        self.kernel = kernel
        self.node = node
        self.grid = grid
        self.deliver = deliver
        self.nack = nack
        self.self_eligible = self_eligible
        cfg = kernel.cfg
        self.view = CellView(cfg.beacon_timeout_factor * cfg.beacon_interval * MS)
        self.max_hops = cfg.max_hops_factor * grid.perimeter_cells
        self._seq = 0
        self._cell_cache = None
        self._cell_epoch = -1
        self.drops = 0  # no forwarder / loop guard / mobility gate

    # -- beacons ----------------------------------------------------------------

    def start(self):
        self.kernel.schedule(
            self.kernel.rng.random() * self.kernel.cfg.beacon_interval * MS,
            self._beacon)

    def _beacon(self):
        kernel = self.kernel
        if kernel.alive[self.node]:
            msg = BeaconMsg(self.node, self.my_cell(),
                            bool(self.self_eligible()))
            kernel.broadcast(self.node, msg.wire_size(), msg, kind=KIND_CTRL)
        kernel.schedule(kernel.cfg.beacon_interval * MS, self._beacon)

    def my_cell(self) -> tuple[int, int]:
        epoch = self.kernel._pos_epoch
        if self._cell_epoch != epoch:
            x, y = self.kernel.position(self.node)
            self._cell_cache = self.grid.cell_of(x, y)
            self._cell_epoch = epoch
        return self._cell_cache

    # -- sending ----------------------------------------------------------------

    def route(self, dest_cells, payload, final_node: Optional[int] = None,
              want_nack: bool = False, is_nack: bool = False) -> int:
        """Route a payload to one or more destination cells (optionally to an
        individual node in a single cell). Returns the message seq."""
        if final_node is not None and len(dest_cells) != 1:
            raise ValueError("node-addressed messages take a single cell")
        dests = tuple(DestState(cell=c, final_node=final_node)
                      for c in dict.fromkeys(dest_cells))
        return self._route_dests(dests, payload, want_nack, is_nack)

    def route_multi(self, entries, payload, want_nack: bool = False) -> int:
        """Aggregate-route one payload to several (cell, node, token)
        destinations; the copy splits only where next hops diverge."""
        dests = tuple(DestState(cell=c, final_node=f, token=t)
                      for (c, f, t) in entries)
        return self._route_dests(dests, payload, want_nack, False)

    def _route_dests(self, dests, payload, want_nack, is_nack) -> int:
        self._seq += 1
        msg = GeoMsg(origin=self.node, origin_cell=self.my_cell(),
                     seq=self._seq, payload=payload, dests=dests,
                     want_nack=want_nack, is_nack=is_nack)
        self._process(msg)
        return self._seq

    # -- receiving ----------------------------------------------------------------

    def receive(self, src: int, msg) -> bool:
        if isinstance(msg, BeaconMsg):
            self.view.update(msg.origin, msg.cell, msg.eligible,
                             self.kernel.now)
            return True
        if isinstance(msg, GeoMsg):
            if msg.intra:
                if self.self_eligible() and self.my_cell() == msg.dests[0].cell:
                    self._deliver_local(msg, msg.dests[0])
                return True
            mine = [d for d in msg.dests if d.final_node == self.node]
            rest = [d for d in msg.dests if d.final_node != self.node]
            for dest in mine:
                self._deliver_local(msg, dest)
            if rest:
                if not self.self_eligible():
                    # Stationary nodes only: a mover never relays.
                    self.drops += 1
                    return True
                if mine:
                    msg = dataclasses.replace(msg, dests=tuple(rest))
                self._process(msg)
            return True
        return False

    # -- core forwarding ----------------------------------------------------------

    def _process(self, msg: GeoMsg):
        if msg.hops > self.max_hops:
            self.drops += 1
            return
        my_cell = self.my_cell()
        now = self.kernel.now
        by_cell = self.view.eligible_by_cell(now)
        arrived: list[DestState] = []
        groups: dict[int, list[DestState]] = {}
        handovers: dict[int, list[DestState]] = {}
        for dest in msg.dests:
            if dest.final_node is not None:
                # hand over directly once the target itself is in view and
                # its advertised cell matches where we are heading
                entry = self.view.fresh(dest.final_node, now)
                if entry is not None and entry[0] == dest.goal():
                    handovers.setdefault(dest.final_node, []).append(dest)
                    continue
            if dest.goal() == my_cell:
                arrived.append(dest)
                continue
            step = self._route_step(dest, my_cell, by_cell)
            if step is None:
                self.drops += 1
            elif step[0] == "arrive":
                arrived.append(step[1])
            else:
                groups.setdefault(step[1], []).append(step[2])
        for dest in arrived:
            self._arrive(msg, dest)
        for target, dests in handovers.items():
            self._handover(msg, target, tuple(dests))
        for next_node, dests in groups.items():
            self._send_copy(msg, next_node, tuple(dests))

    def _route_step(self, dest: DestState, my_cell, by_cell, depth: int = 0):
        """One forwarding decision for one destination.

        Returns ('fwd', next_node, new_state), ('arrive', state) when this
        cell turns out to be the destination's proxy, or None when no
        forwarder exists."""
        goal = dest.goal()
        if dest.mode == "perimeter":
            if self.grid.cell_distance(my_cell, goal) < dest.start_dist:
                dest = dataclasses.replace(dest, mode="greedy",
                                           last_cell=None, visited=())
            else:
                return self._perimeter_step(dest, my_cell, by_cell, depth)
        my_dist = self.grid.cell_distance(my_cell, goal)
        step = self._greedy_step(dest, goal, my_dist, by_cell)
        if step is not None:
            return step
        entered = dataclasses.replace(
            dest, mode="perimeter", start_dist=my_dist, last_cell=None,
            visited=(), best_cell=my_cell,
            best_dist=(self.grid.cell_distance(my_cell, dest.cell)
                       if dest.proxy_target is None else math.inf))
        return self._perimeter_step(entered, my_cell, by_cell, depth)

    def _greedy_step(self, dest: DestState, goal, my_dist, by_cell):
        best = None
        for cell, nodes in by_cell.items():
            d = self.grid.cell_distance(cell, goal)
            if d >= my_dist:
                continue
            if best is None or (d, cell) < (best[0], best[1]):
                best = (d, cell, min(nodes))
        if best is None:
            return None
        return ("fwd", best[2],
                dataclasses.replace(dest, mode="greedy", last_cell=None,
                                    visited=()))

    def _perimeter_step(self, dest: DestState, my_cell, by_cell, depth: int):
        state_key = (my_cell, dest.last_cell)
        if state_key in dest.visited:
            # The walk revisited a (cell, entered-from) state: loop closed.
            if dest.proxy_target is not None or depth > 0:
                return None  # void on the way to the proxy itself: give up
            if dest.best_cell == my_cell:
                return ("arrive", dest)
            redirected = DestState(cell=dest.cell,
                                   proxy_target=dest.best_cell)
            return self._route_step(redirected, my_cell, by_cell, depth + 1)
        best_cell, best_dist = dest.best_cell, dest.best_dist
        if dest.proxy_target is None:
            d = self.grid.cell_distance(my_cell, dest.cell)
            # Tie-break by cell id, not encounter order: every entry point
            # walks the same loop, so all sources elect the same proxy.
            if best_cell is None or (d, my_cell) < (best_dist, best_cell):
                best_cell, best_dist = my_cell, d
        nxt = self._right_hand_next(dest, my_cell, by_cell)
        if nxt is None:
            return None
        next_cell, next_node = nxt
        return ("fwd", next_node, dataclasses.replace(
            dest, last_cell=my_cell, visited=dest.visited + (state_key,),
            best_cell=best_cell, best_dist=best_dist))

    def _right_hand_next(self, dest: DestState, my_cell, by_cell):
        """First populated 8-neighbor counterclockwise from the incoming
        edge (or from the goal direction on perimeter entry)."""
        goal = dest.goal()
        if dest.last_cell is not None and dest.last_cell != my_cell:
            d_in = _octant(my_cell[0] - dest.last_cell[0],
                           my_cell[1] - dest.last_cell[1])
            start = (d_in + 4) % 8
        else:
            start = _octant(goal[0] - my_cell[0], goal[1] - my_cell[1])
        for k in range(1, 9):
            d = DIRS8[(start + k) % 8]
            cand = (my_cell[0] + d[0], my_cell[1] + d[1])
            nodes = by_cell.get(cand)
            if nodes:
                return cand, min(nodes)
        return None

    def _send_copy(self, msg: GeoMsg, next_node: int,
                   dests: tuple[DestState, ...],
                   tried: frozenset = frozenset()):
        kernel = self.kernel
        copy = GeoMsg(origin=msg.origin, origin_cell=msg.origin_cell,
                      seq=msg.seq, payload=msg.payload, dests=dests,
                      want_nack=msg.want_nack,
                      is_nack=msg.is_nack, intra=msg.intra,
                      hops=msg.hops + 1,
                      meters=msg.meters + kernel.distance(self.node,
                                                          next_node))
        forwarded = self.node != msg.origin
        kernel.unicast(self.node, next_node, copy.wire_size(), copy,
                       kind=KIND_DATA, forwarded=forwarded,
                       on_fail=lambda: self._send_failed(msg, dests,
                                                         next_node, tried))

    def _send_failed(self, msg: GeoMsg, dests, failed_node: int, tried):
        """MAC gave up on the chosen forwarder: drop it from the view and
        re-route, up to three alternates."""
        if not self.kernel.alive[self.node]:
            return
        self.view.forget(failed_node)
        tried = tried | {failed_node}
        if len(tried) > 3:
            self.drops += len(dests)
            return
        my_cell = self.my_cell()
        by_cell = self.view.eligible_by_cell(self.kernel.now)
        regroup: dict[int, list] = {}
        for dest in dests:
            step = self._route_step(dest, my_cell, by_cell)
            if step is None:
                self.drops += 1
            elif step[0] == "arrive":
                self._arrive(msg, step[1])
            else:
                regroup.setdefault(step[1], []).append(step[2])
        for node, ds in regroup.items():
            self._send_copy(msg, node, tuple(ds), tried)

    # -- arrival ------------------------------------------------------------------

    def _arrive(self, msg: GeoMsg, dest: DestState):
        now = self.kernel.now
        if dest.final_node is not None:
            if dest.final_node == self.node:
                self._deliver_local(msg, dest)
                return
            entry = self.view.fresh(dest.final_node, now)
            if entry is None:
                self._send_nack(msg, dest)
                return
            self._handover(msg, dest.final_node, (dest,))
            return
        self._deliver_local(msg, dest)
        if not msg.intra:
            # First in-cell receiver fans out to the cell, best-effort.
            fanout = dataclasses.replace(
                msg, dests=(DestState(cell=self.my_cell()),), intra=True)
            self.kernel.broadcast(self.node, fanout.wire_size(), fanout,
                                  kind=KIND_DATA)

    def _handover(self, msg: GeoMsg, target: int, dests: tuple):
        copy = dataclasses.replace(
            msg, dests=dests, hops=msg.hops + 1,
            meters=msg.meters + self.kernel.distance(self.node, target))
        self.kernel.unicast(
            self.node, target, copy.wire_size(), copy,
            kind=KIND_DATA, forwarded=self.node != msg.origin,
            on_fail=lambda: self._handover_failed(msg, dests, target))

    def _handover_failed(self, msg: GeoMsg, dests: tuple, target: int):
        if self.kernel.alive[self.node]:
            self.view.forget(target)
            for dest in dests:
                self._send_nack(msg, dest)

    def _send_nack(self, msg: GeoMsg, dest: DestState):
        if not msg.want_nack or msg.is_nack:
            return
        info = NackInfo(ref_seq=msg.seq, ref_payload=msg.payload,
                        missing_node=dest.final_node, dest_cell=dest.cell,
                        token=dest.token)
        self.route([msg.origin_cell], info, final_node=msg.origin,
                   is_nack=True)

    def _deliver_local(self, msg: GeoMsg, dest: DestState):
        payload = msg.payload
        if isinstance(payload, NackInfo):
            self.nack(payload)
            return
        self.deliver(Delivery(origin=msg.origin, origin_cell=msg.origin_cell,
                              payload=payload, dest_cell=dest.cell,
                              arrived_cell=self.my_cell(),
                              final_node=dest.final_node, token=dest.token,
                              hops=msg.hops, meters=msg.meters,
                              intra=msg.intra))
