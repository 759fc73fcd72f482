"""Flooding and DSDV-style multi-hop unicast for the PL/SG materialization.

Floods ride unreliable broadcast: every node rebroadcasts each (origin, seq)
id at most once after a small jitter, with a bounded dedup memory. Unicast
follows a simplified DSDV: periodic full-table broadcasts with even
per-origin sequence numbers; receivers adopt fresher-sequence or
shorter routes. Mid-path losses are dropped silently — recovery belongs to
the layers above.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass

import numpy as np

from .simnet import KIND_CTRL, KIND_DATA, MS, Simulator

FLOOD_HEADER = 9   # type + origin + seq
DV_DATA_HEADER = 14  # type + origin + dst + ttl + seq
DV_DUMP_HEADER = 11  # type + origin + entry count
DV_ENTRY_SIZE = 12  # dest + seq + hops

_BIG = np.int32(2 ** 31 - 1)


@dataclass(frozen=True)
class FloodMsg:
    origin: int
    seq: int
    payload: object

    def wire_size(self) -> int:
        return FLOOD_HEADER + self.payload.wire_size()


@dataclass(frozen=True)
class DvData:
    origin: int
    dst: int
    ttl: int
    seq: int
    payload: object
    meters: float = 0.0  # bookkeeping, not on the wire
    hops: int = 0

    def wire_size(self) -> int:
        return DV_DATA_HEADER + self.payload.wire_size()


@dataclass(frozen=True)
class DvDump:
    origin: int
    seqs: np.ndarray
    hops: np.ndarray

    def wire_size(self) -> int:
        known = int(np.count_nonzero(self.seqs >= 0))
        return DV_DUMP_HEADER + DV_ENTRY_SIZE * known


class FloodRouter:
    """Per-node routing state for the flooding materialization.

    deliver_flood(origin, payload) fires once per flood id; deliver_unicast
    (origin, payload, meters, hops) fires at the unicast destination.
    """

    def __init__(self, kernel: Simulator, node: int,
                 deliver_flood, deliver_unicast):
        self.kernel = kernel
        self.node = node
        self.deliver_flood = deliver_flood
        self.deliver_unicast = deliver_unicast
        n = kernel.n
        self.seqs = np.full(n, -1, dtype=np.int64)
        self.hops = np.full(n, _BIG, dtype=np.int32)
        self.next_hop = np.full(n, -1, dtype=np.int32)
        self.seqs[node] = 0
        self.hops[node] = 0
        self.next_hop[node] = node
        self._own_seq = 0
        self._flood_seq = 0
        self._seen: set = set()
        self._seen_order: deque = deque()
        self.undeliverable = 0

    def start(self):
        """Kick off periodic table dumps with a random initial phase."""
        interval = self.kernel.cfg.dv_update_interval * MS
        self.kernel.schedule(self.kernel.rng.random() * interval,
                             self._dump, )

    # -- DSDV maintenance ------------------------------------------------------

    def _dump(self):
        kernel = self.kernel
        if kernel.alive[self.node]:
            self._own_seq += 2
            self.seqs[self.node] = self._own_seq
            msg = DvDump(self.node, self.seqs.copy(), self.hops.copy())
            kernel.broadcast(self.node, msg.wire_size(), msg, kind=KIND_CTRL)
        kernel.schedule(kernel.cfg.dv_update_interval * MS, self._dump)

    def _merge_dump(self, src: int, dump: DvDump):
        cand_hops = dump.hops + 1
        adopt = (dump.seqs > self.seqs) | \
                ((dump.seqs == self.seqs) & (cand_hops < self.hops))
        adopt &= dump.seqs >= 0
        adopt[self.node] = False
        if adopt.any():
            self.seqs[adopt] = dump.seqs[adopt]
            self.hops[adopt] = cand_hops[adopt]
            self.next_hop[adopt] = src

    def has_route(self, dst: int) -> bool:
        return self.next_hop[dst] >= 0

    def route_hops(self, dst: int) -> int:
        return int(self.hops[dst]) if self.has_route(dst) else -1

    # -- flooding --------------------------------------------------------------

    def flood(self, payload) -> None:
        """Originate a network-wide flood; the local node is not delivered to
        (callers execute local semantics themselves)."""
        self._flood_seq += 1
        msg = FloodMsg(self.node, self._flood_seq, payload)
        self._remember((msg.origin, msg.seq))
        self.kernel.broadcast(self.node, msg.wire_size(), msg, kind=KIND_DATA)

    def _remember(self, flood_id) -> bool:
        if flood_id in self._seen:
            return False
        self._seen.add(flood_id)
        self._seen_order.append(flood_id)
        if len(self._seen_order) > self.kernel.cfg.flood_dedup_capacity:
            self._seen.discard(self._seen_order.popleft())
        return True

    def _rebroadcast(self, msg: FloodMsg):
        self.kernel.broadcast(self.node, msg.wire_size(), msg, kind=KIND_DATA)

    # -- unicast ---------------------------------------------------------------

    def dv_unicast(self, dst: int, payload) -> bool:
        """Send along the current route; False when no route exists at the
        origin. In-flight losses are silent."""
        if dst == self.node:
            self.deliver_unicast(self.node, payload, 0.0, 0)
            return True
        nxt = int(self.next_hop[dst])
        if nxt < 0:
            self.undeliverable += 1
            return False
        msg = DvData(self.node, dst, self.kernel.cfg.hop_limit,
                     self._next_data_seq(), payload,
                     meters=self.kernel.distance(self.node, nxt), hops=1)
        self.kernel.unicast(self.node, nxt, msg.wire_size(), msg,
                            kind=KIND_DATA)
        return True

    def _next_data_seq(self) -> int:
        self._flood_seq += 1
        return self._flood_seq

    def _forward(self, msg: DvData):
        if msg.ttl <= 0:
            return
        nxt = int(self.next_hop[msg.dst])
        if nxt < 0:
            return
        fwd = dataclasses.replace(
            msg, ttl=msg.ttl - 1,
            meters=msg.meters + self.kernel.distance(self.node, nxt),
            hops=msg.hops + 1)
        self.kernel.unicast(self.node, nxt, fwd.wire_size(), fwd,
                            kind=KIND_DATA, forwarded=True)

    # -- dispatch ---------------------------------------------------------------

    def receive(self, src: int, msg) -> bool:
        """Handle a routing-layer message; False if it was not one."""
        if isinstance(msg, FloodMsg):
            if self._remember((msg.origin, msg.seq)):
                self.deliver_flood(msg.origin, msg.payload)
                jitter = self.kernel.rng.random() * self.kernel.cfg.flood_jitter_ms
                self.kernel.schedule_node(self.node, jitter,
                                          self._rebroadcast, msg)
            return True
        if isinstance(msg, DvDump):
            self._merge_dump(src, msg)
            return True
        if isinstance(msg, DvData):
            if msg.dst == self.node:
                self.deliver_unicast(msg.origin, msg.payload,
                                     msg.meters, msg.hops)
            else:
                self._forward(msg)
            return True
        return False
