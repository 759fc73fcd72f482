"""Deterministic discrete-event kernel with an abstract wireless radio.

Unit-disc radio with i.i.d. per-transmission loss. Broadcasts are single-shot
best-effort; unicasts model the MAC retransmission loop analytically by
drawing the attempt count from the truncated geometric distribution, which is
distributionally identical to per-attempt simulation but costs one event.

Determinism: one RNG stream consumed in event order, heap ties broken by
insertion sequence, loss draws per receiver in ascending node id. The same
(config, seed, workload) always yields the same event sequence and counters.
"""

from __future__ import annotations

import heapq
from collections import deque

import numpy as np

from .config import SimConfig

MS = 1000.0  # seconds -> milliseconds

KIND_DATA = 0
KIND_CTRL = 1


class Simulator:
    def __init__(self, cfg: SimConfig, positions, rng):
        """positions: list of (x, y); rng: a seeded random.Random consumed in
        event order by the kernel and every layer above it."""
        self.cfg = cfg
        self.rng = rng
        self.now = 0.0  # ms
        n = len(positions)
        self.n = n
        self.xs = np.array([p[0] for p in positions], dtype=np.float64)
        self.ys = np.array([p[1] for p in positions], dtype=np.float64)
        self.alive = np.ones(n, dtype=bool)
        self.moving = np.zeros(n, dtype=bool)

        # Traffic counters (bytes) and MAC counters
        self.phy_tx = np.zeros(n)
        self.fwd = np.zeros(n)
        self.ctrl = np.zeros(n)
        self.data = np.zeros(n)
        self.retx = np.zeros(n)
        self.mac_retx = np.zeros(n, dtype=np.int64)
        self.mac_fail = np.zeros(n, dtype=np.int64)

        self._heap: list = []
        self._seq = 0
        self._range2 = cfg.radio_range * cfg.radio_range
        self._pos_epoch = 0
        self._nbr_epoch = [-1] * n
        self._nbr_cache: list = [None] * n
        self._recent_tx = deque()  # (time, x, y) for the congestion knob

        self.apps: list = [None] * n
        self._motion_observers: dict[int, list] = {}

    # -- scheduling -----------------------------------------------------------

    def schedule(self, delay_ms: float, fn, *args):
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay_ms, self._seq, -1, fn, args))

    def schedule_node(self, node: int, delay_ms: float, fn, *args):
        """Like schedule(), but the callback is dropped if the node is dead or
        switched off when the event fires."""
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay_ms, self._seq, node, fn, args))

    def run(self, until_ms: float):
        heap = self._heap
        alive = self.alive
        while heap and heap[0][0] <= until_ms:
            time, _, gate, fn, args = heapq.heappop(heap)
            self.now = time
            if gate < 0 or alive[gate]:
                fn(*args)
        self.now = until_ms

    # -- node state -----------------------------------------------------------

    def attach(self, node: int, app):
        self.apps[node] = app

    def set_position(self, node: int, x: float, y: float):
        self.xs[node] = x
        self.ys[node] = y
        self._pos_epoch += 1

    def set_alive(self, node: int, flag: bool):
        if self.alive[node] != flag:
            self.alive[node] = flag
            self._pos_epoch += 1

    def set_moving(self, node: int, flag: bool):
        self.moving[node] = flag

    def position(self, node: int):
        return (float(self.xs[node]), float(self.ys[node]))

    def add_motion_observer(self, node: int, fn):
        self._motion_observers.setdefault(node, []).append(fn)

    def notify_motion(self, event: str, node: int):
        for observer in self._motion_observers.get(node, ()):
            observer(event, node)

    # -- radio ----------------------------------------------------------------

    def neighbors(self, src: int) -> list:
        """Alive nodes within radio range, ascending id (cached per position
        epoch)."""
        if self._nbr_epoch[src] == self._pos_epoch:
            return self._nbr_cache[src]
        dx = self.xs - self.xs[src]
        dy = self.ys - self.ys[src]
        mask = (dx * dx + dy * dy) <= self._range2
        mask &= self.alive
        mask[src] = False
        ids = np.nonzero(mask)[0].tolist()
        self._nbr_epoch[src] = self._pos_epoch
        self._nbr_cache[src] = ids
        return ids

    def in_range(self, a: int, b: int) -> bool:
        dx = self.xs[a] - self.xs[b]
        dy = self.ys[a] - self.ys[b]
        return dx * dx + dy * dy <= self._range2

    def distance(self, a: int, b: int) -> float:
        dx = self.xs[a] - self.xs[b]
        dy = self.ys[a] - self.ys[b]
        return float(np.sqrt(dx * dx + dy * dy))

    def _effective_loss(self, src: int) -> float:
        cfg = self.cfg
        if cfg.congestion_factor <= 0.0:
            return cfg.p_loss
        horizon = self.now - cfg.congestion_window_ms
        recent = self._recent_tx
        while recent and recent[0][0] < horizon:
            recent.popleft()
        x, y = self.xs[src], self.ys[src]
        concurrent = sum(1 for (_, tx, ty) in recent
                         if (tx - x) ** 2 + (ty - y) ** 2 <= self._range2)
        self._recent_tx.append((self.now, x, y))
        return min(cfg.congestion_cap,
                   cfg.p_loss + cfg.congestion_factor * concurrent)

    def _tx_delay_ms(self, size: int) -> float:
        return self.cfg.per_hop_latency_ms + size * 8.0 / (self.cfg.bandwidth_mbps * 1000.0)

    def _charge(self, src: int, size: int, attempts: int, kind: int, forwarded: bool):
        self.phy_tx[src] += attempts * size
        if kind == KIND_CTRL:
            self.ctrl[src] += size
        else:
            self.data[src] += size
        if attempts > 1:
            self.retx[src] += (attempts - 1) * size
            self.mac_retx[src] += attempts - 1
        if forwarded:
            self.fwd[src] += size

    def broadcast(self, src: int, size: int, payload,
                  kind: int = KIND_DATA) -> None:
        """Unacknowledged one-hop broadcast: every alive in-range node
        receives independently with probability 1 - p_loss."""
        self._charge(src, size, 1, kind, False)
        if self.cfg.congestion_factor > 0.0:
            self._effective_loss(src)  # record the transmission
        self.schedule(self._tx_delay_ms(size), self._deliver_broadcast,
                      src, payload)

    def _deliver_broadcast(self, src: int, payload):
        p = self._effective_loss(src) if self.cfg.congestion_factor > 0.0 \
            else self.cfg.p_loss
        rng_random = self.rng.random
        apps = self.apps
        alive = self.alive
        for r in self.neighbors(src):
            if rng_random() < p:
                continue
            if alive[r]:
                app = apps[r]
                if app is not None:
                    app.receive(src, payload)

    def unicast(self, src: int, dst: int, size: int, payload,
                kind: int = KIND_DATA, forwarded: bool = False,
                on_fail=None) -> None:
        """One-hop unicast with MAC-level retransmission.

        Up to 1 + mac_retries attempts, each succeeding with probability
        1 - p_loss while the destination is alive and in range; every attempt
        is charged to the sender. On exhaustion on_fail fires after the full
        attempt train's airtime.
        """
        cfg = self.cfg
        p = self._effective_loss(src)
        max_attempts = 1 + cfg.mac_retries
        reachable = bool(self.alive[dst]) and self.in_range(src, dst)
        attempts = 0
        success = False
        if reachable and p <= 0.0:
            attempts, success = 1, True
        elif reachable:
            rng_random = self.rng.random
            while attempts < max_attempts:
                attempts += 1
                if rng_random() >= p:
                    success = True
                    break
        else:
            attempts = max_attempts
        self._charge(src, size, attempts, kind, forwarded)
        per_attempt = self._tx_delay_ms(size)
        if success:
            self.schedule(attempts * per_attempt, self._deliver_unicast,
                          src, dst, payload)
        else:
            self.mac_fail[src] += 1
            if on_fail is not None:
                self.schedule(max_attempts * per_attempt, on_fail)

    def _deliver_unicast(self, src: int, dst: int, payload):
        if self.alive[dst]:
            app = self.apps[dst]
            if app is not None:
                app.receive(src, payload)

    # -- totals ---------------------------------------------------------------

    def totals(self) -> dict:
        return {
            "phy_tx_bytes": float(self.phy_tx.sum()),
            "fwd_bytes": float(self.fwd.sum()),
            "ctrl_bytes": float(self.ctrl.sum()),
            "data_bytes": float(self.data.sum()),
            "retx_bytes": float(self.retx.sum()),
            "mac_retx": int(self.mac_retx.sum()),
            "mac_fail": int(self.mac_fail.sum()),
        }
