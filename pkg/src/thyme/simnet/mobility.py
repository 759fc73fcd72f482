"""Random-waypoint mobility with coin-toss pauses.

At the end of each pause the node tosses a coin: with probability p_move it
picks a uniform waypoint and walks there in a straight line at a uniform speed
in (0, v_max]; otherwise it pauses again. Positions update on a fixed tick
while in transit; motion observers get 'start', 'tick' and 'arrive' events.

Two hooks keep the geographic materialization's static cell population
invariant: waypoint_ok vetoes waypoints (outside populated cells) and may_move
vetoes departures (sole member of a cell).
"""

from __future__ import annotations

import math

from .kernel import MS, Simulator


class RandomWaypoint:
    def __init__(self, kernel: Simulator, mobile_nodes,
                 waypoint_ok=None, may_move=None):
        self.kernel = kernel
        self.cfg = kernel.cfg
        self.mobile = sorted(mobile_nodes)
        self.waypoint_ok = waypoint_ok
        self.may_move = may_move
        self._legs: dict[int, tuple] = {}  # node -> (x0, y0, x1, y1, t0, t1)

    def start(self):
        """First move decision lands uniformly inside one pause period so the
        population does not toss coins in lockstep."""
        rng = self.kernel.rng
        pause_ms = self.cfg.pause * MS
        for node in self.mobile:
            self.kernel.schedule(rng.random() * pause_ms, self._decide, node)

    def _decide(self, node: int):
        kernel = self.kernel
        cfg = self.cfg
        pause_ms = cfg.pause * MS
        rng = kernel.rng
        if not kernel.alive[node] or rng.random() >= cfg.p_move:
            kernel.schedule(pause_ms, self._decide, node)
            return
        if self.may_move is not None and not self.may_move(node):
            kernel.schedule(pause_ms, self._decide, node)
            return
        target = self._pick_waypoint(rng)
        if target is None:
            kernel.schedule(pause_ms, self._decide, node)
            return
        x0, y0 = kernel.position(node)
        x1, y1 = target
        dist = math.hypot(x1 - x0, y1 - y0)
        speed = (1.0 - rng.random()) * cfg.v_max  # uniform in (0, v_max]
        if dist < 1e-9:
            kernel.schedule(pause_ms, self._decide, node)
            return
        duration_ms = dist / speed * MS
        t0 = kernel.now
        self._legs[node] = (x0, y0, x1, y1, t0, t0 + duration_ms)
        kernel.set_moving(node, True)
        kernel.notify_motion("start", node)
        kernel.schedule(min(cfg.mobility_tick * MS, duration_ms),
                        self._tick, node)

    def _pick_waypoint(self, rng, tries: int = 64):
        cfg = self.cfg
        for _ in range(tries):
            x = rng.random() * cfg.area_width
            y = rng.random() * cfg.area_height
            if self.waypoint_ok is None or self.waypoint_ok(x, y):
                return (x, y)
        return None

    def _tick(self, node: int):
        kernel = self.kernel
        leg = self._legs.get(node)
        if leg is None:
            return
        x0, y0, x1, y1, t0, t1 = leg
        now = kernel.now
        if now >= t1 - 1e-9:
            del self._legs[node]
            kernel.set_position(node, x1, y1)
            kernel.set_moving(node, False)
            kernel.notify_motion("arrive", node)
            kernel.schedule(self.cfg.pause * MS, self._decide, node)
            return
        frac = (now - t0) / (t1 - t0)
        kernel.set_position(node, x0 + (x1 - x0) * frac, y0 + (y1 - y0) * frac)
        kernel.notify_motion("tick", node)
        kernel.schedule(min(self.cfg.mobility_tick * MS, t1 - now),
                        self._tick, node)
