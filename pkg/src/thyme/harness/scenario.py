"""Scenario orchestration: build a network, replay a trace, collect metrics.

Node counts pair with areas to keep roughly two nodes per 40 m cell. Startup
follows a fixed schedule: routing from time zero, application joins spread
over the join window, trace operations afterwards, and a cooldown tail before
shutdown. Topology placement draws from the topology seed; everything else
(loss, jitter, churn instants, mobility) draws from the run seed, so one
(trace, topology, run) triple is fully reproducible.
"""

from __future__ import annotations

import random

from ..dcs import DcsNode
from ..events import RunLog
from ..plsg import PlsgNode
from ..route_geo import Grid
from ..simnet import MS, RandomWaypoint, SimConfig, Simulator, \
    TransientChurn, schedule_permanent
from .trace import TraceOp

# §-style pairing: average two nodes per cell.
AREA_FOR_NODES = {
    16: (160.0, 80.0),
    36: (240.0, 120.0),
    64: (320.0, 160.0),
    100: (400.0, 200.0),
    144: (480.0, 240.0),
    196: (560.0, 280.0),
}

MATERIALIZATIONS = ("plsg", "dcs")


class ScenarioError(ValueError):
    pass


def area_for(node_count: int) -> tuple[float, float]:
    try:
        return AREA_FOR_NODES[node_count]
    except KeyError:
        raise ScenarioError(
            f"no area pairing for {node_count} nodes "
            f"(supported: {sorted(AREA_FOR_NODES)})")


class DownloadPolicy:
    """Notification reaction: immediate download with fixed probability,
    at most one download per (node, object)."""

    def __init__(self, kernel, prob: float):
        self.kernel = kernel
        self.prob = prob
        self._decided: set = set()

    def on_notification(self, app, id_sub: int, metadatas):
        for md in metadatas:
            if md.key.id_owner == app.node:
                continue
            token = (app.node, md.key)
            if token in self._decided:
                continue
            self._decided.add(token)
            if self.prob > 0 and self.kernel.rng.random() < self.prob:
                app.do_download(md)


class Scenario:
    def __init__(self, cfg: SimConfig, materialization: str,
                 trace_meta: dict, trace_ops: list[TraceOp],
                 topology_seed: int, run_seed: int):
        if materialization not in MATERIALIZATIONS:
            raise ScenarioError(f"unknown materialization {materialization!r}")
        self.cfg = cfg
        self.materialization = materialization
        self.meta = trace_meta
        self.ops = trace_ops
        self.topology_seed = topology_seed
        self.run_seed = run_seed
        self.n = int(trace_meta["node_count"])

    # -- build -------------------------------------------------------------------

    def build(self):
        cfg = self.cfg
        topo_rng = random.Random(self.topology_seed)
        positions = [(topo_rng.random() * cfg.area_width,
                      topo_rng.random() * cfg.area_height)
                     for _ in range(self.n)]
        kernel = Simulator(cfg, positions, random.Random(self.run_seed))
        grid = Grid(cfg.area_width, cfg.area_height, cfg.cell_size)
        log = RunLog()
        policy = DownloadPolicy(kernel,
                                float(self.meta.get("download_prob", 0.5)))
        apps = []
        if self.materialization == "plsg":
            def ground(issuer):
                return tuple(i for i in range(self.n)
                             if i != issuer and kernel.alive[i]
                             and apps[i].joined)

            for i in range(self.n):
                apps.append(PlsgNode(kernel, i, log, policy=policy,
                                     ground=ground))
        else:
            for i in range(self.n):
                apps.append(DcsNode(kernel, i, grid, log, policy=policy))
        for i, app in enumerate(apps):
            kernel.attach(i, app)
            app.start_routing()
        # application joins spread across the join window
        for i, app in enumerate(apps):
            at = (cfg.join_start + kernel.rng.random() * cfg.join_length) * MS
            kernel.schedule(at, app.start)
        self.kernel, self.grid, self.log, self.apps = kernel, grid, log, apps
        self.policy = policy
        self._schedule_trace()
        self._setup_churn()
        self._setup_mobility()
        return self

    def _schedule_trace(self):
        for op in self.ops:
            if op.op == "POLICY":
                self.policy.prob = float(op.args[0])
                continue
            self.kernel.schedule(op.time_ms, self._issue, op)

    def _issue(self, op: TraceOp):
        app = self.apps[op.node]
        kind = {"PUB": "publish", "SUB": "subscribe",
                "UNPUB": "unpublish", "UNSUB": "unsubscribe"}[op.op]
        if not self.kernel.alive[op.node]:
            self.log.op_skip(kind, op.node, self.kernel.now)
            return
        if op.op == "PUB":
            id_obj, tags, size = op.args
            app.do_publish(id_obj, tags.split(","), int(size))
        elif op.op == "SUB":
            ref, query, ts_s, ts_e = op.args
            app.do_subscribe(query, self._ts(ts_s), self._ts(ts_e), ref=ref)
        elif op.op == "UNPUB":
            app.do_unpublish(op.args[0])
        elif op.op == "UNSUB":
            app.do_unsubscribe(op.args[0])

    def _ts(self, token: str):
        from ..core import BOTTOM
        if token == "BOT":
            return BOTTOM
        if token == "NOW":
            return None  # the app resolves to its issue time
        return float(token)

    def _setup_churn(self):
        cfg = self.cfg
        if cfg.churn_mode == "none" or cfg.churn_fraction <= 0:
            return
        if cfg.churn_mode == "permanent":
            roles = self.meta.get("roles", "all")
            if roles == "all":
                candidates = list(range(self.n))
            else:
                candidates = [int(x) for x in roles.split(",")]
            count = round(cfg.churn_fraction * len(candidates))
            victims = sorted(self.kernel.rng.sample(candidates, count))
            schedule_permanent(self.kernel, victims)
        else:
            count = round(cfg.churn_fraction * self.n)
            victims = sorted(self.kernel.rng.sample(range(self.n), count))
            churn = TransientChurn(self.kernel, victims,
                                   first_boundary_s=cfg.join_start
                                   + cfg.join_length)
            churn.start()

    def _setup_mobility(self):
        cfg = self.cfg
        if cfg.v_max <= 0:
            return
        kernel, grid = self.kernel, self.grid
        count = round(cfg.mobile_fraction * self.n)
        mobile = sorted(kernel.rng.sample(range(self.n), count))
        populated = {grid.cell_of(*kernel.position(i)) for i in range(self.n)}

        def waypoint_ok(x, y):
            # cell population is static: nodes move among populated cells only
            return grid.cell_of(x, y) in populated

        def may_move(node):
            # the sole resident of a cell stays (it can still move within it,
            # but RWP waypoints here are cross-cell, so it simply pauses)
            cell = grid.cell_of(*kernel.position(node))
            residents = sum(
                1 for j in range(self.n)
                if kernel.alive[j] and not kernel.moving[j]
                and grid.cell_of(*kernel.position(j)) == cell)
            return residents > 1

        self.rwp = RandomWaypoint(kernel, mobile, waypoint_ok=waypoint_ok,
                                  may_move=may_move)
        self.rwp.start()

    # -- run ---------------------------------------------------------------------

    def run(self):
        self.kernel.run(self.cfg.duration * MS)
        self._resolve_flood_coverage()
        return self

    def _resolve_flood_coverage(self):
        """PL/SG flooded operations succeed when they reached every node that
        was alive and joined at issue time (measured from ground truth)."""
        if self.materialization != "plsg":
            return
        for rec in self.log.ops:
            targets = rec.extra.get("targets")
            uid = rec.extra.get("uid")
            if targets is None or uid is None or rec.status != "ok":
                continue
            if rec.kind == "subscribe":
                ok = all(not self.kernel.alive[t]
                         or self.apps[t].store.contains_subscription(uid)
                         for t in targets)
            elif rec.kind == "unsubscribe":
                ok = all(not self.kernel.alive[t]
                         or not self.apps[t].store.contains_subscription(uid)
                         for t in targets)
            else:
                continue
            if not ok:
                rec.status = "fail:coverage"
