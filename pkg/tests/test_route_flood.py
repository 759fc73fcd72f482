"""Flooding and DSDV routing against BFS oracles on the connectivity graph."""

import math
import random
from collections import deque

import pytest

from thyme.route_flood import DvDump, FloodRouter
from thyme.simnet import MS, SimConfig, Simulator

import numpy as np


class Blob:
    def __init__(self, size=20, label=None):
        self.size = size
        self.label = label

    def wire_size(self):
        return self.size


class FloodStack:
    def __init__(self, kernel, node):
        self.node = node
        self.floods = []
        self.unicasts = []
        self.router = FloodRouter(kernel, node, self._flood, self._unicast)

    def _flood(self, origin, payload):
        self.floods.append((origin, payload))

    def _unicast(self, origin, payload, meters, hops):
        self.unicasts.append((origin, payload, meters, hops))

    def receive(self, src, msg):
        self.router.receive(src, msg)


def build(positions, **over):
    cfg = SimConfig(seed=5).replace(**over)
    kernel = Simulator(cfg, positions, random.Random(cfg.seed))
    stacks = [FloodStack(kernel, i) for i in range(len(positions))]
    for i, stack in enumerate(stacks):
        kernel.attach(i, stack)
    return kernel, stacks


def bfs_distances(positions, radio_range, src):
    n = len(positions)
    dist = {src: 0}
    frontier = deque([src])
    while frontier:
        u = frontier.popleft()
        for v in range(n):
            if v in dist:
                continue
            if math.dist(positions[u], positions[v]) <= radio_range:
                dist[v] = dist[u] + 1
                frontier.append(v)
    return dist


LINE5 = [(i * 100.0, 0.0) for i in range(5)]


class TestFlood:
    def test_line_topology_all_deliver_once(self):
        kernel, stacks = build(LINE5, p_loss=0.0)
        reachable = bfs_distances(LINE5, kernel.cfg.radio_range, 0)
        stacks[0].router.flood(Blob())
        kernel.run(5 * MS)
        assert set(reachable) == set(range(5))
        for i in range(1, 5):
            assert len(stacks[i].floods) == 1, i
        assert stacks[0].floods == []  # origin executes locally, not via radio

    def test_partitioned_node_never_delivers(self):
        positions = LINE5 + [(1000.0, 1000.0)]
        kernel, stacks = build(positions, p_loss=0.0)
        stacks[0].router.flood(Blob())
        kernel.run(60 * MS)
        assert stacks[5].floods == []

    def test_duplicates_suppressed_on_cycle(self):
        # square: node 3 hears the flood via both sides, delivers once
        square = [(0, 0), (100, 0), (0, 100), (100, 100)]
        kernel, stacks = build(square, p_loss=0.0)
        stacks[0].router.flood(Blob())
        kernel.run(60 * MS)
        assert len(stacks[3].floods) == 1

    def test_termination_rebroadcast_bound(self):
        kernel, stacks = build(LINE5, p_loss=0.0)
        before = float(kernel.phy_tx.sum())
        payload = Blob(20)
        stacks[0].router.flood(payload)
        kernel.run(60 * MS)
        sent = float(kernel.phy_tx.sum()) - before
        msg_size = 9 + 20
        # every alive node transmits the flood at most once
        assert sent <= 5 * msg_size

    def test_dedup_memory_bounded(self):
        kernel, stacks = build([(0, 0), (50, 0)], flood_dedup_capacity=8)
        for _ in range(100):
            stacks[0].router.flood(Blob(1))
        kernel.run(200 * MS)
        assert len(stacks[1].router._seen) <= 8


class TestDsdv:
    def test_tables_bfs_consistent_after_convergence(self):
        kernel, stacks = build(LINE5, p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        # info travels one hop per dump round; diameter 4 needs 5 rounds
        kernel.run(6 * kernel.cfg.dv_update_interval * MS)
        for src in range(5):
            oracle = bfs_distances(LINE5, kernel.cfg.radio_range, src)
            router = stacks[src].router
            for dst in range(5):
                assert router.route_hops(dst) == oracle[dst], (src, dst)

    def test_isolated_node_table_self_only(self):
        kernel, stacks = build([(0, 0), (900, 900)], p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        kernel.run(90 * MS * 1000)
        router = stacks[0].router
        assert router.has_route(0)
        assert not router.has_route(1)

    def test_unicast_follows_shortest_path(self):
        line8 = [(i * 100.0, 0.0) for i in range(8)]
        kernel, stacks = build(line8, p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        kernel.run(9 * kernel.cfg.dv_update_interval * MS)
        assert stacks[0].router.dv_unicast(7, Blob(40, "hi")) is True
        kernel.run(kernel.now + 5 * MS)
        assert len(stacks[7].unicasts) == 1
        origin, payload, meters, hops = stacks[7].unicasts[0]
        assert origin == 0 and payload.label == "hi"
        assert hops == bfs_distances(line8, kernel.cfg.radio_range, 0)[7] == 7
        assert meters == pytest.approx(700.0)

    def test_unknown_destination_undeliverable(self):
        kernel, stacks = build(LINE5, p_loss=0.0)
        assert stacks[0].router.dv_unicast(4, Blob()) is False
        assert stacks[0].router.undeliverable == 1

    def test_crashed_intermediate_silent_drop(self):
        kernel, stacks = build([(0, 0), (100, 0), (200, 0)], p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        kernel.run(4 * kernel.cfg.dv_update_interval * MS)
        kernel.set_alive(1, False)
        # stale route still points through the dead node
        assert stacks[0].router.dv_unicast(2, Blob()) is True
        kernel.run(kernel.now + 1000.0)
        assert stacks[2].unicasts == []

    def test_forward_bytes_only_at_relays(self):
        line3 = [(0, 0), (100, 0), (200, 0)]
        kernel, stacks = build(line3, p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        kernel.run(4 * kernel.cfg.dv_update_interval * MS)
        fwd_before = kernel.fwd.copy()
        stacks[0].router.dv_unicast(2, Blob(40))
        kernel.run(kernel.now + 10 * MS)
        delta = kernel.fwd - fwd_before
        assert delta[0] == 0            # origin does not count as forwarding
        assert delta[1] == 9 + 5 + 40   # relay charged once: header + payload
        assert delta[2] == 0

    def test_control_data_separation(self):
        kernel, stacks = build(LINE5, p_loss=0.0)
        for stack in stacks:
            stack.router.start()
        kernel.run(3 * kernel.cfg.dv_update_interval * MS)
        ctrl_only = float(kernel.ctrl.sum())
        assert ctrl_only > 0
        assert float(kernel.data.sum()) == 0.0
        stacks[0].router.flood(Blob(30))
        kernel.run(kernel.now + 60 * MS)
        assert float(kernel.data.sum()) > 0  # floods are data, not control

    def test_control_bytes_grow_superlinearly(self):
        # table size scales with n, dumps with n: ctrl ~ n * (n entries)
        def ctrl_total(n):
            pos = [(i * 50.0, 0.0) for i in range(n)]
            kernel, stacks = build(pos, p_loss=0.0)
            for stack in stacks:
                stack.router.start()
            kernel.run(20 * kernel.cfg.dv_update_interval * MS)
            return float(kernel.ctrl.sum())

        small, large = ctrl_total(4), ctrl_total(16)
        # analytic: n dumps/round * (11 + 12n) bytes; ratio ~ 13.8 for 4 -> 16
        assert 8.0 < large / small < 20.0

    def test_dump_wire_size(self):
        seqs = np.array([0, -1, 4, 2], dtype=np.int64)
        hops = np.zeros(4, dtype=np.int32)
        assert DvDump(0, seqs, hops).wire_size() == 11 + 3 * 12
