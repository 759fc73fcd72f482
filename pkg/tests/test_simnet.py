"""Kernel radio, mobility and churn against analytic/Monte-Carlo oracles."""

import math
import random

import pytest

from thyme.simnet import MS, SimConfig, Simulator, TransientChurn, \
    schedule_permanent
from thyme.simnet.config import ConfigError
from thyme.simnet.mobility import RandomWaypoint


class Sink:
    def __init__(self):
        self.got = []

    def receive(self, src, msg):
        self.got.append((src, msg))

    def on_rejoin(self):
        pass


class Blob:
    def __init__(self, size):
        self.size = size

    def wire_size(self):
        return self.size


def make_kernel(positions, **over):
    cfg = SimConfig(seed=1).replace(**over)
    kernel = Simulator(cfg, positions, random.Random(cfg.seed))
    sinks = []
    for i in range(len(positions)):
        sink = Sink()
        kernel.attach(i, sink)
        sinks.append(sink)
    return kernel, sinks


class TestBroadcast:
    def test_lossless_reaches_all_in_range(self):
        kernel, sinks = make_kernel([(0, 0), (10, 0), (50, 0), (100, 0)],
                                    p_loss=0.0)
        kernel.broadcast(0, 100, Blob(100))
        kernel.run(50.0)
        assert len(sinks[1].got) == len(sinks[2].got) == len(sinks[3].got) == 1
        assert sinks[0].got == []

    def test_out_of_range_never_receives(self):
        kernel, sinks = make_kernel([(0, 0), (200, 0)], p_loss=0.0)
        for _ in range(20):
            kernel.broadcast(0, 10, Blob(10))
        kernel.run(1000.0)
        assert sinks[1].got == []

    def test_binomial_delivery_rate(self):
        # 1000 broadcasts, one neighbor, p_loss=0.2: expect ~800 within 3 sigma
        kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.2)
        for _ in range(1000):
            kernel.broadcast(0, 10, Blob(10))
        kernel.run(10_000.0)
        got = len(sinks[1].got)
        sigma = math.sqrt(1000 * 0.2 * 0.8)
        assert abs(got - 800) <= 3 * sigma

    def test_bytes_charged_once(self):
        kernel, _ = make_kernel([(0, 0), (10, 0)], p_loss=0.0)
        kernel.broadcast(0, 123, Blob(123))
        kernel.run(50.0)
        assert kernel.phy_tx[0] == 123
        assert kernel.mac_retx[0] == 0


class TestUnicast:
    def test_lossless_first_attempt(self):
        kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.0)
        kernel.unicast(0, 1, 50, Blob(50))
        kernel.run(100.0)
        assert len(sinks[1].got) == 1
        assert kernel.mac_retx[0] == 0
        assert kernel.phy_tx[0] == 50

    def test_dead_destination_fails_after_all_attempts(self):
        kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.0,
                                    mac_retries=7)
        kernel.set_alive(1, False)
        failures = []
        kernel.unicast(0, 1, 50, Blob(50), on_fail=lambda: failures.append(1))
        kernel.run(1000.0)
        assert sinks[1].got == []
        assert failures == [1]
        assert kernel.mac_fail[0] == 1
        assert kernel.phy_tx[0] == 8 * 50  # 1 + mac_retries attempts charged

    def test_monte_carlo_failure_probability(self):
        # p_loss=0.5, 7 retries: failure probability 0.5^8 ~ 0.39%
        kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.5,
                                    mac_retries=7)
        trials = 100_000
        fails = [0]
        for _ in range(trials):
            kernel.unicast(0, 1, 1, Blob(1),
                           on_fail=lambda: fails.__setitem__(0, fails[0] + 1))
        kernel.run(10_000_000.0)
        p_fail = 0.5 ** 8
        sigma = math.sqrt(trials * p_fail * (1 - p_fail))
        assert abs(fails[0] - trials * p_fail) <= 3 * sigma
        assert len(sinks[1].got) == trials - fails[0]

    def test_retransmissions_counted(self):
        kernel, _ = make_kernel([(0, 0), (10, 0)], p_loss=0.5, mac_retries=7)
        for _ in range(2000):
            kernel.unicast(0, 1, 10, Blob(10))
        kernel.run(10_000_000.0)
        # expected attempts per send ~ sum k q^(k-1) p truncated ~ 2
        assert kernel.mac_retx[0] > 0
        assert kernel.phy_tx[0] == 2000 * 10 + kernel.retx[0]


class TestAccounting:
    def test_partition_exact(self):
        kernel, _ = make_kernel([(0, 0), (10, 0), (20, 0)], p_loss=0.3)
        rng = random.Random(3)
        from thyme.simnet import KIND_CTRL, KIND_DATA
        for i in range(500):
            kind = KIND_CTRL if rng.random() < 0.5 else KIND_DATA
            if rng.random() < 0.5:
                kernel.broadcast(0, 10, Blob(10), kind=kind)
            else:
                kernel.unicast(0, 1, 10, Blob(10), kind=kind,
                               forwarded=rng.random() < 0.5)
        kernel.run(1e9)
        totals = kernel.totals()
        assert totals["phy_tx_bytes"] == pytest.approx(
            totals["data_bytes"] + totals["ctrl_bytes"] + totals["retx_bytes"])

    def test_dead_node_inert(self):
        kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.0)
        kernel.set_alive(1, False)
        kernel.broadcast(0, 10, Blob(10))
        fired = []
        kernel.schedule_node(1, 5.0, lambda: fired.append(1))
        kernel.run(100.0)
        assert sinks[1].got == []
        assert fired == []
        # counters frozen
        assert kernel.phy_tx[1] == 0


class TestDeterminism:
    def run_once(self, seed):
        cfg = SimConfig(seed=seed, p_loss=0.2)
        kernel = Simulator(cfg, [(i * 30.0, 0.0) for i in range(10)],
                           random.Random(seed))
        trace = []

        class Recorder:
            def __init__(self, i):
                self.i = i

            def receive(self, src, msg):
                trace.append((kernel.now, src, self.i))
                if len(trace) < 3000 and self.i != src:
                    kernel.broadcast(self.i, 20, Blob(20))

        for i in range(10):
            kernel.attach(i, Recorder(i))
        kernel.broadcast(0, 20, Blob(20))
        kernel.run(5000.0)
        return trace, kernel.totals()

    def test_bit_identical_runs(self):
        t1, m1 = self.run_once(42)
        t2, m2 = self.run_once(42)
        assert t1 == t2
        assert m1 == m2
        t3, _ = self.run_once(43)
        assert t3 != t1

    def test_event_times_nondecreasing(self):
        trace, _ = self.run_once(7)
        times = [t for t, _, _ in trace]
        assert times == sorted(times)


class TestMobility:
    def test_p_move_zero_never_moves(self):
        kernel, _ = make_kernel([(50, 50)], v_max=1.4, p_move=0.0,
                                area_width=100, area_height=100)
        rwp = RandomWaypoint(kernel, [0])
        rwp.start()
        kernel.run(3600 * MS)
        assert kernel.position(0) == (50, 50)
        assert not kernel.moving[0]

    def test_transit_time_bounded_by_vmax(self):
        kernel, _ = make_kernel([(0, 0)], v_max=1.4, p_move=1.0, pause=10.0,
                                area_width=200, area_height=100)
        legs = []
        current = {}

        def observe(event, node):
            if event == "start":
                current["t0"] = kernel.now
                current["from"] = kernel.position(node)
            elif event == "arrive":
                dist = math.dist(current["from"], kernel.position(node))
                legs.append((dist, kernel.now - current["t0"]))

        kernel.add_motion_observer(0, observe)
        rwp = RandomWaypoint(kernel, [0])
        rwp.start()
        kernel.run(3 * 3600 * MS)
        assert legs
        for dist, took_ms in legs:
            # speed <= v_max so the transit takes at least dist / v_max
            assert took_ms >= dist / 1.4 * MS - 1e-6

    def test_waypoints_inside_area(self):
        kernel, _ = make_kernel([(10, 10)], v_max=2.5, p_move=1.0, pause=5.0,
                                area_width=80, area_height=40)
        rwp = RandomWaypoint(kernel, [0])
        rwp.start()
        for _ in range(200):
            kernel.run(kernel.now + 10 * MS)
            x, y = kernel.position(0)
            assert 0 <= x <= 80 and 0 <= y <= 40

    def test_moving_flag_tracks_transit(self):
        kernel, _ = make_kernel([(0, 0)], v_max=1.0, p_move=1.0, pause=20.0,
                                area_width=300, area_height=300)
        states = []
        kernel.add_motion_observer(
            0, lambda ev, node: states.append((ev, bool(kernel.moving[node]))))
        RandomWaypoint(kernel, [0]).start()
        kernel.run(1800 * MS)
        assert ("start", True) in states
        assert ("arrive", False) in states


class TestChurn:
    def test_fraction_zero_identical_trajectory(self):
        def run(with_churn):
            kernel, sinks = make_kernel([(0, 0), (10, 0)], p_loss=0.1)
            if with_churn:
                TransientChurn(kernel, [], first_boundary_s=0).start()
                schedule_permanent(kernel, [])
            for i in range(100):
                kernel.schedule(i * 10.0, kernel.broadcast, 0, 10, Blob(10))
            kernel.run(5000.0)
            return len(sinks[1].got)

        assert run(False) == run(True)

    def test_permanent_crash_freezes_counters(self):
        kernel, _ = make_kernel([(0, 0), (10, 0)], p_loss=0.0,
                                crash_window_start=0.1,
                                crash_window_end=0.2)
        schedule_permanent(kernel, [0])

        def tick():
            if kernel.alive[0]:
                kernel.broadcast(0, 10, Blob(10))
            kernel.schedule(50.0, tick)

        tick()
        kernel.run(10_000.0)
        assert kernel.phy_tx[0] <= 10 * 5  # crashed within 200 ms
        assert not kernel.alive[0]

    def test_transient_on_fraction_matches_markov_oracle(self):
        # Two-state semi-Markov: dwell(on) = 120/p, dwell(off) = 60/p
        # stationary on-fraction = 120 / (120 + 60) = 2/3 (p cancels).
        kernel, _ = make_kernel([(i * 10.0, 0.0) for i in range(64)])
        churn = TransientChurn(kernel, list(range(64)), first_boundary_s=0.0)
        churn.start()
        samples = []

        def probe():
            samples.append(int(kernel.alive.sum()))
            kernel.schedule(30 * MS, probe)

        kernel.schedule(3000 * MS, probe)  # skip the transient-in period
        kernel.run(100_000 * MS)
        on_fraction = sum(samples) / (len(samples) * 64)
        expected = (120 / 0.75) / (120 / 0.75 + 60 / 0.75)
        assert abs(on_fraction - expected) < 0.03


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            SimConfig(p_loss=1.5)
        with pytest.raises(ConfigError):
            SimConfig(churn_mode="sometimes")
        with pytest.raises(ConfigError):
            SimConfig().with_overrides({"not_a_key": 1})

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "sim.conf"
        path.write_text("p_loss = 0.1\nseed=9\n# comment\nv_max=2.5\n")
        cfg = SimConfig.from_file(path)
        assert cfg.p_loss == 0.1
        assert cfg.seed == 9
        assert cfg.v_max == 2.5

    def test_string_coercion(self):
        cfg = SimConfig().with_overrides({"mac_retries": "3",
                                          "churn_mode": "transient"})
        assert cfg.mac_retries == 3
        assert cfg.churn_mode == "transient"
