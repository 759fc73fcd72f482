"""DCS materialization: tag-indexed brokering, replication, location-aware
downloads, per-operation retransmission, NACK-driven notification recovery."""

import random

from thyme.core import BOTTOM, ObjectKey
from thyme.events import RunLog
from thyme.dcs import DcsNode
from thyme.route_geo import Grid
from thyme.simnet import MS, SimConfig, Simulator


def build(cols, rows, per_cell=2, **over):
    """Grid network, per_cell nodes per cell, apps started and joined."""
    defaults = dict(p_loss=0.0, op_timeout=0.5, seed=7,
                    area_width=cols * 40.0, area_height=rows * 40.0)
    defaults.update(over)
    cfg = SimConfig(**defaults)
    grid = Grid(cfg.area_width, cfg.area_height)
    positions = []
    cell_nodes = {}
    for r in range(rows):
        for c in range(cols):
            for k in range(per_cell):
                x = c * 40.0 + 14.0 + (k % 2) * 12.0
                y = r * 40.0 + 14.0 + (k // 2) * 12.0
                cell_nodes.setdefault((c, r), []).append(len(positions))
                positions.append((x, y))
    kernel = Simulator(cfg, positions, random.Random(cfg.seed))
    log = RunLog()
    apps = []
    for i in range(len(positions)):
        app = DcsNode(kernel, i, grid, log, policy=None)
        apps.append(app)
        kernel.attach(i, app)
        app.start_routing()
    for i, app in enumerate(apps):
        kernel.schedule(1500.0 + i * 5.0, app.start)
    kernel.run(12_000.0)
    assert all(app.joined for app in apps)
    return kernel, grid, apps, cell_nodes, log


def run_ms(kernel, ms):
    kernel.run(kernel.now + ms)


class TestPublish:
    def test_metadata_lands_on_tag_cells(self):
        kernel, grid, apps, cells, log = build(4, 3)
        pub = apps[0]
        pub.do_publish("beach.jpg", ["beach", "summer"], 120)
        run_ms(kernel, 3000.0)
        key = ObjectKey("beach.jpg", 0)
        for tag in ("beach", "summer"):
            cell = grid.hash_to_cell(tag)
            holders = [m for m in cells[cell]
                       if apps[m].store.contains_publication(key)]
            assert holders, (tag, cell)
        assert log.op_stats()["publish"]["completed"] == 1

    def test_active_replication_inside_cell(self):
        kernel, grid, apps, cells, log = build(3, 3, per_cell=3)
        publisher = cells[(1, 1)][0]
        apps[publisher].do_publish("p", ["x"], 64)
        run_ms(kernel, 2000.0)
        key = ObjectKey("p", publisher)
        for member in cells[(1, 1)]:
            assert key in apps[member].active_replicas, member
        md = apps[publisher].own_pub_md["p"]
        nodes_in_list = {n for n, _ in md.replication_list}
        assert nodes_in_list == set(cells[(1, 1)])

    def test_same_hash_cell_single_destination(self):
        kernel, grid, apps, cells, log = build(4, 3)
        # find two tags hashing to one cell
        tags = {}
        a = b = None
        for i in range(200):
            cell = grid.hash_to_cell(f"t{i}")
            if cell in tags:
                a, b = tags[cell], f"t{i}"
                break
            tags[cell] = f"t{i}"
        assert a is not None
        apps[0].do_publish("p", [a, b], 10)
        run_ms(kernel, 2000.0)
        assert log.op_stats()["publish"]["completed"] == 1


class TestRendezvous:
    def test_overlapping_tag_guarantees_match(self):
        kernel, grid, apps, cells, log = build(4, 3)
        apps[0].do_publish("p1", ["beach", "summer"], 50)
        run_ms(kernel, 1500.0)
        apps[5].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 3000.0)
        assert (5, 0, ObjectKey("p1", 0)) in log.notif_recv

    def test_future_subscription_notified_on_publish(self):
        kernel, grid, apps, cells, log = build(4, 3)
        apps[5].do_subscribe("beach", kernel.now, BOTTOM)
        run_ms(kernel, 1500.0)
        apps[0].do_publish("p1", ["beach"], 50)
        run_ms(kernel, 3000.0)
        assert (5, 0, ObjectKey("p1", 0)) in log.notif_recv

    def test_multi_clause_two_brokers(self):
        kernel, grid, apps, cells, log = build(4, 3)
        apps[3].do_subscribe("beach | ice", BOTTOM, BOTTOM)
        run_ms(kernel, 2000.0)
        uid = (3, 0)
        stored_cells = set()
        for (c, r), members in cells.items():
            if any(apps[m].store.contains_subscription(uid) for m in members):
                stored_cells.add((c, r))
        expected = {grid.hash_to_cell("beach"), grid.hash_to_cell("ice")}
        assert stored_cells == expected

    def test_batched_past_with_fetch_more(self):
        kernel, grid, apps, cells, log = build(4, 3, batch_n=4)
        for i in range(11):
            apps[0].do_publish(f"p{i}", ["beach"], 10)
            run_ms(kernel, 50.0)
        run_ms(kernel, 2000.0)
        apps[7].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 5000.0)
        got = {k.id_obj for (_, _, k) in log.notif_recv}
        assert got == {f"p{i}" for i in range(11)}


class TestDownload:
    def setup_published(self, **over):
        kernel, grid, apps, cells, log = build(4, 3, **over)
        apps[0].do_publish("obj", ["beach"], 200)
        run_ms(kernel, 1500.0)
        apps[9].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 3000.0)
        md = [m for (_, _, k) in log.notif_recv
              for m in [None] if k == ObjectKey("obj", 0)]
        return kernel, grid, apps, cells, log

    def test_download_from_replica_and_passive_spread(self):
        kernel, grid, apps, cells, log = self.setup_published()
        md = apps[0].own_pub_md["obj"]
        apps[9].do_download(md)
        run_ms(kernel, 4000.0)
        stats = log.op_stats()["download"]
        assert stats["completed"] == 1
        key = ObjectKey("obj", 0)
        assert key in apps[9].passive_replicas
        assert log.replica_announces == 1
        # the tag cell's replication list now lists the downloader
        run_ms(kernel, 2000.0)
        cell = grid.hash_to_cell("beach")
        listed = set()
        for m in cells[cell]:
            rec = apps[m].store.get_publication(key)
            if rec is not None:
                listed |= {n for n, _ in rec.metadata.replication_list}
        assert 9 in listed

    def test_owner_dead_active_cell_serves(self):
        kernel, grid, apps, cells, log = self.setup_published(per_cell=3)
        md = apps[0].own_pub_md["obj"]
        kernel.set_alive(0, False)
        run_ms(kernel, 4000.0)  # let stale beacons expire
        apps[9].do_download(md)
        run_ms(kernel, 8000.0)
        stats = log.op_stats()["download"]
        assert stats["completed"] == 1

    def test_all_replicas_gone_exhausted(self):
        kernel, grid, apps, cells, log = self.setup_published()
        md = apps[0].own_pub_md["obj"]
        for member in cells[grid.cell_of(*kernel.position(0))]:
            kernel.set_alive(member, False)
        run_ms(kernel, 4000.0)
        apps[9].do_download(md)
        run_ms(kernel, 15_000.0)
        recs = [r for r in log.ops if r.kind == "download"]
        assert recs and recs[-1].status == "fail:exhausted"

    def test_closest_replica_tried_first(self):
        kernel, grid, apps, cells, log = build(6, 1, per_cell=2)
        publisher = cells[(5, 0)][0]
        apps[publisher].do_publish("o", ["beach"], 50)
        run_ms(kernel, 2000.0)
        md = apps[publisher].own_pub_md["o"]
        # fake a nearby passive replica in the requester's own column
        near = cells[(1, 0)][0]
        apps[near].passive_replicas[md.key] = (md, bytes(50))
        md2 = md.with_replicas(md.replication_list + ((near, (1, 0)),))
        requester = cells[(0, 0)][0]
        data_before = float(kernel.data.sum())
        apps[requester].do_download(md2)
        run_ms(kernel, 3000.0)
        assert log.op_stats()["download"]["completed"] == 1
        meters = log.download_paths[-1][0]
        assert meters < 150.0  # served from the adjacent cell, not from (5,0)


class TestUnops:
    def test_unpublish_removes_broker_entries_and_active(self):
        kernel, grid, apps, cells, log = build(4, 3, per_cell=3)
        apps[0].do_publish("p", ["beach"], 42)
        run_ms(kernel, 2000.0)
        apps[0].do_unpublish("p")
        run_ms(kernel, 3000.0)
        key = ObjectKey("p", 0)
        cell = grid.hash_to_cell("beach")
        for m in cells[cell]:
            assert not apps[m].store.contains_publication(key)
        for m in cells[grid.cell_of(*kernel.position(0))]:
            assert key not in apps[m].active_replicas
        # a later past subscription sees nothing
        apps[5].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 3000.0)
        assert log.notif_recv == {}

    def test_passive_replica_survives_unpublish(self):
        kernel, grid, apps, cells, log = build(4, 3)
        apps[0].do_publish("p", ["beach"], 42)
        run_ms(kernel, 1500.0)
        md = apps[0].own_pub_md["p"]
        apps[9].do_download(md)
        run_ms(kernel, 3000.0)
        key = ObjectKey("p", 0)
        assert key in apps[9].passive_replicas
        apps[0].do_unpublish("p")
        run_ms(kernel, 3000.0)
        assert key in apps[9].passive_replicas   # bytes deliberately kept
        assert key not in apps[0].active_replicas

    def test_unsubscribe_removes_broker_state(self):
        kernel, grid, apps, cells, log = build(4, 3)
        apps[3].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 2000.0)
        apps[3].do_unsubscribe(0)
        run_ms(kernel, 2000.0)
        apps[0].do_publish("p", ["beach"], 10)
        run_ms(kernel, 3000.0)
        assert log.notif_recv == {}
        stats = log.op_stats()
        assert stats["unsubscribe"]["completed"] == 1


class TestJoin:
    def test_joiner_receives_cell_state(self):
        kernel, grid, apps, cells, log = build(4, 3, per_cell=2)
        apps[0].do_publish("p", ["beach"], 30)
        run_ms(kernel, 2000.0)
        cell = grid.hash_to_cell("beach")
        member = cells[cell][0]
        peer = cells[cell][1]
        key = ObjectKey("p", 0)
        assert apps[member].store.contains_publication(key)
        # wipe one member and make it rejoin: state comes back from the peer
        apps[member].store = type(apps[member].store)()
        assert not apps[member].store.contains_publication(key)
        apps[member].on_rejoin()
        run_ms(kernel, 6000.0)
        assert apps[member].store.contains_publication(key)

    def test_alone_in_empty_cell(self):
        kernel, grid, apps, cells, log = build(2, 1, per_cell=1)
        # single node per cell: joins complete in alone mode
        assert all(app.joined for app in apps)


class TestMovingSubscriber:
    def test_nack_buffer_resent_after_location_update(self):
        kernel, grid, apps, cells, log = build(5, 2, per_cell=2)
        sub_node = cells[(4, 1)][1]
        apps[sub_node].do_subscribe("beach", BOTTOM, BOTTOM)
        run_ms(kernel, 2000.0)
        # subscriber wanders off without telling anyone: simulate by killing
        # its beacons (moving out of the grid region entirely)
        kernel.set_position(sub_node, 14.0, 14.0)  # now inside cell (0, 0)
        run_ms(kernel, 4000.0)  # old view entries expire, new beacons heard
        apps[0].do_publish("p", ["beach"], 10)
        run_ms(kernel, 3000.0)
        pair = (sub_node, 0, ObjectKey("p", 0))
        delivered_before = pair in log.notif_recv
        # now the subscriber reports its new cell: buffered notification flows
        apps[sub_node]._send_sub_updates((0, 0))
        run_ms(kernel, 4000.0)
        assert pair in log.notif_recv
        if not delivered_before:
            assert log.nacks >= 1
