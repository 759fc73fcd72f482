"""Data-centric-storage materialization over the geographic routing layer.

Object metadata is indexed at the cells its tags hash to; each subscription
conjunction is indexed at the cell its key literal hashes to, so overlapping
tags guarantee an overlapping broker cell. Object bytes are replicated
actively across the publisher's cell at publish time and passively at every
successful downloader; replica whereabouts ride in the metadata's replication
list and drive location-aware downloads (closest replica first, the actively
replicating cell as the final fallback).

All five operations use per-operation retransmission: the originator tracks
an ack per destination cell and re-sends only to the silent ones. Within a
broker cell every member stores the state, but only the designated member
(lowest id in the current membership view) answers — acks, notifications,
batch serving — so divergent views can cost duplicates or silence, never
protocol deadlock.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import Notification, ObjectKey, ObjectMetadata, Subscription
from .events import RunLog
from .query import Conjunction, DnfOverflowError, QuerySyntaxError, \
    UnkeyableClauseError, parse, to_dnf
from .route_geo import Delivery, GeoRouter, Grid, NackInfo
from .simnet import MS, Simulator
from .store import NodeStore, UnknownSubscriptionError, BatchExhaustedError

MSG_TYPE = 1
OP_ID = 6
REQ_ID = 4
CELL = 2


@dataclass(frozen=True)
class PubIndex:
    op_id: tuple
    origin: int
    metadata: ObjectMetadata

    def wire_size(self):
        return MSG_TYPE + OP_ID + self.metadata.wire_size()


@dataclass(frozen=True)
class SubIndex:
    op_id: tuple
    origin: int
    subscription: Subscription
    clause: Conjunction

    def wire_size(self):
        # the subscription tuple rides without its full query: the clause is
        # all a broker needs
        return MSG_TYPE + OP_ID + 24 + self.clause.wire_size()


@dataclass(frozen=True)
class UnpubIndex:
    op_id: tuple
    origin: int
    key: ObjectKey

    def wire_size(self):
        return MSG_TYPE + OP_ID + self.key.wire_size()


@dataclass(frozen=True)
class PurgeActive:
    op_id: tuple
    origin: int
    key: ObjectKey

    def wire_size(self):
        return MSG_TYPE + OP_ID + self.key.wire_size()


@dataclass(frozen=True)
class UnsubIndex:
    op_id: tuple
    origin: int
    uid: tuple

    def wire_size(self):
        return MSG_TYPE + OP_ID + 8


@dataclass(frozen=True)
class AckMsg:
    op_id: tuple
    cell: tuple

    def wire_size(self):
        return MSG_TYPE + OP_ID + CELL


@dataclass(frozen=True)
class NotifyMsg:
    notification: Notification
    broker_cell: tuple

    def wire_size(self):
        return MSG_TYPE + CELL + self.notification.wire_size()


@dataclass(frozen=True)
class LiveNotify:
    """One publication's metadata aggregated toward every matched
    subscriber; the per-destination token names the subscription."""

    metadata: ObjectMetadata

    def wire_size(self):
        return MSG_TYPE + CELL + self.metadata.wire_size()


@dataclass(frozen=True)
class FetchMoreReq:
    uid: tuple
    requester: int
    requester_cell: tuple

    def wire_size(self):
        return MSG_TYPE + 8 + 4 + CELL


@dataclass(frozen=True)
class DownloadReq:
    req_id: int
    requester: int
    requester_cell: tuple
    key: ObjectKey
    active_attempt: bool = False

    def wire_size(self):
        return MSG_TYPE + REQ_ID + 4 + CELL + self.key.wire_size() + 1


@dataclass(frozen=True)
class DownloadResp:
    req_id: int
    key: ObjectKey
    found: bool
    data: bytes

    def wire_size(self):
        return MSG_TYPE + REQ_ID + self.key.wire_size() + 1 + 2 + len(self.data)


@dataclass(frozen=True)
class ReplicaAnnounce:
    items: tuple  # ((key, node, cell), ...)

    def wire_size(self):
        return MSG_TYPE + 1 + sum(k.wire_size() + 4 + CELL
                                  for k, _, _ in self.items)


@dataclass(frozen=True)
class SubLocUpdate:
    items: tuple  # ((uid, cell), ...)

    def wire_size(self):
        return MSG_TYPE + 1 + len(self.items) * (8 + CELL)


@dataclass(frozen=True)
class PubData:
    metadata: ObjectMetadata
    data: bytes

    def wire_size(self):
        return MSG_TYPE + self.metadata.wire_size() + 2 + len(self.data)


@dataclass(frozen=True)
class JoinReqDcs:
    joiner: int

    def wire_size(self):
        return MSG_TYPE + 4


@dataclass(frozen=True)
class JoinReplyDcs:
    pubs: tuple        # (metadata, ...) broker entries
    tombstones: tuple  # (key, ...) unpublished keys
    subs: tuple        # ((subscription, clauses, past_keys, cursor), ...)
    objects: tuple     # ((metadata, data), ...) active replicas

    def wire_size(self):
        size = MSG_TYPE + 8
        size += sum(m.wire_size() for m in self.pubs)
        size += sum(k.wire_size() for k in self.tombstones)
        size += sum(s.wire_size() + sum(c.wire_size() for c in cl)
                    + 2 + len(keys) * 10 + 4
                    for s, cl, keys, _cur in self.subs)
        size += sum(m.wire_size() + 2 + len(d) for m, d in self.objects)
        return size


class DcsNode:
    def __init__(self, kernel: Simulator, node: int, grid: Grid, log: RunLog,
                 policy=None):
        self.kernel = kernel
        self.node = node
        self.grid = grid
        self.cfg = kernel.cfg
        self.log = log
        self.policy = policy
        self.store = NodeStore()  # broker entries hashed to this node's cell
        self.router = GeoRouter(kernel, node, grid, self._on_delivery,
                                self._on_nack, self._eligible)
        self.active_replicas: dict[ObjectKey, tuple] = {}
        self.passive_replicas: dict[ObjectKey, tuple] = {}
        self.own_pub_md: dict[str, ObjectMetadata] = {}
        self.own_active_cell: dict[ObjectKey, tuple] = {}
        self.unpublished_own: set[str] = set()
        self.started = False
        self.joined = False
        self._routable = True
        self._queue: list = []
        self._join_round = 0
        self._join_done_cb = None
        self._op_counter = 0
        self._req_counter = 0
        self._sub_counter = 0
        self._ops: dict[tuple, dict] = {}
        self.my_subs: dict[int, dict] = {}
        self.sub_refs: dict = {}  # caller-supplied label -> id_sub
        self.sub_issue: dict[tuple, float] = {}
        self._downloads: dict[int, dict] = {}
        self._chains: dict[tuple, dict] = {}
        self._buffers: dict[tuple, list] = {}   # broker-side NACKed notifs
        self._dormant: set = set()
        self._transit_origin = None
        self._last_cell = None
        kernel.add_motion_observer(node, self._on_motion)

    # -- lifecycle ----------------------------------------------------------------

    def start_routing(self):
        self.router.start()
        self._last_cell = self.router.my_cell()

    def start(self):
        self.started = True
        self._begin_join(self._complete_start)

    def on_rejoin(self):
        """Transient node back on: refresh cell state through a join."""
        if not self.started:
            return
        self._begin_join(None)

    def _complete_start(self):
        self.joined = True
        queued, self._queue = self._queue, []
        for fn, args in queued:
            fn(*args)
        self.kernel.schedule_node(self.node, self.cfg.expiry_sweep * MS,
                                  self._sweep)

    def _sweep(self):
        self.store.expire(self.kernel.now)
        self.kernel.schedule_node(self.node, self.cfg.expiry_sweep * MS,
                                  self._sweep)

    def _gate(self, fn, *args) -> bool:
        if self.joined:
            return True
        self._queue.append((fn, args))
        return False

    def _eligible(self) -> bool:
        """Stationary-only forwarding: a node that left its cell while moving
        drops out until it stabilizes and joins the local cell."""
        return self._routable

    # -- join (cell state transfer) --------------------------------------------------

    def _begin_join(self, done_cb):
        self._join_round = 0
        self._join_done_cb = done_cb
        self._join_listen()

    def _join_listen(self):
        self.kernel.schedule_node(
            self.node, 2 * self.cfg.beacon_interval * MS, self._join_pick)

    def _join_pick(self):
        members = self.router.view.members_of(self.router.my_cell(),
                                              self.kernel.now)
        members = [m for m in members if m != self.node]
        if members:
            req = JoinReqDcs(self.node)
            self.kernel.unicast(self.node, members[0], req.wire_size(), req)
            self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                      self._join_check, self._join_round)
        else:
            self._join_check(self._join_round)

    def _join_check(self, round_no: int):
        if round_no != self._join_round:
            return  # a reply already moved the procedure forward
        self._join_round += 1
        if self._join_round > self.cfg.op_retries:
            self._join_finish()  # alone in the cell, work as normal
        else:
            self._join_listen()

    def _join_finish(self):
        self._join_round = 10 ** 9  # stop pending checks
        cb, self._join_done_cb = self._join_done_cb, None
        if cb is not None:
            cb()

    def _on_join_request(self, msg: JoinReqDcs):
        if not self.started:
            return
        pubs, tombstones, subs = [], [], []
        for rec in self.store.publications():
            pubs.append(rec.metadata)
        for key, rec in sorted(self.store._pubs.items()):
            if rec.unpublished:
                tombstones.append(key)
        for rec in self.store.subscriptions():
            subs.append((rec.subscription, rec.clauses, rec.past_keys,
                         rec.past_cursor))
        objects = tuple((md, data)
                        for md, data in self.active_replicas.values())
        reply = JoinReplyDcs(tuple(pubs), tuple(tombstones), tuple(subs),
                             objects)
        self.kernel.unicast(self.node, msg.joiner, reply.wire_size(), reply)

    def _on_join_reply(self, msg: JoinReplyDcs):
        if not self.started:
            return
        for md in msg.pubs:
            self.store.merge_publication(md, None)
        for key in msg.tombstones:
            self.store.unpublish(key)
        for sub, clauses, past_keys, cursor in msg.subs:
            self.store.merge_subscription(sub, clauses, past_keys, cursor)
        for md, data in msg.objects:
            self.active_replicas.setdefault(md.key, (md, data))
        self._join_finish()

    # -- mobility ---------------------------------------------------------------------

    def _on_motion(self, event: str, node: int):
        if event == "start":
            self._transit_origin = self.router.my_cell()
            self._last_cell = self._transit_origin
            return
        cell = self.router.my_cell()
        if event == "tick":
            if cell != self._last_cell:
                self._last_cell = cell
                if cell != self._transit_origin:
                    self._routable = False
                self._send_sub_updates(cell)
            return
        if event == "arrive":
            if cell != self._last_cell:
                self._last_cell = cell
                if cell != self._transit_origin:
                    self._routable = False
                self._send_sub_updates(cell)
            self.kernel.schedule_node(
                self.node, self.cfg.stationary_detect * MS, self._stabilized)

    def _stabilized(self):
        if bool(self.kernel.moving[self.node]):
            return  # already on the next leg
        if self._routable:
            return  # never left the origin cell
        self._begin_join(self._post_move_joined)

    def _post_move_joined(self):
        self._routable = True
        cell = self.router.my_cell()
        self._send_sub_updates(cell)
        self._send_replica_updates(cell)

    def _send_sub_updates(self, cell):
        """Owned subscriptions follow the subscriber cell by cell."""
        groups: dict[frozenset, list] = {}
        for id_sub, info in self.my_subs.items():
            cells = frozenset(c for _, c in info["keys"])
            groups.setdefault(cells, []).append(((self.node, id_sub), cell))
        for cells, items in sorted(groups.items(), key=lambda kv: sorted(kv[0])):
            self.router.route(sorted(cells), SubLocUpdate(tuple(items)))

    def _send_replica_updates(self, cell):
        """Passive replica whereabouts update after stabilizing in a cell."""
        groups: dict[frozenset, list] = {}
        for key, (md, _) in self.passive_replicas.items():
            cells = frozenset(self.grid.hash_to_cell(t) for t in md.tags)
            groups.setdefault(cells, []).append((key, self.node, cell))
        for cells, items in sorted(groups.items(), key=lambda kv: sorted(kv[0])):
            self.router.route(sorted(cells), ReplicaAnnounce(tuple(items)))

    # -- operation tracking (per-operation retransmission, §-style acks) ---------------

    def _next_op_id(self) -> tuple:
        self._op_counter += 1
        return (self.node, self._op_counter)

    def _new_op(self, op_id: tuple, kind: str, rec, plan: list) -> tuple:
        pending = set()
        for cells, _payload, _final in plan:
            pending |= set(cells)
        self._ops[op_id] = {"kind": kind, "rec": rec, "plan": plan,
                            "pending": pending, "retries": 0}
        self._op_send(op_id)
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._op_timer, op_id)
        return op_id

    def _op_send(self, op_id: tuple):
        op = self._ops[op_id]
        for cells, payload, final in op["plan"]:
            todo = sorted(set(cells) & op["pending"])
            if todo:
                self.router.route(todo, payload, final_node=final)

    def _op_timer(self, op_id: tuple):
        op = self._ops.get(op_id)
        if op is None:
            return
        if not op["pending"]:
            return
        op["retries"] += 1
        if op["retries"] > self.cfg.op_retries:
            del self._ops[op_id]
            self.log.op_end(op["rec"], self.kernel.now, "fail:op-timeout")
            return
        self._op_send(op_id)
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._op_timer, op_id)

    def _on_ack(self, ack: AckMsg):
        op = self._ops.get(ack.op_id)
        if op is None:
            return
        op["pending"].discard(ack.cell)
        if not op["pending"]:
            del self._ops[ack.op_id]
            self.log.op_end(op["rec"], self.kernel.now, "ok")

    def _send_ack(self, op_id: tuple, origin: int, origin_cell, dest_cell):
        if origin == self.node:
            self._on_ack(AckMsg(op_id, dest_cell))
            return
        self.router.route([origin_cell], AckMsg(op_id, dest_cell),
                          final_node=origin)

    def _designated(self) -> bool:
        """One member per cell answers: the lowest id in the current view."""
        if not self._routable:
            return False
        members = self.router.view.members_of(self.router.my_cell(),
                                              self.kernel.now)
        return not members or self.node < members[0]

    # -- THYME operations ----------------------------------------------------------------

    def do_publish(self, id_obj: str, tags, data_size: int):
        if not self._gate(self.do_publish, id_obj, tags, data_size):
            return
        now = self.kernel.now
        rec = self.log.op_start("publish", self.node, now,
                                id_obj=id_obj, tags=frozenset(tags))
        if id_obj in self.own_pub_md:
            self.log.op_end(rec, now, "fail:duplicate-key")
            return
        my_cell = self.router.my_cell()
        members = self.router.view.members_of(my_cell, self.kernel.now)
        l_rep = [(self.node, my_cell)] + [(m, my_cell) for m in members
                                          if m != self.node]
        md = ObjectMetadata(ObjectKey(id_obj, self.node), frozenset(tags),
                            self.cfg.summary_size, now, tuple(l_rep))
        data = bytes(data_size)
        self.own_pub_md[id_obj] = md
        self.own_active_cell[md.key] = my_cell
        self.active_replicas[md.key] = (md, data)
        # active replication: disseminate the object inside the cell
        pub_data = PubData(md, data)
        self.kernel.broadcast(self.node, pub_data.wire_size(), pub_data)
        tag_cells = sorted({self.grid.hash_to_cell(t) for t in tags})
        op_id = self._next_op_id()
        plan = [(tag_cells, PubIndex(op_id, self.node, md), None)]
        self._new_op(op_id, "publish", rec, plan)

    def do_subscribe(self, text: str, ts_start, ts_end, ref=None):
        if not self._gate(self.do_subscribe, text, ts_start, ts_end, ref):
            return
        now = self.kernel.now
        if ts_start is None:
            ts_start = now
        rec = self.log.op_start("subscribe", self.node, now, query=text,
                                ts_start=ts_start, ts_end=ts_end)
        try:
            dnf = to_dnf(parse(text), self.kernel.rng)
        except (QuerySyntaxError, UnkeyableClauseError, DnfOverflowError) as e:
            self.log.op_end(rec, now, f"fail:{type(e).__name__}")
            return
        my_cell = self.router.my_cell()
        sub = Subscription(self._sub_counter, dnf, ts_start, ts_end,
                           self.node, my_cell)
        self._sub_counter += 1
        keys = [(c.key, self.grid.hash_to_cell(c.key)) for c in dnf.clauses]
        self.my_subs[sub.id_sub] = {"sub": sub, "keys": keys, "issue": now}
        if ref is not None:
            self.sub_refs[ref] = sub.id_sub
        self.sub_issue[sub.uid] = now
        rec.extra["uid"] = sub.uid
        op_id = self._next_op_id()
        plan = [([cell], SubIndex(op_id, self.node, sub, clause), None)
                for clause, (_, cell) in zip(dnf.clauses, keys)]
        self._new_op(op_id, "subscribe", rec, plan)

    def do_unpublish(self, id_obj: str):
        if not self._gate(self.do_unpublish, id_obj):
            return
        now = self.kernel.now
        md = self.own_pub_md.get(id_obj)
        if md is None or id_obj in self.unpublished_own:
            self.log.op_skip("unpublish", self.node, now)
            return
        rec = self.log.op_start("unpublish", self.node, now, id_obj=id_obj)
        self.unpublished_own.add(id_obj)
        self.active_replicas.pop(md.key, None)
        active_cell = self.own_active_cell[md.key]
        tag_cells = sorted({self.grid.hash_to_cell(t) for t in md.tags})
        op_id = self._next_op_id()
        plan = [(tag_cells, UnpubIndex(op_id, self.node, md.key), None),
                ([active_cell], PurgeActive(op_id, self.node, md.key), None)]
        self._new_op(op_id, "unpublish", rec, plan)

    def do_unsubscribe(self, sub_ref):
        if not self._gate(self.do_unsubscribe, sub_ref):
            return
        now = self.kernel.now
        id_sub = self.sub_refs.get(sub_ref, sub_ref)
        info = self.my_subs.pop(id_sub, None) if id_sub is not None else None
        if info is None:
            self.log.op_skip("unsubscribe", self.node, now)
            return
        uid = (self.node, id_sub)
        rec = self.log.op_start("unsubscribe", self.node, now, uid=uid)
        cells = sorted({cell for _, cell in info["keys"]})
        op_id = self._next_op_id()
        plan = [(cells, UnsubIndex(op_id, self.node, uid), None)]
        self._new_op(op_id, "unsubscribe", rec, plan)

    def do_download(self, metadata: ObjectMetadata):
        if not self._gate(self.do_download, metadata):
            return
        now = self.kernel.now
        rec = self.log.op_start("download", self.node, now)
        my_cell = self.router.my_cell()
        candidates = []
        seen = set()
        for node, cell in metadata.replication_list:
            if node == self.node or node in seen:
                continue
            seen.add(node)
            candidates.append((self.grid.cell_distance(my_cell, cell),
                               node, cell))
        candidates.sort()
        active_cell = None
        for node, cell in metadata.replication_list:
            if node == metadata.id_owner:
                active_cell = cell
                break
        if active_cell is None and metadata.replication_list:
            active_cell = metadata.replication_list[0][1]
        self._req_counter += 1
        req_id = self._req_counter
        self._downloads[req_id] = {
            "rec": rec, "key": metadata.key, "md": metadata,
            "candidates": candidates, "active_cell": active_cell,
            "attempts": 0, "tried_active": False, "seq": 0,
        }
        self._download_next(req_id)

    def _download_next(self, req_id: int):
        state = self._downloads.get(req_id)
        if state is None:
            return
        state["seq"] += 1
        if state["candidates"] and state["attempts"] <= self.cfg.op_retries:
            state["attempts"] += 1
            _, node, cell = state["candidates"].pop(0)
            req = DownloadReq(req_id, self.node, self.router.my_cell(),
                              state["key"])
            self.router.route([cell], req, final_node=node, want_nack=True)
        elif not state["tried_active"] and state["active_cell"] is not None:
            state["tried_active"] = True
            req = DownloadReq(req_id, self.node, self.router.my_cell(),
                              state["key"], active_attempt=True)
            self.router.route([state["active_cell"]], req)
        else:
            del self._downloads[req_id]
            self.log.op_end(state["rec"], self.kernel.now, "fail:exhausted")
            return
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._download_timeout, req_id, state["seq"])

    def _download_timeout(self, req_id: int, seq: int):
        state = self._downloads.get(req_id)
        if state is None or state["seq"] != seq:
            return
        self._download_next(req_id)

    def _download_done(self, resp: DownloadResp, meters: float, hops: int):
        state = self._downloads.get(resp.req_id)
        if state is None:
            return
        if not resp.found:
            # negative reply: walk on to the next replica
            self._download_next(resp.req_id)
            return
        del self._downloads[resp.req_id]
        now = self.kernel.now
        self.log.op_end(state["rec"], now, "ok")
        self.log.download_path(meters, hops)
        if resp.key in self.active_replicas or resp.key in self.passive_replicas:
            return  # already replicated here; nothing to announce
        md = state["md"]
        self.passive_replicas[resp.key] = (md, resp.data)
        self.log.replica_announces += 1
        tag_cells = sorted({self.grid.hash_to_cell(t) for t in md.tags})
        self.router.route(
            tag_cells,
            ReplicaAnnounce(((resp.key, self.node, self.router.my_cell()),)))

    # -- broker behavior ----------------------------------------------------------------

    def _on_delivery(self, d: Delivery):
        payload = d.payload
        if isinstance(payload, PubIndex):
            self._broker_pub(d, payload)
        elif isinstance(payload, SubIndex):
            self._broker_sub(d, payload)
        elif isinstance(payload, UnpubIndex):
            self.store.unpublish(payload.key)
            if self._designated():
                self._send_ack(payload.op_id, payload.origin, d.origin_cell,
                               d.dest_cell)
        elif isinstance(payload, PurgeActive):
            self.active_replicas.pop(payload.key, None)
            if self._designated():
                self._send_ack(payload.op_id, payload.origin, d.origin_cell,
                               d.dest_cell)
        elif isinstance(payload, UnsubIndex):
            self.store.unsubscribe(payload.uid)
            self._buffers.pop(payload.uid, None)
            self._dormant.discard(payload.uid)
            if self._designated():
                self._send_ack(payload.op_id, payload.origin, d.origin_cell,
                               d.dest_cell)
        elif isinstance(payload, AckMsg):
            self._on_ack(payload)
        elif isinstance(payload, LiveNotify):
            note = Notification(self.node, d.token, (payload.metadata,),
                                False, 1)
            self._deliver_notification(NotifyMsg(note, d.origin_cell))
        elif isinstance(payload, NotifyMsg):
            self._deliver_notification(payload)
        elif isinstance(payload, FetchMoreReq):
            self._broker_fetch_more(d, payload)
        elif isinstance(payload, DownloadReq):
            self._serve_download(d, payload)
        elif isinstance(payload, DownloadResp):
            self._download_done(payload, d.meters, d.hops)
        elif isinstance(payload, ReplicaAnnounce):
            for key, node, cell in payload.items:
                self.store.update_replicas(key, (node, cell))
        elif isinstance(payload, SubLocUpdate):
            self._broker_loc_update(payload)

    def _broker_pub(self, d: Delivery, payload: PubIndex):
        md = payload.metadata
        matches = []
        if not self.store.contains_publication(md.key) \
                and not self.store.is_unpublished(md.key):
            matches = self.store.index_publication(md, None, self.kernel.now)
        if self._designated():
            self._notify_live_matches(md, matches)
            self._send_ack(payload.op_id, payload.origin, d.origin_cell,
                           d.dest_cell)

    def _notify_live_matches(self, md: ObjectMetadata, matches):
        """One publication, many matched subscriptions: a single aggregated
        message splits only where subscriber directions diverge."""
        now = self.kernel.now
        entries = []
        for subrec in matches:
            sub = subrec.subscription
            if sub.uid in self._dormant:
                continue
            self.log.notif_generated(sub.id_owner, sub.id_sub, md.key, now)
            if sub.id_owner == self.node:
                note = Notification(sub.id_owner, sub.id_sub, (md,), False, 1)
                self._deliver_notification(NotifyMsg(note,
                                                     self.router.my_cell()))
            else:
                entries.append((sub.cell_owner, sub.id_owner, sub.id_sub))
        if entries:
            self.router.route_multi(entries, LiveNotify(md), want_nack=True)

    def _broker_sub(self, d: Delivery, payload: SubIndex):
        sub = payload.subscription
        uid = sub.uid
        now = self.kernel.now
        batch = None
        if self.store.is_tombstoned(uid):
            pass
        elif self.store.contains_subscription(uid):
            self.store.add_clause(uid, payload.clause)
        else:
            batch = self.store.index_subscription(sub, (payload.clause,),
                                                  now, self.cfg.batch_n)
        if self._designated():
            if batch is not None and batch.matches:
                self._broker_notify(sub, batch.matches, batch.has_more,
                                    batch.total_available)
            self._send_ack(payload.op_id, payload.origin, d.origin_cell,
                           d.dest_cell)

    def _broker_notify(self, sub: Subscription, matches, has_more: bool,
                       total: int):
        uid = sub.uid
        if uid in self._dormant:
            return  # stopped until the subscriber's next location update
        now = self.kernel.now
        note = Notification(sub.id_owner, sub.id_sub, tuple(matches),
                            has_more, total)
        for md in matches:
            self.log.notif_generated(sub.id_owner, sub.id_sub, md.key, now)
        if sub.id_owner == self.node:
            self._deliver_notification(NotifyMsg(note, self.router.my_cell()))
            return
        self.router.route([sub.cell_owner],
                          NotifyMsg(note, self.router.my_cell()),
                          final_node=sub.id_owner, want_nack=True)

    def _broker_fetch_more(self, d: Delivery, payload: FetchMoreReq):
        try:
            batch = self.store.fetch_more(payload.uid, self.cfg.batch_n)
        except BatchExhaustedError:
            batch = None
        except UnknownSubscriptionError:
            return
        if not self._designated():
            return
        owner, id_sub = payload.uid
        now = self.kernel.now
        if batch is None:
            note = Notification(owner, id_sub, (), False, 0)
        else:
            note = Notification(owner, id_sub, batch.matches, batch.has_more,
                                batch.total_available)
            for md in batch.matches:
                self.log.notif_generated(owner, id_sub, md.key, now)
        self.router.route([payload.requester_cell],
                          NotifyMsg(note, self.router.my_cell()),
                          final_node=payload.requester,
                          want_nack=True)

    def _broker_loc_update(self, payload: SubLocUpdate):
        now = self.kernel.now
        for uid, cell in payload.items:
            if not self.store.update_subscriber_cell(uid, cell):
                continue
            self._dormant.discard(uid)
            buffered = self._buffers.pop(uid, None)
            if buffered and self._designated():
                horizon = now - self.cfg.nack_hold * MS
                for note_msg, stamp in buffered:
                    if stamp < horizon:
                        continue
                    self.router.route([cell], note_msg,
                                      final_node=uid[0], want_nack=True)

    def _on_nack(self, info: NackInfo):
        self.log.nacks += 1
        ref = info.ref_payload
        if isinstance(ref, LiveNotify):
            note = Notification(info.missing_node, info.token,
                                (ref.metadata,), False, 1)
            ref = NotifyMsg(note, self.router.my_cell())
        if isinstance(ref, NotifyMsg):
            uid = (ref.notification.sub_owner, ref.notification.id_sub)
            if not self.store.contains_subscription(uid):
                return
            now = self.kernel.now
            self._buffers.setdefault(uid, []).append((ref, now))
            self.kernel.schedule_node(self.node, self.cfg.nack_hold * MS,
                                      self._buffer_expire, uid, now)
        elif isinstance(ref, DownloadReq):
            self._download_timeout(ref.req_id,
                                   self._downloads.get(ref.req_id, {})
                                   .get("seq", -1))

    def _buffer_expire(self, uid: tuple, stamp: float):
        buffered = self._buffers.get(uid)
        if not buffered:
            return
        keep = [(m, t) for m, t in buffered if t > stamp]
        dropped = len(buffered) - len(keep)
        if keep:
            self._buffers[uid] = keep
        else:
            del self._buffers[uid]
        if dropped:
            self._dormant.add(uid)

    def _serve_download(self, d: Delivery, req: DownloadReq):
        entry = self.active_replicas.get(req.key) \
            or self.passive_replicas.get(req.key)
        if req.active_attempt:
            # cell-addressed fallback: every member holding the bytes replies
            if entry is None:
                return
        else:
            if entry is None:
                resp = DownloadResp(req.req_id, req.key, False, b"")
                self.router.route([req.requester_cell], resp,
                                  final_node=req.requester)
                return
        md, data = entry
        resp = DownloadResp(req.req_id, req.key, True, data)
        self.router.route([req.requester_cell], resp,
                          final_node=req.requester)

    # -- subscriber behavior ---------------------------------------------------------------

    def _deliver_notification(self, msg: NotifyMsg):
        note = msg.notification
        if note.id_sub not in self.my_subs:
            return
        now = self.kernel.now
        issue = self.sub_issue.get((self.node, note.id_sub), 0.0)
        fresh = []
        for md in note.matches:
            latency = now - max(md.ts_pub, issue)
            if self.log.notif_delivered(note.sub_owner, note.id_sub, md.key,
                                        now, latency):
                fresh.append(md)
        if fresh and self.policy is not None:
            self.policy.on_notification(self, note.id_sub, fresh)
        self._chains.pop((note.id_sub, msg.broker_cell), None)
        if note.has_more and self.cfg.fetch_more == "auto":
            self._start_chain(note.id_sub, msg.broker_cell)

    def _start_chain(self, id_sub: int, broker_cell):
        chain_key = (id_sub, broker_cell)
        chain = {"retries": 0, "seq": 0}
        self._chains[chain_key] = chain
        self._send_fetch(chain_key)

    def _send_fetch(self, chain_key):
        chain = self._chains.get(chain_key)
        if chain is None:
            return
        id_sub, broker_cell = chain_key
        chain["seq"] += 1
        self.router.route([broker_cell],
                          FetchMoreReq((self.node, id_sub), self.node,
                                       self.router.my_cell()))
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._fetch_timeout, chain_key, chain["seq"])

    def _fetch_timeout(self, chain_key, seq: int):
        chain = self._chains.get(chain_key)
        if chain is None or chain["seq"] != seq:
            return
        chain["retries"] += 1
        if chain["retries"] > self.cfg.op_retries:
            del self._chains[chain_key]
            return
        self._send_fetch(chain_key)

    # -- dispatch -----------------------------------------------------------------------

    def receive(self, src: int, msg):
        if self.router.receive(src, msg):
            return
        if isinstance(msg, PubData):
            # active replication inside the publisher's cell
            if self.router.my_cell() == self.grid.cell_of(
                    *self.kernel.position(src)) and self._routable:
                self.active_replicas.setdefault(msg.metadata.key,
                                                (msg.metadata, msg.data))
        elif isinstance(msg, JoinReqDcs):
            self._on_join_request(msg)
        elif isinstance(msg, JoinReplyDcs):
            self._on_join_reply(msg)
