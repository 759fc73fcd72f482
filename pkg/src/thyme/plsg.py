"""Publish-locally / subscribe-globally materialization.

Publications live only at their owner; subscriptions flood the whole network
and every node matches them against its own store, answering past matches
with per-node notification batches. Downloads contact the owner directly via
multi-hop unicast with application-level retransmission. Joining broadcasts a
one-hop request; a random subset of neighbors replies with its full
subscription set after a random delay.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import Notification, ObjectKey, ObjectMetadata, Subscription
from .events import RunLog
from .query import DnfQuery, QuerySyntaxError, UnkeyableClauseError, \
    DnfOverflowError, parse, to_dnf
from .route_flood import FloodRouter
from .simnet import MS, Simulator
from .store import DuplicateKeyError, NodeStore

MSG_TYPE = 1
REQ_ID = 4


@dataclass(frozen=True)
class SubFlood:
    subscription: Subscription

    def wire_size(self):
        return MSG_TYPE + self.subscription.wire_size()


@dataclass(frozen=True)
class UnsubFlood:
    uid: tuple

    def wire_size(self):
        return MSG_TYPE + 8


@dataclass(frozen=True)
class NotifyMsg:
    notification: Notification
    serving_node: int

    def wire_size(self):
        return MSG_TYPE + 4 + self.notification.wire_size()


@dataclass(frozen=True)
class FetchMoreReq:
    uid: tuple

    def wire_size(self):
        return MSG_TYPE + 8


@dataclass(frozen=True)
class DownloadReq:
    req_id: int
    key: ObjectKey
    requester: int

    def wire_size(self):
        return MSG_TYPE + REQ_ID + self.key.wire_size() + 4


@dataclass(frozen=True)
class DownloadResp:
    req_id: int
    key: ObjectKey
    found: bool
    data: bytes

    def wire_size(self):
        return MSG_TYPE + REQ_ID + self.key.wire_size() + 1 + 2 + len(self.data)


@dataclass(frozen=True)
class JoinReq:
    joiner: int

    def wire_size(self):
        return MSG_TYPE + 4


@dataclass(frozen=True)
class JoinReply:
    subscriptions: tuple  # (Subscription, ...) the replier currently stores

    def wire_size(self):
        return MSG_TYPE + 2 + sum(s.wire_size() for s in self.subscriptions)


class PlsgNode:
    def __init__(self, kernel: Simulator, node: int, log: RunLog,
                 policy=None, ground=None):
        self.kernel = kernel
        self.node = node
        self.cfg = kernel.cfg
        self.log = log
        self.policy = policy
        self.ground = ground  # ground-truth target snapshot for coverage
        self.store = NodeStore()
        self.router = FloodRouter(kernel, node, self._on_flood,
                                  self._on_unicast)
        self.started = False
        self.joined = False
        self._join_round = 0
        self._join_replies = 0
        self._queue: list = []
        self._sub_counter = 0
        self._req_counter = 0
        self.my_subs: dict[int, Subscription] = {}
        self.sub_issue: dict[tuple, float] = {}
        self.sub_refs: dict = {}  # caller-supplied label -> id_sub
        self._downloads: dict[int, dict] = {}
        self._fetch_pending: set = set()

    # -- lifecycle --------------------------------------------------------------

    def start_routing(self):
        self.router.start()

    def start(self):
        """Application start: run the join procedure."""
        self.started = True
        self._begin_join()

    def on_rejoin(self):
        """Back from a transient off period: join again, keeping local state."""
        if not self.started:
            return
        self.joined = False
        self._begin_join()

    def _begin_join(self):
        self._join_round = 0
        self._join_replies = 0
        self._join_attempt()

    def _join_attempt(self):
        if self.joined:
            return
        msg = JoinReq(self.node)
        self.kernel.broadcast(self.node, msg.wire_size(), msg)
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._join_check)

    def _join_check(self):
        if self.joined:
            return
        if self._join_replies > 0:
            self._complete_join()
            return
        self._join_round += 1
        if self._join_round > self.cfg.op_retries:
            self._complete_join()  # alone in the network, work as normal
        else:
            self._join_attempt()

    def _complete_join(self):
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
        """Queue an operation until the join completes."""
        if self.joined:
            return True
        self._queue.append((fn, args))
        return False

    # -- THYME operations ---------------------------------------------------------

    def do_publish(self, id_obj: str, tags, data_size: int):
        if not self._gate(self.do_publish, id_obj, tags, data_size):
            return
        now = self.kernel.now
        rec = self.log.op_start("publish", self.node, now,
                                id_obj=id_obj, tags=frozenset(tags))
        md = ObjectMetadata(ObjectKey(id_obj, self.node), frozenset(tags),
                            self.cfg.summary_size, now)
        try:
            matches = self.store.index_publication(md, bytes(data_size), now)
        except DuplicateKeyError:
            self.log.op_end(rec, now, "fail:duplicate-key")
            return
        self.log.op_end(rec, now, "ok")
        for subrec in matches:
            self._notify(subrec.subscription, (md,), False, 1)

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
        sub = Subscription(self._sub_counter, dnf, ts_start, ts_end, self.node)
        self._sub_counter += 1
        self.my_subs[sub.id_sub] = sub
        if ref is not None:
            self.sub_refs[ref] = sub.id_sub
        self.sub_issue[sub.uid] = now
        rec.extra["uid"] = sub.uid
        batch = self.store.index_subscription(sub, dnf.clauses, now,
                                              self.cfg.batch_n)
        if batch.matches:  # own publications matching the past frame
            self._notify(sub, batch.matches, batch.has_more,
                         batch.total_available)
        self.router.flood(SubFlood(sub))
        if self.ground is not None:
            rec.extra["targets"] = self.ground(self.node)
            rec.extra["uid"] = sub.uid
        self.log.op_end(rec, self.kernel.now, "ok")

    def do_unpublish(self, id_obj: str):
        if not self._gate(self.do_unpublish, id_obj):
            return
        now = self.kernel.now
        rec = self.log.op_start("unpublish", self.node, now, id_obj=id_obj)
        self.store.unpublish(ObjectKey(id_obj, self.node))
        self.log.op_end(rec, now, "ok")

    def do_unsubscribe(self, sub_ref):
        if not self._gate(self.do_unsubscribe, sub_ref):
            return
        now = self.kernel.now
        id_sub = self.sub_refs.get(sub_ref, sub_ref)
        if id_sub not in self.my_subs:
            self.log.op_skip("unsubscribe", self.node, now)
            return
        uid = (self.node, id_sub)
        rec = self.log.op_start("unsubscribe", self.node, now, uid=uid)
        self.store.unsubscribe(uid)
        self.my_subs.pop(id_sub, None)
        self.router.flood(UnsubFlood(uid))
        if self.ground is not None:
            rec.extra["targets"] = self.ground(self.node)
            rec.extra["uid"] = uid
        self.log.op_end(rec, now, "ok")

    def do_download(self, metadata: ObjectMetadata):
        if not self._gate(self.do_download, metadata):
            return
        now = self.kernel.now
        rec = self.log.op_start("download", self.node, now)
        self._req_counter += 1
        req_id = self._req_counter
        self._downloads[req_id] = {"rec": rec, "key": metadata.key,
                                   "owner": metadata.id_owner, "attempts": 0}
        self._download_attempt(req_id)

    def _download_attempt(self, req_id: int):
        state = self._downloads.get(req_id)
        if state is None:
            return
        state["attempts"] += 1
        self.router.dv_unicast(state["owner"],
                               DownloadReq(req_id, state["key"], self.node))
        self.kernel.schedule_node(self.node, self.cfg.op_timeout * MS,
                                  self._download_timeout, req_id)

    def _download_timeout(self, req_id: int):
        state = self._downloads.get(req_id)
        if state is None:
            return
        if state["attempts"] <= self.cfg.op_retries:
            self._download_attempt(req_id)
        else:
            del self._downloads[req_id]
            self.log.op_end(state["rec"], self.kernel.now, "fail:timeout")

    # -- notification plumbing ------------------------------------------------------

    def _notify(self, sub: Subscription, matches, has_more: bool, total: int):
        now = self.kernel.now
        note = Notification(sub.id_owner, sub.id_sub, tuple(matches),
                            has_more, total)
        for md in matches:
            self.log.notif_generated(sub.id_owner, sub.id_sub, md.key, now)
        if sub.id_owner == self.node:
            self._deliver_notification(NotifyMsg(note, self.node))
        else:
            self.router.dv_unicast(sub.id_owner, NotifyMsg(note, self.node))

    def _deliver_notification(self, msg: NotifyMsg):
        note = msg.notification
        if note.id_sub not in self.my_subs:
            return  # revoked locallly; late notification ignored
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
        pending_key = (note.id_sub, msg.serving_node)
        self._fetch_pending.discard(pending_key)  # this batch answers it
        if note.has_more and self.cfg.fetch_more == "auto":
            self._fetch_pending.add(pending_key)
            self.router.dv_unicast(msg.serving_node,
                                   FetchMoreReq((self.node, note.id_sub)))

    # -- message handling -----------------------------------------------------------

    def receive(self, src: int, msg):
        if self.router.receive(src, msg):
            return
        if isinstance(msg, JoinReq):
            self._on_join_request(msg)
        elif isinstance(msg, JoinReply):
            self._on_join_reply(msg)

    def _on_flood(self, origin: int, payload):
        if isinstance(payload, SubFlood):
            self._index_remote_sub(payload.subscription)
        elif isinstance(payload, UnsubFlood):
            self.store.unsubscribe(payload.uid)

    def _index_remote_sub(self, sub: Subscription):
        if (self.store.contains_subscription(sub.uid)
                or self.store.is_tombstoned(sub.uid)):
            return
        batch = self.store.index_subscription(sub, sub.query.clauses,
                                              self.kernel.now,
                                              self.cfg.batch_n)
        if batch.matches:
            self._notify(sub, batch.matches, batch.has_more,
                         batch.total_available)

    def _on_unicast(self, origin: int, payload, meters: float, hops: int):
        if isinstance(payload, NotifyMsg):
            self._deliver_notification(payload)
        elif isinstance(payload, FetchMoreReq):
            self._serve_fetch_more(payload.uid)
        elif isinstance(payload, DownloadReq):
            self._serve_download(payload)
        elif isinstance(payload, DownloadResp):
            self._download_done(payload, meters, hops)

    def _serve_fetch_more(self, uid):
        try:
            batch = self.store.fetch_more(uid, self.cfg.batch_n)
        except LookupError:
            return
        sub_owner, id_sub = uid
        now = self.kernel.now
        note = Notification(sub_owner, id_sub, batch.matches, batch.has_more,
                            batch.total_available)
        for md in batch.matches:
            self.log.notif_generated(sub_owner, id_sub, md.key, now)
        self.router.dv_unicast(sub_owner, NotifyMsg(note, self.node))

    def _serve_download(self, req: DownloadReq):
        rec = self.store.get_publication(req.key)
        if rec is not None:
            resp = DownloadResp(req.req_id, req.key, True, rec.data or b"")
        else:
            resp = DownloadResp(req.req_id, req.key, False, b"")
        self.router.dv_unicast(req.requester, resp)

    def _download_done(self, resp: DownloadResp, meters: float, hops: int):
        state = self._downloads.pop(resp.req_id, None)
        if state is None:
            return
        now = self.kernel.now
        if resp.found:
            self.log.op_end(state["rec"], now, "ok")
            self.log.download_path(meters, hops)
        else:
            self.log.op_end(state["rec"], now, "fail:not-found")

    def _on_join_request(self, msg: JoinReq):
        if not self.started or msg.joiner == self.node:
            return
        if self.kernel.rng.random() >= self.cfg.p_reply:
            return
        delay = self.kernel.rng.random() * self.cfg.reply_window * MS
        self.kernel.schedule_node(self.node, delay, self._send_join_reply,
                                  msg.joiner)

    def _send_join_reply(self, joiner: int):
        subs = tuple(rec.subscription for rec in self.store.subscriptions())
        reply = JoinReply(subs)
        self.kernel.unicast(self.node, joiner, reply.wire_size(), reply)

    def _on_join_reply(self, msg: JoinReply):
        if not self.started:
            return
        self._join_replies += 1
        # Adopt unknown subscriptions and check our own publications against
        # them: matches discovered at (re)join produce late notifications.
        for sub in msg.subscriptions:
            self._index_remote_sub(sub)
        if not self.joined and self._join_replies == 1:
            self._complete_join()
