"""Time-aware publication/subscription store.

Both materializations keep one of these per node: the flooding one holds the
node's own publications plus every flooded subscription; the geographic one
holds the broker entries hashed to the node's cell. The store is exact —
message loss only ever happens in transport.

Matching runs in both directions: a new publication is checked against stored
subscriptions, and a new subscription that spans the past is checked against
stored publications. Past matches are delivered in deterministic batches
(ts_pub ascending, object key as tiebreak) with a cursor for follow-up
requests; unpublished objects never appear in any result.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import ObjectKey, ObjectMetadata, Subscription, time_frame_contains
from .query import Conjunction

__all__ = [
    "NodeStore",
    "PublicationRecord",
    "SubscriptionRecord",
    "PastBatch",
    "DuplicateKeyError",
    "DuplicateSubscriptionError",
    "UnknownSubscriptionError",
    "BatchExhaustedError",
]


class DuplicateKeyError(KeyError):
    """An object with this key is already stored and not unpublished."""


class DuplicateSubscriptionError(KeyError):
    """A subscription with this (owner, id) is already stored."""


class UnknownSubscriptionError(KeyError):
    """No stored subscription under this (owner, id)."""


class BatchExhaustedError(LookupError):
    """All past matches for the subscription were already delivered."""


@dataclass
class PublicationRecord:
    metadata: ObjectMetadata
    data: Optional[bytes]
    unpublished: bool = False


@dataclass
class SubscriptionRecord:
    subscription: Subscription
    clauses: tuple[Conjunction, ...]
    arrival: float
    # Past matches are snapshotted at arrival so later publications are
    # delivered live exactly once, never re-served through batches.
    past_keys: tuple[ObjectKey, ...] = ()
    past_cursor: int = 0


@dataclass(frozen=True)
class PastBatch:
    """One batch of past matches: n of x, oldest first."""

    matches: tuple[ObjectMetadata, ...]
    has_more: bool
    total_available: int


class NodeStore:
    def __init__(self):
        self._pubs: dict[ObjectKey, PublicationRecord] = {}
        self._tag_index: dict[str, set[ObjectKey]] = {}
        self._subs: dict[tuple[int, int], SubscriptionRecord] = {}
        self._clause_index: dict[str, set[tuple[int, int]]] = {}
        self._unsub_tombstones: set[tuple[int, int]] = set()

    # -- publications ---------------------------------------------------------

    def contains_publication(self, key: ObjectKey) -> bool:
        rec = self._pubs.get(key)
        return rec is not None and not rec.unpublished

    def is_unpublished(self, key: ObjectKey) -> bool:
        rec = self._pubs.get(key)
        return rec is not None and rec.unpublished

    def get_publication(self, key: ObjectKey) -> Optional[PublicationRecord]:
        rec = self._pubs.get(key)
        if rec is None or rec.unpublished:
            return None
        return rec

    def index_publication(self, metadata: ObjectMetadata,
                          data: Optional[bytes],
                          now: float) -> list[SubscriptionRecord]:
        """Store a publication and return the stored subscriptions it matches.

        A subscription matches when one of its clauses covers the tags and its
        time frame contains ``now``. Raises DuplicateKeyError when the key is
        already live; re-storing an unpublished key is also rejected (the
        tombstone wins).
        """
        existing = self._pubs.get(metadata.key)
        if existing is not None:
            raise DuplicateKeyError(metadata.key)
        rec = PublicationRecord(metadata=metadata, data=data)
        self._pubs[metadata.key] = rec
        for tag in metadata.tags:
            self._tag_index.setdefault(tag, set()).add(metadata.key)
        return self.match_subscriptions(metadata.tags, now)

    def match_subscriptions(self, tags: frozenset,
                            now: float) -> list[SubscriptionRecord]:
        """Active stored subscriptions with a clause matching ``tags``."""
        candidates = set()
        for tag in tags:
            candidates |= self._clause_index.get(tag, set())
        out = []
        for uid in sorted(candidates):
            rec = self._subs.get(uid)
            if rec is None:
                continue
            if not time_frame_contains(rec.subscription, now):
                continue
            if any(c.matches(tags) for c in rec.clauses):
                out.append(rec)
        return out

    def update_replicas(self, key: ObjectKey, replica) -> bool:
        """Append or refresh a (node, cell) entry in a stored object's
        replication list. Returns False when the object is not live here."""
        rec = self._pubs.get(key)
        if rec is None or rec.unpublished:
            return False
        node, cell = replica
        entries = [e for e in rec.metadata.replication_list if e[0] != node]
        entries.append((node, cell))
        rec.metadata = rec.metadata.with_replicas(entries)
        return True

    def unpublish(self, key: ObjectKey) -> bool:
        """Mark an object unpublished (idempotent). The record remains as a
        tombstone so the object can never be re-stored or matched again."""
        rec = self._pubs.get(key)
        if rec is None:
            # Tombstone arrivals may precede the publication under message
            # reordering; remember the removal anyway.
            self._pubs[key] = PublicationRecord(
                metadata=None, data=None, unpublished=True)
            return False
        if rec.unpublished:
            return False
        rec.unpublished = True
        rec.data = None
        if rec.metadata is not None:
            for tag in rec.metadata.tags:
                keys = self._tag_index.get(tag)
                if keys is not None:
                    keys.discard(key)
        return True

    # -- subscriptions --------------------------------------------------------

    def contains_subscription(self, uid) -> bool:
        return uid in self._subs

    def is_tombstoned(self, uid) -> bool:
        return uid in self._unsub_tombstones

    def index_subscription(self, sub: Subscription,
                           clauses: Iterable[Conjunction],
                           now: float, batch_n: int) -> PastBatch:
        """Store a subscription and return its first batch of past matches.

        The batch holds min(batch_n, x) of the x stored publications whose
        tags match a clause and whose ts_pub lies in the frame, oldest first.
        """
        uid = sub.uid
        if uid in self._subs:
            raise DuplicateSubscriptionError(uid)
        clauses = tuple(clauses)
        past = self._scan_past(sub, clauses)
        rec = SubscriptionRecord(subscription=sub, clauses=clauses,
                                 arrival=now, past_keys=tuple(past))
        self._subs[uid] = rec
        for clause in clauses:
            self._clause_index.setdefault(
                min(clause.positives), set()).add(uid)
        return self._next_batch(rec, batch_n)

    def _scan_past(self, sub: Subscription, clauses) -> list[ObjectKey]:
        candidates = set()
        for clause in clauses:
            anchor = min(clause.positives)
            candidates |= self._tag_index.get(anchor, set())
        hits = []
        for key in candidates:
            rec = self._pubs[key]
            if rec.unpublished:
                continue
            md = rec.metadata
            if not time_frame_contains(sub, md.ts_pub):
                continue
            if any(c.matches(md.tags) for c in clauses):
                hits.append((md.ts_pub, key))
        hits.sort()
        return [key for _, key in hits]

    def _next_batch(self, rec: SubscriptionRecord, batch_n: int) -> PastBatch:
        total = len(rec.past_keys)
        matches = []
        cursor = rec.past_cursor
        while cursor < total and len(matches) < batch_n:
            pub = self._pubs.get(rec.past_keys[cursor])
            cursor += 1
            if pub is None or pub.unpublished:
                continue  # unpublished since the snapshot: silently skipped
            matches.append(pub.metadata)
        rec.past_cursor = cursor
        return PastBatch(matches=tuple(matches),
                         has_more=cursor < total,
                         total_available=total)

    def fetch_more(self, uid, batch_n: int) -> PastBatch:
        """Next past batch for a stored subscription, same deterministic
        order. Raises when the subscription is unknown or exhausted."""
        rec = self._subs.get(uid)
        if rec is None:
            raise UnknownSubscriptionError(uid)
        if rec.past_cursor >= len(rec.past_keys):
            raise BatchExhaustedError(uid)
        return self._next_batch(rec, batch_n)

    def add_clause(self, uid, clause: Conjunction) -> bool:
        """Attach another conjunction of an already-stored subscription (two
        clauses of one query can hash to the same broker cell). The clause
        joins future matching only; its own past scan is not re-served.
        Returns False when the clause is already present."""
        rec = self._subs.get(uid)
        if rec is None:
            raise UnknownSubscriptionError(uid)
        if clause in rec.clauses:
            return False
        rec.clauses = rec.clauses + (clause,)
        self._clause_index.setdefault(min(clause.positives), set()).add(uid)
        return True

    def update_subscriber_cell(self, uid, cell) -> bool:
        rec = self._subs.get(uid)
        if rec is None:
            return False
        rec.subscription = dataclasses.replace(rec.subscription,
                                               cell_owner=cell)
        return True

    def unsubscribe(self, uid) -> bool:
        """Remove a subscription (idempotent) and tombstone its id."""
        self._unsub_tombstones.add(uid)
        rec = self._subs.pop(uid, None)
        if rec is None:
            return False
        self._drop_from_clause_index(uid, rec)
        return True

    def expire(self, now: float) -> int:
        """Drop subscriptions whose concrete end timestamp has passed."""
        from .core import BOTTOM
        stale = [uid for uid, rec in self._subs.items()
                 if rec.subscription.ts_end is not BOTTOM
                 and rec.subscription.ts_end < now]
        for uid in stale:
            self._drop_from_clause_index(uid, self._subs.pop(uid))
        return len(stale)

    def _drop_from_clause_index(self, uid, rec: SubscriptionRecord):
        for clause in rec.clauses:
            uids = self._clause_index.get(min(clause.positives))
            if uids is not None:
                uids.discard(uid)

    # -- state transfer and inspection ---------------------------------------

    def subscriptions(self) -> list[SubscriptionRecord]:
        return [self._subs[uid] for uid in sorted(self._subs)]

    def publications(self) -> list[PublicationRecord]:
        return [rec for _, rec in sorted(self._pubs.items())
                if not rec.unpublished]

    def publication_count(self) -> int:
        return sum(1 for rec in self._pubs.values() if not rec.unpublished)

    def merge_publication(self, metadata: ObjectMetadata,
                          data: Optional[bytes]) -> bool:
        """Adopt a publication from a peer's state transfer; tombstones win.
        Returns True when the record was new."""
        if metadata.key in self._pubs:
            return False
        self._pubs[metadata.key] = PublicationRecord(metadata=metadata,
                                                     data=data)
        for tag in metadata.tags:
            self._tag_index.setdefault(tag, set()).add(metadata.key)
        return True

    def merge_subscription(self, sub: Subscription, clauses,
                           past_keys=(), past_cursor: int = 0) -> bool:
        """Adopt a subscription from a peer's state transfer, including its
        past-batch snapshot and cursor so follow-up batch requests keep
        working if this node becomes the answering member. Returns True when
        the record was new."""
        uid = sub.uid
        if uid in self._subs or uid in self._unsub_tombstones:
            return False
        clauses = tuple(clauses)
        rec = SubscriptionRecord(subscription=sub, clauses=clauses,
                                 arrival=0.0, past_keys=tuple(past_keys),
                                 past_cursor=past_cursor)
        self._subs[uid] = rec
        for clause in clauses:
            self._clause_index.setdefault(
                min(clause.positives), set()).add(uid)
        return True

    def subscription_batch_state(self, uid):
        rec = self._subs[uid]
        return rec.past_keys, rec.past_cursor

    def snapshot_lines(self) -> list[str]:
        """Debug dump, one tab-separated record per line (docs/formats.md)."""
        lines = []
        for key, rec in sorted(self._pubs.items()):
            if rec.metadata is None:
                lines.append(f"PUB\t{key.id_obj}\t{key.id_owner}\t-\t-\t1")
                continue
            md = rec.metadata
            lines.append("PUB\t%s\t%d\t%s\t%.3f\t%d" % (
                key.id_obj, key.id_owner, ",".join(sorted(md.tags)),
                md.ts_pub, int(rec.unpublished)))
        for uid, rec in sorted(self._subs.items()):
            sub = rec.subscription
            lines.append("SUB\t%d\t%d\t%s\t%s\t%d/%d" % (
                sub.id_owner, sub.id_sub, sub.ts_start, sub.ts_end,
                rec.past_cursor, len(rec.past_keys)))
        return lines
