"""Shared domain types for both materializations.

Node/object identifiers, timestamps with the bottom value, object metadata,
subscriptions and notifications. Everything here is a plain value type; all
mutation happens inside the single-threaded simulator loop.

Every type knows its serialized wire size so traffic metrics are
deterministic. The byte layout convention (fixed-width integers,
length-prefixed strings and collections) is documented in docs/formats.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .query import DnfQuery

__all__ = [
    "BOTTOM",
    "Timestamp",
    "NodeId",
    "CellId",
    "ObjectKey",
    "ObjectMetadata",
    "Subscription",
    "Notification",
    "time_frame_contains",
    "resolve_start",
    "resolve_end",
]

NodeId = int
CellId = tuple[int, int]

# Serialized field widths (bytes)
SIZE_NODE_ID = 4
SIZE_TIMESTAMP = 8
SIZE_CELL_ID = 2
SIZE_COUNT = 4


class _Bottom:
    """The distinguished timestamp standing for system start/end.

    As a frame start it resolves to time zero, as a frame end to infinity.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BOTTOM"


BOTTOM = _Bottom()

#: Either BOTTOM or concrete simulated milliseconds since run start.
Timestamp = Union[_Bottom, float]


def is_bottom(ts: Timestamp) -> bool:
    return ts is BOTTOM


def resolve_start(ts: Timestamp) -> float:
    """Concrete frame start; BOTTOM means the beginning of time."""
    return 0.0 if ts is BOTTOM else ts


def resolve_end(ts: Timestamp) -> float:
    """Concrete frame end; BOTTOM means the end of time."""
    return float("inf") if ts is BOTTOM else ts


@dataclass(frozen=True, order=True)
class ObjectKey:
    """System-wide unique object key: the publisher-scoped id plus the owner.

    id_obj alone is a domain key; two owners may reuse the same id_obj.
    """

    id_obj: str
    id_owner: NodeId

    def wire_size(self) -> int:
        return 2 + len(self.id_obj.encode()) + SIZE_NODE_ID


@dataclass(frozen=True)
class ObjectMetadata:
    """Published-object descriptor.

    replication_list holds (node, cell) pairs of known replicas; it is empty
    in the flooding materialization and starts as the publisher's cell
    membership in the geographic one (the publisher is always present).
    """

    key: ObjectKey
    tags: frozenset
    summary_size: int
    ts_pub: float
    replication_list: tuple[tuple[NodeId, CellId], ...] = ()

    def __post_init__(self):
        if not self.tags:
            raise ValueError("object metadata requires at least one tag")
        if self.ts_pub is BOTTOM or self.ts_pub < 0:
            raise ValueError("ts_pub must be a concrete non-negative timestamp")

    @property
    def id_owner(self) -> NodeId:
        return self.key.id_owner

    def with_replicas(self, replicas) -> "ObjectMetadata":
        return ObjectMetadata(self.key, self.tags, self.summary_size,
                              self.ts_pub, tuple(replicas))

    def wire_size(self) -> int:
        size = self.key.wire_size() + SIZE_TIMESTAMP
        size += 1 + sum(1 + len(t.encode()) for t in self.tags)
        size += 2 + self.summary_size
        size += 1 + len(self.replication_list) * (SIZE_NODE_ID + SIZE_CELL_ID)
        return size


@dataclass(frozen=True)
class Subscription:
    """Time-scoped query registration.

    (id_owner, id_sub) is globally unique; id_sub is a per-owner counter.
    cell_owner is only set in the geographic materialization, where brokers
    need a cell to notify.
    """

    id_sub: int
    query: DnfQuery
    ts_start: Timestamp
    ts_end: Timestamp
    id_owner: NodeId
    cell_owner: Optional[CellId] = None

    def __post_init__(self):
        if (self.ts_start is not BOTTOM and self.ts_end is not BOTTOM
                and self.ts_start > self.ts_end):
            raise ValueError("subscription time frame start exceeds end")

    @property
    def uid(self) -> tuple[NodeId, int]:
        return (self.id_owner, self.id_sub)

    def wire_size(self) -> int:
        size = SIZE_COUNT + self.query.wire_size() + 2 * SIZE_TIMESTAMP
        size += SIZE_NODE_ID
        if self.cell_owner is not None:
            size += SIZE_CELL_ID
        return size


@dataclass(frozen=True)
class Notification:
    """Matching-object metadata delivered to a subscriber.

    Past-match notifications are batched: ``matches`` holds at most the batch
    size, ``total_available`` the full match count at the serving store.
    """

    sub_owner: NodeId
    id_sub: int
    matches: tuple[ObjectMetadata, ...]
    has_more: bool = False
    total_available: int = 0

    def wire_size(self) -> int:
        return (SIZE_NODE_ID + SIZE_COUNT + 1 + SIZE_COUNT
                + 1 + sum(m.wire_size() for m in self.matches))


def time_frame_contains(sub: Subscription, ts: float) -> bool:
    """True iff a concrete timestamp falls inside the subscription's frame.

    Frames are closed on both ends; BOTTOM resolves to system start for
    ts_start and system end for ts_end, so a (BOTTOM, BOTTOM) frame contains
    every concrete timestamp.
    """
    return resolve_start(sub.ts_start) <= ts <= resolve_end(sub.ts_end)
