import random

import pytest

from thyme.core import (BOTTOM, Notification, ObjectKey, ObjectMetadata,
                        Subscription, time_frame_contains)
from thyme import query as q


def make_sub(ts_start, ts_end, owner=1, id_sub=0, text="beach"):
    dnf = q.to_dnf(q.parse(text), random.Random(0))
    return Subscription(id_sub=id_sub, query=dnf, ts_start=ts_start,
                        ts_end=ts_end, id_owner=owner)


class TestTimeFrame:
    def test_past_frame_contains_earlier_event(self):
        # frame (BOTTOM, t): events that happened before the subscription
        sub = make_sub(BOTTOM, 1000.0)
        assert time_frame_contains(sub, 999.0)

    def test_bottom_bottom_contains_any_time(self):
        sub = make_sub(BOTTOM, BOTTOM)
        for ts in (0.0, 1.0, 1e9):
            assert time_frame_contains(sub, ts)

    def test_outside_closed_interval(self):
        sub = make_sub(100.0, 200.0)
        assert not time_frame_contains(sub, 250.0)

    def test_closed_on_both_ends(self):
        sub = make_sub(100.0, 200.0)
        assert time_frame_contains(sub, 100.0)
        assert time_frame_contains(sub, 200.0)

    def test_widening_is_monotone(self):
        rng = random.Random(5)
        for _ in range(200):
            lo = rng.uniform(0, 500)
            hi = lo + rng.uniform(0, 500)
            ts = rng.uniform(0, 1200)
            narrow = make_sub(lo, hi)
            wider = make_sub(max(0.0, lo - 50), hi + 50)
            widest = make_sub(BOTTOM, BOTTOM)
            if time_frame_contains(narrow, ts):
                assert time_frame_contains(wider, ts)
                assert time_frame_contains(widest, ts)

    def test_inverted_frame_rejected(self):
        with pytest.raises(ValueError):
            make_sub(200.0, 100.0)


class TestObjectKey:
    def test_same_id_obj_different_owner_distinct(self):
        a = ObjectKey("photo.jpg", 1)
        b = ObjectKey("photo.jpg", 2)
        assert a != b
        assert len({a, b}) == 2

    def test_equality_is_pair_equality(self):
        assert ObjectKey("x", 3) == ObjectKey("x", 3)


class TestMetadata:
    def test_requires_tags(self):
        with pytest.raises(ValueError):
            ObjectMetadata(ObjectKey("a", 1), frozenset(), 64, 0.0)

    def test_requires_concrete_ts(self):
        with pytest.raises(ValueError):
            ObjectMetadata(ObjectKey("a", 1), frozenset(["t"]), 64, BOTTOM)

    def test_replica_update(self):
        md = ObjectMetadata(ObjectKey("a", 1), frozenset(["t"]), 64, 5.0,
                            ((1, (0, 0)),))
        md2 = md.with_replicas(md.replication_list + ((7, (2, 1)),))
        assert (7, (2, 1)) in md2.replication_list
        assert md.replication_list == ((1, (0, 0)),)


class TestWireSizes:
    """Sizes follow the documented layout and must be deterministic."""

    def test_object_key(self):
        # 2 (len) + 5 (text) + 4 (owner)
        assert ObjectKey("photo", 3).wire_size() == 11

    def test_metadata(self):
        md = ObjectMetadata(ObjectKey("p", 1), frozenset(["beach", "summer"]),
                            64, 10.0)
        # key 7 + ts 8 + tags 1+6+7 + summary 2+64 + replicas 1
        assert md.wire_size() == 7 + 8 + 14 + 66 + 1

    def test_metadata_grows_with_replicas(self):
        md = ObjectMetadata(ObjectKey("p", 1), frozenset(["t"]), 0, 1.0)
        md2 = md.with_replicas([(4, (0, 0)), (9, (1, 1))])
        assert md2.wire_size() == md.wire_size() + 2 * 6

    def test_subscription_and_notification(self):
        sub = make_sub(BOTTOM, BOTTOM, text="beach")
        base = sub.wire_size()
        assert base == 4 + sub.query.wire_size() + 16 + 4
        with_cell = Subscription(0, sub.query, BOTTOM, BOTTOM, 1, (2, 3))
        assert with_cell.wire_size() == base + 2
        md = ObjectMetadata(ObjectKey("p", 1), frozenset(["t"]), 0, 1.0)
        note = Notification(1, 0, (md, md), has_more=True, total_available=5)
        assert note.wire_size() == 4 + 4 + 1 + 4 + 1 + 2 * md.wire_size()
