"""Structured per-run event log.

Every node app reports operation lifecycles, notification generation and
delivery, downloads and NACKs here; the harness turns one RunLog into one
metrics row. Notification generation/delivery are tracked as unique
(subscriber, subscription, object) pairs so duplicate deliveries across
broker cells or re-sends collapse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

OPS = ("publish", "subscribe", "unpublish", "unsubscribe", "download")


@dataclass
class OpRecord:
    kind: str
    node: int
    t_issue: float
    t_end: float = -1.0
    status: str = "pending"  # pending | ok | fail:<reason> | skip
    extra: dict = field(default_factory=dict)


class RunLog:
    def __init__(self):
        self.ops: list[OpRecord] = []
        self.notif_gen_pairs: set = set()     # (owner, id_sub, object key)
        self.notif_gen_events = 0
        self.notif_recv: dict = {}            # pair -> (t, latency_ms)
        self.download_paths: list = []        # (meters, hops) of successes
        self.nacks = 0
        self.replica_announces = 0

    def op_start(self, kind: str, node: int, t: float, **extra) -> OpRecord:
        rec = OpRecord(kind=kind, node=node, t_issue=t, extra=extra)
        self.ops.append(rec)
        return rec

    def op_end(self, rec: OpRecord, t: float, status: str):
        rec.t_end = t
        rec.status = status

    def op_skip(self, kind: str, node: int, t: float):
        rec = OpRecord(kind=kind, node=node, t_issue=t, t_end=t, status="skip")
        self.ops.append(rec)

    def notif_generated(self, owner: int, id_sub: int, key, t: float):
        self.notif_gen_events += 1
        self.notif_gen_pairs.add((owner, id_sub, key))

    def notif_delivered(self, owner: int, id_sub: int, key, t: float,
                        latency_ms: float) -> bool:
        """Record a delivery; False when the pair was already delivered."""
        pair = (owner, id_sub, key)
        if pair in self.notif_recv:
            return False
        self.notif_recv[pair] = (t, latency_ms)
        return True

    def download_path(self, meters: float, hops: int):
        self.download_paths.append((meters, hops))

    # -- summaries -------------------------------------------------------------

    def op_stats(self) -> dict:
        out = {}
        for kind in OPS:
            recs = [r for r in self.ops if r.kind == kind]
            attempted = [r for r in recs if r.status != "skip"]
            done = [r for r in attempted if r.status == "ok"]
            latencies = [r.t_end - r.t_issue for r in done if r.t_end >= 0]
            out[kind] = {
                "attempted": len(attempted),
                "completed": len(done),
                "skipped": len(recs) - len(attempted),
                "latency_avg_ms": (sum(latencies) / len(latencies))
                if latencies else 0.0,
                "latency_max_ms": max(latencies, default=0.0),
            }
        return out

    def notif_stats(self) -> dict:
        latencies = [lat for (_, lat) in self.notif_recv.values()]
        return {
            "generated_pairs": len(self.notif_gen_pairs),
            "generated_events": self.notif_gen_events,
            "delivered_pairs": len(self.notif_recv),
            "latency_avg_ms": (sum(latencies) / len(latencies))
            if latencies else 0.0,
            "latency_max_ms": max(latencies, default=0.0),
        }

    def download_distance(self) -> dict:
        if not self.download_paths:
            return {"meters_avg": 0.0, "hops_avg": 0.0}
        meters = [m for m, _ in self.download_paths]
        hops = [h for _, h in self.download_paths]
        return {"meters_avg": sum(meters) / len(meters),
                "hops_avg": sum(hops) / len(hops)}
