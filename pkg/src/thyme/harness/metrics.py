"""Metrics extraction, the expected-notification oracle, and CSV plumbing.

Two notification success ratios are reported. delivered/generated compares
against what brokers actually sent. delivered/expected compares against a
trace-level ground truth: every (publication, subscription) pair that matches
under the time-aware semantics, considering only operations that actually
issued (nodes that were off skip their operations). The expected form is what
makes missed *detections* visible — a publisher that crashes before a past
subscription arrives never generates the notification, yet the pair counts.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict

from ..core import BOTTOM, ObjectKey
from ..events import OPS, RunLog
from ..query import parse

PARAM_COLUMNS = [
    "materialization", "node_count", "area_width", "area_height",
    "churn_mode", "churn_fraction", "v_max", "topology_seed", "run_seed",
    "duration_s",
]

TRAFFIC_COLUMNS = [
    "phy_tx_bytes_total", "fwd_bytes_total", "ctrl_bytes_total",
    "data_bytes_total", "retx_bytes_total", "mac_retx_total",
    "mac_fail_total",
]

NOTIF_COLUMNS = [
    "notif_expected", "notif_generated", "notif_delivered",
    "notif_success_expected", "notif_success_generated",
    "notif_latency_avg_ms", "notif_latency_max_ms",
]

DOWNLOAD_COLUMNS = ["download_hops_avg", "download_meters_avg"]


def op_columns() -> list[str]:
    cols = []
    for op in OPS:
        cols += [f"{op}_attempted", f"{op}_completed", f"{op}_success_ratio",
                 f"{op}_latency_avg_ms", f"{op}_latency_max_ms"]
    return cols


CSV_COLUMNS = PARAM_COLUMNS + TRAFFIC_COLUMNS + op_columns() \
    + NOTIF_COLUMNS + DOWNLOAD_COLUMNS


def expected_pairs(log: RunLog) -> set:
    """Ground-truth matched (owner, id_sub, key) pairs from issued ops.

    A pair is expected when the publication and subscription both issued, the
    query matches the tags, the frame contains ts_pub, the object was still
    published when a past-frame subscription arrived, and the subscription
    was still active when a later publication arrived.
    """
    pubs = {}       # key -> (tags, ts_pub)
    unpub_at = {}   # key -> time
    subs = {}       # uid -> (query ast, ts_start, ts_end, issue)
    unsub_at = {}   # uid -> time
    for rec in log.ops:
        if rec.status == "skip":
            continue
        if rec.kind == "publish" and "id_obj" in rec.extra:
            key = ObjectKey(rec.extra["id_obj"], rec.node)
            pubs[key] = (rec.extra["tags"], rec.t_issue)
        elif rec.kind == "unpublish" and "id_obj" in rec.extra:
            key = ObjectKey(rec.extra["id_obj"], rec.node)
            unpub_at.setdefault(key, rec.t_issue)
        elif rec.kind == "subscribe" and "uid" in rec.extra:
            subs[rec.extra["uid"]] = (parse(rec.extra["query"]),
                                      rec.extra["ts_start"],
                                      rec.extra["ts_end"], rec.t_issue)
        elif rec.kind == "unsubscribe" and "uid" in rec.extra:
            unsub_at.setdefault(rec.extra["uid"], rec.t_issue)

    by_tag = defaultdict(list)
    for key, (tags, ts_pub) in pubs.items():
        for tag in tags:
            by_tag[tag].append(key)

    expected = set()
    for uid, (query, ts_s, ts_e, issue) in subs.items():
        lo = 0.0 if ts_s is BOTTOM else ts_s
        hi = math.inf if ts_e is BOTTOM else ts_e
        candidates = set()
        for tag in query.literals():
            candidates.update(by_tag.get(tag, ()))
        for key in candidates:
            tags, ts_pub = pubs[key]
            if not (lo <= ts_pub <= hi):
                continue
            if not query.evaluate(tags):
                continue
            if ts_pub <= issue:
                # past pair: gone objects are legitimately invisible
                gone = unpub_at.get(key)
                if gone is not None and gone <= issue:
                    continue
            else:
                # live pair: the subscription must still be active
                ended = unsub_at.get(uid)
                if ended is not None and ended <= ts_pub:
                    continue
            expected.add((uid[0], uid[1], key))
    return expected


def collect_row(scenario) -> dict:
    """One finished Scenario -> one CSV row (plain dict)."""
    cfg = scenario.cfg
    log = scenario.log
    row = {
        "materialization": scenario.materialization,
        "node_count": scenario.n,
        "area_width": cfg.area_width,
        "area_height": cfg.area_height,
        "churn_mode": cfg.churn_mode,
        "churn_fraction": cfg.churn_fraction,
        "v_max": cfg.v_max,
        "topology_seed": scenario.topology_seed,
        "run_seed": scenario.run_seed,
        "duration_s": cfg.duration,
    }
    totals = scenario.kernel.totals()
    row.update({
        "phy_tx_bytes_total": totals["phy_tx_bytes"],
        "fwd_bytes_total": totals["fwd_bytes"],
        "ctrl_bytes_total": totals["ctrl_bytes"],
        "data_bytes_total": totals["data_bytes"],
        "retx_bytes_total": totals["retx_bytes"],
        "mac_retx_total": totals["mac_retx"],
        "mac_fail_total": totals["mac_fail"],
    })
    for op, stats in log.op_stats().items():
        row[f"{op}_attempted"] = stats["attempted"]
        row[f"{op}_completed"] = stats["completed"]
        row[f"{op}_success_ratio"] = (stats["completed"] / stats["attempted"]
                                      if stats["attempted"] else 1.0)
        row[f"{op}_latency_avg_ms"] = stats["latency_avg_ms"]
        row[f"{op}_latency_max_ms"] = stats["latency_max_ms"]
    expected = expected_pairs(log)
    delivered = set(log.notif_recv)
    nstats = log.notif_stats()
    row["notif_expected"] = len(expected)
    row["notif_generated"] = nstats["generated_pairs"]
    row["notif_delivered"] = nstats["delivered_pairs"]
    row["notif_success_expected"] = (len(delivered & expected) / len(expected)
                                     if expected else 1.0)
    row["notif_success_generated"] = (
        len(delivered & log.notif_gen_pairs) / len(log.notif_gen_pairs)
        if log.notif_gen_pairs else 1.0)
    row["notif_latency_avg_ms"] = nstats["latency_avg_ms"]
    row["notif_latency_max_ms"] = nstats["latency_max_ms"]
    dstats = log.download_distance()
    row["download_hops_avg"] = dstats["hops_avg"]
    row["download_meters_avg"] = dstats["meters_avg"]
    return row


# -- CSV / aggregation ------------------------------------------------------------

GROUP_KEYS = ["materialization", "node_count", "churn_mode",
              "churn_fraction", "v_max"]


def write_rows(path, rows, append: bool = False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if not append:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def aggregate(rows, group_keys=None) -> list[dict]:
    """Mean and stddev per numeric column over each scenario group."""
    group_keys = group_keys or GROUP_KEYS
    numeric = [c for c in CSV_COLUMNS
               if c not in PARAM_COLUMNS]
    groups: dict[tuple, list] = defaultdict(list)
    for row in rows:
        groups[tuple(str(row[k]) for k in group_keys)].append(row)
    out = []
    for key in sorted(groups):
        bucket = groups[key]
        agg = dict(zip(group_keys, key))
        agg["runs"] = len(bucket)
        for col in numeric:
            values = [float(r[col]) for r in bucket]
            mean = sum(values) / len(values)
            var = sum((v - mean) ** 2 for v in values) / len(values)
            agg[f"{col}_mean"] = mean
            agg[f"{col}_std"] = math.sqrt(var)
        out.append(agg)
    return out


def write_aggregate(path, aggregated, group_keys=None):
    group_keys = group_keys or GROUP_KEYS
    numeric = [c for c in CSV_COLUMNS if c not in PARAM_COLUMNS]
    columns = group_keys + ["runs"]
    for col in numeric:
        columns += [f"{col}_mean", f"{col}_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in aggregated:
            writer.writerow(row)


def report_columns(aggregated, x_key: str, metrics: list[str]) -> str:
    """Gnuplot-style whitespace columns: x, then mean/std per metric per
    materialization."""
    mats = sorted({row["materialization"] for row in aggregated})
    header = ["#" + x_key]
    for mat in mats:
        for metric in metrics:
            header += [f"{mat}.{metric}.mean", f"{mat}.{metric}.std"]
    lines = ["\t".join(header)]
    xs = sorted({row[x_key] for row in aggregated},
                key=lambda v: float(v) if _is_number(v) else v)
    for x in xs:
        fields = [str(x)]
        for mat in mats:
            match = [r for r in aggregated
                     if r[x_key] == x and r["materialization"] == mat]
            for metric in metrics:
                if match:
                    fields += [f"{float(match[0][metric + '_mean']):.6g}",
                               f"{float(match[0][metric + '_std']):.6g}"]
                else:
                    fields += ["nan", "nan"]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def _is_number(v) -> bool:
    try:
        float(v)
        return True
    except (TypeError, ValueError):
        return False
