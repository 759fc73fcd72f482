"""Synthetic workload traces.

Emulates a social-network workload compressed onto the simulation window:
per-node Poisson publications with Zipf-popular tags, subscriptions on the
most popular tags (60% all-time past form, 40% future form), and rare
unpublish/unsubscribe operations confined to the second half. Rate defaults
are calibrated so a 100-node trace lands on roughly 4545 publications,
526 subscriptions, 29 unpublications and 15 unsubscriptions.

File format (tab-separated, '#'-prefixed header; docs/formats.md):
    time_ms  node  PUB     id_obj  tag1,tag2  size
    time_ms  node  SUB     ref  query  ts_start  ts_end
    time_ms  node  UNPUB   id_obj
    time_ms  node  UNSUB   ref
    time_ms  node  POLICY  download_prob
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceOp:
    time_ms: float
    node: int
    op: str     # PUB | SUB | UNPUB | UNSUB | POLICY
    args: tuple


@dataclass
class TraceConfig:
    node_count: int = 100
    seed: int = 12
    ops_start: float = 60.0    # seconds
    ops_end: float = 660.0
    # rates per node per (compressed) game hour; three game hours per trace
    pub_rate: float = 15.15
    sub_rate_first_half: float = 2.63
    sub_rate_second_half: float = 0.877
    unpub_rate: float = 0.193
    unsub_rate: float = 0.1
    tag_universe: int = 200
    zipf_s: float = 1.0
    # per-user activity skew: node i publishes at a rate ~ 1/(i+1)^s, scaled
    # so a 100-node trace keeps the reference totals (the "top-k most active
    # users" of a heavy-tailed crawl; 0 disables the skew)
    user_activity_s: float = 1.0
    tags_per_pub_max: int = 1
    top_tag_fraction: float = 0.6
    past_prob: float = 0.6
    object_size: int = 160
    download_prob: float = 0.5
    multi_clause_prob: float = 0.0
    roles: str = "all"  # all | split (publishers vs subscribers)
    publisher_fraction: float = 0.5

    def game_hour_ms(self) -> float:
        return (self.ops_end - self.ops_start) * 1000.0 / 3.0

    @classmethod
    def field_types(cls):
        return {f.name: type(f.default) for f in dataclasses.fields(cls)}

    def with_overrides(self, mapping: dict) -> "TraceConfig":
        types = self.field_types()
        kw = {}
        for key, value in mapping.items():
            if key not in types:
                raise TraceError(f"unknown trace config key {key!r}")
            typ = types[key]
            try:
                kw[key] = value if isinstance(value, typ) else typ(value)
            except (TypeError, ValueError):
                raise TraceError(f"bad value for {key}: {value!r}")
        return dataclasses.replace(self, **kw)


def _zipf_weights(n: int, s: float) -> list[float]:
    weights = [1.0 / (r ** s) for r in range(1, n + 1)]
    total = sum(weights)
    return [w / total for w in weights]


def _poisson_times(rng, rate_per_hour: float, start_ms: float, end_ms: float,
                   hour_ms: float) -> list[float]:
    if rate_per_hour <= 0:
        return []
    mean_gap = hour_ms / rate_per_hour
    times = []
    t = start_ms + rng.expovariate(1.0) * mean_gap
    while t < end_ms:
        times.append(t)
        t += rng.expovariate(1.0) * mean_gap
    return times


def generate_trace(cfg: TraceConfig, seed=None) -> tuple[dict, list[TraceOp]]:
    """Returns (meta, ops) sorted by time; deterministic for a given seed."""
    rng = random.Random(cfg.seed if seed is None else seed)
    n = cfg.node_count
    hour = cfg.game_hour_ms()
    start = cfg.ops_start * 1000.0
    end = cfg.ops_end * 1000.0
    half = (start + end) / 2.0
    weights = _zipf_weights(cfg.tag_universe, cfg.zipf_s)
    top_k = max(1, int(cfg.tag_universe * cfg.top_tag_fraction))

    if cfg.roles == "split":
        ids = list(range(n))
        rng.shuffle(ids)
        cut = max(1, int(n * cfg.publisher_fraction))
        publishers = sorted(ids[:cut])
        subscribers = sorted(ids[cut:])
    elif cfg.roles == "all":
        publishers = list(range(n))
        subscribers = list(range(n))
    else:
        raise TraceError(f"unknown roles mode {cfg.roles!r}")

    def pick_tags(k: int) -> list[str]:
        chosen: list[str] = []
        while len(chosen) < k:
            r = rng.choices(range(cfg.tag_universe), weights=weights)[0]
            tag = f"t{r:03d}"
            if tag not in chosen:
                chosen.append(tag)
        return chosen

    def pick_query() -> str:
        first = f"t{rng.randrange(top_k):03d}"
        if rng.random() >= cfg.multi_clause_prob:
            return first
        second = f"t{rng.randrange(top_k):03d}"
        return f"{first} | {second}" if rng.random() < 0.5 \
            else f"{first} & {second}"

    raw: list[tuple] = []
    pubs_by_node: dict[int, list] = {i: [] for i in range(n)}
    subs_by_node: dict[int, list] = {i: [] for i in range(n)}

    if cfg.user_activity_s > 0:
        s = cfg.user_activity_s
        ref = sum(1.0 / (i + 1) ** s for i in range(100)) / 100.0
        activity = {node: (1.0 / (rank + 1) ** s) / ref
                    for rank, node in enumerate(publishers)}
    else:
        activity = {node: 1.0 for node in publishers}

    for node in publishers:
        rate = cfg.pub_rate * activity[node]
        for t in _poisson_times(rng, rate, start, end, hour):
            k = rng.randint(1, max(1, cfg.tags_per_pub_max))
            ident = f"o{node}_{len(pubs_by_node[node])}"
            pubs_by_node[node].append((t, ident))
            raw.append((t, node, "PUB",
                        (ident, ",".join(pick_tags(k)),
                         str(cfg.object_size))))

    for node in subscribers:
        times = _poisson_times(rng, cfg.sub_rate_first_half, start, half, hour)
        times += _poisson_times(rng, cfg.sub_rate_second_half, half, end, hour)
        for t in sorted(times):
            ref = f"s{node}_{len(subs_by_node[node])}"
            subs_by_node[node].append((t, ref))
            if rng.random() < cfg.past_prob:
                frame = ("BOT", "BOT")     # any time, past included
            else:
                frame = ("NOW", "BOT")     # from now on
            raw.append((t, node, "SUB", (ref, pick_query()) + frame))

    for node in publishers:
        for t in _poisson_times(rng, cfg.unpub_rate, half, end, hour):
            earlier = [ident for (pt, ident) in pubs_by_node[node] if pt < t]
            if earlier:
                raw.append((t, node, "UNPUB", (rng.choice(earlier),)))

    for node in subscribers:
        for t in _poisson_times(rng, cfg.unsub_rate, half, end, hour):
            earlier = [ref for (st, ref) in subs_by_node[node] if st < t]
            if earlier:
                raw.append((t, node, "UNSUB", (rng.choice(earlier),)))

    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    ops = [TraceOp(0.0, 0, "POLICY", (str(cfg.download_prob),))]
    ops += [TraceOp(t, node, op, args) for (t, node, op, args) in raw]
    meta = {
        "node_count": str(n),
        "seed": str(cfg.seed if seed is None else seed),
        "roles": ("all" if cfg.roles == "all"
                  else ",".join(str(p) for p in publishers)),
        "download_prob": str(cfg.download_prob),
        "ops_start": str(cfg.ops_start),
        "ops_end": str(cfg.ops_end),
    }
    return meta, ops


def op_counts(ops) -> dict:
    counts = {"PUB": 0, "SUB": 0, "UNPUB": 0, "UNSUB": 0}
    for op in ops:
        if op.op in counts:
            counts[op.op] += 1
    return counts


def write_trace(path, meta: dict, ops: list[TraceOp]):
    with open(path, "w") as fh:
        fh.write("#thyme-trace v1\n")
        for key in sorted(meta):
            fh.write(f"#{key}\t{meta[key]}\n")
        for op in ops:
            fields = [f"{op.time_ms:.3f}", str(op.node), op.op, *op.args]
            fh.write("\t".join(fields) + "\n")


def read_trace(path) -> tuple[dict, list[TraceOp]]:
    meta: dict = {}
    ops: list[TraceOp] = []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#thyme-trace"):
            raise TraceError(f"{path}: not a trace file")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("\t")
                meta[key] = value
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise TraceError(f"{path}:{lineno}: malformed op line")
            try:
                ops.append(TraceOp(float(fields[0]), int(fields[1]),
                                   fields[2], tuple(fields[3:])))
            except ValueError as e:
                raise TraceError(f"{path}:{lineno}: {e}")
    return meta, ops
