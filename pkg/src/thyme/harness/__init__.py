from .trace import TraceConfig, TraceOp, generate_trace, read_trace, \
    write_trace, op_counts
from .scenario import AREA_FOR_NODES, DownloadPolicy, Scenario, area_for
from . import metrics

__all__ = [
    "TraceConfig", "TraceOp", "generate_trace", "read_trace", "write_trace",
    "op_counts", "AREA_FOR_NODES", "DownloadPolicy", "Scenario", "area_for",
    "metrics",
]
