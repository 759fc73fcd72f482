"""Node churn: permanent crash-stop and transient on/off cycling.

Permanent: each victim picks a uniform instant inside the crash window and
never returns; its counters freeze because a dead node neither sends nor
receives nor fires node-gated timers.

Transient: victims alternate on-periods (120 s) and off-periods (60 s); at
each period boundary they switch state with probability p_switch, otherwise
they repeat the period. A node coming back on runs its materialization's
rejoin procedure.
"""

from __future__ import annotations

from .kernel import MS, Simulator


def schedule_permanent(kernel: Simulator, victims) -> None:
    cfg = kernel.cfg
    rng = kernel.rng
    lo = cfg.crash_window_start * MS
    hi = cfg.crash_window_end * MS
    for node in sorted(victims):
        at = lo + rng.random() * (hi - lo)
        kernel.schedule(at - kernel.now, kernel.set_alive, node, False)


class TransientChurn:
    def __init__(self, kernel: Simulator, victims, first_boundary_s: float):
        self.kernel = kernel
        self.victims = sorted(victims)
        self.first_boundary_s = first_boundary_s

    def start(self):
        """Victims begin on; the first boundary is staggered across one
        on-period after first_boundary_s so switches do not synchronize."""
        cfg = self.kernel.cfg
        rng = self.kernel.rng
        for node in self.victims:
            at = (self.first_boundary_s + rng.random() * cfg.on_period) * MS
            self.kernel.schedule(at - self.kernel.now, self._boundary, node)

    def _boundary(self, node: int):
        kernel = self.kernel
        cfg = kernel.cfg
        on = bool(kernel.alive[node])
        if kernel.rng.random() < cfg.p_switch:
            if on:
                kernel.set_alive(node, False)
            else:
                kernel.set_alive(node, True)
                app = kernel.apps[node]
                if app is not None:
                    app.on_rejoin()
            on = not on
        period = cfg.on_period if on else cfg.off_period
        kernel.schedule(period * MS, self._boundary, node)
