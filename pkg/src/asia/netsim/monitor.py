"""Compare observed sessions with a broker's exported allowed flows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..messages import FlowExport, FlowTuple
from ..model import Mode, Permission, RoleKind
from .clock import Event

OBSERVED = "session.observed"


@dataclass(frozen=True)
class Alert:
    time: int
    flow: FlowTuple
    peer: str

    def line(self) -> str:
        perm = self.flow.permission.name if self.flow.permission is not None else "-"
        return (f"alert time={self.time} role={self.flow.role.name} gateway={self.flow.gateway_id} "
                f"mode={self.flow.mode.name} perm={perm} peer={self.peer}")


def observed_flow(ev: Event) -> FlowTuple:
    perm = ev.get("perm", "-")
    return FlowTuple(
        RoleKind[ev.get("role")],
        ev.get("gateway"),
        Mode[ev.get("mode")],
        None if perm == "-" else Permission[perm],
    )


def monitor_flows(export, events: Iterable[Event]) -> list[Alert]:
    """One alert per observed session whose tuple no exported tuple covers."""
    flows = export.flows if isinstance(export, FlowExport) else tuple(export)
    alerts = []
    for ev in events:
        if ev.kind != OBSERVED:
            continue
        seen = observed_flow(ev)
        if not any(f.covers(seen) for f in flows):
            alerts.append(Alert(ev.time, seen, ev.get("peer", "-")))
    return alerts
