"""Simulated hosts, links and NAT/firewall devices.

Transport is connection-oriented: ``connect`` sends a SYN, the acceptor's
listener answers with SYN-ACK, then each ``send`` is one frame delivered in
order after the path latency. Drops are values recorded in the event log.
A dropped SYN is silent (the initiator must time out) unless the sender's
own link is down; a dropped data frame breaks the connection and both
endpoints are told.
"""

from __future__ import annotations

import enum
import heapq
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from ..model import Address
from .clock import EventLog, Simulator
from .faults import AddressRebind, ConfigMutate, DropNext, FaultScript, LinkDown, TamperNext
from .topology import Topology, parse_topology

log = logging.getLogger(__name__)

EPHEMERAL_BASE = 49152
NAT_PORT_BASE = 20000


class DropReason(str, enum.Enum):
    FirewallBlocked = "FirewallBlocked"
    BindingExpired = "BindingExpired"
    NoRoute = "NoRoute"
    LinkDown = "LinkDown"
    FaultDrop = "FaultDrop"
    ConnectionClosed = "ConnectionClosed"


class Handler(Protocol):
    def on_open(self, ep: "Endpoint") -> None: ...

    def on_frame(self, ep: "Endpoint", data: bytes) -> None: ...

    def on_close(self, ep: "Endpoint", reason: str) -> None: ...


@dataclass
class Binding:
    ext_port: int
    last_activity: int


class NatDevice:
    """Endpoint-independent mapping; unsolicited inbound is dropped."""

    def __init__(self, id: str, pool: list, ttl: int, policy: str = "drop") -> None:
        self.id = id
        self.pool = list(pool)
        self.ttl = ttl
        self.policy = policy
        self._pool_idx = 0
        self.external = self.pool[0]
        self.bindings: dict[tuple[str, int], Binding] = {}
        self._next_port = NAT_PORT_BASE

    def is_live(self, b: Binding, now: int) -> bool:
        return now - b.last_activity <= self.ttl

    def outbound(self, node: str, port: int, now: int) -> tuple[int, bool]:
        """Map or refresh (node, port); returns (external port, was_expired)."""
        key = (node, port)
        b = self.bindings.get(key)
        expired = b is not None and not self.is_live(b, now)
        if b is None or expired:
            self._next_port += 1
            b = Binding(self._next_port, now)
            self.bindings[key] = b
        else:
            b.last_activity = now
        return b.ext_port, expired

    def inbound(self, node: str, port: int, ext_port: int, now: int) -> Optional[DropReason]:
        b = self.bindings.get((node, port))
        if b is None or b.ext_port != ext_port:
            return DropReason.FirewallBlocked
        if not self.is_live(b, now):
            del self.bindings[(node, port)]
            return DropReason.BindingExpired
        return None

    def live_bindings(self, now: int) -> int:
        return sum(1 for b in self.bindings.values() if self.is_live(b, now))

    def rebind(self) -> tuple[str, str]:
        old = self.external
        self._pool_idx = (self._pool_idx + 1) % len(self.pool)
        self.external = self.pool[self._pool_idx]
        self.bindings.clear()
        return old, self.external


class Node:
    __slots__ = ("id", "router", "nat", "listeners", "_next_port", "process")

    def __init__(self, id: str, router: bool = False, nat: Optional[NatDevice] = None) -> None:
        self.id = id
        self.router = router
        self.nat = nat
        self.listeners: dict[int, Callable[["Endpoint"], Handler]] = {}
        self._next_port = EPHEMERAL_BASE
        self.process = None

    def alloc_port(self) -> int:
        self._next_port += 1
        return self._next_port


class Endpoint:
    """One side of a connection, as seen by the process on that node."""

    __slots__ = ("net", "conn", "node", "local", "remote", "handler", "initiator", "open", "closed")

    def __init__(self, net, conn, node: str, local: Address, remote: Address, handler, initiator: bool) -> None:
        self.net = net
        self.conn = conn
        self.node = node
        self.local = local
        self.remote = remote
        self.handler = handler
        self.initiator = initiator
        self.open = False
        self.closed = False

    @property
    def peer(self) -> "Endpoint":
        return self.conn.b if self.initiator else self.conn.a

    def send(self, data: bytes) -> None:
        if self.closed or not self.open:
            return
        self.net._transmit(self.conn, self, "DATA", bytes(data))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.open:
            self.net._transmit(self.conn, self, "FIN", b"")
        self.net._maybe_finish(self.conn)

    def __repr__(self) -> str:
        return f"<Endpoint conn={self.conn.id} {self.local}->{self.remote}>"


class Connection:
    __slots__ = ("id", "a", "b", "dst", "a_nat", "a_ext", "b_nat", "state", "target")

    def __init__(self, id: int, dst: Address) -> None:
        self.id = id
        self.a: Optional[Endpoint] = None
        self.b: Optional[Endpoint] = None
        self.dst = dst
        self.a_nat: Optional[NatDevice] = None
        self.a_ext: Optional[Address] = None
        self.b_nat: Optional[NatDevice] = None
        self.state = "connecting"
        self.target: Optional[str] = None


class _Packet:
    __slots__ = ("id", "conn", "sender", "kind", "data", "dest_node")

    def __init__(self, id, conn, sender, kind, data) -> None:
        self.id = id
        self.conn = conn
        self.sender = sender
        self.kind = kind
        self.data = data
        self.dest_node: Optional[str] = None


class Network:
    def __init__(self, sim: Simulator, log_: EventLog, topology: Topology) -> None:
        self.sim = sim
        self.log = log_
        self.topology = topology
        self.nats: dict[str, NatDevice] = {
            n.id: NatDevice(n.id, n.pool, n.ttl, n.policy) for n in topology.nats.values()
        }
        self.nodes: dict[str, Node] = {}
        for spec in topology.nodes.values():
            nat = self.nats[spec.behind] if spec.behind else None
            self.nodes[spec.id] = Node(spec.id, spec.router, nat)
        self._adj: dict[str, list[tuple[str, int]]] = {}
        for a, b, latency, *_ in topology.links:
            self._adj.setdefault(a, []).append((b, latency))
            self._adj.setdefault(b, []).append((a, latency))
        self._dist: dict[str, dict[str, int]] = {}
        self._hosts: dict[str, object] = {}
        for node in self.nodes.values():
            if node.nat is None:
                self._hosts[node.id] = node
        for nat in self.nats.values():
            self._hosts[nat.external] = nat
        self._conn_seq = 0
        self._pkt_seq = 0
        self._down_until: dict[str, int] = {}
        self._drop_faults: list[DropNext] = []
        self._tamper_faults: list[TamperNext] = []
        self._conns: dict[int, Connection] = {}
        self._taps: list[Callable] = []
        self.sent = 0
        self.delivered = 0
        self.dropped: dict[str, int] = {}
        self._in_flight: set[int] = set()

    # -- topology queries ----------------------------------------------------------

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def link_count(self) -> int:
        return len(self.topology.links)

    def latency(self, src: str, dst: str) -> Optional[int]:
        if src == dst:
            return 0
        table = self._dist.get(src)
        if table is not None:
            return table.get(dst)
        table = self._dist.get(dst)
        if table is not None:
            return table.get(src)
        return self._dijkstra(dst).get(src)

    def _dijkstra(self, src: str) -> dict[str, int]:
        dist = {src: 0}
        heap = [(0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, d):
                continue
            for v, w in self._adj.get(u, ()):
                nd = d + w
                if nd < dist.get(v, nd + 1):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist[src] = dist
        return dist

    def public_address(self, node_id: str, port: int) -> Address:
        node = self.nodes[node_id]
        return Address(node.nat.external if node.nat else node.id, port)

    def local_host(self, node_id: str) -> str:
        """The host name a node knows itself by (private if behind NAT)."""
        return node_id

    def nat_of(self, node_id: str) -> Optional[NatDevice]:
        return self.nodes[node_id].nat

    def is_down(self, name: str) -> bool:
        until = self._down_until.get(name)
        if until is not None and self.sim.now < until:
            return True
        node = self.nodes.get(name)
        if node is not None and node.nat is not None:
            return self.is_down(node.nat.id)
        return False

    def attach(self, node_id: str, process) -> None:
        self.nodes[node_id].process = process

    def add_tap(self, fn: Callable) -> None:
        """``fn(conn_id, sender_node, receiver_node, data)`` on each delivered frame."""
        self._taps.append(fn)

    # -- sockets ---------------------------------------------------------------------

    def listen(self, node_id: str, port: int, factory: Callable[[Endpoint], Handler]) -> None:
        node = self.nodes[node_id]
        if port in node.listeners:
            raise ValueError(f"{node_id}:{port} already listening")
        node.listeners[port] = factory

    def unlisten(self, node_id: str, port: int) -> None:
        self.nodes[node_id].listeners.pop(port, None)

    def connect(self, node_id: str, dst: Address, handler: Handler) -> Endpoint:
        node = self.nodes[node_id]
        self._conn_seq += 1
        conn = Connection(self._conn_seq, Address(*dst))
        local = Address(node.id, node.alloc_port())
        conn.a = Endpoint(self, conn, node.id, local, conn.dst, handler, True)
        self._conns[conn.id] = conn
        self.log.emit("conn.open", conn=conn.id, src=local, dst=conn.dst)
        self._transmit(conn, conn.a, "SYN", b"")
        return conn.a

    def open_connections(self) -> int:
        return sum(1 for c in self._conns.values() if c.state == "open")

    # -- packet path -------------------------------------------------------------------

    def _resolve(self, host: str, from_node: Node):
        target = self._hosts.get(host)
        if target is not None:
            return target
        private = self.nodes.get(host)
        if private is not None and private.nat is not None and private.nat is from_node.nat:
            return private
        return None

    def _transmit(self, conn: Connection, sender: Endpoint, kind: str, data: bytes) -> None:
        self._pkt_seq += 1
        pkt = _Packet(self._pkt_seq, conn, sender, kind, data)
        self.sent += 1
        self._in_flight.add(pkt.id)
        src_node = self.nodes[sender.node]
        self.log.emit("pkt.send", id=pkt.id, conn=conn.id, kind=kind, src=sender.local, len=len(data))

        if kind == "DATA":
            if self._fault_drop(sender.node, pkt):
                return
            self._fault_tamper(sender.node, pkt)

        if self.is_down(src_node.id):
            self._drop(pkt, DropReason.LinkDown, src_node.id, notify=True)
            return

        receiver = sender.peer if kind != "SYN" else None
        if kind == "SYN":
            target = self._resolve(conn.dst.host, src_node)
            if target is None:
                self._drop(pkt, DropReason.NoRoute, src_node.id)
                return
            conn.target = target.id
            dest_vertex = target.id
        else:
            dest_vertex = receiver.node

        # egress translation
        nat = src_node.nat
        if sender.initiator and nat is not None:
            if kind == "SYN":
                private = self.nodes.get(conn.target)
                if private is None or private.nat is not nat:
                    ext_port, _ = nat.outbound(src_node.id, sender.local.port, self.sim.now)
                    conn.a_nat = nat
                    conn.a_ext = Address(nat.external, ext_port)
            elif conn.a_nat is not None:
                ext_port, expired = nat.outbound(src_node.id, sender.local.port, self.sim.now)
                if expired or ext_port != conn.a_ext.port or nat.external != conn.a_ext.host:
                    self._drop(pkt, DropReason.BindingExpired, nat.id)
                    return

        pkt.dest_node = dest_vertex
        delay = self.latency(src_node.id, dest_vertex)
        if delay is None:
            self._drop(pkt, DropReason.NoRoute, src_node.id)
            return
        self.sim.call_later(delay, self._arrive, pkt)

    def _arrive(self, pkt: _Packet) -> None:
        conn = pkt.conn
        kind = pkt.kind
        if kind != "SYN" and conn.state == "closed":
            self._drop(pkt, DropReason.ConnectionClosed, pkt.dest_node)
            return

        if kind == "SYN":
            self._arrive_syn(pkt)
            return

        receiver = pkt.sender.peer
        if self.is_down(receiver.node):
            self._drop(pkt, DropReason.LinkDown, receiver.node, notify=True)
            return
        extra = {}
        if receiver.initiator and conn.a_nat is not None:
            key = (receiver.node, receiver.local.port)
            before = conn.a_nat.bindings.get(key)
            reason = conn.a_nat.inbound(receiver.node, receiver.local.port, conn.a_ext.port, self.sim.now)
            if reason is not None:
                if reason == DropReason.BindingExpired:
                    extra = {"idle": self.sim.now - before.last_activity}
                self._drop(pkt, reason, conn.a_nat.id, **extra)
                return
            b = conn.a_nat.bindings[(receiver.node, receiver.local.port)]
            extra = {"nat": conn.a_nat.id, "idle": self.sim.now - b.last_activity}
        elif not receiver.initiator and conn.b_nat is not None:
            if conn.b_nat.external != conn.dst.host:
                self._drop(pkt, DropReason.NoRoute, conn.b_nat.id)
                return

        self._delivered(pkt, receiver.node, extra)
        if kind == "DATA":
            for tap in self._taps:
                tap(conn.id, pkt.sender.node, receiver.node, pkt.data)
            if not receiver.closed:
                receiver.handler.on_frame(receiver, pkt.data)
        elif kind == "SYNACK":
            if receiver.closed:
                return
            receiver.open = True
            conn.state = "open"
            receiver.handler.on_open(receiver)
        elif kind == "FIN":
            self._notify_close(receiver, "closed by peer")
            self._maybe_finish(conn)
        elif kind == "RST":
            conn.state = "closed"
            self._notify_close(receiver, "refused")

    def _arrive_syn(self, pkt: _Packet) -> None:
        conn = pkt.conn
        target = self.nats.get(conn.target) or self.nodes.get(conn.target)
        node: Optional[Node] = None
        if isinstance(target, NatDevice):
            if target.external != conn.dst.host:
                self._drop(pkt, DropReason.NoRoute, target.id)
                return
            if self.is_down(target.id):
                self._drop(pkt, DropReason.LinkDown, target.id)
                return
            if target.policy != "forward":
                self._drop(pkt, DropReason.FirewallBlocked, target.id)
                return
            for candidate in self.nodes.values():
                if candidate.nat is target and conn.dst.port in candidate.listeners:
                    node = candidate
                    break
            if node is None:
                self._drop(pkt, DropReason.FirewallBlocked, target.id)
                return
            conn.b_nat = target
        else:
            node = target
        if self.is_down(node.id):
            self._drop(pkt, DropReason.LinkDown, node.id)
            return
        self._delivered(pkt, node.id, {})
        factory = node.listeners.get(conn.dst.port)
        if factory is None or conn.a.closed:
            conn.b = Endpoint(self, conn, node.id, Address(node.id, conn.dst.port), conn.a_ext or conn.a.local, None, False)
            conn.b.closed = True
            self._transmit(conn, conn.b, "RST", b"")
            return
        remote = conn.a_ext or conn.a.local
        conn.b = Endpoint(self, conn, node.id, Address(node.id, conn.dst.port), remote, None, False)
        conn.b.open = True
        conn.b.handler = factory(conn.b)
        self.log.emit("conn.accept", conn=conn.id, node=node.id, port=conn.dst.port, peer=remote)
        conn.b.handler.on_open(conn.b)
        if not conn.b.closed:
            self._transmit(conn, conn.b, "SYNACK", b"")

    def _delivered(self, pkt: _Packet, node: str, extra: dict) -> None:
        self.delivered += 1
        self._in_flight.discard(pkt.id)
        self.log.emit("pkt.deliver", id=pkt.id, conn=pkt.conn.id, kind=pkt.kind, node=node, **extra)

    def _drop(self, pkt: _Packet, reason: DropReason, where: str, notify: bool = False, **extra) -> None:
        self._in_flight.discard(pkt.id)
        self.dropped[reason.value] = self.dropped.get(reason.value, 0) + 1
        self.log.emit("pkt.drop", id=pkt.id, conn=pkt.conn.id, kind=pkt.kind, reason=reason.value, at=where,
                      **extra)
        conn = pkt.conn
        if reason == DropReason.ConnectionClosed:
            return
        if pkt.kind == "SYN":
            if notify:
                self._break(conn, reason.value)
            return
        if pkt.kind in ("FIN", "RST"):
            return
        self._break(conn, reason.value)

    def _break(self, conn: Connection, reason: str) -> None:
        if conn.state == "closed":
            return
        conn.state = "closed"
        self.log.emit("conn.broken", conn=conn.id, reason=reason)
        for ep in (conn.a, conn.b):
            if ep is not None:
                self._notify_close(ep, reason)

    def _notify_close(self, ep: Endpoint, reason: str) -> None:
        if ep.closed:
            return
        ep.closed = True
        if ep.handler is not None:
            self.sim.call_later(0, ep.handler.on_close, ep, reason)

    def _maybe_finish(self, conn: Connection) -> None:
        if all(ep is None or ep.closed for ep in (conn.a, conn.b)) and conn.state != "closed":
            conn.state = "closed"
            self.log.emit("conn.closed", conn=conn.id)

    # -- faults ------------------------------------------------------------------------

    def _match_node(self, flt_node: Optional[str], sender_node: str, pkt: _Packet) -> bool:
        if flt_node is None:
            return True
        peer = pkt.sender.peer
        return sender_node == flt_node or (peer is not None and peer.node == flt_node)

    def _fault_drop(self, sender_node: str, pkt: _Packet) -> bool:
        for i, flt in enumerate(self._drop_faults):
            if self._match_node(flt.node, sender_node, pkt):
                left = flt.count - 1
                if left:
                    self._drop_faults[i] = DropNext(left, flt.node)
                else:
                    del self._drop_faults[i]
                self._drop(pkt, DropReason.FaultDrop, sender_node)
                return True
        return False

    def _fault_tamper(self, sender_node: str, pkt: _Packet) -> None:
        for i, flt in enumerate(self._tamper_faults):
            if not self._match_node(flt.node, sender_node, pkt):
                continue
            if flt.msg_type is not None and (len(pkt.data) < 6 or pkt.data[5] != int(flt.msg_type)):
                continue
            del self._tamper_faults[i]
            data = bytearray(pkt.data)
            idx = flt.byte_index % len(data)
            data[idx] ^= flt.xor_mask & 0xFF
            pkt.data = bytes(data)
            self.log.emit("fault.tampered", id=pkt.id, conn=pkt.conn.id, index=idx, mask=flt.xor_mask)
            return

    def schedule_faults(self, script: FaultScript) -> None:
        for time, fault in script:
            self.sim.call_at(time, self.inject, fault)

    def inject(self, fault) -> None:
        """Fire one fault now."""
        name = type(fault).__name__
        if isinstance(fault, DropNext):
            self.log.emit("fault.fire", fault=name, count=fault.count, node=fault.node or "*")
            self._drop_faults.append(fault)
        elif isinstance(fault, TamperNext):
            self.log.emit("fault.fire", fault=name, node=fault.node or "*", relay=fault.at_relay)
            if fault.at_relay:
                self._dispatch_to_process(fault.node, fault)
            else:
                self._tamper_faults.append(fault)
        elif isinstance(fault, LinkDown):
            self.log.emit("fault.fire", fault=name, node=fault.node, duration=fault.duration)
            self.link_down(fault.node, fault.duration)
        elif isinstance(fault, AddressRebind):
            self.log.emit("fault.fire", fault=name, node=fault.node)
            self.address_rebind(fault.node)
        elif isinstance(fault, ConfigMutate):
            self.log.emit("fault.fire", fault=name, node=fault.gateway)
            self._dispatch_to_process(fault.gateway, fault)
        else:
            raise TypeError(f"unknown fault {fault!r}")

    def _dispatch_to_process(self, node_id: Optional[str], fault) -> None:
        node = self.nodes.get(node_id) if node_id else None
        proc = node.process if node else None
        if proc is None or not hasattr(proc, "on_fault"):
            self.log.emit("fault.warning", fault=type(fault).__name__, node=node_id or "*", reason="NoProcess")
            return
        proc.on_fault(fault)

    def _conns_touching(self, pred) -> list[Connection]:
        return [c for c in self._conns.values() if c.state != "closed" and pred(c)]

    def link_down(self, name: str, duration: int) -> None:
        self._down_until[name] = self.sim.now + duration
        nat = self.nats.get(name)

        def touches(c: Connection) -> bool:
            if nat is not None:
                return c.a_nat is nat or c.b_nat is nat
            return c.a.node == name or (c.b is not None and c.b.node == name)

        for conn in self._conns_touching(touches):
            self._break(conn, DropReason.LinkDown.value)

    def address_rebind(self, name: str) -> None:
        nat = self.nats.get(name)
        if nat is None:
            node = self.nodes.get(name)
            nat = node.nat if node is not None else None
        if nat is None:
            self.log.emit("fault.warning", fault="AddressRebind", node=name, reason="PublicNode")
            return
        old, new = nat.rebind()
        del self._hosts[old]
        self._hosts[new] = nat
        self.log.emit("nat.rebind", nat=nat.id, old=old, new=new)
        for conn in self._conns_touching(lambda c: c.a_nat is nat or c.b_nat is nat):
            self._break(conn, "AddressRebind")

    # -- accounting --------------------------------------------------------------------

    def in_flight(self) -> int:
        return len(self._in_flight)

    def conservation_ok(self) -> bool:
        return self.sent == self.delivered + sum(self.dropped.values()) + self.in_flight()


def build_network(topology, sim: Optional[Simulator] = None, event_log: Optional[EventLog] = None) -> Network:
    """Build a network from a ``Topology`` or topology text."""
    if isinstance(topology, str):
        topology = parse_topology(topology)
    sim = sim or Simulator()
    event_log = event_log or EventLog(lambda: sim.now)
    return Network(sim, event_log, topology)
