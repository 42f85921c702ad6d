"""Line-oriented topology files.

::

    # comment
    node broker
    node core router
    node gw-1 behind=nat-1
    nat nat-1 pool=198.51.100.1,198.51.100.2 [ttl=120000] [policy=drop|forward]
    link gw-1 nat-1 1
    link nat-1 core 20
    for i=1..1000: node gw-{i} behind=nat-{i}

``for`` expands its body once per integer in the inclusive range, with
``{i}`` substituted. Node ids double as the public host name of nodes that
are not behind a NAT device.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

DEFAULT_BINDING_TTL_MS = 120_000


class TopologyError(ValueError):
    def __init__(self, message: str, source: str = "<topology>", lineno: int = 0) -> None:
        where = f"{source}:{lineno}: " if lineno else ""
        super().__init__(where + message)
        self.source = source
        self.lineno = lineno


class DanglingLink(TopologyError):
    pass


class DuplicateNode(TopologyError):
    pass


@dataclass
class NodeSpec:
    id: str
    router: bool = False
    behind: Optional[str] = None


@dataclass
class NatSpec:
    id: str
    pool: list
    ttl: int = DEFAULT_BINDING_TTL_MS
    policy: str = "drop"


@dataclass
class Topology:
    nodes: dict = field(default_factory=dict)
    nats: dict = field(default_factory=dict)
    links: list = field(default_factory=list)

    def add_node(self, spec: NodeSpec, source: str = "<topology>", lineno: int = 0) -> None:
        if spec.id in self.nodes or spec.id in self.nats:
            raise DuplicateNode(f"duplicate node {spec.id!r}", source, lineno)
        self.nodes[spec.id] = spec

    def add_nat(self, spec: NatSpec, source: str = "<topology>", lineno: int = 0) -> None:
        if spec.id in self.nodes or spec.id in self.nats:
            raise DuplicateNode(f"duplicate node {spec.id!r}", source, lineno)
        if not spec.pool:
            raise TopologyError(f"nat {spec.id} has an empty address pool", source, lineno)
        if spec.policy not in ("drop", "forward"):
            raise TopologyError(f"nat policy must be drop or forward, not {spec.policy!r}", source, lineno)
        self.nats[spec.id] = spec

    def add_link(self, a: str, b: str, latency: int, source: str = "<topology>", lineno: int = 0) -> None:
        self.links.append((a, b, int(latency), source, lineno))

    def validate(self) -> "Topology":
        for a, b, latency, source, lineno in self.links:
            for end in (a, b):
                if end not in self.nodes and end not in self.nats:
                    raise DanglingLink(f"link endpoint {end!r} is not a node", source, lineno)
            if latency < 0:
                raise TopologyError("negative latency", source, lineno)
        for node in self.nodes.values():
            if node.behind is not None and node.behind not in self.nats:
                raise DanglingLink(f"node {node.id} is behind unknown nat {node.behind!r}")
        pools: dict[str, str] = {}
        for nat in self.nats.values():
            for addr in nat.pool:
                if addr in self.nodes or addr in pools:
                    raise TopologyError(f"address {addr} assigned twice")
                pools[addr] = nat.id
        return self


_FOR = re.compile(r"^for\s+i=(\d+)\.\.(\d+)\s*:\s*(.+)$")


def _options(parts: list[str]) -> tuple[list[str], dict[str, str]]:
    flags, opts = [], {}
    for p in parts:
        if "=" in p:
            k, _, v = p.partition("=")
            opts[k] = v
        else:
            flags.append(p)
    return flags, opts


def _apply(topo: Topology, line: str, source: str, lineno: int) -> None:
    parts = line.split()
    kind, rest = parts[0], parts[1:]
    try:
        if kind == "node":
            flags, opts = _options(rest[1:])
            topo.add_node(NodeSpec(rest[0], router="router" in flags, behind=opts.get("behind")), source, lineno)
        elif kind == "nat":
            _, opts = _options(rest[1:])
            pool = [p for p in opts.get("pool", "").split(",") if p]
            topo.add_nat(
                NatSpec(rest[0], pool, int(opts.get("ttl", DEFAULT_BINDING_TTL_MS)), opts.get("policy", "drop")),
                source,
                lineno,
            )
        elif kind == "link":
            topo.add_link(rest[0], rest[1], int(rest[2]), source, lineno)
        else:
            raise TopologyError(f"unknown record {kind!r}", source, lineno)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, TopologyError):
            raise
        raise TopologyError(f"malformed {kind} record: {exc}", source, lineno) from None


def parse_topology(text: str, source: str = "<topology>") -> Topology:
    topo = Topology()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _FOR.match(line)
        if m:
            lo, hi, body = int(m.group(1)), int(m.group(2)), m.group(3)
            for i in range(lo, hi + 1):
                _apply(topo, body.replace("{i}", str(i)), source, lineno)
        else:
            _apply(topo, line, source, lineno)
    return topo.validate()


def load_topology(path) -> Topology:
    path = Path(path)
    return parse_topology(path.read_text(), str(path))
