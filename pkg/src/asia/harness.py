"""Scenario files, the runner, and the metrics report.

A scenario is a directory holding ``scenario.txt`` plus the topology, ACL and
fault files it names. ``scenario.txt`` is line oriented::

    name modes_nat
    description Three modes against one gateway behind NAT
    seed 7
    scheme ed25519
    topology topology.txt
    acl acl.txt
    faults faults.txt
    broker broker
    gateway gw-1 policy=centralized appliances=Washer:2,Washer:2
    requestor dno-1 role=DistributionNetworkOperator node=dno
    at 1000 dno-1 session inv gw-1 Invocation IssueCommand shutoff Washer 3
    expect outcome inv ok
    expect count pkt.drop reason=FirewallBlocked >= 1
    expect alerts == 0
    run 60000

``for i=1..N: <line>`` repeats a line with ``{i}`` substituted.
"""

from __future__ import annotations

import operator
import random
import re
import time as _time
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Optional

from .auth import AclTable, TokenIssuer, load_acl, parse_acl
from .broker import Broker, BrokerConfig, GatewayState
from .channel import Outcome, World
from .crypto import CertificateAuthority, TrustStore, make_scheme
from .gateway import CredentialStore, GatewayAgent, GatewayConfig, Policy
from .model import (
    HASH_NAME,
    Address,
    ApplianceClass,
    ApplianceState,
    Command,
    ConfigChange,
    Identity,
    InstallApp,
    Mode,
    Permission,
    PriceSignal,
    RoleKind,
    ShutoffAppliance,
    ShutoffGenerator,
    StatusQuery,
    Tan,
)
from .netsim import (
    EventLog,
    FaultScript,
    Network,
    Simulator,
    Topology,
    load_faults,
    load_topology,
    monitor_flows,
    parse_log,
)
from .requestor import RequestorClient

REPORT_VERSION = 1
SCENARIO_FILE = "scenario.txt"
BUNDLED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    def __init__(self, message: str, source: str = "<scenario>", lineno: int = 0) -> None:
        super().__init__(f"{source}:{lineno}: {message}" if lineno else f"{source}: {message}")
        self.source = source
        self.lineno = lineno


class UnknownScenario(LookupError):
    pass


class ExpectationFailed(AssertionError):
    def __init__(self, failures: list[str]) -> None:
        super().__init__("; ".join(failures))
        self.failures = failures


# -- declarations -----------------------------------------------------------------------


@dataclass
class ActorDecl:
    kind: str
    name: str
    node: str
    options: dict
    lineno: int


@dataclass
class Action:
    time: int
    actor: str
    verb: str
    args: list
    lineno: int


@dataclass
class Expectation:
    kind: str
    args: list
    text: str
    lineno: int


@dataclass
class Scenario:
    name: str
    path: Path
    description: str = ""
    seed: int = 0
    scheme: str = "ed25519"
    topology: Optional[Topology] = None
    acl: AclTable = field(default_factory=AclTable)
    faults: FaultScript = field(default_factory=FaultScript)
    actors: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    expectations: list = field(default_factory=list)
    run_until: int = 60_000

    def actor(self, name: str) -> ActorDecl:
        for a in self.actors:
            if a.name == name:
                return a
        raise KeyError(name)


_FOR = re.compile(r"^for\s+i=(\d+)\.\.(\d+)\s*:\s*(.+)$")
_OPT = re.compile(r"^\w[\w.-]*=")


def _split_opts(parts: list[str]) -> tuple[list[str], dict]:
    pos, opts = [], {}
    for p in parts:
        if _OPT.match(p):
            k, _, v = p.partition("=")
            opts[k] = v
        else:
            pos.append(p)
    return pos, opts


def _expand(text: str) -> list[tuple[int, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _FOR.match(line)
        if m:
            for i in range(int(m.group(1)), int(m.group(2)) + 1):
                out.append((lineno, m.group(3).replace("{i}", str(i))))
        else:
            out.append((lineno, line))
    return out


def parse_scenario(text: str, base: Path, source: str = SCENARIO_FILE) -> Scenario:
    sc = Scenario(name=base.name, path=base)
    names: set[str] = set()
    for lineno, line in _expand(text):
        head, *rest = line.split()
        try:
            if head == "name":
                sc.name = rest[0]
            elif head == "description":
                sc.description = line.split(None, 1)[1]
            elif head == "seed":
                sc.seed = int(rest[0])
            elif head == "scheme":
                make_scheme(rest[0])
                sc.scheme = rest[0]
            elif head == "topology":
                sc.topology = load_topology(base / rest[0])
            elif head == "acl":
                sc.acl = load_acl(base / rest[0])
            elif head == "faults":
                sc.faults = load_faults(base / rest[0])
            elif head in ("broker", "gateway", "requestor"):
                _, opts = _split_opts(rest[1:])
                name = rest[0]
                if name in names:
                    raise ScenarioError(f"actor {name!r} declared twice", source, lineno)
                names.add(name)
                sc.actors.append(ActorDecl(head, name, opts.pop("node", name), opts, lineno))
            elif head == "at":
                sc.actions.append(Action(int(rest[0]), rest[1], rest[2], rest[3:], lineno))
            elif head == "expect":
                sc.expectations.append(Expectation(rest[0], rest[1:], line.split(None, 1)[1], lineno))
            elif head == "run":
                sc.run_until = int(rest[0])
            else:
                raise ScenarioError(f"unknown record {head!r}", source, lineno)
        except ScenarioError:
            raise
        except (IndexError, ValueError, OSError) as exc:
            raise ScenarioError(f"{head}: {exc}", source, lineno) from None
    if sc.topology is None:
        raise ScenarioError("no topology", source)
    for a in sc.actors:
        if a.node not in sc.topology.nodes:
            raise ScenarioError(f"actor {a.name} sits on unknown node {a.node!r}", source, a.lineno)
    for act in sc.actions:
        if act.actor not in names:
            raise ScenarioError(f"action for unknown actor {act.actor!r}", source, act.lineno)
        if act.time < 0 or act.time > sc.run_until:
            raise ScenarioError(f"action at {act.time} outside the run", source, act.lineno)
    for e in sc.expectations:
        if e.kind not in ("outcome", "count", "alerts", "state"):
            raise ScenarioError(f"unknown expectation {e.kind!r}", source, e.lineno)
    return sc


def load_scenario(path) -> Scenario:
    """Accepts a scenario directory, its ``scenario.txt``, or a bundled name."""
    p = Path(path)
    if not p.exists():
        bundled = BUNDLED_DIR / str(path)
        if not bundled.is_dir():
            raise UnknownScenario(str(path))
        p = bundled
    if p.is_dir():
        p = p / SCENARIO_FILE
    return parse_scenario(p.read_text(), p.parent, str(p))


def list_scenarios() -> list[tuple[str, str]]:
    out = []
    for d in sorted(BUNDLED_DIR.iterdir()):
        f = d / SCENARIO_FILE
        if f.is_file():
            desc = ""
            for _, line in _expand(f.read_text()):
                if line.startswith("description "):
                    desc = line.split(None, 1)[1]
                    break
            out.append((d.name, desc))
    return out


def describe_scenario(name: str) -> str:
    sc = load_scenario(name)
    lines = [f"{sc.name}: {sc.description}", f"seed {sc.seed}, scheme {sc.scheme}, runs to {sc.run_until} ms"]
    counts = Counter(a.kind for a in sc.actors)
    lines.append(", ".join(f"{n} {k}(s)" for k, n in sorted(counts.items())))
    lines.append(f"{len(sc.faults)} scripted fault(s), {len(sc.actions)} workload action(s)")
    lines += [f"  expect {e.text}" for e in sc.expectations]
    return "\n".join(lines)


# -- command parsing --------------------------------------------------------------------


def parse_command(tokens: list[str], now: int, sequence: int) -> Optional[Command]:
    if not tokens or tokens[0] == "none":
        return None
    kind, args = tokens[0], tokens[1:]
    if kind == "shutoff":
        payload = ShutoffAppliance(ApplianceClass[args[0]], Decimal(args[1]))
    elif kind == "shutoff_generator":
        payload = ShutoffGenerator()
    elif kind == "price":
        start = int(args[1]) if len(args) > 1 else now
        end = int(args[2]) if len(args) > 2 else start + 3_600_000
        payload = PriceSignal(Decimal(args[0]), start, end)
    elif kind == "status":
        payload = StatusQuery()
    elif kind == "config":
        payload = ConfigChange(args[0], args[1])
    elif kind == "install":
        payload = InstallApp(args[0], args[1], " ".join(args[2:]))
    else:
        raise ScenarioError(f"unknown command {kind!r}")
    return Command(payload, now, sequence)


def parse_appliances(spec: str) -> tuple:
    """``Washer:2,EvCharger:7.4,Heater:1.5:off,SolarGenerator:3:gen``"""
    out, counts = [], Counter()
    for item in filter(None, spec.split(",")):
        parts = item.split(":")
        cls = ApplianceClass[parts[0]]
        counts[cls] += 1
        flags = set(parts[2:])
        out.append(ApplianceState(f"{cls.name.lower()}-{counts[cls]}", cls, "off" not in flags,
                                  Decimal(parts[1]), "gen" in flags))
    return tuple(out)


# -- report -----------------------------------------------------------------------------


_OPS = {"==": operator.eq, "!=": operator.ne, ">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt}


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    digest: str
    events: int
    sessions: dict
    drops: dict
    alerts: int
    fanout_first: Optional[int]
    fanout_last: Optional[int]
    expectations: list
    audit: list
    sim_end: int
    wall_seconds: float = 0.0

    @property
    def fanout_ms(self) -> Optional[int]:
        if self.fanout_first is None or self.fanout_last is None:
            return None
        return self.fanout_last - self.fanout_first

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.expectations) and all(ok for _, ok in self.audit)

    def lines(self) -> list[str]:
        out = [
            f"# asia-report {REPORT_VERSION}",
            f"scenario {self.scenario}",
            f"seed {self.seed}",
            f"hash {HASH_NAME}",
            f"digest {self.digest}",
            f"events {self.events}",
            f"sim_end {self.sim_end}",
        ]
        for mode in sorted(self.sessions):
            ok, fail = self.sessions[mode]
            out.append(f"sessions mode={mode} ok={ok} fail={fail}")
        for reason in sorted(self.drops):
            out.append(f"drops reason={reason} count={self.drops[reason]}")
        out.append(f"alerts {self.alerts}")
        if self.fanout_ms is not None:
            out.append(f"fanout first={self.fanout_first} last={self.fanout_last} ms={self.fanout_ms}")
        for name, ok in self.audit:
            out.append(f"audit {name} {'PASS' if ok else 'FAIL'}")
        for text, ok, detail in self.expectations:
            out.append(f"expect {'PASS' if ok else 'FAIL'} {text} [{detail}]")
        out.append(f"result {'PASS' if self.passed else 'FAIL'}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def summary(self) -> str:
        failed = [t for t, ok, _ in self.expectations if not ok] + [n for n, ok in self.audit if not ok]
        status = "PASS" if self.passed else "FAIL"
        tail = f" (failed: {'; '.join(failed)})" if failed else ""
        return (f"{self.scenario}: {status} {len(self.expectations)} expectation(s), "
                f"{self.events} events, digest {self.digest[:16]}{tail}")


def recount(lines: list[str]) -> dict:
    """Counts derived only from the raw log lines."""
    sessions: dict[str, list[int]] = {}
    drops: Counter = Counter()
    first = last = None
    for ev in parse_log(lines):
        if ev.kind == "req.outcome":
            slot = sessions.setdefault(ev.get("mode"), [0, 0])
            slot[0 if ev.get("ok") == "1" else 1] += 1
            if ev.get("ok") == "1" and ev.get("achieved") != "-":
                last = ev.time if last is None else max(last, ev.time)
        elif ev.kind == "req.request":
            first = ev.time if first is None else min(first, ev.time)
        elif ev.kind == "pkt.drop":
            drops[ev.get("reason")] += 1
    return {"sessions": {k: tuple(v) for k, v in sessions.items()}, "drops": dict(drops),
            "fanout": (first, last if last is not None else None)}


# -- runner -----------------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    report: MetricsReport
    log: EventLog
    world: World
    brokers: dict
    gateways: dict
    requestors: dict
    outcomes: dict

    @property
    def exit_status(self) -> int:
        return 0 if self.report.passed else 1

    def raise_for_failures(self) -> None:
        failed = [t for t, ok, _ in self.report.expectations if not ok] + [n for n, ok in self.report.audit if not ok]
        if failed:
            raise ExpectationFailed(failed)


class ScenarioRunner:
    """Builds every actor of a scenario onto one simulated network.

    ``start_scenario`` returns one of these with actors started and the
    workload scheduled; callers drive ``world.sim`` themselves.
    """

    def __init__(self, sc: Scenario, seed: int) -> None:
        self.sc = sc
        self.seed = seed
        sim = Simulator()
        self.log = EventLog(lambda: sim.now)
        self.net = Network(sim, self.log, sc.topology)
        self.scheme = make_scheme(sc.scheme)
        self.world = World(self.net, seed, self.scheme)
        self.pki_rng = random.Random(f"{seed}:pki")
        self.ca = CertificateAuthority.create("asia-ca", self.scheme, self.pki_rng)
        self.trust = TrustStore(self.scheme)
        self.trust.add_anchor(self.ca)
        self.brokers: dict[str, Broker] = {}
        self.gateways: dict[str, GatewayAgent] = {}
        self.requestors: dict[str, RequestorClient] = {}
        self.outcomes: dict[str, tuple[str, Outcome]] = {}
        self.issuers: dict[Identity, bytes] = {}
        self._seq = 0

    def build(self) -> None:
        for decl in self.sc.actors:
            if decl.kind == "broker":
                self._broker(decl)
        for decl in self.sc.actors:
            if decl.kind == "gateway":
                self._gateway(decl)
            elif decl.kind == "requestor":
                self._requestor(decl)
        for b in self.brokers.values():
            b.start()
        for g in self.gateways.values():
            g.start()
        for r in self.requestors.values():
            r.start()
        self.net.schedule_faults(self.sc.faults)
        for act in self.sc.actions:
            self.world.sim.call_at(act.time, self._dispatch, act)

    def _broker(self, decl: ActorDecl) -> None:
        o = decl.options
        ident = Identity(decl.name, RoleKind.GatewayOperator)
        cred = self.ca.issue(ident, self.pki_rng)
        sk, pk = self.scheme.keypair(self.pki_rng)
        issuer = TokenIssuer(ident, self.scheme, sk, pk)
        self.issuers[ident] = pk
        cfg = BrokerConfig()
        for key, attr in (("port", "port"), ("keepalive", "keepalive_ms"), ("stale", "stale_after_ms"),
                          ("offline", "offline_after_ms"), ("pending", "pending_timeout_ms"),
                          ("token_ttl", "token_ttl_ms")):
            if key in o:
                setattr(cfg, attr, int(o[key]))
        self.brokers[decl.name] = Broker(self.world, decl.node, cred, self.trust, self.sc.acl, issuer, cfg)

    def _broker_address(self, decl: ActorDecl) -> Address:
        name = decl.options.get("broker") or next(iter(self.brokers))
        b = self.brokers[name]
        return Address(b.node, b.config.port)

    def _gateway(self, decl: ActorDecl) -> None:
        o = decl.options
        ident = Identity(decl.name, RoleKind.IctGateway)
        cred = self.ca.issue(ident, self.pki_rng)
        listen = o.get("listen", "7100")
        cfg = GatewayConfig(
            decl.name,
            broker=self._broker_address(decl),
            listen_port=None if listen == "none" else int(listen),
            policy=Policy(o.get("policy", "centralized")),
            keepalive_ms=int(o.get("keepalive", 30_000)),
            appliances=parse_appliances(o.get("appliances", "")),
        )
        local = load_acl(self.sc.path / o["local_acl"]) if "local_acl" in o else AclTable()
        store = CredentialStore({"energy-provider": cred})
        self.gateways[decl.name] = GatewayAgent(self.world, decl.node, ident, cfg, store, self.trust,
                                                self.issuers, local)

    def _requestor(self, decl: ActorDecl) -> None:
        o = decl.options
        ident = Identity(decl.name, RoleKind[o.get("role", "DistributionNetworkOperator")])
        cred = self.ca.issue(ident, self.pki_rng)
        cb = o.get("callback", "7200")
        self.requestors[decl.name] = RequestorClient(
            self.world, decl.node, cred, self.trust, self._broker_address(decl),
            None if cb == "none" else int(cb),
        )

    # -- workload -------------------------------------------------------------------------

    def _dispatch(self, act: Action) -> None:
        now = self.world.sim.now
        self.log.emit("workload", actor=act.actor, verb=act.verb)
        if act.actor in self.requestors:
            self._requestor_action(self.requestors[act.actor], act, now)
        elif act.actor in self.gateways:
            self._gateway_action(self.gateways[act.actor], act)
        elif act.actor in self.brokers:
            self._broker_action(self.brokers[act.actor], act)

    def _requestor_action(self, r: RequestorClient, act: Action, now: int) -> None:
        pos, opts = _split_opts(act.args)
        if act.verb == "session":
            label, gw, mode, perm = pos[0], pos[1], Mode[pos[2]], Permission[pos[3]]
            self._seq += 1
            cmd = parse_command(pos[4:], now, self._seq)
            tan = None
            if "tan" in opts:
                tan = Tan(bytes.fromhex(opts["tan"]))
            out = r.run(gw, mode, perm, cmd, label=label, tan=tan, connect_delay=int(opts.get("delay", 0)))
            self.outcomes[label] = (mode.name, out)
        elif act.verb == "direct":
            label, host, port = pos[0], pos[1], int(pos[2])
            out = r.direct_connect(Address(host, port), None, label)
            self.outcomes[label] = ("Direct", out)

            def emit(o: Outcome) -> None:
                self.log.emit("req.outcome", requestor=r.identity.id, label=label, mode="Direct", ok=o.ok,
                              error=o.error_name or "-", achieved="-")

            out.add_done_callback(emit)
        else:
            raise ScenarioError(f"unknown requestor action {act.verb!r}", str(self.sc.path), act.lineno)

    def _gateway_action(self, g: GatewayAgent, act: Action) -> None:
        if act.verb == "corrupt_tan":
            g.corrupt_next_tan()
        elif act.verb == "redial":
            g.redial()
        elif act.verb == "swap_credential":
            g.swap_credential(self.ca.issue(g.identity, self.pki_rng))
        elif act.verb == "stop":
            g.stop()
        else:
            raise ScenarioError(f"unknown gateway action {act.verb!r}", str(self.sc.path), act.lineno)

    def _broker_action(self, b: Broker, act: Action) -> None:
        if act.verb == "acl_add":
            for entry in parse_acl(" ".join(act.args)).entries:
                b.acl.append(entry)
            self.log.emit("broker.acl_change", entries=len(b.acl))
        else:
            raise ScenarioError(f"unknown broker action {act.verb!r}", str(self.sc.path), act.lineno)

    # -- evaluation -----------------------------------------------------------------------

    def evaluate(self, alerts: int) -> list:
        results = []
        events = None
        for e in self.sc.expectations:
            if e.kind == "outcome":
                label, want = e.args[0], e.args[1]
                entry = self.outcomes.get(label)
                if entry is None:
                    results.append((e.text, False, "no such outcome"))
                    continue
                out = entry[1]
                got = "pending" if not out.done else ("ok" if out.ok else f"error {out.error_name}")
                expected = want if want == "ok" else f"error {e.args[2]}"
                results.append((e.text, got == expected, got))
            elif e.kind == "count":
                if events is None:
                    events = parse_log(self.log.lines)
                kind = e.args[0]
                pos, filt = _split_opts(e.args[1:])
                op, n = pos[0], int(pos[1])
                got = sum(1 for ev in events if ev.kind == kind and all(ev.get(k) == v for k, v in filt.items()))
                results.append((e.text, _OPS[op](got, n), f"count={got}"))
            elif e.kind == "alerts":
                op, n = e.args[0], int(e.args[1])
                results.append((e.text, _OPS[op](alerts, n), f"alerts={alerts}"))
            elif e.kind == "state":
                gw, want = e.args[0], GatewayState[e.args[1]]
                b = next(iter(self.brokers.values()))
                rec = b.registry.get(gw)
                got = rec.state(b.now, b.config) if rec else None
                results.append((e.text, got == want, f"state={got.name if got else 'unregistered'}"))
        return results


def start_scenario(path, seed: Optional[int] = None) -> ScenarioRunner:
    sc = path if isinstance(path, Scenario) else load_scenario(path)
    runner = ScenarioRunner(sc, sc.seed if seed is None else seed)
    runner.build()
    return runner


def run_scenario(path, seed: Optional[int] = None, log_path=None, report_path=None) -> RunResult:
    started = _time.perf_counter()
    runner = start_scenario(path, seed)
    sc, seed = runner.sc, runner.seed
    runner.world.sim.advance(sc.run_until)

    alerts = []
    if runner.brokers:
        export = next(iter(runner.brokers.values())).export_allowed_flows()
        alerts = monitor_flows(export, runner.log.events("session.observed"))
        for a in alerts:
            runner.log.emit("monitor.alert", role=a.flow.role.name, gateway=a.flow.gateway_id,
                            mode=a.flow.mode.name, peer=a.peer)

    expectations = runner.evaluate(len(alerts))
    counts = recount(runner.log.lines)

    live_sessions: dict[str, list[int]] = {}
    for mode, out in runner.outcomes.values():
        if out.done:
            live_sessions.setdefault(mode, [0, 0])[0 if out.ok else 1] += 1
    net = runner.net
    audit = [
        ("sessions", {k: tuple(v) for k, v in live_sessions.items()} == counts["sessions"]),
        ("drops", dict(net.dropped) == counts["drops"]),
        ("conservation", net.conservation_ok()),
    ]
    first, last = counts["fanout"]
    report = MetricsReport(
        scenario=sc.name,
        seed=seed,
        digest=runner.log.digest(),
        events=len(runner.log.lines),
        sessions=counts["sessions"],
        drops=counts["drops"],
        alerts=len(alerts),
        fanout_first=first,
        fanout_last=last,
        expectations=expectations,
        audit=audit,
        sim_end=runner.world.sim.now,
        wall_seconds=_time.perf_counter() - started,
    )
    if log_path is not None:
        runner.log.write(log_path)
    if report_path is not None:
        Path(report_path).write_text(report.text())
    return RunResult(sc, report, runner.log, runner.world, runner.brokers, runner.gateways,
                     runner.requestors, {k: v[1] for k, v in runner.outcomes.items()})
