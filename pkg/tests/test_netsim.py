import hashlib
import re

import pytest

from asia.harness import run_scenario, start_scenario
from asia.netsim import (
    AddressRebind,
    DanglingLink,
    DropNext,
    EventLog,
    LinkDown,
    Simulator,
    TamperNext,
    Topology,
    build_network,
    monitor_flows,
    parse_faults,
    parse_log,
    parse_topology,
)
from asia.netsim.faults import FaultParseError
from asia.model import Address, MsgType
from asia.messages import FlowTuple
from asia.model import Mode, Permission, RoleKind


class Recorder:
    def __init__(self, log=None):
        self.frames = []
        self.opened = 0
        self.closed = []
        self.ep = None

    def on_open(self, ep):
        self.ep = ep
        self.opened += 1

    def on_frame(self, ep, data):
        self.frames.append(data)

    def on_close(self, ep, reason):
        self.closed.append(reason)


def serve(net, node, port):
    rec = Recorder()
    net.listen(node, port, lambda ep: rec)
    return rec


NAT_PAIR = """\
node srv
node gw behind=nat
nat nat pool=203.0.113.9,203.0.113.10 ttl=120000 policy=drop
link srv nat 1
link gw nat 1
"""


def test_small_public_network():
    net = build_network("node broker\nnode gw-1\nnode dno\nlink broker gw-1 5\nlink broker dno 5\n")
    assert net.node_count == 3 and net.link_count == 2
    assert net.latency("gw-1", "dno") == 10


def test_shortest_path_latency():
    net = build_network(
        "node a\nnode b\nnode c\nnode d\n"
        "link a b 10\nlink b d 10\nlink a c 3\nlink c d 4\nlink a d 50\n"
    )
    assert net.latency("a", "d") == 7
    assert net.latency("d", "a") == 7
    assert net.latency("b", "c") == 13


def test_dangling_link():
    with pytest.raises(DanglingLink):
        parse_topology("node a\nlink a ghost 5\n")


def test_topology_for_loop():
    topo = parse_topology("node core router\nfor i=1..5: node gw-{i} behind=nat-{i}\n"
                          "for i=1..5: nat nat-{i} pool=wan-{i}\nfor i=1..5: link nat-{i} core 20\n"
                          "for i=1..5: link gw-{i} nat-{i} 20\n")
    assert isinstance(topo, Topology)
    assert len(topo.nats) == 5 and len(topo.links) == 10


def test_empty_queue_advances_nothing():
    sim = Simulator()
    assert sim.advance(1000) == 0
    assert sim.now == 1000
    with pytest.raises(ValueError):
        sim.advance(10)


def test_ties_run_in_insertion_order():
    sim = Simulator()
    seen = []
    for i in range(5):
        sim.call_at(10, seen.append, i)
    sim.call_at(5, seen.append, "early")
    assert sim.advance(10) == 6
    assert seen == ["early", 0, 1, 2, 3, 4]


def test_unsolicited_inbound_blocked():
    net = build_network(NAT_PAIR)
    serve(net, "gw", 7100)
    client = Recorder()
    net.connect("srv", Address("203.0.113.9", 7100), client)
    net.sim.advance(100)
    assert client.opened == 0
    assert net.dropped == {"FirewallBlocked": 1}
    drop = net.log.events("pkt.drop")[0]
    assert drop.get("reason") == "FirewallBlocked" and drop.get("at") == "nat"


def test_return_path_through_nat():
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    gw = Recorder()
    ep = net.connect("gw", Address("srv", 80), gw)
    net.sim.advance(10)
    assert gw.opened == 1
    assert server.ep.remote.host == "203.0.113.9"
    ep.send(b"hello")
    net.sim.advance(20)
    server.ep.send(b"reply")
    net.sim.advance(30)
    assert server.frames == [b"hello"] and gw.frames == [b"reply"]
    assert net.nats["nat"].live_bindings(net.sim.now) == 1
    assert net.conservation_ok()


@pytest.mark.parametrize("idle,delivered", [(120_000, True), (120_001, False)])
def test_binding_ttl_boundary(idle, delivered):
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    gw = Recorder()
    ep = net.connect("gw", Address("srv", 80), gw)
    net.sim.advance(10)
    ep.send(b"refresh")  # last outbound activity at t=10
    one_way = net.latency("srv", "gw")
    net.sim.advance(10 + idle - one_way)
    server.ep.send(b"late")
    net.sim.advance(10 + idle + 100)
    if delivered:
        assert gw.frames == [b"late"]
        assert "BindingExpired" not in net.dropped
    else:
        assert gw.frames == []
        drop = [e for e in net.log.events("pkt.drop") if e.get("reason") == "BindingExpired"]
        assert len(drop) == 1 and drop[0].get("idle") == str(idle)
        assert gw.closed and server.closed
    assert net.conservation_ok()


def test_rebind_breaks_connections_and_moves_address():
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    gw = Recorder()
    net.connect("gw", Address("srv", 80), gw)
    net.sim.advance(10)
    net.inject(AddressRebind("gw"))
    net.sim.advance(20)
    assert gw.closed == ["AddressRebind"] and server.closed == ["AddressRebind"]
    assert net.nats["nat"].external == "203.0.113.10"
    assert net.public_address("gw", 1) == Address("203.0.113.10", 1)


def test_rebind_public_node_is_warning():
    net = build_network(NAT_PAIR)
    net.inject(AddressRebind("srv"))
    warn = net.log.events("fault.warning")
    assert len(warn) == 1 and warn[0].get("reason") == "PublicNode"


def test_drop_next_breaks_connection():
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    gw = Recorder()
    ep = net.connect("gw", Address("srv", 80), gw)
    net.sim.advance(10)
    net.inject(DropNext(1, "gw"))
    ep.send(b"lost")
    net.sim.advance(20)
    assert server.frames == [] and net.dropped == {"FaultDrop": 1}
    assert gw.closed and server.closed
    assert net.conservation_ok()


def test_tamper_next_flips_one_byte():
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    ep = net.connect("gw", Address("srv", 80), Recorder())
    net.sim.advance(10)
    net.inject(TamperNext(2, 0xFF, node="gw"))
    ep.send(b"abcd")
    ep.send(b"abcd")
    net.sim.advance(20)
    assert server.frames == [b"ab\x9cd", b"abcd"]


def test_tamper_filter_on_message_type():
    net = build_network(NAT_PAIR)
    server = serve(net, "srv", 80)
    ep = net.connect("gw", Address("srv", 80), Recorder())
    net.sim.advance(10)
    net.inject(TamperNext(0, 0x01, msg_type=MsgType.APP_DATA))
    other = bytes([0, 0, 0, 0, 1, int(MsgType.KEEPALIVE)])
    app = bytes([0, 0, 0, 0, 1, int(MsgType.APP_DATA)])
    ep.send(other)
    ep.send(app)
    net.sim.advance(20)
    assert server.frames == [other, b"\x01" + app[1:]]


def test_link_down_then_recovers():
    net = build_network(NAT_PAIR)
    serve(net, "srv", 80)
    gw = Recorder()
    net.connect("gw", Address("srv", 80), gw)
    net.sim.advance(10)
    net.inject(LinkDown("nat", 1000))
    net.sim.advance(11)
    assert gw.closed == ["LinkDown"]
    late = Recorder()
    net.connect("gw", Address("srv", 80), late)
    net.sim.advance(500)
    assert late.opened == 0 and late.closed == ["LinkDown"]
    again = Recorder()
    net.sim.advance(1011)
    net.connect("gw", Address("srv", 80), again)
    net.sim.advance(1100)
    assert again.opened == 1


def test_refused_connection():
    net = build_network(NAT_PAIR)
    rec = Recorder()
    net.connect("gw", Address("srv", 9), rec)
    net.sim.advance(50)
    assert rec.closed == ["refused"] and rec.opened == 0


def test_fault_script_parsing():
    script = parse_faults("# c\n9000 rebind gw-1\n5000 drop_next 2 node=gw-1\n"
                          "7000 tamper_next 40 0x01 node=broker msg=APP_DATA relay\n")
    assert [t for t, _ in script] == [5000, 7000, 9000]
    tamper = list(script)[1][1]
    assert tamper == TamperNext(40, 1, "broker", MsgType.APP_DATA, True)
    with pytest.raises(FaultParseError):
        parse_faults("10 explode gw-1\n")


def test_event_log_format_and_digest():
    sim = Simulator()
    log = EventLog(lambda: sim.now)
    log.emit("x.y", a=1, b="two words", c=None)
    assert log.lines == ["000000000000 x.y a=1 b=two_words c=-"]
    ev = parse_log(log.lines)[0]
    assert ev.kind == "x.y" and ev.get("a") == "1"
    other = EventLog(lambda: 0)
    other.emit("x.y", a=1, b="two words", c=None)
    assert other.digest() == hashlib.sha256((log.lines[0] + "\n").encode()).hexdigest()
    assert other.digest() == log.digest()


# -- whole-run properties --------------------------------------------------------------------


def test_thousand_nat_devices_one_binding_each():
    runner = start_scenario("fanout_1000")
    runner.world.sim.advance(3000)
    net = runner.net
    assert len(net.nats) == 1000
    assert all(nat.live_bindings(3000) == 1 for nat in net.nats.values())


def test_same_seed_same_log():
    a = run_scenario("tan_misuse")
    b = run_scenario("tan_misuse")
    assert a.log.lines == b.log.lines and a.report.digest == b.report.digest


_RNG_FIELDS = re.compile(r"\b(tan|fp|old|addr|delay)=\S+")


def test_other_seed_differs_only_in_rng_fields():
    a = run_scenario("modes_nat", seed=1)
    b = run_scenario("modes_nat", seed=2)
    assert a.report.digest != b.report.digest
    mask = lambda lines: [_RNG_FIELDS.sub(r"\1=*", line) for line in lines]
    assert mask(a.log.lines) == mask(b.log.lines)


def test_monitor_two_phase_acl_change():
    runner = start_scenario("rogue_flow_monitor")
    runner.world.sim.advance(runner.sc.run_until)
    broker = runner.brokers["broker"]
    observed = runner.log.events("session.observed")
    alerts = monitor_flows(broker.export_allowed_flows(), observed)
    assert [a.peer for a in alerts] == ["mkt-x"]
    from asia.auth import parse_acl
    for entry in parse_acl("mkt-x@EnergyMarket gw-1 GetStatus").entries:
        broker.acl.append(entry)
    assert monitor_flows(broker.export_allowed_flows(), observed) == []


def test_monitor_zero_alerts_when_all_authorized():
    flows = [FlowTuple(RoleKind.DistributionNetworkOperator, "gw-1", None, Permission.IssueCommand)]
    runner = start_scenario("modes_public")
    runner.world.sim.advance(runner.sc.run_until)
    observed = runner.log.events("session.observed")
    assert len(observed) == 4
    flows.append(FlowTuple(RoleKind.DistributionNetworkOperator, "gw-1", None, Permission.GetStatus))
    assert monitor_flows(flows, observed) == []
    narrow = [FlowTuple(RoleKind.DistributionNetworkOperator, "gw-1", Mode.Proxy, Permission.IssueCommand)]
    # only the proxied shutoff matches the narrowed export
    assert len(monitor_flows(narrow, observed)) == 3
