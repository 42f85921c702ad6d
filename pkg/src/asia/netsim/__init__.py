from .clock import Event, EventLog, Simulator, Timer, parse_event, parse_log
from .faults import (
    AddressRebind,
    ConfigMutate,
    DropNext,
    FaultParseError,
    FaultScript,
    LinkDown,
    TamperNext,
    load_faults,
    parse_faults,
)
from .monitor import Alert, monitor_flows
from .network import DropReason, Endpoint, NatDevice, Network, build_network
from .topology import DanglingLink, DuplicateNode, Topology, TopologyError, load_topology, parse_topology

__all__ = [
    "AddressRebind", "Alert", "ConfigMutate", "DanglingLink", "DropNext", "DropReason", "DuplicateNode",
    "Endpoint", "Event", "EventLog", "FaultParseError", "FaultScript", "LinkDown", "NatDevice", "Network",
    "Simulator", "TamperNext", "Timer", "Topology", "TopologyError", "build_network", "load_faults",
    "load_topology", "monitor_flows", "parse_event", "parse_faults", "parse_log", "parse_topology",
]
