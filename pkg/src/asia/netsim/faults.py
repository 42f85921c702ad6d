"""Fault scripts: ``<time> <fault> args...`` one per line.

::

    5000  drop_next 1 [node=gw-1]
    7000  tamper_next 40 0x01 [node=broker] [msg=PROXY_DATA] [relay]
    9000  link_down broker 5000
    12000 rebind gw-1
    15000 config_mutate gw-1
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from ..model import MsgType


class FaultParseError(ValueError):
    pass


@dataclass(frozen=True)
class DropNext:
    count: int
    node: Optional[str] = None


@dataclass(frozen=True)
class TamperNext:
    byte_index: int
    xor_mask: int
    node: Optional[str] = None
    msg_type: Optional[MsgType] = None
    at_relay: bool = False


@dataclass(frozen=True)
class LinkDown:
    node: str
    duration: int


@dataclass(frozen=True)
class AddressRebind:
    node: str


@dataclass(frozen=True)
class ConfigMutate:
    gateway: str


Fault = Union[DropNext, TamperNext, LinkDown, AddressRebind, ConfigMutate]


@dataclass(frozen=True)
class FaultScript:
    entries: tuple = ()

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _opts(parts):
    pos, opts = [], {}
    for p in parts:
        if "=" in p:
            k, _, v = p.partition("=")
            opts[k] = v
        else:
            pos.append(p)
    return pos, opts


def parse_fault(kind: str, args: list[str]) -> Fault:
    pos, opts = _opts(args)
    if kind == "drop_next":
        return DropNext(int(pos[0]), opts.get("node"))
    if kind == "tamper_next":
        msg = opts.get("msg")
        return TamperNext(
            int(pos[0], 0),
            int(pos[1], 0),
            opts.get("node"),
            MsgType[msg] if msg else None,
            "relay" in pos[2:],
        )
    if kind == "link_down":
        return LinkDown(pos[0], int(pos[1]))
    if kind == "rebind":
        return AddressRebind(pos[0])
    if kind == "config_mutate":
        return ConfigMutate(pos[0])
    raise FaultParseError(f"unknown fault {kind!r}")


def parse_faults(text: str, source: str = "<faults>") -> FaultScript:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            entries.append((int(parts[0]), parse_fault(parts[1], parts[2:])))
        except (IndexError, KeyError, ValueError) as exc:
            raise FaultParseError(f"{source}:{lineno}: {exc}") from None
    entries.sort(key=lambda e: e[0])
    return FaultScript(tuple(entries))


def load_faults(path) -> FaultScript:
    path = Path(path)
    return parse_faults(path.read_text(), str(path))
