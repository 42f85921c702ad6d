"""Type-specific body records carried inside WireMessage envelopes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .auth import AppDataBody, HandshakeBody, SoftwareToken
from .codec import InvalidValue, Reader, Writer, decode_exact
from .model import (
    Address,
    Command,
    CommandResult,
    ErrorCode,
    Identity,
    Mode,
    MsgType,
    Permission,
    RoleKind,
    Tan,
)


class _Body:
    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes):
        return decode_exact(data, cls.decode)


@dataclass(frozen=True)
class Empty(_Body):
    def encode(self, w: Writer) -> None:
        pass

    @classmethod
    def decode(cls, r: Reader) -> "Empty":
        return cls()


@dataclass(frozen=True)
class Register(_Body):
    gateway: Identity
    listen_port: Optional[int] = None

    def encode(self, w: Writer) -> None:
        self.gateway.encode(w)
        w.optional(self.listen_port, Writer.u16)

    @classmethod
    def decode(cls, r: Reader) -> "Register":
        return cls(Identity.decode(r), r.optional(Reader.u16))


@dataclass(frozen=True)
class RegisterAck(_Body):
    observed: Address
    keepalive_ms: int

    def encode(self, w: Writer) -> None:
        self.observed.encode(w)
        w.u32(self.keepalive_ms)

    @classmethod
    def decode(cls, r: Reader) -> "RegisterAck":
        return cls(Address.decode(r), r.u32())


@dataclass(frozen=True)
class SessionRequest(_Body):
    gateway_id: str
    mode: Mode
    permission: Permission
    requestor_tan: Optional[Tan] = None
    callback: Optional[Address] = None
    command: Optional[Command] = None

    def __post_init__(self) -> None:
        if self.mode == Mode.Invocation and self.callback is None:
            raise ValueError("invocation requests need a callback address")

    def encode(self, w: Writer) -> None:
        w.text(self.gateway_id)
        self.mode.encode(w)
        self.permission.encode(w)
        w.optional(self.requestor_tan, lambda w_, t: t.encode(w_))
        w.optional(self.callback, lambda w_, a: a.encode(w_))
        w.optional(self.command, lambda w_, c: c.encode(w_))

    @classmethod
    def decode(cls, r: Reader) -> "SessionRequest":
        return cls(
            r.text(),
            Mode.decode(r),
            Permission.decode(r),
            r.optional(Tan.decode),
            r.optional(Address.decode),
            r.optional(Command.decode),
        )


@dataclass(frozen=True)
class SessionGrant(_Body):
    """Broker's positive answer; also the REDIRECT_RESPONSE body."""

    token: SoftwareToken
    address: Optional[Address] = None
    session_id: Optional[int] = None

    def encode(self, w: Writer) -> None:
        self.token.encode(w)
        w.optional(self.address, lambda w_, a: a.encode(w_))
        w.optional(self.session_id, Writer.u64)

    @classmethod
    def decode(cls, r: Reader) -> "SessionGrant":
        return cls(SoftwareToken.decode(r), r.optional(Address.decode), r.optional(Reader.u64))


@dataclass(frozen=True)
class ConnectRequest(_Body):
    callback: Address
    tan: Tan
    token: SoftwareToken
    command: Optional[Command] = None

    def encode(self, w: Writer) -> None:
        self.callback.encode(w)
        self.tan.encode(w)
        self.token.encode(w)
        w.optional(self.command, lambda w_, c: c.encode(w_))

    @classmethod
    def decode(cls, r: Reader) -> "ConnectRequest":
        return cls(Address.decode(r), Tan.decode(r), SoftwareToken.decode(r), r.optional(Command.decode))


@dataclass(frozen=True)
class DialBack(_Body):
    """TAN presentation on a direct session; the ack and the report to the
    broker carry the TAN alone."""

    tan: Tan
    token: Optional[SoftwareToken] = None

    def encode(self, w: Writer) -> None:
        self.tan.encode(w)
        w.optional(self.token, lambda w_, t: t.encode(w_))

    @classmethod
    def decode(cls, r: Reader) -> "DialBack":
        return cls(Tan.decode(r), r.optional(SoftwareToken.decode))


@dataclass(frozen=True)
class ProxyOpen(_Body):
    session_id: int
    token: Optional[SoftwareToken] = None
    accepted: bool = False

    def encode(self, w: Writer) -> None:
        w.u64(self.session_id)
        w.optional(self.token, lambda w_, t: t.encode(w_))
        w.flag(self.accepted)

    @classmethod
    def decode(cls, r: Reader) -> "ProxyOpen":
        return cls(r.u64(), r.optional(SoftwareToken.decode), r.flag())


@dataclass(frozen=True)
class ProxyData(_Body):
    session_id: int
    data: bytes

    def encode(self, w: Writer) -> None:
        w.u64(self.session_id).blob(self.data)

    @classmethod
    def decode(cls, r: Reader) -> "ProxyData":
        return cls(r.u64(), r.blob())


@dataclass(frozen=True)
class Error(_Body):
    code: ErrorCode
    detail: str = ""
    session_id: Optional[int] = None

    def encode(self, w: Writer) -> None:
        self.code.encode(w)
        w.text(self.detail)
        w.optional(self.session_id, Writer.u64)

    @classmethod
    def decode(cls, r: Reader) -> "Error":
        return cls(ErrorCode.decode(r), r.text(), r.optional(Reader.u64))


@dataclass(frozen=True)
class FlowTuple:
    """One allowed (or observed) communication relation.

    ``mode`` is ``None`` when the relation is allowed in every mode.
    """

    role: RoleKind
    gateway_id: str
    mode: Optional[Mode]
    permission: Optional[Permission]

    def covers(self, other: "FlowTuple") -> bool:
        if self.role != other.role:
            return False
        if self.gateway_id != "*" and self.gateway_id != other.gateway_id:
            return False
        if self.mode is not None and self.mode != other.mode:
            return False
        if other.permission is not None and self.permission != other.permission:
            return False
        return True

    def encode(self, w: Writer) -> None:
        self.role.encode(w)
        w.text(self.gateway_id)
        w.optional(self.mode, lambda w_, m: m.encode(w_))
        w.optional(self.permission, lambda w_, p: p.encode(w_))

    @classmethod
    def decode(cls, r: Reader) -> "FlowTuple":
        return cls(RoleKind.decode(r), r.text(), r.optional(Mode.decode), r.optional(Permission.decode))

    def sort_key(self):
        return (int(self.role), self.gateway_id, -1 if self.mode is None else int(self.mode),
                -1 if self.permission is None else int(self.permission))


@dataclass(frozen=True)
class FlowExport(_Body):
    flows: tuple

    def encode(self, w: Writer) -> None:
        w.seq(self.flows, lambda w_, f: f.encode(w_))

    @classmethod
    def decode(cls, r: Reader) -> "FlowExport":
        return cls(tuple(r.seq(FlowTuple.decode)))


# -- APP_DATA payloads -------------------------------------------------------------

APP_COMMAND = 0
APP_RESULT = 1


def encode_app_payload(item) -> bytes:
    w = Writer()
    if isinstance(item, Command):
        w.u8(APP_COMMAND)
    elif isinstance(item, CommandResult):
        w.u8(APP_RESULT)
    else:
        raise TypeError(f"cannot carry {type(item).__name__} as application data")
    item.encode(w)
    return w.getvalue()


def decode_app_payload(data: bytes):
    def read(r: Reader):
        kind = r.u8()
        if kind == APP_COMMAND:
            return Command.decode(r)
        if kind == APP_RESULT:
            return CommandResult.decode(r)
        raise InvalidValue(f"application payload kind {kind}")

    return decode_exact(data, read)


BODY_TYPES = {
    MsgType.REGISTER: Register,
    MsgType.REGISTER_ACK: RegisterAck,
    MsgType.KEEPALIVE: Empty,
    MsgType.SESSION_REQUEST: SessionRequest,
    MsgType.CONNECT_REQUEST: ConnectRequest,
    MsgType.DIAL_BACK: DialBack,
    MsgType.REDIRECT_RESPONSE: SessionGrant,
    MsgType.PROXY_OPEN: ProxyOpen,
    MsgType.PROXY_DATA: ProxyData,
    MsgType.APP_DATA: AppDataBody,
    MsgType.ERROR: Error,
    MsgType.FLOW_EXPORT: FlowExport,
    MsgType.HANDSHAKE: HandshakeBody,
    MsgType.SESSION_GRANT: SessionGrant,
}


def decode_body(msg_type: MsgType, body: bytes):
    return decode_exact(body, BODY_TYPES[msg_type].decode)


def encode_body(record) -> bytes:
    w = Writer()
    record.encode(w)
    return w.getvalue()
