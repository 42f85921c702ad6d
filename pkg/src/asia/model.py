"""Domain types shared by every component, and the wire envelope codec."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import NamedTuple, Optional, Union

from .codec import (
    InvalidValue,
    NonCanonical,
    OversizeMessage,
    Reader,
    Truncated,
    UnknownMsgType,
    UnknownVersion,
    Writer,
    decode_exact,
)

#: Hash used for fingerprints, config digests and log digests. Recorded in
#: every scenario report so runs can be reproduced.
HASH_NAME = "sha256"
DIGEST_SIZE = 32

WIRE_VERSION = 1
MAX_FRAME_SIZE = 64 * 1024


def digest(data: bytes) -> bytes:
    return hashlib.new(HASH_NAME, data).digest()


class _CodeEnum(enum.IntEnum):
    """Closed enumeration carried on the wire as a single byte."""

    @classmethod
    def decode(cls, r: Reader):
        raw = r.u8()
        try:
            return cls(raw)
        except ValueError:
            raise InvalidValue(f"{cls.__name__}: unknown value {raw}") from None

    def encode(self, w: Writer) -> None:
        w.u8(int(self))


class RoleKind(_CodeEnum):
    EnergyProvider = 0
    DistributionNetworkOperator = 1
    GatewayOperator = 2
    EnergyMarket = 3
    MeterDataManagement = 4
    EndUser = 5
    IctGateway = 6


class Permission(_CodeEnum):
    ChangeConfiguration = 0
    InstallApplication = 1
    GetStatus = 2
    IssueCommand = 3


class Mode(_CodeEnum):
    Invocation = 0
    Redirect = 1
    Proxy = 2


class MsgType(_CodeEnum):
    REGISTER = 0
    REGISTER_ACK = 1
    KEEPALIVE = 2
    SESSION_REQUEST = 3
    CONNECT_REQUEST = 4
    DIAL_BACK = 5
    REDIRECT_RESPONSE = 6
    PROXY_OPEN = 7
    PROXY_DATA = 8
    APP_DATA = 9
    ERROR = 10
    FLOW_EXPORT = 11
    # Not part of the flow vocabulary: carriers for the channel handshake and
    # for the broker's answer to invocation/proxy requests.
    HANDSHAKE = 12
    SESSION_GRANT = 13


class ErrorCode(_CodeEnum):
    Protocol = 0
    AuthFailed = 1
    NotAuthorized = 2
    GatewayUnreachable = 3
    TanCollision = 4
    NotFound = 5
    GatewayRefused = 6
    BadToken = 7
    DialFailed = 8
    TanMismatch = 9
    FingerprintMismatch = 10
    TamperDetected = 11
    ReplayRejected = 12
    NotAuthorizedLocally = 13
    IntegrityFailure = 14
    ConnectTimeout = 15
    Timeout = 16
    UnknownGateway = 17


class Address(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    def encode(self, w: Writer) -> None:
        w.text(self.host).u16(self.port)

    @classmethod
    def decode(cls, r: Reader) -> "Address":
        return cls(r.text(), r.u16())


# -- identities and certificates ------------------------------------------------


@dataclass(frozen=True, order=True)
class Identity:
    id: str
    role: RoleKind

    def __post_init__(self) -> None:
        raw = self.id.encode("utf-8")
        if not raw or len(raw) > 128:
            raise InvalidValue(f"identity id must be 1..128 bytes, got {len(raw)}")
        object.__setattr__(self, "role", RoleKind(self.role))

    def __str__(self) -> str:
        return f"{self.id}({self.role.name})"

    def encode(self, w: Writer) -> None:
        w.text(self.id)
        self.role.encode(w)

    @classmethod
    def decode(cls, r: Reader) -> "Identity":
        return cls(r.text(), RoleKind.decode(r))


@dataclass(frozen=True)
class Certificate:
    subject: Identity
    public_key: bytes
    issuer: str
    signature: bytes = b""

    def tbs(self) -> bytes:
        """Canonical encoding of the signed part (subject, public_key, issuer)."""
        w = Writer()
        self.subject.encode(w)
        w.blob(self.public_key).text(self.issuer)
        return w.getvalue()

    def encode(self, w: Writer) -> None:
        w.raw(self.tbs()).blob(self.signature)

    @classmethod
    def decode(cls, r: Reader) -> "Certificate":
        subject = Identity.decode(r)
        return cls(subject, r.blob(), r.text(), r.blob())

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        return decode_exact(data, cls.decode)


def fingerprint(cert: Certificate) -> bytes:
    """256-bit digest of the certificate's canonical (subject, key, issuer)."""
    return digest(cert.tbs())


def psk_fingerprint(key_id: str) -> bytes:
    return digest(b"psk\x00" + Writer().text(key_id).getvalue())


@dataclass(frozen=True)
class CertCredential:
    certificate: Certificate
    private_key: bytes = field(repr=False)

    @property
    def identity(self) -> Identity:
        return self.certificate.subject

    @property
    def fingerprint(self) -> bytes:
        return fingerprint(self.certificate)


@dataclass(frozen=True)
class PskCredential:
    key_id: str
    identity: Identity
    secret: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.secret) != 32:
            raise InvalidValue("pre-shared key must be 256 bits")

    @property
    def fingerprint(self) -> bytes:
        return psk_fingerprint(self.key_id)


Credential = Union[CertCredential, PskCredential]


# -- TAN --------------------------------------------------------------------


@dataclass(frozen=True)
class Tan:
    value: bytes

    SIZE = 16

    def __post_init__(self) -> None:
        if len(self.value) != self.SIZE:
            raise InvalidValue("TAN must be 128 bits")
        if not any(self.value):
            raise InvalidValue("TAN must not be all-zero")

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.hex

    def encode(self, w: Writer) -> None:
        w.fixed(self.value, self.SIZE)

    @classmethod
    def decode(cls, r: Reader) -> "Tan":
        return cls(r.fixed(cls.SIZE))


# -- fixed point -----------------------------------------------------------------

_QUANTUM = Decimal("0.0001")


def to_fixed(value) -> Decimal:
    """Quantize to four decimal places; negative values are rejected."""
    d = Decimal(str(value)) if not isinstance(value, Decimal) else value
    d = d.quantize(_QUANTUM, rounding=ROUND_HALF_EVEN)
    if d < 0:
        raise InvalidValue(f"negative fixed-point value {d}")
    return d


def _write_fixed(w: Writer, d: Decimal) -> None:
    w.u64(int(to_fixed(d) * 10000))


def _read_fixed(r: Reader) -> Decimal:
    return (Decimal(r.u64()) / 10000).quantize(_QUANTUM)


# -- appliances and commands -----------------------------------------------------


class ApplianceClass(_CodeEnum):
    Washer = 0
    EvCharger = 1
    Heater = 2
    SolarGenerator = 3
    Meter = 4


@dataclass(frozen=True)
class ApplianceState:
    appliance_id: str
    appliance_class: ApplianceClass
    running: bool
    load_kw: Decimal
    generating: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "load_kw", to_fixed(self.load_kw))
        if self.generating and self.appliance_class != ApplianceClass.SolarGenerator:
            raise InvalidValue("only SolarGenerator may generate")

    def encode(self, w: Writer) -> None:
        w.text(self.appliance_id)
        self.appliance_class.encode(w)
        w.flag(self.running)
        _write_fixed(w, self.load_kw)
        w.flag(self.generating)

    @classmethod
    def decode(cls, r: Reader) -> "ApplianceState":
        return cls(r.text(), ApplianceClass.decode(r), r.flag(), _read_fixed(r), r.flag())


class CommandKind(_CodeEnum):
    ShutoffAppliance = 0
    ShutoffGenerator = 1
    PriceSignal = 2
    StatusQuery = 3
    ConfigChange = 4
    InstallApp = 5

    @property
    def permission(self) -> Permission:
        return _KIND_PERMISSION[self]


_KIND_PERMISSION = {
    CommandKind.ShutoffAppliance: Permission.IssueCommand,
    CommandKind.ShutoffGenerator: Permission.IssueCommand,
    CommandKind.PriceSignal: Permission.IssueCommand,
    CommandKind.StatusQuery: Permission.GetStatus,
    CommandKind.ConfigChange: Permission.ChangeConfiguration,
    CommandKind.InstallApp: Permission.InstallApplication,
}


@dataclass(frozen=True)
class ShutoffAppliance:
    appliance_class: ApplianceClass
    reduction_kwh: Decimal

    def __post_init__(self) -> None:
        object.__setattr__(self, "reduction_kwh", to_fixed(self.reduction_kwh))

    def encode(self, w: Writer) -> None:
        self.appliance_class.encode(w)
        _write_fixed(w, self.reduction_kwh)

    @classmethod
    def decode(cls, r: Reader) -> "ShutoffAppliance":
        return cls(ApplianceClass.decode(r), _read_fixed(r))


@dataclass(frozen=True)
class ShutoffGenerator:
    def encode(self, w: Writer) -> None:
        pass

    @classmethod
    def decode(cls, r: Reader) -> "ShutoffGenerator":
        return cls()


@dataclass(frozen=True)
class PriceSignal:
    price: Decimal  # EUR per kWh
    valid_from: int
    valid_until: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "price", to_fixed(self.price))
        if self.valid_from > self.valid_until:
            raise InvalidValue("price signal interval start after end")

    def encode(self, w: Writer) -> None:
        _write_fixed(w, self.price)
        w.u64(self.valid_from).u64(self.valid_until)

    @classmethod
    def decode(cls, r: Reader) -> "PriceSignal":
        return cls(_read_fixed(r), r.u64(), r.u64())


@dataclass(frozen=True)
class StatusQuery:
    def encode(self, w: Writer) -> None:
        pass

    @classmethod
    def decode(cls, r: Reader) -> "StatusQuery":
        return cls()


@dataclass(frozen=True)
class ConfigChange:
    key: str
    value: str

    def encode(self, w: Writer) -> None:
        w.text(self.key).text(self.value)

    @classmethod
    def decode(cls, r: Reader) -> "ConfigChange":
        return cls(r.text(), r.text())


@dataclass(frozen=True)
class InstallApp:
    name: str
    version: str
    manifest: str = ""

    def encode(self, w: Writer) -> None:
        w.text(self.name).text(self.version).text(self.manifest)

    @classmethod
    def decode(cls, r: Reader) -> "InstallApp":
        return cls(r.text(), r.text(), r.text())


_PAYLOAD_TYPES = {
    CommandKind.ShutoffAppliance: ShutoffAppliance,
    CommandKind.ShutoffGenerator: ShutoffGenerator,
    CommandKind.PriceSignal: PriceSignal,
    CommandKind.StatusQuery: StatusQuery,
    CommandKind.ConfigChange: ConfigChange,
    CommandKind.InstallApp: InstallApp,
}
_PAYLOAD_KINDS = {v: k for k, v in _PAYLOAD_TYPES.items()}

Payload = Union[ShutoffAppliance, ShutoffGenerator, PriceSignal, StatusQuery, ConfigChange, InstallApp]


@dataclass(frozen=True)
class Command:
    payload: Payload
    issued_at: int = 0
    sequence: int = 0

    @property
    def kind(self) -> CommandKind:
        return _PAYLOAD_KINDS[type(self.payload)]

    @property
    def permission(self) -> Permission:
        return self.kind.permission

    def encode(self, w: Writer) -> None:
        self.kind.encode(w)
        self.payload.encode(w)
        w.u64(self.issued_at).u64(self.sequence)

    @classmethod
    def decode(cls, r: Reader) -> "Command":
        kind = CommandKind.decode(r)
        payload = _PAYLOAD_TYPES[kind].decode(r)
        return cls(payload, r.u64(), r.u64())


class ResultStatus(_CodeEnum):
    Ok = 0
    Partial = 1
    NotAuthorizedLocally = 2
    IntegrityFailure = 3
    UnknownApplianceClass = 4


@dataclass(frozen=True)
class CommandResult:
    status: ResultStatus
    achieved_kwh: Decimal = Decimal("0")
    appliances: tuple = ()
    detail: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "achieved_kwh", to_fixed(self.achieved_kwh))
        object.__setattr__(self, "appliances", tuple(self.appliances))

    @property
    def ok(self) -> bool:
        return self.status in (ResultStatus.Ok, ResultStatus.Partial)

    def encode(self, w: Writer) -> None:
        self.status.encode(w)
        _write_fixed(w, self.achieved_kwh)
        w.seq(self.appliances, lambda w_, a: a.encode(w_))
        w.text(self.detail)

    @classmethod
    def decode(cls, r: Reader) -> "CommandResult":
        status = ResultStatus.decode(r)
        kwh = _read_fixed(r)
        appliances = r.seq(ApplianceState.decode)
        return cls(status, kwh, tuple(appliances), r.text())


# -- wire envelope ---------------------------------------------------------------


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    correlation: int = 0
    body: bytes = b""
    auth_tag: Optional[bytes] = None
    version: int = WIRE_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        if self.version != WIRE_VERSION:
            raise UnknownVersion(f"version {self.version}")
        if not 0 <= self.correlation < 2**64:
            raise InvalidValue("correlation out of range")
        if self.auth_tag is not None and not 0 < len(self.auth_tag) <= 0xFF:
            raise InvalidValue("auth_tag must be 1..255 bytes when present")

    def signed_part(self) -> bytes:
        """Bytes covered by the auth tag: version, type, correlation, body."""
        return (
            Writer()
            .u8(self.version)
            .u8(int(self.msg_type))
            .u64(self.correlation)
            .u16(len(self.body))
            .raw(self.body)
            .getvalue()
        )

    def with_tag(self, tag: Optional[bytes]) -> "WireMessage":
        return WireMessage(self.msg_type, self.correlation, self.body, tag, self.version)


def encode_message(msg: WireMessage) -> bytes:
    """Frame ``msg``: u32 length prefix, then version, type, correlation,
    u16 body length, body, u8 tag length, tag."""
    if len(msg.body) > 0xFFFF:
        raise OversizeMessage(f"body of {len(msg.body)} bytes")
    tag = msg.auth_tag or b""
    inner = msg.signed_part() + bytes([len(tag)]) + tag
    total = 4 + len(inner)
    if total > MAX_FRAME_SIZE:
        raise OversizeMessage(f"frame of {total} bytes exceeds {MAX_FRAME_SIZE}")
    return len(inner).to_bytes(4, "big") + inner


def decode_message(data: bytes) -> WireMessage:
    data = bytes(data)
    if len(data) > MAX_FRAME_SIZE:
        raise OversizeMessage(f"frame of {len(data)} bytes")
    r = Reader(data)
    length = r.u32()
    if r.remaining() < length:
        raise Truncated(f"frame declares {length} bytes, {r.remaining()} present")
    if r.remaining() > length:
        raise NonCanonical("bytes after frame")
    version = r.u8()
    if version != WIRE_VERSION:
        raise UnknownVersion(f"version {version}")
    raw_type = r.u8()
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMsgType(f"message type {raw_type:#04x}") from None
    correlation = r.u64()
    body = r.blob()
    tag_len = r.u8()
    tag = r.fixed(tag_len) if tag_len else None
    r.done()
    return WireMessage(msg_type, correlation, body, tag, version)
