"""Authentication, authorization and token handling.

Covers the access control list with first-match/default-deny evaluation, TAN
generation, software tokens binding a session to both endpoints' certificate
fingerprints, the three-message signed challenge-response handshake, and
sequence-numbered integrity protection for application data.
"""

from __future__ import annotations

import enum
import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from . import crypto
from .codec import CodecError, InvalidValue, Reader, Writer, decode_exact
from .errors import (
    BadSignature,
    NonceReplay,
    ReplayRejected,
    TamperDetected,
    TokenBadSignature,
    TokenExpired,
    UnknownIssuer,
    UntrustedIssuer,
    WrongGateway,
)
from .model import (
    DIGEST_SIZE,
    CertCredential,
    Certificate,
    Credential,
    Identity,
    Mode,
    MsgType,
    Permission,
    PskCredential,
    RoleKind,
    Tan,
    WireMessage,
    fingerprint,
)

DEFAULT_TOKEN_TTL_MS = 60_000
WILDCARD = "*"

# -- access control ------------------------------------------------------------


class DenyReason(enum.Enum):
    NoMatch = "NoMatch"
    Expired = "Expired"
    WrongPermission = "WrongPermission"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[DenyReason] = None
    entry: Optional[int] = None

    def __bool__(self) -> bool:
        return self.allowed

    def __str__(self) -> str:
        return "Allow" if self.allowed else f"Deny({self.reason.value})"


def allow(entry: Optional[int] = None) -> Decision:
    return Decision(True, None, entry)


def deny(reason: DenyReason) -> Decision:
    return Decision(False, reason)


Principal = Union[Identity, RoleKind]


@dataclass(frozen=True)
class AclEntry:
    principal: Principal
    gateway_id: str
    permissions: frozenset
    expiry: Optional[int] = None

    def __post_init__(self) -> None:
        perms = frozenset(Permission(p) for p in self.permissions)
        if not perms:
            raise ValueError("ACL entry needs at least one permission")
        object.__setattr__(self, "permissions", perms)

    def matches(self, peer: Identity, gateway_id: str) -> bool:
        if isinstance(self.principal, RoleKind):
            if peer.role != self.principal:
                return False
        elif self.principal != peer:
            return False
        return self.gateway_id == WILDCARD or self.gateway_id == gateway_id

    def live(self, now: int) -> bool:
        return self.expiry is None or now < self.expiry

    def to_line(self) -> str:
        if isinstance(self.principal, RoleKind):
            who = f"role:{self.principal.name}"
        else:
            who = f"{self.principal.id}@{self.principal.role.name}"
        perms = ",".join(p.name for p in sorted(self.permissions))
        line = f"{who} {self.gateway_id} {perms}"
        if self.expiry is not None:
            line += f" {self.expiry}"
        return line


class AclTable:
    """Ordered ACL; readers see an immutable snapshot, writers serialize."""

    def __init__(self, entries: Iterable[AclEntry] = ()) -> None:
        self._entries: tuple[AclEntry, ...] = tuple(entries)
        self._write_lock = threading.Lock()

    @property
    def entries(self) -> tuple[AclEntry, ...]:
        return self._entries

    def append(self, entry: AclEntry) -> None:
        with self._write_lock:
            self._entries = self._entries + (entry,)

    def replace(self, entries: Iterable[AclEntry]) -> None:
        with self._write_lock:
            self._entries = tuple(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


def authorize(table: AclTable, peer: Identity, gateway_id: str, perm: Permission, now: int) -> Decision:
    """First live entry matching principal, gateway and permission allows.

    Without one the answer is Deny, with the reason taken from the first entry
    that matched principal and gateway (Expired or WrongPermission), or NoMatch.
    """
    first_partial: Optional[DenyReason] = None
    for idx, entry in enumerate(table.entries):
        if not entry.matches(peer, gateway_id):
            continue
        if entry.live(now) and perm in entry.permissions:
            return allow(idx)
        if first_partial is None:
            first_partial = DenyReason.WrongPermission if entry.live(now) else DenyReason.Expired
    return deny(first_partial or DenyReason.NoMatch)


class AclParseError(ValueError):
    def __init__(self, source: str, lineno: int, message: str) -> None:
        super().__init__(f"{source}:{lineno}: {message}")
        self.source = source
        self.lineno = lineno


def _parse_principal(token: str) -> Principal:
    if token.startswith("role:"):
        return RoleKind[token[5:]]
    ident, sep, role = token.rpartition("@")
    if not sep or not ident:
        raise ValueError(f"principal {token!r} must be role:<Role> or <id>@<Role>")
    return Identity(ident, RoleKind[role])


def parse_acl(text: str, source: str = "<acl>") -> AclTable:
    """Parse ``principal gateway perm[,perm...] [expiry]`` lines.

    ``principal`` is ``role:<RoleKind>`` or ``<id>@<RoleKind>``; ``gateway``
    and the permission list accept ``*``. ``#`` starts a comment.
    """
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise AclParseError(source, lineno, "expected: principal gateway permissions [expiry]")
        try:
            principal = _parse_principal(parts[0])
            if parts[2] == WILDCARD:
                perms = frozenset(Permission)
            else:
                perms = frozenset(Permission[p] for p in parts[2].split(","))
            expiry = int(parts[3]) if len(parts) == 4 else None
            entries.append(AclEntry(principal, parts[1], perms, expiry))
        except (KeyError, ValueError) as exc:
            raise AclParseError(source, lineno, str(exc)) from None
    return AclTable(entries)


def load_acl(path) -> AclTable:
    path = Path(path)
    return parse_acl(path.read_text(), str(path))


# -- TANs ----------------------------------------------------------------------


def generate_tan(rng: random.Random) -> Tan:
    """128 random bits from the scenario RNG; all-zero draws are redrawn."""
    while True:
        value = rng.getrandbits(128)
        if value:
            return Tan(value.to_bytes(Tan.SIZE, "big"))


# -- software tokens ---------------------------------------------------------------


def _perm_mask(perms: Iterable[Permission]) -> int:
    mask = 0
    for p in perms:
        mask |= 1 << int(p)
    return mask


def _mask_perms(mask: int) -> frozenset:
    if mask >> len(Permission):
        raise InvalidValue(f"permission mask {mask:#04x} has unknown bits")
    return frozenset(p for p in Permission if mask & (1 << int(p)))


@dataclass(frozen=True)
class SoftwareToken:
    issuer: Identity
    requestor: Identity
    requestor_fingerprint: bytes
    gateway_id: Identity
    gateway_fingerprint: bytes
    tan: Tan
    mode: Mode
    permissions: frozenset
    issued_at: int
    expires_at: int
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "permissions", frozenset(Permission(p) for p in self.permissions))
        for fp in (self.requestor_fingerprint, self.gateway_fingerprint):
            if len(fp) != DIGEST_SIZE:
                raise InvalidValue("fingerprint must be 256 bits")

    def tbs(self) -> bytes:
        w = Writer()
        self.issuer.encode(w)
        self.requestor.encode(w)
        w.fixed(self.requestor_fingerprint, DIGEST_SIZE)
        self.gateway_id.encode(w)
        w.fixed(self.gateway_fingerprint, DIGEST_SIZE)
        self.tan.encode(w)
        self.mode.encode(w)
        w.u8(_perm_mask(self.permissions))
        w.u64(self.issued_at).u64(self.expires_at)
        return w.getvalue()

    def encode(self, w: Writer) -> None:
        w.raw(self.tbs()).blob(self.signature)

    @classmethod
    def decode(cls, r: Reader) -> "SoftwareToken":
        return cls(
            issuer=Identity.decode(r),
            requestor=Identity.decode(r),
            requestor_fingerprint=r.fixed(DIGEST_SIZE),
            gateway_id=Identity.decode(r),
            gateway_fingerprint=r.fixed(DIGEST_SIZE),
            tan=Tan.decode(r),
            mode=Mode.decode(r),
            permissions=_mask_perms(r.u8()),
            issued_at=r.u64(),
            expires_at=r.u64(),
            signature=r.blob(),
        )

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SoftwareToken":
        return decode_exact(data, cls.decode)

    def hex(self) -> str:
        return self.to_bytes().hex()


class Method(enum.Enum):
    Cert = "Cert"
    PresharedKey = "PresharedKey"


@dataclass(frozen=True)
class AuthResult:
    peer: Identity
    peer_fingerprint: bytes
    method: Method
    established_at: int


@dataclass(frozen=True)
class TokenIssuer:
    """The broker's signing identity."""

    identity: Identity
    scheme: crypto.SignatureScheme
    private_key: bytes = field(repr=False)
    public_key: bytes = b""


def issue_token(
    issuer: TokenIssuer,
    requestor: AuthResult,
    gateway_id: Identity,
    gateway_fp: bytes,
    mode: Mode,
    perms: Iterable[Permission],
    tan: Tan,
    now: int,
    ttl: int = DEFAULT_TOKEN_TTL_MS,
) -> SoftwareToken:
    if ttl <= 0:
        raise ValueError("token ttl must be positive")
    unsigned = SoftwareToken(
        issuer=issuer.identity,
        requestor=requestor.peer,
        requestor_fingerprint=requestor.peer_fingerprint,
        gateway_id=gateway_id,
        gateway_fingerprint=gateway_fp,
        tan=tan,
        mode=mode,
        permissions=frozenset(perms),
        issued_at=now,
        expires_at=now + ttl,
    )
    return replace(unsigned, signature=issuer.scheme.sign(issuer.private_key, unsigned.tbs()))


def verify_token(
    token: SoftwareToken,
    trusted_issuers: Mapping[Identity, bytes],
    scheme: crypto.SignatureScheme,
    expected_gateway: str,
    now: int,
) -> SoftwareToken:
    """Return the token's claims if it is authentic, bound to
    ``expected_gateway`` and unexpired (valid iff ``now < expires_at``)."""
    key = trusted_issuers.get(token.issuer)
    if key is None:
        raise UntrustedIssuer(str(token.issuer))
    if token.issued_at >= token.expires_at or not scheme.verify(key, token.tbs(), token.signature):
        raise TokenBadSignature("token signature does not verify")
    if token.gateway_id.id != expected_gateway:
        raise WrongGateway(f"token for {token.gateway_id.id}, presented to {expected_gateway}")
    if now >= token.expires_at:
        raise TokenExpired(f"expired at {token.expires_at}, now {now}")
    return token


# -- handshake ----------------------------------------------------------------------

NONCE_SIZE = 32


@dataclass(frozen=True)
class PskRef:
    key_id: str


CredentialInfo = Union[Certificate, PskRef]


def _encode_cred_info(w: Writer, info: CredentialInfo) -> None:
    if isinstance(info, Certificate):
        w.u8(0)
        info.encode(w)
    else:
        w.u8(1).text(info.key_id)


def _decode_cred_info(r: Reader) -> CredentialInfo:
    kind = r.u8()
    if kind == 0:
        return Certificate.decode(r)
    if kind == 1:
        return PskRef(r.text())
    raise InvalidValue(f"credential kind {kind}")


@dataclass(frozen=True)
class HandshakeBody:
    step: int
    credential: Optional[CredentialInfo] = None
    nonce: Optional[bytes] = None
    dh_public: Optional[bytes] = None
    signature: Optional[bytes] = None

    def encode(self, w: Writer) -> None:
        w.u8(self.step)
        w.optional(self.credential, _encode_cred_info)
        w.optional(self.nonce, lambda w_, v: w_.fixed(v, NONCE_SIZE))
        w.optional(self.dh_public, lambda w_, v: w_.fixed(v, 32))
        w.optional(self.signature, lambda w_, v: w_.blob(v))

    @classmethod
    def decode(cls, r: Reader) -> "HandshakeBody":
        return cls(
            r.u8(),
            r.optional(_decode_cred_info),
            r.optional(lambda r_: r_.fixed(NONCE_SIZE)),
            r.optional(lambda r_: r_.fixed(32)),
            r.optional(lambda r_: r_.blob()),
        )


def credential_info(cred: Credential) -> CredentialInfo:
    if isinstance(cred, CertCredential):
        return cred.certificate
    return PskRef(cred.key_id)


@dataclass(frozen=True)
class ChannelKeys:
    send: bytes = field(repr=False)
    recv: bytes = field(repr=False)


class NonceCache:
    """Initiator nonces a responder has already answered."""

    def __init__(self, limit: int = 100_000) -> None:
        self._seen: dict[bytes, None] = {}
        self._limit = limit

    def check_and_add(self, nonce: bytes) -> None:
        if nonce in self._seen:
            raise NonceReplay(nonce.hex()[:16])
        self._seen[nonce] = None
        if len(self._seen) > self._limit:
            self._seen.pop(next(iter(self._seen)))


def _transcript(n_i, n_r, e_i, e_r, info_i, info_r) -> bytes:
    w = Writer().raw(b"asia-hs-v1").raw(n_i).raw(n_r).raw(e_i).raw(e_r)
    _encode_cred_info(w, info_i)
    _encode_cred_info(w, info_r)
    return w.getvalue()


def _sign(cred: Credential, scheme: crypto.SignatureScheme, data: bytes) -> bytes:
    if isinstance(cred, CertCredential):
        return scheme.sign(cred.private_key, data)
    return crypto.mac(cred.secret, data)


class _Party:
    def __init__(self, credential: Credential, trust: crypto.TrustStore, rng: random.Random) -> None:
        self.credential = credential
        self.trust = trust
        self.rng = rng
        self.result: Optional[AuthResult] = None
        self.keys: Optional[ChannelKeys] = None
        self._dh_secret, self._dh_public = crypto.dh_keypair(rng)
        self._nonce = rng.randbytes(NONCE_SIZE)

    def _check_peer(self, info: Optional[CredentialInfo]) -> tuple[Identity, bytes, Method, Optional[PskCredential]]:
        if isinstance(info, Certificate):
            self.trust.check_certificate(info)
            return info.subject, fingerprint(info), Method.Cert, None
        if isinstance(info, PskRef):
            entry = self.trust.psk(info.key_id)
            if entry is None:
                raise UnknownIssuer(f"psk {info.key_id}")
            return entry.identity, entry.fingerprint, Method.PresharedKey, entry
        raise BadSignature("peer presented no credential")

    def _verify_peer_sig(self, info: CredentialInfo, psk: Optional[PskCredential], data: bytes, sig) -> None:
        if sig is None:
            raise BadSignature("missing handshake signature")
        if isinstance(info, Certificate):
            ok = self.trust.scheme.verify(info.public_key, data, sig)
        else:
            ok = crypto.mac_ok(psk.secret, data, sig)
        if not ok:
            raise BadSignature("handshake signature does not verify")

    def _derive(self, peer_dh: bytes, transcript: bytes, psk_secret: bytes, initiator: bool) -> ChannelKeys:
        shared = crypto.dh_shared(self._dh_secret, peer_dh)
        master = crypto.kdf(shared + psk_secret, b"asia-ck\x00" + crypto.mac(b"th", transcript))
        i2r = crypto.kdf(master, b"i2r")
        r2i = crypto.kdf(master, b"r2i")
        return ChannelKeys(i2r, r2i) if initiator else ChannelKeys(r2i, i2r)


def _psk_secret(*creds) -> bytes:
    for c in creds:
        if isinstance(c, PskCredential):
            return c.secret
    return b""


class Initiator(_Party):
    """Client side of the three-message exchange: hello, (challenge), finish."""

    def hello(self) -> HandshakeBody:
        return HandshakeBody(1, credential_info(self.credential), self._nonce, self._dh_public)

    def on_challenge(self, body: HandshakeBody, now: int) -> HandshakeBody:
        if body.step != 2 or body.nonce is None or body.dh_public is None:
            raise BadSignature("malformed handshake challenge")
        peer, fp, method, psk = self._check_peer(body.credential)
        transcript = _transcript(
            self._nonce, body.nonce, self._dh_public, body.dh_public,
            credential_info(self.credential), body.credential,
        )
        self._verify_peer_sig(body.credential, psk, b"R" + transcript, body.signature)
        sig = _sign(self.credential, self.trust.scheme, b"I" + transcript)
        self.keys = self._derive(body.dh_public, transcript, _psk_secret(self.credential, psk), True)
        self.result = AuthResult(peer, fp, method, now)
        return HandshakeBody(3, signature=sig)


class Responder(_Party):
    def __init__(
        self,
        credential: Credential,
        trust: crypto.TrustStore,
        rng: random.Random,
        nonces: Optional[NonceCache] = None,
    ) -> None:
        super().__init__(credential, trust, rng)
        self.nonces = nonces if nonces is not None else NonceCache()
        self._pending = None

    def on_hello(self, body: HandshakeBody) -> HandshakeBody:
        if body.step != 1 or body.nonce is None or body.dh_public is None:
            raise BadSignature("malformed handshake hello")
        peer, fp, method, psk = self._check_peer(body.credential)
        self.nonces.check_and_add(body.nonce)
        transcript = _transcript(
            body.nonce, self._nonce, body.dh_public, self._dh_public,
            body.credential, credential_info(self.credential),
        )
        self._pending = (body, peer, fp, method, psk, transcript)
        sig = _sign(self.credential, self.trust.scheme, b"R" + transcript)
        return HandshakeBody(2, credential_info(self.credential), self._nonce, self._dh_public, sig)

    def on_finish(self, body: HandshakeBody, now: int) -> AuthResult:
        if self._pending is None or body.step != 3:
            raise BadSignature("finish without hello")
        hello, peer, fp, method, psk, transcript = self._pending
        self._verify_peer_sig(hello.credential, psk, b"I" + transcript, body.signature)
        self.keys = self._derive(hello.dh_public, transcript, _psk_secret(self.credential, psk), False)
        self.result = AuthResult(peer, fp, method, now)
        return self.result


def mutual_authenticate(
    initiator: Credential,
    responder: Credential,
    initiator_trust: crypto.TrustStore,
    responder_trust: crypto.TrustStore,
    rng: random.Random,
    now: int = 0,
    nonces: Optional[NonceCache] = None,
) -> tuple[AuthResult, AuthResult, ChannelKeys, ChannelKeys]:
    """Run the exchange in memory; returns both sides' results and keys.

    The initiator's result names the responder and vice versa.
    """
    i = Initiator(initiator, initiator_trust, rng)
    r = Responder(responder, responder_trust, rng, nonces)
    challenge = r.on_hello(i.hello())
    finish = i.on_challenge(challenge, now)
    r.on_finish(finish, now)
    return i.result, r.result, i.keys, r.keys


# -- application data integrity ------------------------------------------------------


@dataclass(frozen=True)
class AppDataBody:
    sequence: int
    payload: bytes

    def encode(self, w: Writer) -> None:
        w.u64(self.sequence).blob(self.payload)

    @classmethod
    def decode(cls, r: Reader) -> "AppDataBody":
        return cls(r.u64(), r.blob())

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()


def sign_app_message(sender_key: bytes, payload: bytes, sequence: int, correlation: int = 0) -> WireMessage:
    msg = WireMessage(MsgType.APP_DATA, correlation, AppDataBody(sequence, payload).to_bytes())
    return msg.with_tag(crypto.mac(sender_key, msg.signed_part()))


def verify_app_message(sender_key: bytes, msg: WireMessage, last_seen_sequence: Optional[int]) -> AppDataBody:
    """Check tag, then monotonicity. Returns the body (sequence + payload)."""
    if msg.msg_type != MsgType.APP_DATA or not crypto.mac_ok(sender_key, msg.signed_part(), msg.auth_tag):
        raise TamperDetected("APP_DATA authentication tag mismatch")
    try:
        body = decode_exact(msg.body, AppDataBody.decode)
    except CodecError as exc:
        raise TamperDetected(str(exc)) from None
    if last_seen_sequence is not None and body.sequence <= last_seen_sequence:
        raise ReplayRejected(f"sequence {body.sequence} after {last_seen_sequence}")
    return body
