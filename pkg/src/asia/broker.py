"""The rendezvous/authorization server.

Gateways keep one authenticated channel open to the broker; requestors open
their own channel and ask for sessions in one of three modes. Every request
is authorized against the broker's ACL before anything is sent toward the
gateway.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .auth import (
    DEFAULT_TOKEN_TTL_MS,
    AclTable,
    AuthResult,
    NonceCache,
    TokenIssuer,
    authorize,
    generate_tan,
    issue_token,
)
from .channel import SecureChannel, World
from .errors import AsiaError, GatewayUnreachable, NotAuthorized, NotFound, TanCollision, UnknownGateway
from .messages import (
    ConnectRequest,
    Error,
    FlowExport,
    FlowTuple,
    ProxyData,
    ProxyOpen,
    Register,
    RegisterAck,
    SessionGrant,
    SessionRequest,
)
from .model import Address, Credential, ErrorCode, Identity, Mode, MsgType, RoleKind, Tan
from .netsim.faults import TamperNext

log = logging.getLogger(__name__)

BROKER_PORT = 7000
KEEPALIVE_INTERVAL_MS = 30_000
STALE_AFTER_MS = 90_000
OFFLINE_AFTER_MS = 180_000
PENDING_TIMEOUT_MS = 30_000


class GatewayState(enum.Enum):
    Online = "Online"
    Stale = "Stale"
    Offline = "Offline"


@dataclass
class BrokerConfig:
    port: int = BROKER_PORT
    keepalive_ms: int = KEEPALIVE_INTERVAL_MS
    stale_after_ms: int = STALE_AFTER_MS
    offline_after_ms: int = OFFLINE_AFTER_MS
    pending_timeout_ms: int = PENDING_TIMEOUT_MS
    token_ttl_ms: int = DEFAULT_TOKEN_TTL_MS


@dataclass
class GatewayRecord:
    gateway_id: Identity
    fingerprint: bytes
    public_address: Address
    channel: SecureChannel = field(repr=False)
    registered_at: int
    last_keepalive: int
    listen_port: Optional[int] = None
    closed: bool = False

    def state(self, now: int, config: BrokerConfig) -> GatewayState:
        silence = now - self.last_keepalive
        if self.closed or silence > config.offline_after_ms:
            return GatewayState.Offline
        if silence > config.stale_after_ms:
            return GatewayState.Stale
        return GatewayState.Online


@dataclass
class PendingInvocation:
    tan: Tan
    requestor: Identity
    gateway_id: Identity
    token: object
    created_at: int
    requestor_channel: SecureChannel = field(repr=False)
    requestor_corr: int = 0
    gateway_corr: int = 0
    timer: object = field(default=None, repr=False)


@dataclass
class ProxySession:
    session_id: int
    requestor: AuthResult
    gateway_id: str
    permission: object
    token: object = field(repr=False)
    requestor_channel: SecureChannel = field(repr=False)
    gateway_channel: SecureChannel = field(repr=False)
    requestor_corr: int = 0
    gateway_corr: int = 0
    open: bool = False
    bytes_up: int = 0
    bytes_down: int = 0


class Broker:
    def __init__(
        self,
        world: World,
        node: str,
        credential: Credential,
        trust: crypto.TrustStore,
        acl: AclTable,
        issuer: TokenIssuer,
        config: Optional[BrokerConfig] = None,
    ) -> None:
        self.world = world
        self.node = node
        self.credential = credential
        self.trust = trust
        self.acl = acl
        self.issuer = issuer
        self.config = config or BrokerConfig()
        self.rng = world.rng_for(node)
        self.nonces = NonceCache()
        self.registry: dict[str, GatewayRecord] = {}
        self.pending: dict[bytes, PendingInvocation] = {}
        self.sessions: dict[int, ProxySession] = {}
        self._tans_used: set[bytes] = set()
        self._next_session = 0
        self._relay_tamper: list[TamperNext] = []

    @property
    def address(self) -> Address:
        return Address(self.node, self.config.port)

    @property
    def now(self) -> int:
        return self.world.sim.now

    def _emit(self, kind: str, /, **fields) -> None:
        self.world.log.emit(kind, **fields)

    def start(self) -> None:
        self.world.net.listen(self.node, self.config.port, self._accept)
        self.world.net.attach(self.node, self)

    def _accept(self, endpoint) -> SecureChannel:
        return SecureChannel(
            self.world, self.node, self.credential, self.trust, self,
            initiator=False, rng=self.rng, nonces=self.nonces, label="broker",
        )

    # -- registry -----------------------------------------------------------------------

    def lookup_gateway(self, gateway_id: str) -> GatewayRecord:
        record = self.registry.get(gateway_id)
        if record is None:
            raise NotFound(gateway_id)
        return record

    def gateway_state(self, gateway_id: str) -> GatewayState:
        return self.lookup_gateway(gateway_id).state(self.now, self.config)

    def online_count(self) -> int:
        return sum(1 for r in self.registry.values() if r.state(self.now, self.config) != GatewayState.Offline)

    def register_gateway(self, ch: SecureChannel, body: Register) -> GatewayRecord:
        peer = ch.peer
        if body.gateway != peer.peer:
            raise NotAuthorized(f"channel authenticated as {peer.peer.id}, registering {body.gateway.id}")
        observed = Address(*ch.transport.remote)
        old = self.registry.get(body.gateway.id)
        record = GatewayRecord(body.gateway, peer.peer_fingerprint, observed, ch, self.now, self.now, body.listen_port)
        self.registry[body.gateway.id] = record
        ch.context["gateway"] = body.gateway.id
        if old is not None and old.channel is not ch:
            old.closed = True
            self._emit("broker.supersede", gateway=body.gateway.id, old=old.public_address)
            old.channel.close("superseded")
        self._emit("broker.register", gateway=body.gateway.id, addr=observed, fp=peer.peer_fingerprint[:8])
        return record

    def handle_keepalive(self, gateway_id: str, now: int) -> None:
        record = self.registry.get(gateway_id)
        if record is None:
            raise UnknownGateway(gateway_id)
        record.last_keepalive = now

    # -- channel callbacks --------------------------------------------------------------

    def on_channel_message(self, ch: SecureChannel, msg, body) -> None:
        t = msg.msg_type
        gateway = ch.context.get("gateway")
        try:
            if t == MsgType.REGISTER:
                self.register_gateway(ch, body)
                ch.send(MsgType.REGISTER_ACK, RegisterAck(ch.transport.remote, self.config.keepalive_ms),
                        msg.correlation)
            elif gateway is not None and self._is_current(gateway, ch):
                self._from_gateway(ch, gateway, msg, body)
            elif t == MsgType.SESSION_REQUEST:
                self._session_request(ch, msg.correlation, body)
            elif t == MsgType.PROXY_DATA:
                self._proxy_from_requestor(ch, body)
            elif t == MsgType.FLOW_EXPORT:
                ch.send(MsgType.FLOW_EXPORT, self.export_allowed_flows(), msg.correlation)
            else:
                self._emit("broker.unexpected", chan=ch.id, type=t.name)
        except AsiaError as exc:
            self._emit("broker.error", chan=ch.id, type=t.name, error=type(exc).__name__)
            if ch.established:
                ch.send(MsgType.ERROR, Error(exc.code, exc.detail), msg.correlation)

    def _is_current(self, gateway_id: str, ch: SecureChannel) -> bool:
        record = self.registry.get(gateway_id)
        return record is not None and record.channel is ch

    def on_channel_down(self, ch: SecureChannel, reason: str) -> None:
        gateway = ch.context.get("gateway")
        if gateway is not None and self._is_current(gateway, ch):
            self.registry[gateway].closed = True
            self._emit("broker.gateway_lost", gateway=gateway, reason=reason)
            for tan, p in list(self.pending.items()):
                if p.gateway_id.id == gateway:
                    self._drop_pending(tan)
                    self._relay_error(p.requestor_channel, p.requestor_corr,
                                      Error(ErrorCode.GatewayUnreachable, "gateway channel lost"))
        for sid, s in list(self.sessions.items()):
            if s.gateway_channel is ch or s.requestor_channel is ch:
                del self.sessions[sid]
                self._emit("broker.proxy_close", session=sid, up=s.bytes_up, down=s.bytes_down)
                if s.gateway_channel is ch:
                    self._relay_error(s.requestor_channel, s.requestor_corr,
                                      Error(ErrorCode.GatewayUnreachable, "gateway channel lost", sid))

    def _relay_error(self, ch: SecureChannel, corr: int, err: Error) -> None:
        if ch.established:
            ch.send(MsgType.ERROR, err, corr)

    def _from_gateway(self, ch: SecureChannel, gateway: str, msg, body) -> None:
        t = msg.msg_type
        record = self.registry[gateway]
        record.last_keepalive = self.now
        if t == MsgType.KEEPALIVE:
            self.handle_keepalive(gateway, self.now)
        elif t == MsgType.DIAL_BACK:
            p = self.pending.get(body.tan.value)
            if p is None or p.gateway_id.id != gateway:
                self._emit("broker.dialback_unknown", gateway=gateway, tan=body.tan.value[:4])
                return
            self._drop_pending(body.tan.value)
            self._emit("broker.dialback", gateway=gateway, tan=body.tan.value[:4], requestor=p.requestor.id)
        elif t == MsgType.PROXY_OPEN:
            s = self.sessions.get(body.session_id)
            if s is None or s.gateway_channel is not ch or s.open:
                return
            s.open = True
            self._emit("broker.proxy_open", session=s.session_id, gateway=gateway, requestor=s.requestor.peer.id)
            s.requestor_channel.send(MsgType.SESSION_GRANT, SessionGrant(s.token, None, s.session_id),
                                     s.requestor_corr)
        elif t == MsgType.PROXY_DATA:
            self._proxy_from_gateway(ch, body)
        elif t == MsgType.ERROR:
            self._gateway_error(gateway, msg.correlation, body)
        else:
            self._emit("broker.unexpected", chan=ch.id, type=t.name)

    def _gateway_error(self, gateway: str, corr: int, err: Error) -> None:
        self._emit("broker.gateway_error", gateway=gateway, code=err.code.name)
        if err.session_id is not None:
            s = self.sessions.pop(err.session_id, None)
            if s is not None:
                self._relay_error(s.requestor_channel, s.requestor_corr, Error(err.code, err.detail, s.session_id))
            return
        for tan, p in list(self.pending.items()):
            if p.gateway_id.id == gateway and p.gateway_corr == corr:
                self._drop_pending(tan)
                self._relay_error(p.requestor_channel, p.requestor_corr, err)
                return

    # -- session establishment ----------------------------------------------------------

    def _session_request(self, ch: SecureChannel, corr: int, req: SessionRequest) -> None:
        peer = ch.peer
        self._emit("broker.request", requestor=peer.peer.id, role=peer.peer.role.name,
                   gateway=req.gateway_id, mode=req.mode.name, perm=req.permission.name)
        if req.mode == Mode.Invocation:
            tan, token = self.invoke_session(req, peer, self.now, ch, corr)
            ch.send(MsgType.SESSION_GRANT, SessionGrant(token), corr)
            self.pending[tan.value].gateway_corr = self._send_connect_request(tan, req)
        elif req.mode == Mode.Redirect:
            grant = self.redirect(req, peer, self.now)
            ch.send(MsgType.REDIRECT_RESPONSE, grant, corr)
        else:
            self.proxy_connect(req, peer, self.now, ch, corr)

    def _authorize(self, req: SessionRequest, peer: AuthResult, now: int) -> None:
        decision = authorize(self.acl, peer.peer, req.gateway_id, req.permission, now)
        self._emit("broker.authz", requestor=peer.peer.id, gateway=req.gateway_id, mode=req.mode.name,
                   perm=req.permission.name, decision=decision)
        if not decision:
            raise NotAuthorized(str(decision))

    def _reachable(self, gateway_id: str, now: int) -> GatewayRecord:
        record = self.registry.get(gateway_id)
        if record is None or record.state(now, self.config) == GatewayState.Offline:
            raise GatewayUnreachable(gateway_id)
        return record

    def _fresh_tan(self) -> Tan:
        while True:
            tan = generate_tan(self.rng)
            if tan.value not in self._tans_used:
                return tan

    def _token(self, peer: AuthResult, record: GatewayRecord, req: SessionRequest, tan: Tan, now: int):
        self._tans_used.add(tan.value)
        return issue_token(self.issuer, peer, record.gateway_id, record.fingerprint, req.mode,
                           {req.permission}, tan, now, self.config.token_ttl_ms)

    def invoke_session(self, req: SessionRequest, peer: AuthResult, now: int,
                       requestor_channel: Optional[SecureChannel] = None, corr: int = 0):
        """Authorize, pick a TAN, issue the token and record the pending
        invocation. Returns ``(tan, token)``; the connect request is sent by
        the caller's channel handling."""
        self._authorize(req, peer, now)
        record = self._reachable(req.gateway_id, now)
        if req.requestor_tan is not None:
            if req.requestor_tan.value in self._tans_used:
                raise TanCollision(req.requestor_tan.hex[:8])
            tan = req.requestor_tan
        else:
            tan = self._fresh_tan()
        token = self._token(peer, record, req, tan, now)
        p = PendingInvocation(tan, peer.peer, record.gateway_id, token, now, requestor_channel, corr)
        p.timer = self.world.sim.call_later(self.config.pending_timeout_ms, self._expire_pending, tan.value)
        self.pending[tan.value] = p
        self._emit("broker.invoke", requestor=peer.peer.id, gateway=req.gateway_id, tan=tan.value[:4])
        return tan, token

    def _send_connect_request(self, tan: Tan, req: SessionRequest) -> int:
        p = self.pending[tan.value]
        record = self.registry[p.gateway_id.id]
        return record.channel.send(MsgType.CONNECT_REQUEST, ConnectRequest(req.callback, tan, p.token, req.command))

    def _expire_pending(self, tan: bytes) -> None:
        p = self.pending.pop(tan, None)
        if p is not None:
            self._emit("broker.pending_expired", gateway=p.gateway_id.id, tan=tan[:4])

    def _drop_pending(self, tan: bytes) -> None:
        p = self.pending.pop(tan, None)
        if p is not None and p.timer is not None:
            p.timer.cancel()

    def redirect(self, req: SessionRequest, peer: AuthResult, now: int) -> SessionGrant:
        self._authorize(req, peer, now)
        record = self.registry.get(req.gateway_id)
        if record is None:
            raise NotFound(req.gateway_id)
        token = self._token(peer, record, req, self._fresh_tan(), now)
        port = record.listen_port if record.listen_port is not None else record.public_address.port
        address = Address(record.public_address.host, port)
        self._emit("broker.redirect", requestor=peer.peer.id, gateway=req.gateway_id, addr=address)
        return SessionGrant(token, address)

    def proxy_connect(self, req: SessionRequest, peer: AuthResult, now: int,
                      requestor_channel: SecureChannel, corr: int) -> ProxySession:
        self._authorize(req, peer, now)
        record = self._reachable(req.gateway_id, now)
        token = self._token(peer, record, req, self._fresh_tan(), now)
        self._next_session += 1
        s = ProxySession(self._next_session, peer, req.gateway_id, req.permission, token, requestor_channel,
                         record.channel, corr)
        self.sessions[s.session_id] = s
        s.gateway_corr = record.channel.send(MsgType.PROXY_OPEN, ProxyOpen(s.session_id, token))
        self._emit("broker.proxy_request", session=s.session_id, requestor=peer.peer.id, gateway=req.gateway_id)
        return s

    # -- relay ---------------------------------------------------------------------------

    def on_fault(self, fault) -> None:
        if isinstance(fault, TamperNext) and fault.at_relay:
            self._relay_tamper.append(fault)

    def _maybe_tamper(self, session_id: int, data: bytes) -> bytes:
        for i, flt in enumerate(self._relay_tamper):
            if flt.msg_type is not None and (len(data) < 6 or data[5] != int(flt.msg_type)):
                continue
            del self._relay_tamper[i]
            buf = bytearray(data)
            idx = flt.byte_index % len(buf)
            buf[idx] ^= flt.xor_mask & 0xFF
            self._emit("fault.tampered", session=session_id, index=idx, mask=flt.xor_mask)
            return bytes(buf)
        return data

    def _proxy_from_requestor(self, ch: SecureChannel, body: ProxyData) -> None:
        s = self.sessions.get(body.session_id)
        if s is None or s.requestor_channel is not ch or not s.open:
            self._emit("broker.proxy_drop", session=body.session_id)
            return
        s.bytes_up += len(body.data)
        data = self._maybe_tamper(s.session_id, body.data)
        s.gateway_channel.send(MsgType.PROXY_DATA, ProxyData(s.session_id, data))

    def _proxy_from_gateway(self, ch: SecureChannel, body: ProxyData) -> None:
        s = self.sessions.get(body.session_id)
        if s is None or s.gateway_channel is not ch or not s.open:
            self._emit("broker.proxy_drop", session=body.session_id)
            return
        s.bytes_down += len(body.data)
        data = self._maybe_tamper(s.session_id, body.data)
        s.requestor_channel.send(MsgType.PROXY_DATA, ProxyData(s.session_id, data))

    # -- flow export --------------------------------------------------------------------

    def export_allowed_flows(self) -> FlowExport:
        now = self.now
        flows = set()
        for entry in self.acl.entries:
            if not entry.live(now):
                continue
            role = entry.principal if isinstance(entry.principal, RoleKind) else entry.principal.role
            for perm in entry.permissions:
                flows.add(FlowTuple(role, entry.gateway_id, None, perm))
        for s in self.sessions.values():
            if s.open:
                flows.add(FlowTuple(s.requestor.peer.role, s.gateway_id, Mode.Proxy, s.permission))
        export = FlowExport(tuple(sorted(flows, key=FlowTuple.sort_key)))
        self._emit("flow.export", count=len(export.flows))
        return export

