"""The home-side gateway agent.

It keeps a permanent channel to the broker, answers connect requests by
dialing out, accepts proxied sessions tunneled through the broker and direct
inbound sessions on its own listener, and runs commands against a fixed set
of simulated appliances after its local access policy agrees.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Mapping, Optional

from . import crypto
from .auth import AclTable, AuthResult, DenyReason, NonceCache, SoftwareToken, authorize, verify_token
from .broker import BROKER_PORT, KEEPALIVE_INTERVAL_MS
from .channel import SecureChannel, Tunnel, World
from .codec import CodecError
from .errors import AsiaError, TokenError
from .messages import (
    DialBack,
    Error,
    ProxyData,
    ProxyOpen,
    Register,
    decode_app_payload,
    encode_app_payload,
)
from .model import (
    Address,
    ApplianceClass,
    ApplianceState,
    Command,
    CommandResult,
    ConfigChange,
    Credential,
    ErrorCode,
    HASH_NAME,
    Identity,
    InstallApp,
    Mode,
    MsgType,
    Permission,
    PriceSignal,
    ResultStatus,
    ShutoffAppliance,
    ShutoffGenerator,
    StatusQuery,
    Tan,
    digest,
)
from .netsim.faults import ConfigMutate

log = logging.getLogger(__name__)

GATEWAY_PORT = 7100
ACTIVE_SLOT = "energy-provider"
BACKOFF_BASE_MS = 1_000
BACKOFF_CAP_MS = 60_000
DIAL_TIMEOUT_MS = 10_000
DEFAULT_PRICE_THRESHOLDS = {ApplianceClass.EvCharger: Decimal("0.5")}


class Policy(str, enum.Enum):
    centralized = "centralized"
    local = "local"
    conjunction = "conjunction"


class CredentialStore:
    """Named credential slots; the active slot is used for every new handshake."""

    def __init__(self, slots: Optional[Mapping[str, Credential]] = None, active: str = ACTIVE_SLOT,
                 pluggable: bool = True) -> None:
        self.slots: dict[str, Credential] = dict(slots or {})
        self.active_slot = active
        self.pluggable = pluggable

    @property
    def active(self) -> Credential:
        return self.slots[self.active_slot]

    def replace(self, slot: str, credential: Credential) -> None:
        if not self.pluggable and slot in self.slots:
            raise AsiaError(f"credential slot {slot} is sealed")
        self.slots[slot] = credential


@dataclass
class GatewayConfig:
    gateway_id: str
    broker: Address = Address("broker", BROKER_PORT)
    listen_port: Optional[int] = GATEWAY_PORT
    policy: Policy = Policy.centralized
    keepalive_ms: int = KEEPALIVE_INTERVAL_MS
    appliances: tuple = ()
    settings: dict = field(default_factory=dict)
    price_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_PRICE_THRESHOLDS))

    def canonical(self) -> bytes:
        """Stable text form hashed for the integrity baseline."""
        lines = [
            f"gateway {self.gateway_id}",
            f"broker {self.broker.host}:{self.broker.port}",
            f"listen {self.listen_port}",
            f"policy {Policy(self.policy).value}",
            f"keepalive {self.keepalive_ms}",
        ]
        lines += [f"threshold {c.name} {v}" for c, v in sorted(self.price_thresholds.items())]
        lines += [f"set {k} {v}" for k, v in sorted(self.settings.items())]
        return "\n".join(lines).encode()


@dataclass
class Session:
    mode: Mode
    channel: SecureChannel = field(repr=False)
    token: Optional[SoftwareToken] = None
    tan: Optional[Tan] = None
    command: Optional[Command] = None
    broker_corr: int = 0
    session_id: Optional[int] = None
    accepted: bool = False
    observed: bool = False


def backoff_delay(attempt: int, rng) -> int:
    """Exponential backoff with half jitter: ``d/2 + U(0, d/2)``."""
    d = min(BACKOFF_CAP_MS, BACKOFF_BASE_MS * (2 ** attempt))
    return int(d / 2 + rng.uniform(0, d / 2))


class GatewayAgent:
    def __init__(
        self,
        world: World,
        node: str,
        identity: Identity,
        config: GatewayConfig,
        store: CredentialStore,
        trust: crypto.TrustStore,
        token_issuers: Mapping[Identity, bytes],
        local_acl: Optional[AclTable] = None,
    ) -> None:
        self.world = world
        self.node = node
        self.identity = identity
        self.config = config
        self.store = store
        self.trust = trust
        self.token_issuers = dict(token_issuers)
        self.local_acl = local_acl if local_acl is not None else AclTable()
        self.rng = world.rng_for(node)
        self.nonces = NonceCache()
        self.appliances: dict[str, ApplianceState] = {a.appliance_id: a for a in config.appliances}
        self.price: Optional[PriceSignal] = None
        self.apps: dict[str, InstallApp] = {}
        self._shutoffs: dict[Command, CommandResult] = {}
        self.baseline = digest(config.canonical())
        self.broker_channel: Optional[SecureChannel] = None
        self.registered = False
        self.observed_address: Optional[Address] = None
        self.auth_blocked = False
        self.integrity_reported = False
        self.sessions: list[Session] = []
        self._tunnels: dict[int, Tunnel] = {}
        self._attempt = 0
        self._reconnect_timer = None
        self._keepalive_timer = None
        self._stopped = False
        self._corrupt_next_tan = False
        self._last_dialback: Optional[tuple] = None
        self.registrations = 0

    @property
    def id(self) -> str:
        return self.identity.id

    @property
    def now(self) -> int:
        return self.world.sim.now

    def _emit(self, kind: str, /, **fields) -> None:
        self.world.log.emit(kind, gateway=self.id, **fields)

    # -- lifecycle ----------------------------------------------------------------------

    def start(self) -> None:
        self.world.net.attach(self.node, self)
        if self.config.listen_port is not None:
            self.world.net.listen(self.node, self.config.listen_port, self._accept_direct)
        self.connect_and_register()

    def stop(self) -> None:
        self._stopped = True
        for t in (self._reconnect_timer, self._keepalive_timer):
            if t is not None:
                t.cancel()
        if self.broker_channel is not None:
            self.broker_channel.close("stopped")

    def connect_and_register(self) -> None:
        self._reconnect_timer = None
        if self._stopped or self.auth_blocked:
            return
        ch = SecureChannel(self.world, self.node, self.store.active, self.trust, self,
                           initiator=True, rng=self.rng, label="permanent")
        ch.context["kind"] = "broker"
        self.broker_channel = ch
        self.world.net.connect(self.node, self.config.broker, ch)
        self._emit("gw.connect", attempt=self._attempt)
        # a silently dropped SYN never opens the channel
        self.world.sim.call_later(DIAL_TIMEOUT_MS, self._connect_watchdog, ch)

    def _connect_watchdog(self, ch: SecureChannel) -> None:
        if ch is self.broker_channel and ch.state == "opening":
            ch.close("ConnectTimeout")

    def _schedule_reconnect(self) -> None:
        if self._stopped or self.auth_blocked or self._reconnect_timer is not None:
            return
        delay = backoff_delay(self._attempt, self.rng)
        self._attempt += 1
        self._emit("gw.backoff", delay=delay, attempt=self._attempt)
        self._reconnect_timer = self.world.sim.call_later(delay, self.connect_and_register)

    def _keepalive(self) -> None:
        self._keepalive_timer = None
        ch = self.broker_channel
        if ch is None or not self.registered or not ch.established:
            return
        ch.send(MsgType.KEEPALIVE)
        self._keepalive_timer = self.world.sim.call_later(self.config.keepalive_ms, self._keepalive)

    def swap_credential(self, credential: Credential, slot: str = ACTIVE_SLOT) -> None:
        """Plug in a new credential; re-registers over a fresh channel."""
        self.store.replace(slot, credential)
        self._emit("gw.credential_swap", slot=slot, fp=credential.fingerprint[:8])
        self.auth_blocked = False
        self._attempt = 0
        if self.broker_channel is not None and self.broker_channel.state != "closed":
            old, self.broker_channel = self.broker_channel, None
            old.close("credential swap")
        self.connect_and_register()

    # -- integrity ----------------------------------------------------------------------

    def self_integrity_check(self) -> bool:
        return digest(self.config.canonical()) == self.baseline

    def _integrity_guard(self) -> bool:
        if self.self_integrity_check():
            return True
        self._emit("gw.integrity_fail", hash=HASH_NAME)
        if not self.integrity_reported and self.broker_channel is not None and self.broker_channel.established:
            self.integrity_reported = True
            self.broker_channel.send(MsgType.ERROR, Error(ErrorCode.IntegrityFailure, "configuration digest mismatch"),
                                     correlation=0)
        return False

    def on_fault(self, fault) -> None:
        if isinstance(fault, ConfigMutate):
            # out-of-band edit; the baseline is deliberately left alone
            self.config.settings["mutated"] = str(self.now)
            self._emit("gw.config_mutated")

    # -- channel callbacks --------------------------------------------------------------

    def on_channel_up(self, ch: SecureChannel) -> None:
        kind = ch.context.get("kind")
        if kind == "broker":
            if ch is not self.broker_channel:
                ch.close("stale")
                return
            ch.send(MsgType.REGISTER, Register(self.identity, self.config.listen_port))
        elif kind == "dialback":
            self._dialback_up(ch)
        elif kind in ("direct", "proxy"):
            if not self._integrity_guard():
                ch.send(MsgType.ERROR, Error(ErrorCode.IntegrityFailure, "session refused"))
                ch.close("IntegrityFailure")
                return
            if kind == "proxy":
                s = ch.context["session"]
                if not self._check_peer(ch, s.token):
                    return
                s.accepted = True
                self._observe(ch, s)

    def on_channel_auth_failed(self, ch: SecureChannel, exc: AsiaError) -> None:
        kind = ch.context.get("kind")
        self._emit("gw.auth_failed", kind=kind, reason=type(exc).__name__)
        if kind == "broker" and ch is self.broker_channel and type(exc).__name__ != "HandshakeTimeout":
            self.auth_blocked = True
        elif kind == "dialback":
            self._dial_failed(ch, "handshake failed")
        elif kind == "proxy":
            s = ch.context["session"]
            if self.broker_channel is not None and self.broker_channel.established:
                self.broker_channel.send(
                    MsgType.ERROR, Error(ErrorCode.AuthFailed, type(exc).__name__, s.session_id), s.broker_corr)

    def on_channel_down(self, ch: SecureChannel, reason: str) -> None:
        kind = ch.context.get("kind")
        if kind == "broker":
            if ch is not self.broker_channel:
                return
            was = self.registered
            self.registered = False
            if self._keepalive_timer is not None:
                self._keepalive_timer.cancel()
                self._keepalive_timer = None
            for sid, tunnel in list(self._tunnels.items()):
                tunnel.lost(reason)
            self._tunnels.clear()
            self._emit("gw.disconnected", reason=reason, was_registered=was)
            self._schedule_reconnect()
        elif kind == "dialback" and not ch.context.get("acked") and not ch.context.get("rejected"):
            self._dial_failed(ch, reason)
        self.sessions = [s for s in self.sessions if s.channel is not ch]

    def on_channel_violation(self, ch: SecureChannel, exc: AsiaError) -> None:
        self._emit("gw.violation", kind=ch.context.get("kind"), error=type(exc).__name__)
        if ch.context.get("kind") != "broker" and ch.established:
            ch.send(MsgType.ERROR, Error(exc.code, exc.detail))

    def on_channel_message(self, ch: SecureChannel, msg, body) -> None:
        kind = ch.context.get("kind")
        if kind == "broker":
            if ch is self.broker_channel:
                self._from_broker(ch, msg, body)
            return
        s = ch.context.get("session")
        t = msg.msg_type
        if kind == "direct" and t == MsgType.DIAL_BACK and s is None:
            self._direct_presented(ch, body)
        elif kind == "dialback" and t == MsgType.DIAL_BACK:
            self._dialback_acked(ch, body)
        elif t == MsgType.APP_DATA and s is not None and s.accepted:
            self._app_data(ch, s, msg, body)
        elif t == MsgType.ERROR:
            self._emit("gw.peer_error", kind=kind, code=body.code.name)
            if kind == "dialback" and not ch.context.get("acked"):
                # the requestor refused us; the broker's pending entry simply times out
                ch.context["rejected"] = body.code.name
                ch.close(body.code.name)
        else:
            self._emit("gw.unexpected", kind=kind, type=t.name)

    # -- broker channel -----------------------------------------------------------------

    def _from_broker(self, ch: SecureChannel, msg, body) -> None:
        t = msg.msg_type
        if t == MsgType.REGISTER_ACK:
            self.registered = True
            self.registrations += 1
            self._attempt = 0
            self.observed_address = body.observed
            self._emit("gw.registered", addr=body.observed, fp=ch.peer.peer_fingerprint[:8])
            if self.config.keepalive_ms > 0 and self._keepalive_timer is None:
                self._keepalive_timer = self.world.sim.call_later(self.config.keepalive_ms, self._keepalive)
        elif t == MsgType.CONNECT_REQUEST:
            self.on_connect_request(msg.correlation, body)
        elif t == MsgType.PROXY_OPEN:
            self._proxy_open(msg.correlation, body)
        elif t == MsgType.PROXY_DATA:
            tunnel = self._tunnels.get(body.session_id)
            if tunnel is not None:
                tunnel.deliver(body.data)
        elif t == MsgType.ERROR:
            self._emit("gw.broker_error", code=body.code.name)
        else:
            self._emit("gw.unexpected", kind="broker", type=t.name)

    def _verify(self, token: Optional[SoftwareToken], mode: Mode) -> SoftwareToken:
        if token is None:
            raise TokenError("no token presented")
        verify_token(token, self.token_issuers, self.world.scheme, self.id, self.now)
        if token.mode != mode:
            raise TokenError(f"token for {token.mode.name}, used for {mode.name}")
        return token

    def on_connect_request(self, corr: int, body) -> None:
        if not self._integrity_guard():
            self.broker_channel.send(MsgType.ERROR, Error(ErrorCode.IntegrityFailure, "refusing sessions"), corr)
            return
        try:
            token = self._verify(body.token, Mode.Invocation)
            if token.tan != body.tan:
                raise TokenError("TAN does not match token")
        except TokenError as exc:
            self._emit("gw.bad_token", reason=type(exc).__name__)
            return
        tan = body.tan
        if self._corrupt_next_tan:
            self._corrupt_next_tan = False
            raw = bytearray(tan.value)
            raw[0] ^= 0xFF
            tan = Tan(bytes(raw))
            self._emit("gw.tan_corrupted")
        self._dial(body.callback, token, tan, body.command, corr)

    def _dial(self, callback: Address, token: SoftwareToken, tan: Tan, command: Optional[Command],
              corr: int) -> SecureChannel:
        ch = SecureChannel(self.world, self.node, self.store.active, self.trust, self,
                           initiator=True, rng=self.rng, label="dialback")
        s = Session(Mode.Invocation, ch, token, tan, command, corr)
        ch.context.update(kind="dialback", session=s)
        self._last_dialback = (callback, token, tan, corr)
        self._emit("gw.dial", to=callback, tan=tan.value[:4])
        self.world.net.connect(self.node, callback, ch)
        self.world.sim.call_later(DIAL_TIMEOUT_MS, self._dial_watchdog, ch)
        return ch

    def _dial_watchdog(self, ch: SecureChannel) -> None:
        if not ch.established and ch.state != "closed":
            ch.close("ConnectTimeout")
            self._dial_failed(ch, "ConnectTimeout")

    def _dial_failed(self, ch: SecureChannel, reason: str) -> None:
        if ch.context.get("failed_reported"):
            return
        ch.context["failed_reported"] = True
        s = ch.context["session"]
        self._emit("gw.dial_failed", reason=reason)
        if self.broker_channel is not None and self.broker_channel.established:
            self.broker_channel.send(MsgType.ERROR, Error(ErrorCode.DialFailed, reason), s.broker_corr)

    def _dialback_up(self, ch: SecureChannel) -> None:
        s = ch.context["session"]
        if not self._check_peer(ch, s.token):
            return
        ch.send(MsgType.DIAL_BACK, DialBack(s.tan))

    def _dialback_acked(self, ch: SecureChannel, body: DialBack) -> None:
        s = ch.context["session"]
        if body.tan != s.tan or ch.context.get("acked"):
            return
        ch.context["acked"] = True
        s.accepted = True
        self.sessions.append(s)
        self._observe(ch, s)
        if self.broker_channel is not None and self.broker_channel.established:
            self.broker_channel.send(MsgType.DIAL_BACK, DialBack(s.tan), s.broker_corr)
        if s.command is not None:
            result = self._run(ch, s, s.command)
            ch.send_app(encode_app_payload(result), s.command.sequence)

    def _check_peer(self, ch: SecureChannel, token: SoftwareToken) -> bool:
        """The authenticated peer must be the requestor the token names."""
        peer = ch.peer
        if peer.peer != token.requestor or peer.peer_fingerprint != token.requestor_fingerprint:
            self._emit("gw.peer_mismatch", peer=peer.peer.id)
            ch.send(MsgType.ERROR, Error(ErrorCode.FingerprintMismatch, "peer is not the token's requestor"))
            ch.close("FingerprintMismatch")
            return False
        return True

    def _observe(self, ch: SecureChannel, s: Session) -> None:
        if s.observed:
            return
        s.observed = True
        perms = sorted(s.token.permissions) if s.token is not None else []
        self.world.log.emit(
            "session.observed", gateway=self.id, role=ch.peer.peer.role.name, mode=s.mode.name,
            perm=perms[0].name if perms else "-", peer=ch.peer.peer.id,
        )

    # -- proxy --------------------------------------------------------------------------

    def _proxy_open(self, corr: int, body: ProxyOpen) -> None:
        sid = body.session_id
        if not self._integrity_guard():
            self.broker_channel.send(MsgType.ERROR, Error(ErrorCode.IntegrityFailure, "refusing sessions", sid), corr)
            return
        try:
            token = self._verify(body.token, Mode.Proxy)
        except TokenError as exc:
            self._emit("gw.bad_token", reason=type(exc).__name__)
            self.broker_channel.send(MsgType.ERROR, Error(ErrorCode.BadToken, type(exc).__name__, sid), corr)
            return
        broker_ch = self.broker_channel

        def send(data: bytes) -> None:
            if broker_ch.established:
                broker_ch.send(MsgType.PROXY_DATA, ProxyData(sid, data))

        tunnel = Tunnel(send, lambda: self._tunnels.pop(sid, None))
        self._tunnels[sid] = tunnel
        ch = SecureChannel(self.world, self.node, self.store.active, self.trust, self,
                           initiator=False, rng=self.rng, nonces=self.nonces, label="proxy")
        s = Session(Mode.Proxy, ch, token, token.tan, None, corr, sid)
        ch.context.update(kind="proxy", session=s)
        self.sessions.append(s)
        tunnel.attach(ch)
        broker_ch.send(MsgType.PROXY_OPEN, ProxyOpen(sid, None, True), corr)

    # -- direct inbound -----------------------------------------------------------------

    def _accept_direct(self, endpoint) -> SecureChannel:
        ch = SecureChannel(self.world, self.node, self.store.active, self.trust, self,
                           initiator=False, rng=self.rng, nonces=self.nonces, label="direct")
        ch.context["kind"] = "direct"
        return ch

    def _direct_presented(self, ch: SecureChannel, body: DialBack) -> None:
        s = Session(Mode.Redirect, ch, None, body.tan)
        try:
            token = self._verify(body.token, Mode.Redirect)
            if token.tan != body.tan:
                raise TokenError("TAN does not match token")
        except TokenError as exc:
            self._observe(ch, s)
            self._emit("gw.bad_token", reason=type(exc).__name__)
            ch.send(MsgType.ERROR, Error(ErrorCode.BadToken, type(exc).__name__))
            ch.close("BadToken")
            return
        s.token = token
        ch.context["session"] = s
        if not self._check_peer(ch, token):
            return
        s.accepted = True
        self.sessions.append(s)
        self._observe(ch, s)
        ch.send(MsgType.DIAL_BACK, DialBack(body.tan))

    # -- commands -----------------------------------------------------------------------

    def _app_data(self, ch: SecureChannel, s: Session, msg, body) -> None:
        try:
            cmd = decode_app_payload(body.payload)
        except (CodecError, ValueError) as exc:
            self._emit("gw.bad_payload", error=str(exc)[:40])
            return
        if not isinstance(cmd, Command):
            return
        result = self._run(ch, s, cmd)
        ch.send_app(encode_app_payload(result), msg.correlation)

    def _run(self, ch: SecureChannel, s: Session, cmd: Command) -> CommandResult:
        if not self._integrity_guard():
            return CommandResult(ResultStatus.IntegrityFailure, detail="configuration digest mismatch")
        decision = self.enforce_local_acl(ch.peer, cmd.permission, s.token)
        if not decision:
            self._emit("gw.command_denied", kind=cmd.kind.name, peer=ch.peer.peer.id)
            return CommandResult(ResultStatus.NotAuthorizedLocally, detail=cmd.permission.name)
        result = self.execute_command(cmd)
        self._emit("gw.command", kind=cmd.kind.name, status=result.status.name, achieved=result.achieved_kwh)
        return result

    def enforce_local_acl(self, peer: AuthResult, perm: Permission, token: Optional[SoftwareToken] = None) -> bool:
        local = authorize(self.local_acl, peer.peer, self.id, perm, self.now)
        token_ok = token is not None and perm in token.permissions
        policy = Policy(self.config.policy)
        if policy == Policy.local:
            return bool(local)
        if policy == Policy.conjunction:
            return token_ok and bool(local)
        explicit_deny = not local and local.reason in (DenyReason.WrongPermission, DenyReason.Expired)
        return token_ok and not explicit_deny

    def execute_command(self, cmd: Command) -> CommandResult:
        p = cmd.payload
        if isinstance(p, ShutoffAppliance):
            # a repeated command must not reach for further appliances
            if cmd not in self._shutoffs:
                self._shutoffs[cmd] = self._shutoff(p)
            return self._shutoffs[cmd]
        if isinstance(p, ShutoffGenerator):
            for a in list(self.appliances.values()):
                if a.appliance_class == ApplianceClass.SolarGenerator and a.generating:
                    self.appliances[a.appliance_id] = replace(a, generating=False)
            return CommandResult(ResultStatus.Ok)
        if isinstance(p, PriceSignal):
            self.price = p
            paused = Decimal(0)
            for a in list(self.appliances.values()):
                threshold = self.config.price_thresholds.get(a.appliance_class)
                if threshold is not None and a.running and p.price > threshold:
                    self.appliances[a.appliance_id] = replace(a, running=False)
                    paused += a.load_kw
            return CommandResult(ResultStatus.Ok, paused)
        if isinstance(p, StatusQuery):
            return CommandResult(ResultStatus.Ok, appliances=tuple(self.appliances[k] for k in sorted(self.appliances)))
        if isinstance(p, ConfigChange):
            self.config.settings[p.key] = p.value
            self.baseline = digest(self.config.canonical())
            return CommandResult(ResultStatus.Ok)
        if isinstance(p, InstallApp):
            self.apps[p.name] = p
            return CommandResult(ResultStatus.Ok)
        return CommandResult(ResultStatus.UnknownApplianceClass)

    def _shutoff(self, p: ShutoffAppliance) -> CommandResult:
        targets = [self.appliances[k] for k in sorted(self.appliances)
                   if self.appliances[k].appliance_class == p.appliance_class]
        if not targets:
            return CommandResult(ResultStatus.UnknownApplianceClass, detail=p.appliance_class.name)
        achieved = Decimal(0)
        for a in targets:
            if achieved >= p.reduction_kwh:
                break
            if a.running:
                self.appliances[a.appliance_id] = replace(a, running=False)
                achieved += a.load_kw
        status = ResultStatus.Ok if achieved >= p.reduction_kwh else ResultStatus.Partial
        return CommandResult(status, achieved)

    # -- test hooks driven by scenario workloads ----------------------------------------

    def corrupt_next_tan(self) -> None:
        self._corrupt_next_tan = True

    def redial(self) -> Optional[SecureChannel]:
        """Repeat the last dial-back with the same TAN."""
        if self._last_dialback is None:
            return None
        callback, token, tan, corr = self._last_dialback
        return self._dial(callback, token, tan, None, corr)
