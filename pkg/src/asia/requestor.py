"""Client library used by smart-grid roles to reach gateways through the broker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .auth import NonceCache, SoftwareToken
from .broker import BROKER_PORT
from .channel import Outcome, SecureChannel, Tunnel, World
from .codec import CodecError
from .errors import (
    AsiaError,
    ConnectTimeout,
    FingerprintMismatch,
    IntegrityFailure,
    NotAuthorizedLocally,
    TanMismatch,
    Timeout,
    error_for,
)
from .messages import (
    DialBack,
    Error,
    FlowExport,
    ProxyData,
    SessionGrant,
    SessionRequest,
    decode_app_payload,
    encode_app_payload,
)
from .model import (
    Address,
    Command,
    CommandResult,
    Credential,
    ErrorCode,
    Identity,
    Mode,
    MsgType,
    Permission,
    ResultStatus,
    Tan,
)

log = logging.getLogger(__name__)

REQUESTOR_PORT = 7200
CONNECT_TIMEOUT_MS = 10_000
COMMAND_TIMEOUT_MS = 10_000


@dataclass
class SessionHandle:
    mode: Mode
    peer: Identity
    channel: SecureChannel = field(repr=False)
    token: SoftwareToken = field(repr=False)
    tan: Optional[Tan]
    opened_at: int
    session_id: Optional[int] = None
    outstanding: dict = field(default_factory=dict, repr=False)
    first_result: Optional[Outcome] = field(default=None, repr=False)

    @property
    def send_sequence(self) -> int:
        return self.channel._send_seq

    @property
    def recv_sequence(self) -> Optional[int]:
        return self.channel._recv_seq

    @property
    def open(self) -> bool:
        return self.channel.established

    def close(self) -> None:
        self.channel.close("done")


@dataclass
class _Request:
    label: str
    gateway_id: str
    mode: Mode
    permission: Permission
    outcome: Outcome
    command: Optional[Command] = None
    tan: Optional[Tan] = None
    token: Optional[SoftwareToken] = None
    corr: int = 0
    connect_delay: int = 0
    timer: object = None
    result: Optional[Outcome] = None


class RequestorClient:
    def __init__(
        self,
        world: World,
        node: str,
        credential: Credential,
        trust: crypto.TrustStore,
        broker: Address = Address("broker", BROKER_PORT),
        callback_port: Optional[int] = REQUESTOR_PORT,
    ) -> None:
        self.world = world
        self.node = node
        self.credential = credential
        self.trust = trust
        self.broker = broker
        self.callback_port = callback_port
        self.rng = world.rng_for(node)
        self.nonces = NonceCache()
        self.broker_channel: Optional[SecureChannel] = None
        self._queue: list = []
        self._by_corr: dict[int, object] = {}
        self.pending_tans: dict[bytes, _Request] = {}
        self._consumed: set[bytes] = set()
        self._parked: list[tuple[SecureChannel, DialBack]] = []
        self._tunnels: dict[int, Tunnel] = {}
        self.handles: list[SessionHandle] = []

    @property
    def identity(self) -> Identity:
        return self.credential.identity

    @property
    def now(self) -> int:
        return self.world.sim.now

    def _emit(self, kind: str, /, **fields) -> None:
        self.world.log.emit(kind, requestor=self.identity.id, **fields)

    def start(self) -> None:
        self.world.net.attach(self.node, self)
        if self.callback_port is not None:
            self.world.net.listen(self.node, self.callback_port, self._accept_dialback)

    @property
    def callback_address(self) -> Address:
        return Address(self.world.net.local_host(self.node), self.callback_port)

    # -- broker channel -----------------------------------------------------------------

    def _broker(self, then) -> None:
        ch = self.broker_channel
        if ch is not None and ch.established:
            then(ch)
            return
        self._queue.append(then)
        if ch is None or ch.state == "closed":
            ch = SecureChannel(self.world, self.node, self.credential, self.trust, self,
                               initiator=True, rng=self.rng, label="requestor")
            ch.context["kind"] = "broker"
            self.broker_channel = ch
            self.world.net.connect(self.node, self.broker, ch)

    def _flush_queue(self, ch: SecureChannel) -> None:
        queue, self._queue = self._queue, []
        for then in queue:
            then(ch)

    # -- public API ---------------------------------------------------------------------

    def request_session(
        self,
        gateway_id: str,
        mode: Mode,
        permission: Permission,
        command: Optional[Command] = None,
        tan: Optional[Tan] = None,
        label: str = "",
        connect_delay: int = 0,
    ) -> Outcome:
        """Outcome resolves to a SessionHandle authenticated with the gateway.

        In invocation mode ``command`` rides along with the connect request
        and its result arrives on the handle's ``first_result`` outcome.
        """
        label = label or f"{gateway_id}/{mode.name}"
        req = _Request(label, gateway_id, mode, permission, Outcome(label), command, tan,
                       connect_delay=connect_delay)
        if command is not None:
            req.result = Outcome(label + "/result")
        self._emit("req.request", label=label, gateway=gateway_id, mode=mode.name, perm=permission.name)
        req.timer = self.world.sim.call_later(CONNECT_TIMEOUT_MS + connect_delay, self._timeout, req)
        if tan is not None:
            self.pending_tans[tan.value] = req

        def send(ch: SecureChannel) -> None:
            callback = self.callback_address if mode == Mode.Invocation else None
            body = SessionRequest(gateway_id, mode, permission, tan, callback,
                                  command if mode == Mode.Invocation else None)
            req.corr = ch.send(MsgType.SESSION_REQUEST, body)
            self._by_corr[req.corr] = req

        self._broker(send)
        return req.outcome

    def run(self, gateway_id: str, mode: Mode, permission: Permission, command: Optional[Command],
            label: str = "", tan: Optional[Tan] = None, connect_delay: int = 0) -> Outcome:
        """Open a session and run one command on it; resolves to the CommandResult
        (or to the SessionHandle when ``command`` is None)."""
        label = label or f"{gateway_id}/{mode.name}"
        done = Outcome(label)
        embedded = mode == Mode.Invocation
        session = self.request_session(gateway_id, mode, permission, command if embedded else None, tan,
                                       label, connect_delay)

        def on_session(o: Outcome) -> None:
            if not o.ok:
                self._finish(done, mode, error=o.error)
                return
            handle = o.value
            if command is None:
                self._finish(done, mode, handle)
                return
            if embedded:
                result = handle.first_result
            else:
                result = self.send_command(handle, command)
            result.add_done_callback(lambda r: self._finish(done, mode, r.value, r.error))

        session.add_done_callback(on_session)
        return done

    def _finish(self, done: Outcome, mode: Mode, value=None, error=None) -> None:
        if done.done:
            return
        if error is None:
            done.resolve(value, self.now)
            self._emit("req.outcome", label=done.label, mode=mode.name, ok=True, error="-",
                       achieved=value.achieved_kwh if isinstance(value, CommandResult) else "-")
        else:
            done.fail(error, self.now)
            self._emit("req.outcome", label=done.label, mode=mode.name, ok=False, error=type(error).__name__,
                       achieved="-")

    def send_command(self, handle: SessionHandle, cmd: Command) -> Outcome:
        out = Outcome(f"cmd:{cmd.kind.name}")
        if not handle.open:
            out.fail(AsiaError("session closed"), self.now)
            return out
        corr = handle.channel.next_correlation()
        handle.outstanding[corr] = out
        self._emit("req.command_sent", gateway=handle.peer.id, kind=cmd.kind.name, corr=corr)
        handle.channel.send_app(encode_app_payload(cmd), corr)
        self.world.sim.call_later(COMMAND_TIMEOUT_MS, self._command_timeout, handle, corr)
        return out

    def request_flow_export(self) -> Outcome:
        out = Outcome("flow-export")

        def send(ch: SecureChannel) -> None:
            corr = ch.send(MsgType.FLOW_EXPORT, FlowExport(()))
            self._by_corr[corr] = out

        self._broker(send)
        return out

    def direct_connect(self, address: Address, token: SoftwareToken, label: str = "direct",
                       tan: Optional[Tan] = None) -> Outcome:
        """Dial a gateway directly and present ``token`` (may be a forgery)."""
        out = Outcome(label)
        ch = SecureChannel(self.world, self.node, self.credential, self.trust, self,
                           initiator=True, rng=self.rng, label="direct")
        ch.context.update(kind="direct", outcome=out, token=token, tan=tan or (token.tan if token else None))
        self._emit("req.direct", label=label, to=address)
        self.world.net.connect(self.node, Address(*address), ch)

        def expire() -> None:
            if not out.done:
                self._emit("req.timeout", label=label, stage="direct")
                out.fail(ConnectTimeout(f"{address}"), self.now)
                ch.close("ConnectTimeout")

        self.world.sim.call_later(CONNECT_TIMEOUT_MS, expire)
        return out

    # -- timeouts -----------------------------------------------------------------------

    def _timeout(self, req: _Request) -> None:
        if req.outcome.done:
            return
        self._emit("req.timeout", label=req.label, stage="session")
        self._fail(req, ConnectTimeout(req.label))

    def _command_timeout(self, handle: SessionHandle, corr: int) -> None:
        out = handle.outstanding.pop(corr, None)
        if out is not None:
            out.fail(Timeout(f"command {corr}"), self.now)

    def _fail(self, req: _Request, err: AsiaError) -> None:
        if req.tan is not None:
            self.pending_tans.pop(req.tan.value, None)
        if req.timer is not None:
            req.timer.cancel()
        req.outcome.fail(err, self.now)
        if req.result is not None:
            req.result.fail(err, self.now)

    def _succeed(self, req: _Request, handle: SessionHandle) -> None:
        if req.timer is not None:
            req.timer.cancel()
        if self._by_corr.get(req.corr) is req:
            del self._by_corr[req.corr]
        handle.first_result = req.result or Outcome("no-command")
        self.handles.append(handle)
        self._emit("req.session", label=req.label, mode=req.mode.name, gateway=handle.peer.id)
        req.outcome.resolve(handle, self.now)

    # -- channel callbacks --------------------------------------------------------------

    def on_channel_up(self, ch: SecureChannel) -> None:
        kind = ch.context.get("kind")
        if kind == "broker":
            self._flush_queue(ch)
        elif kind == "direct":
            token = ch.context["token"]
            if token is not None and not self._gateway_matches(ch, token):
                ch.context["outcome"].fail(FingerprintMismatch(ch.peer.peer.id), self.now)
                ch.close("FingerprintMismatch")
                return
            ch.send(MsgType.DIAL_BACK, DialBack(ch.context["tan"] or Tan(bytes(15) + b"\x01"), token))
        elif kind == "proxy":
            req = ch.context["request"]
            if not self._gateway_matches(ch, req.token):
                self._fail(req, FingerprintMismatch(ch.peer.peer.id))
                ch.close("FingerprintMismatch")
                return
            handle = SessionHandle(Mode.Proxy, ch.peer.peer, ch, req.token, req.token.tan, self.now,
                                   ch.context["session_id"])
            ch.context["handle"] = handle
            self._succeed(req, handle)

    def _gateway_matches(self, ch: SecureChannel, token: SoftwareToken) -> bool:
        return ch.peer.peer == token.gateway_id and ch.peer.peer_fingerprint == token.gateway_fingerprint

    def on_channel_auth_failed(self, ch: SecureChannel, exc: AsiaError) -> None:
        kind = ch.context.get("kind")
        self._emit("req.auth_failed", kind=kind, reason=type(exc).__name__)
        if kind == "direct":
            ch.context["outcome"].fail(exc, self.now)
        elif kind == "proxy":
            self._fail(ch.context["request"], exc)

    def on_channel_down(self, ch: SecureChannel, reason: str) -> None:
        kind = ch.context.get("kind")
        if kind == "broker":
            for tunnel in self._tunnels.values():
                tunnel.lost(reason)
            self._tunnels.clear()
            if self._queue and ch is self.broker_channel:
                self.broker_channel = None
        handle = ch.context.get("handle")
        if handle is not None:
            for corr, out in list(handle.outstanding.items()):
                out.fail(AsiaError(f"session lost: {reason}"), self.now)
            handle.outstanding.clear()

    def on_channel_violation(self, ch: SecureChannel, exc: AsiaError) -> None:
        self._emit("req.violation", kind=ch.context.get("kind"), error=type(exc).__name__)
        handle = ch.context.get("handle")
        if handle is not None:
            self._fail_outstanding(handle, exc)

    def _fail_outstanding(self, handle: SessionHandle, exc: AsiaError) -> None:
        for out in handle.outstanding.values():
            out.fail(exc, self.now)
        handle.outstanding.clear()

    def on_channel_message(self, ch: SecureChannel, msg, body) -> None:
        kind = ch.context.get("kind")
        t = msg.msg_type
        if kind == "broker":
            self._from_broker(ch, msg, body)
        elif t == MsgType.DIAL_BACK and kind == "dialback":
            self._dialback_presented(ch, body)
        elif t == MsgType.DIAL_BACK and kind == "direct":
            out = ch.context["outcome"]
            token = ch.context["token"]
            handle = SessionHandle(Mode.Redirect, ch.peer.peer, ch, token, body.tan, self.now)
            ch.context["handle"] = handle
            handle.first_result = Outcome("no-command")
            self.handles.append(handle)
            out.resolve(handle, self.now)
        elif t == MsgType.APP_DATA:
            self._result(ch, msg, body)
        elif t == MsgType.ERROR:
            self._session_error(ch, body)

    def _session_error(self, ch: SecureChannel, body: Error) -> None:
        err = error_for(body.code, body.detail)
        self._emit("req.peer_error", kind=ch.context.get("kind"), code=body.code.name)
        handle = ch.context.get("handle")
        if handle is not None:
            self._fail_outstanding(handle, err)
            return
        if ch.context.get("kind") == "direct":
            ch.context["outcome"].fail(err, self.now)
            ch.close(body.code.name)
        elif ch.context.get("kind") == "proxy":
            self._fail(ch.context["request"], err)

    def _result(self, ch: SecureChannel, msg, body) -> None:
        handle = ch.context.get("handle")
        if handle is None:
            return
        try:
            result = decode_app_payload(body.payload)
        except (CodecError, ValueError) as exc:
            self._fail_outstanding(handle, AsiaError(f"bad result: {exc}"))
            return
        out = handle.outstanding.pop(msg.correlation, None)
        if out is None or not isinstance(result, CommandResult):
            return
        self._emit("req.result", gateway=handle.peer.id, corr=msg.correlation, status=result.status.name)
        if result.status == ResultStatus.NotAuthorizedLocally:
            out.fail(NotAuthorizedLocally(result.detail), self.now)
        elif result.status == ResultStatus.IntegrityFailure:
            out.fail(IntegrityFailure(result.detail), self.now)
        else:
            out.resolve(result, self.now)

    def _from_broker(self, ch: SecureChannel, msg, body) -> None:
        t = msg.msg_type
        if t == MsgType.PROXY_DATA:
            tunnel = self._tunnels.get(body.session_id)
            if tunnel is not None:
                tunnel.deliver(body.data)
            return
        req = self._by_corr.pop(msg.correlation, None)
        if req is None:
            return
        if isinstance(req, Outcome):
            if t == MsgType.FLOW_EXPORT:
                req.resolve(body, self.now)
            elif t == MsgType.ERROR:
                req.fail(error_for(body.code, body.detail), self.now)
            return
        if t == MsgType.ERROR:
            self._emit("req.broker_error", label=req.label, code=body.code.name)
            self._fail(req, error_for(body.code, body.detail))
        elif t == MsgType.SESSION_GRANT and req.mode == Mode.Invocation:
            req.token = body.token
            req.tan = body.token.tan
            self._by_corr[msg.correlation] = req  # errors may still follow
            self.pending_tans[req.tan.value] = req
            self._retry_parked()
        elif t == MsgType.SESSION_GRANT and req.mode == Mode.Proxy:
            req.token = body.token
            self._by_corr[msg.correlation] = req
            self._open_tunnel(ch, req, body)
        elif t == MsgType.REDIRECT_RESPONSE:
            req.token = body.token
            self.world.sim.call_later(req.connect_delay, self._redirect_connect, req, body)

    def _redirect_connect(self, req: _Request, grant: SessionGrant) -> None:
        if req.outcome.done:
            return
        inner = self.direct_connect(grant.address, grant.token, req.label)

        def done(o: Outcome) -> None:
            if o.ok:
                o.value.first_result = req.result or Outcome("no-command")
                self._succeed(req, o.value)
            else:
                self._fail(req, o.error)

        inner.add_done_callback(done)

    def _open_tunnel(self, broker_ch: SecureChannel, req: _Request, grant: SessionGrant) -> None:
        sid = grant.session_id

        def send(data: bytes) -> None:
            if broker_ch.established:
                broker_ch.send(MsgType.PROXY_DATA, ProxyData(sid, data))

        tunnel = Tunnel(send, lambda: self._tunnels.pop(sid, None))
        self._tunnels[sid] = tunnel
        inner = SecureChannel(self.world, self.node, self.credential, self.trust, self,
                              initiator=True, rng=self.rng, label="proxy")
        inner.context.update(kind="proxy", request=req, session_id=sid)
        tunnel.attach(inner)

    # -- dial-backs ---------------------------------------------------------------------

    def _accept_dialback(self, endpoint) -> SecureChannel:
        ch = SecureChannel(self.world, self.node, self.credential, self.trust, self,
                           initiator=False, rng=self.rng, nonces=self.nonces, label="dialback")
        ch.context["kind"] = "dialback"
        return ch

    def _retry_parked(self) -> None:
        parked, self._parked = self._parked, []
        for ch, body in parked:
            if ch.established:
                self._dialback_presented(ch, body)

    def _awaiting_grant(self) -> bool:
        return any(isinstance(r, _Request) and r.mode == Mode.Invocation and r.tan is None
                   and not r.outcome.done for r in self._by_corr.values())

    def _dialback_presented(self, ch: SecureChannel, body: DialBack) -> None:
        """Match the gateway's TAN against pending invocations (single use)."""
        req = self.pending_tans.get(body.tan.value)
        if req is None or req.token is None:
            if req is None and body.tan.value not in self._consumed and self._awaiting_grant():
                self._parked.append((ch, body))
                return
            if req is not None:
                # TAN we chose ourselves, grant not yet here
                self._parked.append((ch, body))
                return
            reused = body.tan.value in self._consumed
            self._emit("req.dialback_rejected", reason="TanMismatch", peer=ch.peer.peer.id, reused=reused)
            ch.send(MsgType.ERROR, Error(ErrorCode.TanMismatch, "unknown TAN"))
            ch.close("TanMismatch")
            if not reused:
                for r in list(self.pending_tans.values()):
                    if r.token is not None and r.token.gateway_id == ch.peer.peer:
                        self._fail(r, TanMismatch(r.label))
                        break
            return
        if not self._gateway_matches(ch, req.token):
            self._emit("req.dialback_rejected", reason="FingerprintMismatch", peer=ch.peer.peer.id, reused=False)
            ch.send(MsgType.ERROR, Error(ErrorCode.FingerprintMismatch, "gateway fingerprint differs from token"))
            ch.close("FingerprintMismatch")
            self._fail(req, FingerprintMismatch(ch.peer.peer.id))
            return
        del self.pending_tans[body.tan.value]
        self._consumed.add(body.tan.value)
        self._by_corr.pop(req.corr, None)
        handle = SessionHandle(Mode.Invocation, ch.peer.peer, ch, req.token, body.tan, self.now)
        ch.context["handle"] = handle
        if req.command is not None:
            handle.outstanding[req.command.sequence] = req.result
        ch.send(MsgType.DIAL_BACK, DialBack(body.tan))
        self._emit("req.dialback_accepted", label=req.label, peer=ch.peer.peer.id)
        self._succeed(req, handle)
