"""Authenticated message channels on top of simulated transports.

A channel runs the three-message handshake over its transport, then tags
every outgoing WireMessage with the sender's direction key. APP_DATA frames
additionally carry a strictly increasing sequence number. Transports are
anything with ``send(bytes)`` and ``close()`` that calls back ``on_open``,
``on_frame`` and ``on_close``: a netsim endpoint, or a tunnel carried inside
PROXY_DATA frames of another channel.
"""

from __future__ import annotations

import itertools
import logging
import random
from typing import Callable, Optional

from . import crypto
from .auth import (
    AppDataBody,
    AuthResult,
    Initiator,
    NonceCache,
    Responder,
    verify_app_message,
)
from .codec import CodecError
from .errors import AsiaError, AuthError, HandshakeTimeout, TamperDetected
from .messages import Empty, decode_body, encode_body
from .model import Credential, MsgType, WireMessage, decode_message, encode_message
from .netsim import EventLog, Network, Simulator

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT_MS = 10_000


class Outcome:
    """Completion slot for an asynchronous operation driven by the simulator."""

    def __init__(self, label: str = "") -> None:
        self.label = label
        self.done = False
        self.value = None
        self.error: Optional[BaseException] = None
        self.completed_at: Optional[int] = None
        self._callbacks: list[Callable[["Outcome"], None]] = []

    @property
    def ok(self) -> bool:
        return self.done and self.error is None

    def resolve(self, value=None, now: Optional[int] = None) -> bool:
        if self.done:
            return False
        self.done, self.value, self.completed_at = True, value, now
        self._fire()
        return True

    def fail(self, error: BaseException, now: Optional[int] = None) -> bool:
        if self.done:
            return False
        self.done, self.error, self.completed_at = True, error, now
        self._fire()
        return True

    def add_done_callback(self, fn: Callable[["Outcome"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    def result(self):
        if not self.done:
            raise RuntimeError(f"outcome {self.label!r} still pending")
        if self.error is not None:
            raise self.error
        return self.value

    @property
    def error_name(self) -> str:
        return type(self.error).__name__ if self.error is not None else ""

    def __repr__(self) -> str:
        state = "pending" if not self.done else ("ok" if self.ok else self.error_name)
        return f"<Outcome {self.label} {state}>"


class World:
    """Simulation services shared by every process in one run."""

    def __init__(self, net: Network, seed: int, scheme: crypto.SignatureScheme) -> None:
        self.net = net
        self.sim: Simulator = net.sim
        self.log: EventLog = net.log
        self.seed = seed
        self.scheme = scheme
        self._ids = itertools.count(1)

    def next_id(self) -> int:
        return next(self._ids)

    def rng_for(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}:{name}")


class SecureChannel:
    """One authenticated, integrity-protected message channel.

    ``owner`` may implement any of ``on_channel_up(ch)``,
    ``on_channel_message(ch, msg, body)``, ``on_channel_down(ch, reason)``,
    ``on_channel_auth_failed(ch, error)`` and
    ``on_channel_violation(ch, error)``.
    """

    def __init__(
        self,
        world: World,
        node: str,
        credential: Credential,
        trust: crypto.TrustStore,
        owner,
        *,
        initiator: bool,
        rng: random.Random,
        nonces: Optional[NonceCache] = None,
        label: str = "",
    ) -> None:
        self.world = world
        self.node = node
        self.credential = credential
        self.owner = owner
        self.initiator = initiator
        self.id = world.next_id()
        self.label = label
        self.transport = None
        self.state = "opening"
        self.peer: Optional[AuthResult] = None
        self.keys = None
        self.close_reason = ""
        self.context: dict = {}
        self._corr = itertools.count(1)
        self._send_seq = 0
        self._recv_seq: Optional[int] = None
        if initiator:
            self._hs = Initiator(credential, trust, rng)
        else:
            self._hs = Responder(credential, trust, rng, nonces)
        self._timer = None

    # -- transport callbacks ------------------------------------------------------------

    def on_open(self, transport) -> None:
        self.transport = transport
        if self.state != "opening":
            return
        self.state = "handshake"
        self._timer = self.world.sim.call_later(HANDSHAKE_TIMEOUT_MS, self._handshake_timeout)
        if self.initiator:
            self._send_raw(WireMessage(MsgType.HANDSHAKE, 0, encode_body(self._hs.hello())))

    def on_frame(self, transport, data: bytes) -> None:
        if self.state == "closed":
            return
        if self.state == "handshake":
            self._on_handshake_frame(data)
            return
        try:
            msg = decode_message(data)
        except CodecError as exc:
            self._violation(TamperDetected(f"undecodable frame: {exc}"))
            return
        if msg.msg_type == MsgType.APP_DATA:
            try:
                body = verify_app_message(self.keys.recv, msg, self._recv_seq)
            except AsiaError as exc:
                self._violation(exc)
                return
            self._recv_seq = body.sequence
        else:
            if not crypto.mac_ok(self.keys.recv, msg.signed_part(), msg.auth_tag):
                self._violation(TamperDetected(f"{msg.msg_type.name} tag mismatch"))
                return
            try:
                body = decode_body(msg.msg_type, msg.body)
            except (CodecError, ValueError) as exc:
                self._violation(TamperDetected(f"bad {msg.msg_type.name} body: {exc}"))
                return
        self.world.log.emit("msg.recv", node=self.node, chan=self.id, type=msg.msg_type.name, corr=msg.correlation)
        handler = getattr(self.owner, "on_channel_message", None)
        if handler is not None:
            handler(self, msg, body)

    def on_close(self, transport, reason: str) -> None:
        self._down(reason or "closed")

    # -- handshake ----------------------------------------------------------------------

    def _on_handshake_frame(self, data: bytes) -> None:
        now = self.world.sim.now
        try:
            msg = decode_message(data)
            if msg.msg_type != MsgType.HANDSHAKE or msg.auth_tag is not None:
                raise AuthError(f"expected HANDSHAKE, got {msg.msg_type.name}")
            body = decode_body(MsgType.HANDSHAKE, msg.body)
            if self.initiator:
                reply = self._hs.on_challenge(body, now)
                self._send_raw(WireMessage(MsgType.HANDSHAKE, 0, encode_body(reply)))
                self._established()
            elif body.step == 1:
                reply = self._hs.on_hello(body)
                self._send_raw(WireMessage(MsgType.HANDSHAKE, 0, encode_body(reply)))
            else:
                self._hs.on_finish(body, now)
                self._established()
        except (AuthError, CodecError, ValueError) as exc:
            self._auth_failed(exc if isinstance(exc, AuthError) else AuthError(str(exc)))

    def _established(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
        self.peer = self._hs.result
        self.keys = self._hs.keys
        self.state = "established"
        self.world.log.emit(
            "chan.up", node=self.node, chan=self.id, label=self.label, peer=self.peer.peer.id,
            role=self.peer.peer.role.name, fp=self.peer.peer_fingerprint[:8], method=self.peer.method.value,
        )
        handler = getattr(self.owner, "on_channel_up", None)
        if handler is not None:
            handler(self)

    def _handshake_timeout(self) -> None:
        if self.state == "handshake":
            self._auth_failed(HandshakeTimeout("no handshake completion"))

    def _auth_failed(self, exc: AsiaError) -> None:
        self.world.log.emit("chan.auth_fail", node=self.node, chan=self.id, label=self.label,
                            reason=type(exc).__name__)
        handler = getattr(self.owner, "on_channel_auth_failed", None)
        if handler is not None:
            handler(self, exc)
        self.close(type(exc).__name__)

    def _violation(self, exc: AsiaError) -> None:
        self.world.log.emit("msg.reject", node=self.node, chan=self.id, reason=type(exc).__name__)
        handler = getattr(self.owner, "on_channel_violation", None)
        if handler is not None:
            handler(self, exc)

    # -- sending ------------------------------------------------------------------------

    @property
    def established(self) -> bool:
        return self.state == "established"

    def next_correlation(self) -> int:
        return next(self._corr)

    def _send_raw(self, msg: WireMessage) -> None:
        if self.transport is not None:
            self.transport.send(encode_message(msg))

    def send(self, msg_type: MsgType, record=None, correlation: Optional[int] = None) -> int:
        """Send a tagged control message; returns its correlation id."""
        if not self.established:
            raise AsiaError(f"channel {self.id} is {self.state}")
        corr = self.next_correlation() if correlation is None else correlation
        body = encode_body(record if record is not None else Empty())
        msg = WireMessage(msg_type, corr, body)
        msg = msg.with_tag(crypto.mac(self.keys.send, msg.signed_part()))
        self.world.log.emit("msg.send", node=self.node, chan=self.id, type=msg_type.name, corr=corr)
        self._send_raw(msg)
        return corr

    def send_app(self, payload: bytes, correlation: int = 0) -> int:
        """Send APP_DATA; returns the sequence number used."""
        if not self.established:
            raise AsiaError(f"channel {self.id} is {self.state}")
        self._send_seq += 1
        body = AppDataBody(self._send_seq, payload).to_bytes()
        msg = WireMessage(MsgType.APP_DATA, correlation, body)
        msg = msg.with_tag(crypto.mac(self.keys.send, msg.signed_part()))
        self.world.log.emit("msg.send", node=self.node, chan=self.id, type="APP_DATA", corr=correlation)
        self._send_raw(msg)
        return self._send_seq

    def close(self, reason: str = "closed") -> None:
        if self.state == "closed":
            return
        transport = self.transport
        self._down(reason)
        if transport is not None:
            transport.close()

    def _down(self, reason: str) -> None:
        if self.state == "closed":
            return
        was_up = self.state == "established"
        self.state = "closed"
        self.close_reason = reason
        if self._timer is not None:
            self._timer.cancel()
        self.world.log.emit("chan.down", node=self.node, chan=self.id, label=self.label, reason=reason)
        if not was_up and not self.initiator:
            return
        handler = getattr(self.owner, "on_channel_down", None)
        if handler is not None:
            handler(self, reason)


class Tunnel:
    """Transport for an inner channel carried in PROXY_DATA frames.

    ``send_fn(data)`` pushes one inner frame outward; the owner of the outer
    channel calls ``deliver`` for each inner frame that arrives.
    """

    def __init__(self, send_fn: Callable[[bytes], None], close_fn: Callable[[], None]) -> None:
        self._send = send_fn
        self._close = close_fn
        self.handler = None
        self.closed = False

    def attach(self, handler) -> None:
        self.handler = handler
        handler.on_open(self)

    def send(self, data: bytes) -> None:
        if not self.closed:
            self._send(data)

    def deliver(self, data: bytes) -> None:
        if not self.closed and self.handler is not None:
            self.handler.on_frame(self, data)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._close()

    def lost(self, reason: str) -> None:
        """The carrying channel went away."""
        if self.closed:
            return
        self.closed = True
        if self.handler is not None:
            self.handler.on_close(self, reason)
