"""Exception hierarchy. Each protocol error maps to one wire ``ErrorCode``."""

from __future__ import annotations

from .model import ErrorCode


class AsiaError(Exception):
    code: ErrorCode = ErrorCode.Protocol

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail or self.code.name)
        self.detail = detail


class AuthError(AsiaError):
    code = ErrorCode.AuthFailed


class UnknownIssuer(AuthError):
    pass


class BadSignature(AuthError):
    pass


class NonceReplay(AuthError):
    pass


class HandshakeTimeout(AuthError):
    code = ErrorCode.Timeout


class TokenError(AsiaError):
    code = ErrorCode.BadToken


class TokenExpired(TokenError):
    pass


class WrongGateway(TokenError):
    pass


class UntrustedIssuer(TokenError):
    pass


class TokenBadSignature(TokenError, BadSignature):
    code = ErrorCode.BadToken


class TamperDetected(AsiaError):
    code = ErrorCode.TamperDetected


class ReplayRejected(AsiaError):
    code = ErrorCode.ReplayRejected


class NotAuthorized(AsiaError):
    code = ErrorCode.NotAuthorized


class GatewayUnreachable(AsiaError):
    code = ErrorCode.GatewayUnreachable


class TanCollision(AsiaError):
    code = ErrorCode.TanCollision


class NotFound(AsiaError):
    code = ErrorCode.NotFound


class UnknownGateway(AsiaError):
    code = ErrorCode.UnknownGateway


class GatewayRefused(AsiaError):
    code = ErrorCode.GatewayRefused


class BadToken(AsiaError):
    code = ErrorCode.BadToken


class DialFailed(AsiaError):
    code = ErrorCode.DialFailed


class TanMismatch(AsiaError):
    code = ErrorCode.TanMismatch


class FingerprintMismatch(AsiaError):
    code = ErrorCode.FingerprintMismatch


class NotAuthorizedLocally(AsiaError):
    code = ErrorCode.NotAuthorizedLocally


class IntegrityFailure(AsiaError):
    code = ErrorCode.IntegrityFailure


class ConnectTimeout(AsiaError):
    code = ErrorCode.ConnectTimeout


class Timeout(AsiaError):
    code = ErrorCode.Timeout


class AuthFailed(AsiaError):
    code = ErrorCode.AuthFailed


_BY_CODE = {
    cls.code: cls
    for cls in (
        AuthFailed,
        NotAuthorized,
        GatewayUnreachable,
        TanCollision,
        NotFound,
        GatewayRefused,
        BadToken,
        DialFailed,
        TanMismatch,
        FingerprintMismatch,
        TamperDetected,
        ReplayRejected,
        NotAuthorizedLocally,
        IntegrityFailure,
        ConnectTimeout,
        Timeout,
        UnknownGateway,
    )
}


def error_for(code: ErrorCode, detail: str = "") -> AsiaError:
    """Rebuild the local exception for an ERROR received off the wire."""
    cls = _BY_CODE.get(code, AsiaError)
    err = cls(detail)
    if cls is AsiaError:
        err.code = code
    return err
