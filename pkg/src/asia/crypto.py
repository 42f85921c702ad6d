"""Pluggable signature schemes, a simulated certificate authority, trust stores.

Key material is drawn from a caller-supplied ``random.Random`` so that whole
scenarios replay bit-for-bit from a seed. That is a simulation property, not
a recommendation for real deployments.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Optional, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import BadSignature, UnknownIssuer
from .model import CertCredential, Certificate, Identity, PskCredential


class SignatureScheme(Protocol):
    name: str

    def keypair(self, rng: random.Random) -> tuple[bytes, bytes]:
        """Return ``(private_key, public_key)``."""

    def sign(self, private_key: bytes, data: bytes) -> bytes: ...

    def verify(self, public_key: bytes, data: bytes, tag: bytes) -> bool: ...


class MacScheme:
    """Keyed 256-bit MAC standing in for signatures.

    The scheme instance doubles as the CA's key escrow: it remembers which
    secret belongs to which public handle, so ``verify`` can recompute tags.
    One instance per scenario.
    """

    name = "hmac-sha256"

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def keypair(self, rng: random.Random) -> tuple[bytes, bytes]:
        secret = rng.randbytes(32)
        public = hashlib.sha256(b"mac-handle\x00" + secret).digest()
        self._secrets[public] = secret
        return secret, public

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        return hmac.new(private_key, data, hashlib.sha256).digest()

    def verify(self, public_key: bytes, data: bytes, tag: bytes) -> bool:
        secret = self._secrets.get(public_key)
        if secret is None:
            return False
        return hmac.compare_digest(self.sign(secret, data), tag)


class Ed25519Scheme:
    name = "ed25519"

    def keypair(self, rng: random.Random) -> tuple[bytes, bytes]:
        sk = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return sk.private_bytes_raw(), pk

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(data)

    def verify(self, public_key: bytes, data: bytes, tag: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(tag, data)
        except (InvalidSignature, ValueError):
            return False
        return True


def make_scheme(name: str) -> SignatureScheme:
    if name == MacScheme.name:
        return MacScheme()
    if name == Ed25519Scheme.name:
        return Ed25519Scheme()
    raise ValueError(f"unknown signature scheme {name!r}")


@dataclass
class CertificateAuthority:
    name: str
    scheme: SignatureScheme
    private_key: bytes = field(repr=False)
    public_key: bytes

    @classmethod
    def create(cls, name: str, scheme: SignatureScheme, rng: random.Random) -> "CertificateAuthority":
        sk, pk = scheme.keypair(rng)
        return cls(name, scheme, sk, pk)

    def issue(self, subject: Identity, rng: random.Random) -> CertCredential:
        sk, pk = self.scheme.keypair(rng)
        unsigned = Certificate(subject, pk, self.name)
        cert = Certificate(subject, pk, self.name, self.scheme.sign(self.private_key, unsigned.tbs()))
        return CertCredential(cert, sk)


class TrustStore:
    """Trusted CA keys plus the pre-shared-key table, read-mostly."""

    def __init__(self, scheme: SignatureScheme) -> None:
        self.scheme = scheme
        self._anchors: dict[str, bytes] = {}
        self._psk: dict[str, PskCredential] = {}

    def add_anchor(self, ca: CertificateAuthority) -> None:
        self._anchors[ca.name] = ca.public_key

    def add_psk(self, cred: PskCredential) -> None:
        self._psk[cred.key_id] = cred

    def psk(self, key_id: str) -> Optional[PskCredential]:
        return self._psk.get(key_id)

    def check_certificate(self, cert: Certificate) -> None:
        anchor = self._anchors.get(cert.issuer)
        if anchor is None:
            raise UnknownIssuer(cert.issuer)
        if not self.scheme.verify(anchor, cert.tbs(), cert.signature):
            raise BadSignature(f"certificate for {cert.subject}")

    def copy(self) -> "TrustStore":
        other = TrustStore(self.scheme)
        other._anchors = dict(self._anchors)
        other._psk = dict(self._psk)
        return other


# -- ephemeral key agreement and MACs for channels ----------------------------------


def dh_keypair(rng: random.Random) -> tuple[X25519PrivateKey, bytes]:
    sk = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    return sk, sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def dh_shared(sk: X25519PrivateKey, peer_public: bytes) -> bytes:
    return sk.exchange(X25519PublicKey.from_public_bytes(peer_public))


def kdf(key: bytes, label: bytes) -> bytes:
    return hmac.new(key, label, hashlib.sha256).digest()


def mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_ok(key: bytes, data: bytes, tag: Optional[bytes]) -> bool:
    return tag is not None and hmac.compare_digest(mac(key, data), tag)
