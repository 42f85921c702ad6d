import dataclasses
import random

import pytest

from asia.auth import (
    AclEntry,
    AclParseError,
    AclTable,
    DenyReason,
    Initiator,
    Method,
    NonceCache,
    Responder,
    SoftwareToken,
    authorize,
    generate_tan,
    issue_token,
    mutual_authenticate,
    parse_acl,
    sign_app_message,
    verify_app_message,
    verify_token,
)
from asia.codec import CodecError
from asia.crypto import CertificateAuthority
from asia.errors import (
    BadSignature,
    NonceReplay,
    ReplayRejected,
    TamperDetected,
    TokenBadSignature,
    TokenError,
    TokenExpired,
    UnknownIssuer,
    UntrustedIssuer,
    WrongGateway,
)
from asia.model import (
    Identity,
    Mode,
    Permission,
    PskCredential,
    RoleKind,
    Tan,
    WireMessage,
    decode_message,
    encode_message,
)

DNO = RoleKind.DistributionNetworkOperator


# -- handshake ----------------------------------------------------------------------------


def test_mutual_authentication_happy_path(pki):
    a = pki.cred("dno-1", DNO)
    b = pki.cred("broker", RoleKind.GatewayOperator)
    ra, rb, ka, kb = mutual_authenticate(a, b, pki.trust, pki.trust, pki.rng, now=5)
    assert ra.peer == b.identity and ra.peer_fingerprint == b.fingerprint
    assert rb.peer == a.identity and rb.peer_fingerprint == a.fingerprint
    assert ra.method is Method.Cert and ra.established_at == 5
    assert ka.send == kb.recv and ka.recv == kb.send and ka.send != ka.recv


def test_unknown_issuer_gives_no_keys(pki):
    rogue_ca = CertificateAuthority.create("rogue-ca", pki.scheme, pki.rng)
    rogue = rogue_ca.issue(Identity("broker", RoleKind.GatewayOperator), pki.rng)
    i = Initiator(pki.cred("dno-1", DNO), pki.trust, pki.rng)
    r_trust = pki.trust.copy()
    r_trust.add_anchor(rogue_ca)
    r = Responder(rogue, r_trust, pki.rng)
    challenge = r.on_hello(i.hello())
    with pytest.raises(UnknownIssuer):
        i.on_challenge(challenge, 0)
    assert i.keys is None and i.result is None


def test_forged_certificate_rejected(pki):
    good = pki.cred("gw-1", RoleKind.IctGateway)
    forged_cert = dataclasses.replace(good.certificate, subject=Identity("gw-2", RoleKind.IctGateway))
    with pytest.raises(BadSignature):
        pki.trust.check_certificate(forged_cert)


def _record(pki, initiator, responder_cred):
    i = Initiator(initiator, pki.trust, pki.rng)
    hello = i.hello()
    r = Responder(responder_cred, pki.trust, pki.rng)
    finish = i.on_challenge(r.on_hello(hello), 0)
    r.on_finish(finish, 0)
    return hello, finish


def test_replayed_transcript_rejected(pki):
    dno = pki.cred("dno-1", DNO)
    broker = pki.cred("broker", RoleKind.GatewayOperator)
    hello, finish = _record(pki, dno, broker)

    # a fresh responder without memory of the nonce: its own nonce differs
    fresh = Responder(broker, pki.trust, random.Random(1234))
    fresh.on_hello(hello)
    with pytest.raises(BadSignature):
        fresh.on_finish(finish, 1)
    assert fresh.keys is None

    # a responder that already answered the nonce refuses the hello outright
    cache = NonceCache()
    first = Responder(broker, pki.trust, random.Random(1), cache)
    first.on_hello(hello)
    with pytest.raises(NonceReplay):
        Responder(broker, pki.trust, random.Random(2), cache).on_hello(hello)


def test_psk_handshake(pki):
    dev = Identity("gw-9", RoleKind.IctGateway)
    psk = PskCredential("gw-9-key", dev, bytes(range(32)))
    trust = pki.trust.copy()
    trust.add_psk(psk)
    broker = pki.cred("broker", RoleKind.GatewayOperator)
    rg, rb, kg, kb = mutual_authenticate(psk, broker, trust, trust, pki.rng)
    assert rb.peer == dev and rb.method is Method.PresharedKey
    assert rb.peer_fingerprint == psk.fingerprint
    assert kg.send == kb.recv

    wrong = PskCredential("gw-9-key", dev, bytes(32))
    with pytest.raises(BadSignature):
        mutual_authenticate(wrong, broker, trust, trust, pki.rng)


def test_unknown_psk(pki):
    psk = PskCredential("nobody", Identity("gw-9", RoleKind.IctGateway), bytes(32))
    with pytest.raises(UnknownIssuer):
        mutual_authenticate(psk, pki.cred("broker", RoleKind.GatewayOperator), pki.trust, pki.trust, pki.rng)


# -- ACL ----------------------------------------------------------------------------------


def test_empty_table_denies():
    d = authorize(AclTable(), Identity("dno-1", DNO), "gw-7", Permission.IssueCommand, 0)
    assert not d and d.reason is DenyReason.NoMatch


def test_role_wildcard_entry():
    table = AclTable([AclEntry(DNO, "*", {Permission.IssueCommand})])
    dno = Identity("dno-1", DNO)
    assert authorize(table, dno, "gw-7", Permission.IssueCommand, 0)
    d = authorize(table, dno, "gw-7", Permission.ChangeConfiguration, 0)
    assert not d and d.reason is DenyReason.WrongPermission
    other = Identity("mkt-1", RoleKind.EnergyMarket)
    assert authorize(table, other, "gw-7", Permission.IssueCommand, 0).reason is DenyReason.NoMatch


def test_expiry_is_exclusive():
    table = AclTable([AclEntry(DNO, "*", {Permission.IssueCommand}, expiry=100)])
    dno = Identity("dno-1", DNO)
    assert authorize(table, dno, "gw-7", Permission.IssueCommand, 99)
    d = authorize(table, dno, "gw-7", Permission.IssueCommand, 100)
    assert d.reason is DenyReason.Expired
    assert authorize(table, dno, "gw-7", Permission.IssueCommand, 101).reason is DenyReason.Expired


def test_first_match_wins_and_later_entries_still_allow():
    dno = Identity("dno-1", DNO)
    table = AclTable([
        AclEntry(dno, "gw-7", {Permission.GetStatus}),
        AclEntry(DNO, "*", {Permission.IssueCommand}),
    ])
    d = authorize(table, dno, "gw-7", Permission.IssueCommand, 0)
    assert d and d.entry == 1
    assert authorize(table, dno, "gw-7", Permission.GetStatus, 0).entry == 0


def test_parse_acl_lines():
    table = parse_acl(
        "# contracts\n"
        "role:DistributionNetworkOperator * IssueCommand\n"
        "ep-1@EnergyProvider gw-2 * 5000\n"
    )
    assert len(table) == 2
    assert table.entries[1].permissions == frozenset(Permission)
    assert table.entries[1].expiry == 5000
    assert parse_acl("\n".join(e.to_line() for e in table)).entries == table.entries


@pytest.mark.parametrize("line", ["dno gw-1 IssueCommand", "role:Nobody * IssueCommand",
                                  "dno-1@DistributionNetworkOperator gw-1 Fly", "a b"])
def test_parse_acl_errors_carry_line(line):
    with pytest.raises(AclParseError) as info:
        parse_acl("\n" + line, "t.acl")
    assert info.value.lineno == 2


# -- TANs ---------------------------------------------------------------------------------


def test_tan_sequence_is_seeded():
    assert generate_tan(random.Random(5)) == generate_tan(random.Random(5))
    r1, r2 = random.Random("s"), random.Random("s")
    assert [generate_tan(r1) for _ in range(50)] == [generate_tan(r2) for _ in range(50)]


def test_million_tans_distinct():
    rng = random.Random(2024)
    n = 1_000_000
    assert len({generate_tan(rng).value for _ in range(n)}) == n


def test_zero_draw_is_redrawn():
    class Stub(random.Random):
        def __init__(self):
            super().__init__(0)
            self.calls = 0

        def getrandbits(self, k):
            self.calls += 1
            return 0 if self.calls == 1 else 1

    stub = Stub()
    tan = generate_tan(stub)
    assert stub.calls == 2 and tan.value == b"\x00" * 15 + b"\x01"


# -- software tokens ----------------------------------------------------------------------


@pytest.fixture
def token_setup(pki):
    dno = pki.cred("dno-1", DNO)
    gw = pki.cred("gw-7", RoleKind.IctGateway)
    tan = generate_tan(pki.rng)
    tok = issue_token(pki.issuer, pki.auth_result(dno), gw.identity, gw.fingerprint,
                      Mode.Invocation, {Permission.IssueCommand}, tan, 1000, 60_000)
    return pki, tok


def test_token_round_trip_and_fresh(token_setup):
    pki, tok = token_setup
    again = SoftwareToken.from_bytes(tok.to_bytes())
    assert again == tok
    assert verify_token(again, pki.issuers, pki.scheme, "gw-7", 1000) == tok
    assert verify_token(again, pki.issuers, pki.scheme, "gw-7", 1001) == tok


def test_token_expiry_exclusive(token_setup):
    pki, tok = token_setup
    verify_token(tok, pki.issuers, pki.scheme, "gw-7", 60_999)
    with pytest.raises(TokenExpired):
        verify_token(tok, pki.issuers, pki.scheme, "gw-7", 61_000)


def test_token_wrong_gateway_and_untrusted_issuer(token_setup):
    pki, tok = token_setup
    with pytest.raises(WrongGateway):
        verify_token(tok, pki.issuers, pki.scheme, "gw-9", 1001)
    with pytest.raises(UntrustedIssuer):
        verify_token(tok, {}, pki.scheme, "gw-7", 1001)


def _other_value(name, value):
    if name in ("requestor", "gateway_id"):
        return Identity(value.id + "x", value.role)
    if name.endswith("fingerprint"):
        return bytes([value[0] ^ 1]) + value[1:]
    if name == "tan":
        return Tan(bytes([value.value[0] ^ 1]) + value.value[1:])
    if name == "mode":
        return Mode.Proxy
    if name == "permissions":
        return frozenset(Permission)
    if name in ("issued_at", "expires_at"):
        return value - 1
    raise AssertionError(name)


def test_every_field_mutation_fails(token_setup):
    pki, tok = token_setup
    names = [f.name for f in dataclasses.fields(SoftwareToken) if f.name not in ("issuer", "signature")]
    assert len(names) == 9
    for name in names:
        mutated = dataclasses.replace(tok, **{name: _other_value(name, getattr(tok, name))})
        with pytest.raises(TokenBadSignature):
            verify_token(mutated, pki.issuers, pki.scheme, mutated.gateway_id.id, 1001)
    # the issuer field names a signing key; changing it loses the key
    stranger = dataclasses.replace(tok, issuer=Identity("broker-2", RoleKind.GatewayOperator))
    with pytest.raises(UntrustedIssuer):
        verify_token(stranger, pki.issuers, pki.scheme, "gw-7", 1001)
    with pytest.raises(TokenBadSignature):
        verify_token(dataclasses.replace(tok, signature=bytes(64)), pki.issuers, pki.scheme, "gw-7", 1001)


def test_every_bit_flip_fails(token_setup):
    pki, tok = token_setup
    raw = tok.to_bytes()
    for i in range(len(raw)):
        for bit in range(8):
            data = bytearray(raw)
            data[i] ^= 1 << bit
            with pytest.raises((CodecError, TokenError, ValueError)):
                t = SoftwareToken.from_bytes(bytes(data))
                verify_token(t, pki.issuers, pki.scheme, t.gateway_id.id, 1001)


def test_tan_flip_is_bad_signature(token_setup):
    pki, tok = token_setup
    flipped = dataclasses.replace(tok, tan=Tan(tok.tan.value[:-1] + bytes([tok.tan.value[-1] ^ 0x80])))
    with pytest.raises(TokenBadSignature):
        verify_token(flipped, pki.issuers, pki.scheme, "gw-7", 1001)
    assert isinstance(TokenBadSignature(""), BadSignature)


def test_nonpositive_ttl(pki):
    dno = pki.cred("dno-1", DNO)
    with pytest.raises(ValueError):
        issue_token(pki.issuer, pki.auth_result(dno), Identity("gw", RoleKind.IctGateway), bytes(32),
                    Mode.Proxy, {Permission.GetStatus}, generate_tan(pki.rng), 0, 0)


# -- application data ---------------------------------------------------------------------

KEY = bytes(range(32))


def test_app_message_sign_verify():
    msg = sign_app_message(KEY, b"shutoff", 1, correlation=4)
    body = verify_app_message(KEY, decode_message(encode_message(msg)), None)
    assert body.payload == b"shutoff" and body.sequence == 1


def test_app_message_every_payload_bit_detected():
    frame = encode_message(sign_app_message(KEY, b"shutoff Washer 3", 1))
    # header is 4 + 1 + 1 + 8 + 2 bytes; the body starts with the u64 sequence
    start = 16
    for i in range(start, start + 8 + 2 + 16):
        tampered = bytearray(frame)
        tampered[i] ^= 0x01
        with pytest.raises(TamperDetected):
            verify_app_message(KEY, decode_message(bytes(tampered)), None)


def test_app_message_wrong_key_and_untagged():
    msg = sign_app_message(KEY, b"x", 1)
    with pytest.raises(TamperDetected):
        verify_app_message(bytes(32), msg, None)
    with pytest.raises(TamperDetected):
        verify_app_message(KEY, WireMessage(msg.msg_type, 0, msg.body), None)


def test_sequence_replay():
    assert verify_app_message(KEY, sign_app_message(KEY, b"a", 6), 5).sequence == 6
    with pytest.raises(ReplayRejected):
        verify_app_message(KEY, sign_app_message(KEY, b"a", 5), 6)
    with pytest.raises(ReplayRejected):
        verify_app_message(KEY, sign_app_message(KEY, b"a", 6), 6)
