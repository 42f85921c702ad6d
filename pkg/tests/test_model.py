import random
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asia.codec import (
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
from asia.model import (
    MAX_FRAME_SIZE,
    Address,
    ApplianceClass,
    ApplianceState,
    Certificate,
    Command,
    CommandResult,
    ConfigChange,
    Identity,
    InstallApp,
    MsgType,
    PriceSignal,
    ResultStatus,
    RoleKind,
    ShutoffAppliance,
    ShutoffGenerator,
    StatusQuery,
    Tan,
    WireMessage,
    decode_message,
    encode_message,
    fingerprint,
)


def test_keepalive_frame_layout():
    frame = encode_message(WireMessage(MsgType.KEEPALIVE, 0))
    # u32 length 13, version 1, type 2, correlation 0, body length 0, tag length 0
    assert frame == bytes.fromhex("0000000d" + "01" + "02" + "00" * 8 + "0000" + "00")
    assert len(frame) - 4 == 13


def test_empty_input_is_truncated():
    with pytest.raises(Truncated):
        decode_message(b"")


def test_msg_type_0xff_is_unknown():
    frame = bytearray(encode_message(WireMessage(MsgType.REGISTER, 7, b"abc", b"t" * 32)))
    frame[5] = 0xFF
    with pytest.raises(UnknownMsgType):
        decode_message(bytes(frame))


def test_unknown_version_rejected():
    frame = bytearray(encode_message(WireMessage(MsgType.KEEPALIVE)))
    frame[4] = 2
    with pytest.raises(UnknownVersion):
        decode_message(bytes(frame))


def test_trailing_and_short_frames():
    frame = encode_message(WireMessage(MsgType.ERROR, 1, b"xy"))
    with pytest.raises(NonCanonical):
        decode_message(frame + b"\x00")
    with pytest.raises(Truncated):
        decode_message(frame[:-1])


def test_oversize_body():
    with pytest.raises(OversizeMessage):
        encode_message(WireMessage(MsgType.APP_DATA, 0, b"\x00" * 70_000))
    with pytest.raises(OversizeMessage):
        decode_message(b"\x00" * (MAX_FRAME_SIZE + 1))


def _random_message(rng: random.Random) -> WireMessage:
    body = rng.randbytes(rng.choice((0, 1, 16, rng.randrange(0, 2000))))
    tag = rng.randbytes(rng.randrange(1, 256)) if rng.random() < 0.7 else None
    return WireMessage(rng.choice(list(MsgType)), rng.getrandbits(64), body, tag)


def test_ten_thousand_seeded_messages_round_trip():
    rng = random.Random(20240501)
    for _ in range(10_000):
        msg = _random_message(rng)
        frame = encode_message(msg)
        back = decode_message(frame)
        assert back == msg
        assert encode_message(back) == frame


@given(
    st.sampled_from(list(MsgType)),
    st.integers(0, 2**64 - 1),
    st.binary(max_size=512),
    st.one_of(st.none(), st.binary(min_size=1, max_size=255)),
)
def test_round_trip_property(mtype, corr, body, tag):
    msg = WireMessage(mtype, corr, body, tag)
    assert decode_message(encode_message(msg)) == msg


@given(st.binary(max_size=64))
def test_decoder_never_crashes_unexpectedly(data):
    try:
        decode_message(data)
    except ValueError:
        pass


def test_presence_byte_must_be_canonical():
    r = Reader(b"\x02")
    with pytest.raises(NonCanonical):
        r.optional(Reader.u8)
    with pytest.raises(NonCanonical):
        Reader(b"\x05").flag()


def test_text_must_be_utf8():
    with pytest.raises(InvalidValue):
        decode_exact(b"\x00\x01\xff", Reader.text)


# -- identities, certificates, fingerprints ----------------------------------------------


def _cert(key: bytes, name: str = "gw-7") -> Certificate:
    return Certificate(Identity(name, RoleKind.IctGateway), key, "ca", b"sig")


def test_fingerprint_deterministic_and_canonical():
    cert = _cert(b"k" * 32)
    assert fingerprint(cert) == fingerprint(cert)
    again = Certificate.from_bytes(cert.to_bytes())
    assert again == cert
    assert fingerprint(again) == fingerprint(cert)
    assert len(fingerprint(cert)) == 32


def test_fingerprint_ignores_signature_only():
    a = _cert(b"k" * 32)
    b = Certificate(a.subject, a.public_key, a.issuer, b"other")
    assert fingerprint(a) == fingerprint(b)


def test_fingerprint_injective_over_generated_certs():
    rng = random.Random(99)
    seen = set()
    n = 100_000
    for _ in range(n):
        seen.add(fingerprint(_cert(rng.randbytes(32))))
    assert len(seen) == n


def test_identity_bounds():
    with pytest.raises(InvalidValue):
        Identity("", RoleKind.EnergyMarket)
    with pytest.raises(InvalidValue):
        Identity("x" * 129, RoleKind.EnergyMarket)
    assert Identity("x" * 128, RoleKind.EnergyMarket).id


def test_tan_invariants():
    with pytest.raises(InvalidValue):
        Tan(b"\x00" * 16)
    with pytest.raises(InvalidValue):
        Tan(b"\x01" * 8)
    t = Tan(bytes(range(1, 17)))
    assert decode_exact(Writer().fixed(t.value, 16).getvalue(), Tan.decode) == t


# -- commands ---------------------------------------------------------------------------

_money = st.decimals(min_value=0, max_value=10**9, places=4, allow_nan=False, allow_infinity=False)
_text = st.text(max_size=40)
_payloads = st.one_of(
    st.builds(ShutoffAppliance, st.sampled_from(list(ApplianceClass)), _money),
    st.just(ShutoffGenerator()),
    st.builds(lambda p, a, b: PriceSignal(p, min(a, b), max(a, b)), _money, st.integers(0, 2**40), st.integers(0, 2**40)),
    st.just(StatusQuery()),
    st.builds(ConfigChange, _text, _text),
    st.builds(InstallApp, _text, _text, _text),
)


@given(_payloads, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
@settings(max_examples=300)
def test_command_round_trip(payload, issued, seq):
    cmd = Command(payload, issued, seq)
    w = Writer()
    cmd.encode(w)
    assert decode_exact(w.getvalue(), Command.decode) == cmd


def test_command_result_round_trip():
    res = CommandResult(
        ResultStatus.Partial, Decimal("3.5"),
        (ApplianceState("washer-1", ApplianceClass.Washer, False, Decimal("2")),
         ApplianceState("solar-1", ApplianceClass.SolarGenerator, True, Decimal("4"), True)),
        "short by 0.5",
    )
    w = Writer()
    res.encode(w)
    assert decode_exact(w.getvalue(), CommandResult.decode) == res
    assert res.ok


def test_only_generators_generate():
    with pytest.raises(InvalidValue):
        ApplianceState("w", ApplianceClass.Washer, True, Decimal(1), True)


def test_negative_fixed_point_rejected():
    with pytest.raises(InvalidValue):
        ShutoffAppliance(ApplianceClass.Washer, Decimal("-1"))


def test_price_interval_order():
    with pytest.raises(InvalidValue):
        PriceSignal(Decimal(1), 10, 5)


def test_address_round_trip():
    a = Address("198.51.100.10", 20001)
    w = Writer()
    a.encode(w)
    assert decode_exact(w.getvalue(), Address.decode) == a
