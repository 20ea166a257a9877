"""MQTT v3.1.1 control packet codec.

Decoding is total: any byte string yields either an :class:`MqttMessage` or a
:class:`MalformationReport` describing the first violation found.  The
malformation kinds are coarse on purpose, since they feed flow statistics:

* ``RESERVED_TYPE``: control packet type 0 or 15.
* ``BAD_FLAGS``: fixed-header flags not allowed for the packet type, PUBLISH
  QoS 3, or a CONNECT flags byte / protocol name that violates v3.1.1.
* ``BAD_REMAINING_LENGTH``: a remaining-length varint longer than four bytes,
  or a length inconsistent with the packet's fixed-size layout.
* ``TRUNCATED_BODY``: the data ends before the declared body does, or a
  length-prefixed field runs past the end of the body.
* ``INVALID_UTF8_TOPIC``: a topic, filter or client id that is not valid
  UTF-8 or contains U+0000.
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field

from .errors import ForensicsError

MAX_REMAINING_LENGTH = 268_435_455
PROTOCOL_NAME = b"MQTT"
PROTOCOL_LEVEL = 4


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class MalformationKind(enum.Enum):
    RESERVED_TYPE = "RESERVED_TYPE"
    BAD_FLAGS = "BAD_FLAGS"
    BAD_REMAINING_LENGTH = "BAD_REMAINING_LENGTH"
    TRUNCATED_BODY = "TRUNCATED_BODY"
    INVALID_UTF8_TOPIC = "INVALID_UTF8_TOPIC"


class EncodingError(ForensicsError):
    pass


_FIXED_FLAGS = {t: 0 for t in PacketType}
_FIXED_FLAGS.update({PacketType.PUBREL: 2, PacketType.SUBSCRIBE: 2,
                     PacketType.UNSUBSCRIBE: 2})
_ID_ONLY = (PacketType.PUBACK, PacketType.PUBREC, PacketType.PUBREL,
            PacketType.PUBCOMP, PacketType.UNSUBACK)
_TOPIC_TYPES = (PacketType.PUBLISH, PacketType.SUBSCRIBE, PacketType.UNSUBSCRIBE)


@dataclass(frozen=True)
class ConnectOptions:
    client_id: str
    keepalive: int = 60
    clean_session: bool = True
    username: str | None = None
    password: bytes | None = None
    will_flag: bool = False
    will_topic: str | None = None
    will_payload: bytes | None = None
    will_qos: int = 0
    will_retain: bool = False


@dataclass(frozen=True)
class MqttMessage:
    """A decoded control packet.

    ``topic`` is the PUBLISH topic, or the first filter of a SUBSCRIBE or
    UNSUBSCRIBE; ``topics`` lists every filter for the latter two.  For
    SUBSCRIBE ``payload`` holds one requested-QoS byte per filter and for
    SUBACK the return codes.  ``remaining_length`` is informational and
    excluded from equality, because :func:`encode` always recomputes it.
    """

    packet_type: PacketType
    flags: int = 0
    remaining_length: int = field(default=0, compare=False)
    topic: str | None = None
    topics: tuple[str, ...] = ()
    payload: bytes = b""
    packet_id: int | None = None
    connect_opts: ConnectOptions | None = None
    return_code: int | None = None
    session_present: bool = False

    @property
    def qos(self) -> int:
        return (self.flags >> 1) & 0x3 if self.packet_type == PacketType.PUBLISH else 0

    @classmethod
    def connect(cls, client_id, **opts) -> "MqttMessage":
        return cls(PacketType.CONNECT, connect_opts=ConnectOptions(client_id, **opts))

    @classmethod
    def connack(cls, return_code=0, session_present=False) -> "MqttMessage":
        return cls(PacketType.CONNACK, return_code=return_code,
                   session_present=session_present)

    @classmethod
    def publish(cls, topic, payload=b"", qos=0, packet_id=None, retain=False,
                dup=False) -> "MqttMessage":
        flags = (int(dup) << 3) | (qos << 1) | int(retain)
        return cls(PacketType.PUBLISH, flags=flags, topic=topic, payload=bytes(payload),
                   packet_id=packet_id if qos else None)

    @classmethod
    def subscribe(cls, packet_id, filters) -> "MqttMessage":
        """``filters`` is a sequence of ``(topic_filter, qos)`` pairs."""
        topics = tuple(f for f, _ in filters)
        return cls(PacketType.SUBSCRIBE, flags=2, topic=topics[0], topics=topics,
                   payload=bytes(q for _, q in filters), packet_id=packet_id)

    @classmethod
    def suback(cls, packet_id, return_codes) -> "MqttMessage":
        return cls(PacketType.SUBACK, packet_id=packet_id, payload=bytes(return_codes))

    @classmethod
    def unsubscribe(cls, packet_id, filters) -> "MqttMessage":
        topics = tuple(filters)
        return cls(PacketType.UNSUBSCRIBE, flags=2, topic=topics[0], topics=topics,
                   packet_id=packet_id)

    @classmethod
    def ack(cls, packet_type, packet_id) -> "MqttMessage":
        return cls(packet_type, flags=_FIXED_FLAGS[packet_type], packet_id=packet_id)

    @classmethod
    def simple(cls, packet_type) -> "MqttMessage":
        return cls(packet_type)


@dataclass(frozen=True)
class MalformationReport:
    kind: MalformationKind
    offset: int
    raw: bytes


# -- encoding ---------------------------------------------------------------

def encode_varint(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise EncodingError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def _utf8_field(s: str) -> bytes:
    if "\x00" in s:
        raise EncodingError("string contains U+0000")
    try:
        raw = s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(str(exc)) from None
    if len(raw) > 0xFFFF:
        raise EncodingError("string longer than 65535 bytes")
    return struct.pack("!H", len(raw)) + raw


def _bin_field(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise EncodingError("binary field longer than 65535 bytes")
    return struct.pack("!H", len(b)) + b


def _packet_id(pid: int | None) -> bytes:
    if pid is None or not 1 <= pid <= 0xFFFF:
        raise EncodingError(f"invalid packet identifier {pid!r}")
    return struct.pack("!H", pid)


def _encode_connect(o: ConnectOptions) -> bytes:
    if o.will_flag != (o.will_topic is not None) or o.will_flag != (o.will_payload is not None):
        raise EncodingError("will_topic/will_payload must be present iff will_flag")
    if o.password is not None and o.username is None:
        raise EncodingError("password requires username")
    if not o.will_flag and (o.will_qos or o.will_retain):
        raise EncodingError("will QoS/retain without will flag")
    if o.will_qos not in (0, 1, 2) or not 0 <= o.keepalive <= 0xFFFF:
        raise EncodingError("invalid will QoS or keepalive")
    cflags = ((o.username is not None) << 7 | (o.password is not None) << 6
              | o.will_retain << 5 | o.will_qos << 3 | o.will_flag << 2
              | o.clean_session << 1)
    body = _utf8_field("MQTT") + bytes([PROTOCOL_LEVEL, cflags]) + struct.pack("!H", o.keepalive)
    body += _utf8_field(o.client_id)
    if o.will_flag:
        body += _utf8_field(o.will_topic) + _bin_field(o.will_payload)
    if o.username is not None:
        body += _utf8_field(o.username)
    if o.password is not None:
        body += _bin_field(o.password)
    return body


def encode(msg: MqttMessage) -> bytes:
    t = PacketType(msg.packet_type)
    flags = msg.flags
    if t == PacketType.PUBLISH:
        if not 0 <= flags <= 15 or (flags >> 1) & 3 == 3:
            raise EncodingError(f"invalid PUBLISH flags {flags:#x}")
    elif flags != _FIXED_FLAGS[t]:
        raise EncodingError(f"flags {flags:#x} not allowed for {t.name}")
    if (msg.topic is not None) != (t in _TOPIC_TYPES):
        raise EncodingError(f"topic presence does not match {t.name}")

    if t == PacketType.CONNECT:
        if msg.connect_opts is None:
            raise EncodingError("CONNECT requires connect_opts")
        body = _encode_connect(msg.connect_opts)
    elif t == PacketType.CONNACK:
        rc = msg.return_code or 0
        body = bytes([int(msg.session_present), rc])
    elif t == PacketType.PUBLISH:
        body = _utf8_field(msg.topic)
        if msg.qos:
            body += _packet_id(msg.packet_id)
        elif msg.packet_id is not None:
            raise EncodingError("QoS 0 PUBLISH carries no packet identifier")
        body += msg.payload
    elif t == PacketType.SUBSCRIBE:
        if not msg.topics or len(msg.payload) != len(msg.topics) or msg.topic != msg.topics[0]:
            raise EncodingError("SUBSCRIBE needs one QoS byte per filter")
        body = _packet_id(msg.packet_id)
        for topic, q in zip(msg.topics, msg.payload):
            if q > 2:
                raise EncodingError("requested QoS above 2")
            body += _utf8_field(topic) + bytes([q])
    elif t == PacketType.SUBACK:
        body = _packet_id(msg.packet_id) + msg.payload
    elif t == PacketType.UNSUBSCRIBE:
        if not msg.topics or msg.topic != msg.topics[0]:
            raise EncodingError("UNSUBSCRIBE needs at least one filter")
        body = _packet_id(msg.packet_id) + b"".join(_utf8_field(s) for s in msg.topics)
    elif t in _ID_ONLY:
        body = _packet_id(msg.packet_id)
    else:
        body = b""
    return bytes([(t << 4) | flags]) + encode_varint(len(body)) + body


# -- decoding ---------------------------------------------------------------

class _Malformed(Exception):
    def __init__(self, kind: MalformationKind, offset: int):
        self.kind = kind
        self.offset = offset


class _Body:
    """Cursor over a packet body; offsets are absolute within the buffer."""

    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise _Malformed(MalformationKind.TRUNCATED_BODY, self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def binary(self) -> bytes:
        return self.take(self.u16())

    def text(self) -> str:
        at = self.pos
        raw = self.binary()
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise _Malformed(MalformationKind.INVALID_UTF8_TOPIC, at) from None
        if "\x00" in s:
            raise _Malformed(MalformationKind.INVALID_UTF8_TOPIC, at)
        return s

    def rest(self) -> bytes:
        return self.take(self.end - self.pos)

    def done(self) -> None:
        if self.pos != self.end:
            raise _Malformed(MalformationKind.BAD_REMAINING_LENGTH, self.pos)


def _decode_connect(b: _Body) -> ConnectOptions:
    at = b.pos
    name = b.binary()
    level = b.u8()
    if name != PROTOCOL_NAME or level != PROTOCOL_LEVEL:
        raise _Malformed(MalformationKind.BAD_FLAGS, at)
    flag_at = b.pos
    cflags = b.u8()
    keepalive = b.u16()
    will_flag = bool(cflags & 0x04)
    will_qos = (cflags >> 3) & 3
    will_retain = bool(cflags & 0x20)
    has_user, has_pass = bool(cflags & 0x80), bool(cflags & 0x40)
    if (cflags & 0x01 or will_qos == 3 or (has_pass and not has_user)
            or (not will_flag and (will_qos or will_retain))):
        raise _Malformed(MalformationKind.BAD_FLAGS, flag_at)
    client_id = b.text()
    will_topic = b.text() if will_flag else None
    will_payload = b.binary() if will_flag else None
    username = b.text() if has_user else None
    password = b.binary() if has_pass else None
    b.done()
    return ConnectOptions(client_id, keepalive, bool(cflags & 0x02), username, password,
                          will_flag, will_topic, will_payload, will_qos, will_retain)


def _decode_body(t: PacketType, flags: int, b: _Body, rl: int) -> MqttMessage:
    if t == PacketType.CONNECT:
        return MqttMessage(t, flags, rl, connect_opts=_decode_connect(b))
    if t == PacketType.CONNACK:
        if rl != 2:
            raise _Malformed(MalformationKind.BAD_REMAINING_LENGTH, b.pos)
        ack_flags, rc = b.u8(), b.u8()
        if ack_flags & 0xFE:
            raise _Malformed(MalformationKind.BAD_FLAGS, b.pos - 2)
        return MqttMessage(t, flags, rl, return_code=rc, session_present=bool(ack_flags))
    if t == PacketType.PUBLISH:
        topic = b.text()
        pid = b.u16() if (flags >> 1) & 3 else None
        return MqttMessage(t, flags, rl, topic=topic, payload=b.rest(), packet_id=pid)
    if t in (PacketType.SUBSCRIBE, PacketType.UNSUBSCRIBE):
        pid = b.u16()
        topics, qos = [], bytearray()
        while b.pos < b.end:
            topics.append(b.text())
            if t == PacketType.SUBSCRIBE:
                q_at = b.pos
                q = b.u8()
                if q > 2:
                    raise _Malformed(MalformationKind.BAD_FLAGS, q_at)
                qos.append(q)
        if not topics:
            raise _Malformed(MalformationKind.TRUNCATED_BODY, b.pos)
        return MqttMessage(t, flags, rl, topic=topics[0], topics=tuple(topics),
                           payload=bytes(qos), packet_id=pid)
    if t == PacketType.SUBACK:
        pid = b.u16()
        return MqttMessage(t, flags, rl, packet_id=pid, payload=b.rest())
    if t in _ID_ONLY:
        if rl != 2:
            raise _Malformed(MalformationKind.BAD_REMAINING_LENGTH, b.pos)
        return MqttMessage(t, flags, rl, packet_id=b.u16())
    if rl != 0:
        raise _Malformed(MalformationKind.BAD_REMAINING_LENGTH, b.pos)
    return MqttMessage(t, flags, rl)


def _decode_one(buf: bytes, start: int) -> tuple[MqttMessage, int]:
    first = buf[start]
    type_num, flags = first >> 4, first & 0x0F
    if type_num in (0, 15):
        raise _Malformed(MalformationKind.RESERVED_TYPE, start)
    t = PacketType(type_num)
    if t == PacketType.PUBLISH:
        if (flags >> 1) & 3 == 3:
            raise _Malformed(MalformationKind.BAD_FLAGS, start)
    elif flags != _FIXED_FLAGS[t]:
        raise _Malformed(MalformationKind.BAD_FLAGS, start)
    rl, mult, pos = 0, 1, start + 1
    for i in range(4):
        if pos >= len(buf):
            raise _Malformed(MalformationKind.TRUNCATED_BODY, pos)
        digit = buf[pos]
        pos += 1
        rl += (digit & 0x7F) * mult
        mult *= 128
        if not digit & 0x80:
            break
    else:
        raise _Malformed(MalformationKind.BAD_REMAINING_LENGTH, start + 1)
    end = pos + rl
    if end > len(buf):
        raise _Malformed(MalformationKind.TRUNCATED_BODY, len(buf))
    body = _Body(buf, pos, end)
    msg = _decode_body(t, flags, body, rl)
    body.done()
    return msg, end


def _report(exc: _Malformed, buf: bytes, start: int) -> MalformationReport:
    raw = bytes(buf[start:])
    return MalformationReport(exc.kind, max(0, min(exc.offset - start, len(raw) - 1)), raw)


def decode(data: bytes) -> MqttMessage | MalformationReport:
    """Decode exactly one control packet occupying all of ``data``."""
    if not data:
        raise ValueError("decode requires at least one byte")
    data = bytes(data)
    try:
        msg, end = _decode_one(data, 0)
    except _Malformed as exc:
        return _report(exc, data, 0)
    if end != len(data):
        return MalformationReport(MalformationKind.BAD_REMAINING_LENGTH, end, data)
    return msg


def decode_stream(data: bytes) -> list[MqttMessage | MalformationReport]:
    """Split a TCP payload into consecutive control packets.

    Decoding stops at the first malformation, which is reported as the last
    element, because framing cannot be recovered past it.
    """
    data = bytes(data)
    out: list[MqttMessage | MalformationReport] = []
    pos = 0
    while pos < len(data):
        try:
            msg, pos = _decode_one(data, pos)
        except _Malformed as exc:
            out.append(_report(exc, data, pos))
            break
        out.append(msg)
    return out


# -- deliberate malformation ------------------------------------------------

def forge_malformed(kind: MalformationKind, seed: int) -> bytes:
    """Build bytes that decode to a report of ``kind``; deterministic per seed."""
    kind = MalformationKind(kind)
    rng = random.Random(seed)
    if kind == MalformationKind.RESERVED_TYPE:
        body = rng.randbytes(rng.randint(0, 24))
        return bytes([rng.choice((0, 15)) << 4 | rng.randrange(16)]) + encode_varint(len(body)) + body
    if kind == MalformationKind.BAD_FLAGS:
        choice = rng.randrange(4)
        if choice == 0:  # PUBLISH QoS 3
            good = encode(MqttMessage.publish("ward/" + str(rng.randrange(100)), rng.randbytes(4)))
            return bytes([0x36 | rng.choice((0, 1, 8, 9))]) + good[1:]
        t = (PacketType.SUBSCRIBE, PacketType.PINGREQ, PacketType.CONNECT)[choice - 1]
        if t == PacketType.SUBSCRIBE:
            good = encode(MqttMessage.subscribe(rng.randint(1, 0xFFFF), [("#", 0)]))
        elif t == PacketType.PINGREQ:
            good = encode(MqttMessage.simple(PacketType.PINGREQ))
        else:
            good = encode(MqttMessage.connect(f"c{rng.randrange(1000)}"))
        bad = rng.choice([f for f in range(16) if f != _FIXED_FLAGS[t]])
        return bytes([t << 4 | bad]) + good[1:]
    if kind == MalformationKind.BAD_REMAINING_LENGTH:
        t = rng.choice((PacketType.PUBLISH, PacketType.CONNECT, PacketType.PINGREQ))
        cont = bytes(0x80 | rng.randrange(128) for _ in range(5))
        return bytes([t << 4]) + cont + rng.randbytes(rng.randint(0, 16))
    if kind == MalformationKind.TRUNCATED_BODY:
        topic = "ward/" + "".join(rng.choice("abcdefgh") for _ in range(rng.randint(1, 12)))
        good = encode(MqttMessage.publish(topic, rng.randbytes(rng.randint(1, 64))))
        return good[:rng.randint(2, len(good) - 1)]
    if kind == MalformationKind.INVALID_UTF8_TOPIC:
        bad = rng.choice((b"\xff", b"\xc3\x28", b"\xed\xa0\x80", b"\x00", b"\xe2\x82"))
        topic = b"ward/" + bad + bytes(rng.choice(b"abcxyz") for _ in range(rng.randint(0, 6)))
        body = struct.pack("!H", len(topic)) + topic + rng.randbytes(rng.randint(0, 32))
        return bytes([0x30]) + encode_varint(len(body)) + body
    raise ValueError(kind)


def is_malformed(result) -> bool:
    return isinstance(result, MalformationReport)


__all__ = [
    "ConnectOptions", "EncodingError", "MalformationKind", "MalformationReport",
    "MqttMessage", "PacketType", "decode", "decode_stream", "encode",
    "encode_varint", "forge_malformed", "is_malformed",
]
