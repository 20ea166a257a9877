"""Classic PCAP reading/writing and Ethernet/IPv4/TCP/UDP header parsing."""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .errors import ForensicsError

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD

# Locally administered, constant across synthesized captures.
SRC_MAC = bytes.fromhex("020000000001")
DST_MAC = bytes.fromhex("020000000002")


class PcapFormatError(ForensicsError):
    """The file is not a classic Ethernet PCAP capture."""


class PcapCorruptError(ForensicsError):
    """The PCAP global header is truncated."""


class Proto(enum.IntEnum):
    OTHER = 0
    TCP = 6
    UDP = 17


class TcpFlag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One captured or synthesized IPv4 packet.

    ``ts_us`` is the capture time in integer microseconds since the epoch so
    that timestamps survive a PCAP round trip exactly.  ``ip_len`` is the
    total IP datagram length.  Ports are ``None`` unless ``proto`` is TCP or
    UDP and ``tcp_flags`` is ``None`` unless ``proto`` is TCP.
    """

    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int | None
    dst_port: int | None
    proto: Proto
    tcp_flags: int | None
    ip_len: int
    payload: bytes = b""

    @property
    def ts(self) -> float:
        return self.ts_us / 1e6

    @property
    def header_len(self) -> int:
        if self.proto == Proto.TCP:
            return 40
        if self.proto == Proto.UDP:
            return 28
        return 20

    def has_flag(self, flag: TcpFlag) -> bool:
        return self.tcp_flags is not None and bool(self.tcp_flags & flag)


def tcp_packet(ts_us, src_ip, dst_ip, src_port, dst_port, flags, payload=b""):
    return PacketRecord(ts_us, src_ip, dst_ip, src_port, dst_port, Proto.TCP,
                        int(flags), 40 + len(payload), bytes(payload))


def udp_packet(ts_us, src_ip, dst_ip, src_port, dst_port, payload=b""):
    return PacketRecord(ts_us, src_ip, dst_ip, src_port, dst_port, Proto.UDP,
                        None, 28 + len(payload), bytes(payload))


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(pkt: PacketRecord) -> bytes:
    """Serialize a packet as an Ethernet II frame carrying IPv4."""
    if pkt.proto not in (Proto.TCP, Proto.UDP):
        raise ValueError(f"cannot serialize protocol {pkt.proto!r}")
    src = ipaddress.IPv4Address(pkt.src_ip).packed
    dst = ipaddress.IPv4Address(pkt.dst_ip).packed
    if pkt.proto == Proto.TCP:
        transport = struct.pack("!HHIIBBHHH", pkt.src_port, pkt.dst_port, 0, 0,
                                5 << 4, pkt.tcp_flags & 0xFF, 65535, 0, 0)
    else:
        transport = struct.pack("!HHHH", pkt.src_port, pkt.dst_port,
                                8 + len(pkt.payload), 0)
    body = transport + pkt.payload
    pad = pkt.ip_len - 20 - len(body)
    if pad < 0:
        raise ValueError("ip_len smaller than headers plus payload")
    pseudo = src + dst + struct.pack("!BBH", 0, int(pkt.proto), len(body))
    csum = _checksum(pseudo + body)
    off = 16 if pkt.proto == Proto.TCP else 6
    body = body[:off] + struct.pack("!H", csum) + body[off + 2:]
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, pkt.ip_len, 0, 0x4000, 64,
                     int(pkt.proto), 0, src, dst)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = DST_MAC + SRC_MAC + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + body + b"\x00" * pad


def parse_frame(ts_us: int, frame: bytes) -> PacketRecord | None:
    """Parse an Ethernet frame; ``None`` for non-IPv4 or truncated frames."""
    if len(frame) < ETH_HEADER_LEN + 20:
        return None
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    off = ETH_HEADER_LEN
    if ethertype == 0x8100:  # 802.1Q tag
        if len(frame) < off + 4 + 20:
            return None
        ethertype = struct.unpack_from("!H", frame, 16)[0]
        off += 4
    if ethertype != ETHERTYPE_IPV4:
        return None
    ver_ihl = frame[off]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    ip_len = struct.unpack_from("!H", frame, off + 2)[0]
    if ihl < 20 or ip_len < ihl or off + ip_len > len(frame):
        return None
    proto_num = frame[off + 9]
    src_ip = str(ipaddress.IPv4Address(frame[off + 12:off + 16]))
    dst_ip = str(ipaddress.IPv4Address(frame[off + 16:off + 20]))
    t = off + ihl
    end = off + ip_len
    if proto_num == Proto.TCP:
        if end - t < 20:
            return None
        sport, dport = struct.unpack_from("!HH", frame, t)
        data_off = (frame[t + 12] >> 4) * 4
        if data_off < 20 or t + data_off > end:
            return None
        flags = frame[t + 13] & 0x3F
        return PacketRecord(ts_us, src_ip, dst_ip, sport, dport, Proto.TCP, flags,
                            ip_len, bytes(frame[t + data_off:end]))
    if proto_num == Proto.UDP:
        if end - t < 8:
            return None
        sport, dport = struct.unpack_from("!HH", frame, t)
        return PacketRecord(ts_us, src_ip, dst_ip, sport, dport, Proto.UDP, None,
                            ip_len, bytes(frame[t + 8:end]))
    return PacketRecord(ts_us, src_ip, dst_ip, None, None, Proto.OTHER, None, ip_len, b"")


class PcapReader:
    """Streaming reader over a classic PCAP file.

    Frames that are not IPv4, or whose record or headers are truncated, are
    skipped and counted in ``skipped``.
    """

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        header = fh.read(GLOBAL_HEADER_LEN)
        if len(header) < 4:
            raise PcapCorruptError("truncated PCAP global header")
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_le == PCAP_MAGIC:
            self._endian = "<"
        elif struct.unpack(">I", header[:4])[0] == PCAP_MAGIC:
            self._endian = ">"
        else:
            raise PcapFormatError(f"unsupported capture magic 0x{magic_le:08x}")
        if len(header) < GLOBAL_HEADER_LEN:
            raise PcapCorruptError("truncated PCAP global header")
        _, _, _, _, self.snaplen, self.linktype = struct.unpack(
            self._endian + "HHiIII", header[4:])
        if self.linktype != LINKTYPE_ETHERNET:
            raise PcapFormatError(f"unsupported linktype {self.linktype}")
        self.frames = 0
        self.skipped = 0

    def __iter__(self) -> Iterator[PacketRecord]:
        rec = struct.Struct(self._endian + "IIII")
        while True:
            head = self._fh.read(RECORD_HEADER_LEN)
            if not head:
                return
            self.frames += 1
            if len(head) < RECORD_HEADER_LEN:
                self.skipped += 1
                return
            sec, usec, incl_len, _orig_len = rec.unpack(head)
            frame = self._fh.read(incl_len)
            if len(frame) < incl_len or usec >= 1_000_000:
                self.skipped += 1
                if len(frame) < incl_len:
                    return
                continue
            pkt = parse_frame(sec * 1_000_000 + usec, frame)
            if pkt is None:
                self.skipped += 1
                continue
            yield pkt


class Capture(list):
    """Packets read from a capture, with the number of frames skipped."""

    def __init__(self, packets: Iterable[PacketRecord] = (), skipped: int = 0):
        super().__init__(packets)
        self.skipped = skipped


def read_pcap(path: str | Path) -> Capture:
    with open(path, "rb") as fh:
        reader = PcapReader(fh)
        packets = list(reader)
        return Capture(packets, reader.skipped)


class PcapWriter:
    def __init__(self, fh: BinaryIO, snaplen: int = 262144):
        self._fh = fh
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen,
                             LINKTYPE_ETHERNET))
        self.count = 0

    def write(self, pkt: PacketRecord) -> None:
        if pkt.ts_us < 0:
            raise ValueError("negative timestamp")
        frame = build_frame(pkt)
        sec, usec = divmod(pkt.ts_us, 1_000_000)
        self._fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        self._fh.write(frame)
        self.count += 1


def write_pcap(packets: Iterable[PacketRecord], path: str | Path) -> int:
    with open(path, "wb") as fh:
        writer = PcapWriter(fh)
        for pkt in packets:
            writer.write(pkt)
        return writer.count
