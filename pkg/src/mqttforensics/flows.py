"""Unidirectional flow assembly, flow features and the flow CSV format.

Direction 0 means the flow is addressed to the broker endpoint
(client to broker); every other flow is direction 1.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ForensicsError
from .mqtt import MalformationReport, PacketType, decode_stream
from .packets import PacketRecord, Proto, TcpFlag

FEATURE_SCHEMA_VERSION = 1
DEFAULT_IDLE_TIMEOUT = 60.0
DEFAULT_BROKER_PORT = 1883


class AttackClass(enum.IntEnum):
    BENIGN = 0
    INVALID_SUB_PUB = 1
    SYN_FLOOD = 2
    BRUTE_FORCE = 3
    MALFORMED = 4
    PORT_SCAN = 5
    WILL_PAYLOAD = 6


class FeatureVector(NamedTuple):
    duration_s: float
    pkt_count: float
    byte_count: float
    pkt_len_min: float
    pkt_len_max: float
    pkt_len_mean: float
    pkt_len_std: float
    iat_min: float
    iat_max: float
    iat_mean: float
    iat_std: float
    syn_cnt: float
    ack_cnt: float
    fin_cnt: float
    rst_cnt: float
    psh_cnt: float
    mqtt_pkt_cnt: float
    mqtt_connect_cnt: float
    mqtt_publish_cnt: float
    mqtt_subscribe_cnt: float
    mqtt_malformed_cnt: float
    mqtt_mean_topic_len: float
    dst_port_is_broker: float
    direction: float


FEATURE_NAMES: tuple[str, ...] = FeatureVector._fields
N_FEATURES = len(FEATURE_NAMES)
CSV_HEADER = ("flow_id", "src_ip", "dst_ip", "src_port", "dst_port", "proto",
              "direction", "first_ts", "last_ts", *FEATURE_NAMES, "label")


class FlowSchemaError(ForensicsError):
    pass


class FlowValidationError(ForensicsError):
    pass


class FlowKey(NamedTuple):
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: Proto

    def reverse(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.proto)

    @classmethod
    def of(cls, pkt: PacketRecord) -> "FlowKey":
        return cls(pkt.src_ip, pkt.dst_ip, pkt.src_port, pkt.dst_port, Proto(pkt.proto))


@dataclass(frozen=True)
class FlowRecord:
    flow_id: int
    key: FlowKey
    direction: int
    first_ts: float
    last_ts: float
    features: FeatureVector
    label: AttackClass | None = None

    def __post_init__(self):
        if self.direction not in (0, 1):
            raise FlowValidationError(f"direction must be 0 or 1, got {self.direction}")
        if self.last_ts < self.first_ts:
            raise FlowValidationError("last_ts precedes first_ts")
        if not all(math.isfinite(v) for v in self.features):
            raise FlowValidationError(f"flow {self.flow_id} has non-finite features")


def flow_direction(key: FlowKey, broker_ip: str, broker_port: int) -> int:
    return 0 if (key.dst_ip, key.dst_port) == (broker_ip, broker_port) else 1


def _stats(values: Sequence[float]) -> tuple[float, float, float, float]:
    if not values:
        return 0.0, 0.0, 0.0, 0.0
    arr = np.asarray(values, dtype=float)
    lo, hi = float(arr.min()), float(arr.max())
    mean = min(max(float(arr.mean()), lo), hi)
    std = float(arr.std()) if len(arr) > 1 else 0.0
    return lo, hi, mean, std


def featurize(flow_packets: Sequence[PacketRecord], direction: int,
              broker_port: int = DEFAULT_BROKER_PORT) -> FeatureVector:
    if not flow_packets:
        raise ValueError("featurize needs at least one packet")
    ts = [p.ts_us for p in flow_packets]
    lens = [p.ip_len for p in flow_packets]
    iats = [(b - a) / 1e6 for a, b in zip(ts, ts[1:])]
    len_min, len_max, len_mean, len_std = _stats(lens)
    iat_min, iat_max, iat_mean, iat_std = _stats(iats)

    flag_counts = dict.fromkeys((TcpFlag.SYN, TcpFlag.ACK, TcpFlag.FIN, TcpFlag.RST,
                                 TcpFlag.PSH), 0)
    mqtt_total = connects = publishes = subscribes = malformed = 0
    topic_lens: list[int] = []
    for p in flow_packets:
        if p.proto != Proto.TCP:
            continue
        for flag in flag_counts:
            if p.tcp_flags & flag:
                flag_counts[flag] += 1
        if p.payload and broker_port in (p.src_port, p.dst_port):
            for m in decode_stream(p.payload):
                mqtt_total += 1
                if isinstance(m, MalformationReport):
                    malformed += 1
                    continue
                if m.packet_type == PacketType.CONNECT:
                    connects += 1
                elif m.packet_type == PacketType.PUBLISH:
                    publishes += 1
                elif m.packet_type == PacketType.SUBSCRIBE:
                    subscribes += 1
                if m.topic is not None:
                    topic_lens.append(len(m.topic.encode("utf-8")))

    return FeatureVector(
        duration_s=(ts[-1] - ts[0]) / 1e6,
        pkt_count=float(len(flow_packets)),
        byte_count=float(sum(lens)),
        pkt_len_min=len_min, pkt_len_max=len_max, pkt_len_mean=len_mean, pkt_len_std=len_std,
        iat_min=iat_min, iat_max=iat_max, iat_mean=iat_mean, iat_std=iat_std,
        syn_cnt=float(flag_counts[TcpFlag.SYN]),
        ack_cnt=float(flag_counts[TcpFlag.ACK]),
        fin_cnt=float(flag_counts[TcpFlag.FIN]),
        rst_cnt=float(flag_counts[TcpFlag.RST]),
        psh_cnt=float(flag_counts[TcpFlag.PSH]),
        mqtt_pkt_cnt=float(mqtt_total),
        mqtt_connect_cnt=float(connects),
        mqtt_publish_cnt=float(publishes),
        mqtt_subscribe_cnt=float(subscribes),
        mqtt_malformed_cnt=float(malformed),
        mqtt_mean_topic_len=float(np.mean(topic_lens)) if topic_lens else 0.0,
        dst_port_is_broker=float(flow_packets[0].dst_port == broker_port),
        direction=float(direction),
    )


def majority_label(labels: Iterable[AttackClass]) -> AttackClass:
    """Most frequent label; ties go to a non-benign label, then the lowest."""
    counts = Counter(labels)
    best = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == best)
    attacks = [c for c in tied if c != AttackClass.BENIGN]
    return AttackClass(attacks[0] if attacks else tied[0])


class FlowAssembler:
    """Groups packets into unidirectional flows.

    A flow ends when its 5-tuple is idle for more than ``idle_timeout``
    seconds, or right after a packet carrying FIN or RST in that direction.

    After :meth:`assemble`, ``dropped_`` counts non-TCP/UDP packets and
    ``members_`` holds, per emitted flow, the input indices of its packets.
    """

    def __init__(self, broker_ip: str, broker_port: int = DEFAULT_BROKER_PORT,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        if idle_timeout <= 0:
            raise ValueError("idle_timeout must be positive")
        self.broker_ip = broker_ip
        self.broker_port = broker_port
        self.idle_timeout = idle_timeout

    def assemble(self, packets: Sequence[PacketRecord],
                 labels: Sequence[AttackClass] | None = None) -> list[FlowRecord]:
        if labels is not None and len(labels) != len(packets):
            raise ValueError("labels must align with packets")
        timeout_us = self.idle_timeout * 1e6
        order = sorted(range(len(packets)), key=lambda i: packets[i].ts_us)
        active: dict[FlowKey, list[int]] = {}
        groups: list[tuple[FlowKey, list[int]]] = []
        self.dropped_ = 0
        for i in order:
            pkt = packets[i]
            if pkt.proto not in (Proto.TCP, Proto.UDP):
                self.dropped_ += 1
                continue
            key = FlowKey.of(pkt)
            members = active.get(key)
            if members is not None and pkt.ts_us - packets[members[-1]].ts_us > timeout_us:
                groups.append((key, members))
                members = None
            if members is None:
                members = active[key] = []
            members.append(i)
            if pkt.tcp_flags is not None and pkt.tcp_flags & (TcpFlag.FIN | TcpFlag.RST):
                groups.append((key, active.pop(key)))
        groups.extend(active.items())
        groups.sort(key=lambda g: (packets[g[1][0]].ts_us, g[0]))

        flows = []
        self.members_ = []
        for flow_id, (key, members) in enumerate(groups):
            member_pkts = [packets[i] for i in members]
            direction = flow_direction(key, self.broker_ip, self.broker_port)
            label = majority_label(labels[i] for i in members) if labels is not None else None
            flows.append(FlowRecord(
                flow_id=flow_id, key=key, direction=direction,
                first_ts=member_pkts[0].ts, last_ts=member_pkts[-1].ts,
                features=featurize(member_pkts, direction, self.broker_port),
                label=label,
            ))
            self.members_.append(members)
        return flows


def assemble(packets: Sequence[PacketRecord], broker_ip: str,
             broker_port: int = DEFAULT_BROKER_PORT,
             idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
             labels: Sequence[AttackClass] | None = None) -> list[FlowRecord]:
    return FlowAssembler(broker_ip, broker_port, idle_timeout).assemble(packets, labels)


def feature_matrix(flows: Sequence[FlowRecord]) -> np.ndarray:
    if not flows:
        return np.empty((0, N_FEATURES))
    return np.array([f.features for f in flows], dtype=float)


# -- CSV interchange --------------------------------------------------------

def _port_text(port: int | None) -> str:
    return "" if port is None else str(port)


def _port(text: str) -> int | None:
    return int(text) if text else None


def _row(flow: FlowRecord) -> list[str]:
    k = flow.key
    return [str(flow.flow_id), k.src_ip, k.dst_ip, _port_text(k.src_port), _port_text(k.dst_port),
            k.proto.name, str(flow.direction), repr(flow.first_ts), repr(flow.last_ts),
            *(repr(float(v)) for v in flow.features),
            flow.label.name if flow.label is not None else ""]


def export_csv(flows: Iterable[FlowRecord], path, extra_columns: Sequence[str] = (),
               extra_rows=None) -> int:
    """Write flows in the fixed CSV schema and return the row count.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        return _write_csv(flows, path, extra_columns, extra_rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        return _write_csv(flows, fh, extra_columns, extra_rows)


def _write_csv(flows, fh, extra_columns, extra_rows) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([*CSV_HEADER, *extra_columns])
    n = 0
    for i, flow in enumerate(flows):
        row = _row(flow)
        if extra_columns:
            row += [str(v) for v in extra_rows[i]]
        writer.writerow(row)
        n += 1
    return n


def _real(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FlowValidationError(f"line {line}: {column}={text!r} is not a number") from None
    if not math.isfinite(value):
        raise FlowValidationError(f"line {line}: {column} is not finite")
    return value


def import_csv(path: str | Path) -> list[FlowRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FlowSchemaError("empty flow file")
        if tuple(header) != CSV_HEADER:
            if tuple(header) == CSV_HEADER[:-1]:
                has_label = False
            else:
                raise FlowSchemaError(f"unexpected flow CSV header in {path}")
        else:
            has_label = True
        flows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FlowSchemaError(f"line {line}: expected {len(header)} columns")
            try:
                key = FlowKey(row[1], row[2], _port(row[3]), _port(row[4]), Proto[row[5]])
                flow_id, direction = int(row[0]), int(row[6])
            except (KeyError, ValueError) as exc:
                raise FlowValidationError(f"line {line}: {exc}") from None
            feats = FeatureVector(*(_real(v, name, line)
                                    for v, name in zip(row[9:9 + N_FEATURES], FEATURE_NAMES)))
            label = None
            if has_label and row[-1]:
                try:
                    label = AttackClass[row[-1]]
                except KeyError:
                    raise FlowValidationError(f"line {line}: unknown label {row[-1]!r}") from None
            flows.append(FlowRecord(flow_id, key, direction, _real(row[7], "first_ts", line),
                                    _real(row[8], "last_ts", line), feats, label))
    return flows
