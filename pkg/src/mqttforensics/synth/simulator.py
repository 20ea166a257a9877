"""Deterministic packet-level simulation of the MQTT testbed.

There is no TCP stack: connections are scripted SYN / SYN-ACK / ACK
exchanges and MQTT control packets ride in single TCP segments.  Every actor
is a generator that yields the delay (seconds) until its next step, driven
by one priority-queue event loop, so a run is a pure function of the config.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from typing import Callable, Iterator, NamedTuple

import numpy as np

from ..flows import AttackClass, FlowAssembler, FlowRecord
from ..mqtt import MalformationKind, MqttMessage, PacketType, encode, forge_malformed
from ..packets import PacketRecord, TcpFlag, tcp_packet
from .config import ScenarioConfig

log = logging.getLogger(__name__)

EPOCH_US = 1_700_000_000_000_000
SYN, ACK, FIN, RST, PSH = TcpFlag.SYN, TcpFlag.ACK, TcpFlag.FIN, TcpFlag.RST, TcpFlag.PSH

CONNACK_BAD_CREDENTIALS = 4
SUBACK_FAILURE = 0x80


class Simulation(NamedTuple):
    packets: list[PacketRecord]
    labels: list[AttackClass]


def topic_matches(topic_filter: str, topic: str) -> bool:
    if topic.startswith("$") and not topic_filter.startswith("$"):
        return False
    f_parts, t_parts = topic_filter.split("/"), topic.split("/")
    for i, f in enumerate(f_parts):
        if f == "#":
            return True
        if i >= len(t_parts) or (f != "+" and f != t_parts[i]):
            return False
    return len(f_parts) == len(t_parts)


def _us(seconds: float) -> int:
    return max(1, int(round(seconds * 1e6)))


class _Conn:
    """A scripted TCP connection between one client endpoint and the broker."""

    def __init__(self, sim: "_Simulator", ip: str, port: int, label: AttackClass,
                 broker_port: int | None = None):
        self.sim, self.ip, self.port, self.label = sim, ip, port, label
        self.broker_port = broker_port if broker_port is not None else sim.cfg.broker_port
        self.open = False
        self.filters: tuple[str, ...] = ()

    def up(self, flags, payload=b"", label=None):
        self.sim.emit(self.ip, self.sim.cfg.broker_ip, self.port, self.broker_port,
                      flags, payload, label or self.label)

    def down(self, flags, payload=b"", label=None):
        self.sim.emit(self.sim.cfg.broker_ip, self.ip, self.broker_port, self.port,
                      flags, payload, label or self.label)

    def handshake(self, rng):
        self.up(SYN)
        yield self.sim.latency(rng)
        self.down(SYN | ACK)
        yield self.sim.latency(rng)
        self.up(ACK)
        self.open = True

    def client_close(self, rng):
        self.open = False
        self.up(FIN | ACK)
        yield self.sim.latency(rng)
        self.down(FIN | ACK)
        yield self.sim.latency(rng)
        self.up(ACK)

    def broker_close(self, rng):
        self.open = False
        self.down(FIN | ACK)
        yield self.sim.latency(rng)
        self.up(FIN | ACK)
        yield self.sim.latency(rng)
        self.down(ACK)


class _Simulator:
    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.now = 0
        self.end = _us(cfg.duration_s)
        self._queue: list[tuple[int, int, Iterator[float]]] = []
        self._seq = itertools.count()
        self._out: list[tuple[int, int, PacketRecord, AttackClass]] = []
        self.subscribers: dict[str, _Conn] = {}
        self._broker_rng = self.rng(7)

    def rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed & 0xFFFFFFFFFFFFFFFF, *stream])

    def latency(self, rng) -> float:
        return 0.0004 + rng.exponential(0.0008)

    def emit(self, src, dst, sport, dport, flags, payload, label):
        pkt = tcp_packet(EPOCH_US + self.now, src, dst, sport, dport, flags, payload)
        self._out.append((self.now, next(self._seq), pkt, label))

    def spawn(self, proc: Iterator[float], delay_s: float = 0.0):
        heapq.heappush(self._queue, (self.now + (_us(delay_s) if delay_s > 0 else 0),
                                     next(self._seq), proc))

    def run(self) -> Simulation:
        for i, spec in enumerate(self.cfg.publishers):
            self.spawn(self._publisher(spec, i))
        for i, spec in enumerate(self.cfg.subscribers):
            self.spawn(self._subscriber(spec, i))
        for i, attack in enumerate(self.cfg.attacks):
            self.now = _us(attack.start_s)
            self.spawn(_ATTACKS[attack.attack_class](self, attack, i))
            self.now = 0
        while self._queue:
            t, _, proc = heapq.heappop(self._queue)
            self.now = t
            try:
                delay = next(proc)
            except StopIteration:
                continue
            heapq.heappush(self._queue, (t + _us(delay), next(self._seq), proc))
        self._out.sort(key=lambda e: (e[0], e[1]))
        return Simulation([e[2] for e in self._out], [e[3] for e in self._out])

    # -- broker-side behaviour -------------------------------------------

    def route(self, topic: str, payload: bytes, label: AttackClass):
        """Forward a publish to every connected subscriber whose filter matches."""
        for client_id in sorted(self.subscribers):
            conn = self.subscribers[client_id]
            if any(topic_matches(f, topic) for f in conn.filters):
                self.spawn(self._deliver(conn, topic, payload, label))

    def _deliver(self, conn: _Conn, topic, payload, label):
        rng = self._broker_rng
        yield self.latency(rng)
        if not conn.open:
            return
        conn.down(PSH | ACK, encode(MqttMessage.publish(topic, payload)), label)
        yield self.latency(rng)
        if conn.open:
            conn.up(ACK, label=label)

    # -- benign clients ------------------------------------------------------

    def _publisher(self, spec, idx):
        rng = self.rng(1, idx)
        port = int(rng.integers(32768, 60000))
        qos = idx % 2
        pid = 0
        yield rng.uniform(0.0, 3.0)
        while self.now < self.end:
            conn = _Conn(self, spec.ip, port, AttackClass.BENIGN)
            port = 32768 + (port - 32768 + 1) % 28000
            yield from conn.handshake(rng)
            yield self.latency(rng)
            conn.up(PSH | ACK, encode(MqttMessage.connect(spec.client_id, keepalive=60)))
            yield self.latency(rng)
            conn.down(PSH | ACK, encode(MqttMessage.connack(0)))
            yield self.latency(rng)
            conn.up(ACK)
            lo, hi = self.cfg.session_publishes
            for _ in range(int(rng.integers(lo, hi + 1))):
                yield spec.publish_interval_s * (0.5 + rng.exponential(0.5))
                if rng.random() < 0.1:
                    conn.up(PSH | ACK, encode(MqttMessage.simple(PacketType.PINGREQ)))
                    yield self.latency(rng)
                    conn.down(PSH | ACK, encode(MqttMessage.simple(PacketType.PINGRESP)))
                    yield self.latency(rng)
                reading = f'{{"v":{rng.normal(70, 8):.1f},"seq":{int(rng.integers(1e6))}}}'
                pid = pid % 0xFFFF + 1
                msg = MqttMessage.publish(spec.topic, reading.encode(), qos=qos,
                                          packet_id=pid if qos else None)
                conn.up(PSH | ACK, encode(msg))
                self.route(spec.topic, msg.payload, AttackClass.BENIGN)
                yield self.latency(rng)
                if qos:
                    conn.down(PSH | ACK, encode(MqttMessage.ack(PacketType.PUBACK, pid)))
                else:
                    conn.down(ACK)
            yield spec.publish_interval_s * rng.uniform(0.2, 1.0)
            conn.up(PSH | ACK, encode(MqttMessage.simple(PacketType.DISCONNECT)))
            yield self.latency(rng)
            yield from conn.client_close(rng)
            yield self.cfg.reconnect_gap_s * (0.25 + rng.exponential(0.75))

    def _subscriber(self, spec, idx):
        rng = self.rng(2, idx)
        port = int(rng.integers(32768, 60000))
        pid = 0
        yield rng.uniform(0.0, 3.0)
        while self.now < self.end:
            conn = _Conn(self, spec.ip, port, AttackClass.BENIGN)
            port = 32768 + (port - 32768 + 1) % 28000
            yield from conn.handshake(rng)
            yield self.latency(rng)
            conn.up(PSH | ACK, encode(MqttMessage.connect(spec.client_id, keepalive=30)))
            yield self.latency(rng)
            conn.down(PSH | ACK, encode(MqttMessage.connack(0)))
            yield self.latency(rng)
            pid = pid % 0xFFFF + 1
            conn.up(PSH | ACK, encode(MqttMessage.subscribe(pid, [(spec.topic, 0)])))
            yield self.latency(rng)
            conn.down(PSH | ACK, encode(MqttMessage.suback(pid, [0])))
            conn.filters = (spec.topic,)
            self.subscribers[spec.client_id] = conn
            yield self.latency(rng)
            conn.up(ACK)
            remaining = self.cfg.subscriber_session_s * (0.3 + rng.exponential(0.7))
            while remaining > 0:
                step = min(remaining, 20.0 + rng.uniform(0, 10))
                yield step
                remaining -= step
                conn.up(PSH | ACK, encode(MqttMessage.simple(PacketType.PINGREQ)))
                yield self.latency(rng)
                conn.down(PSH | ACK, encode(MqttMessage.simple(PacketType.PINGRESP)))
            del self.subscribers[spec.client_id]
            conn.up(PSH | ACK, encode(MqttMessage.simple(PacketType.DISCONNECT)))
            yield self.latency(rng)
            yield from conn.client_close(rng)
            yield self.cfg.reconnect_gap_s * (0.25 + rng.exponential(0.75))


# -- attack generators ------------------------------------------------------

def _event_times(sim: _Simulator, attack, rng) -> Iterator[float]:
    """Yield waits so event k happens at start + (k + jitter_k) / intensity.

    The jitter is exponential and capped below one period, so a window holds
    exactly ``floor((end - start) * intensity)`` events.
    """
    period = 1.0 / attack.intensity
    n = int(np.floor((attack.end_s - attack.start_s) * attack.intensity + 1e-9))
    start_us = _us(attack.start_s) if attack.start_s > 0 else 0
    for k in range(n):
        jitter = min(rng.exponential(0.25), 0.9)
        target = start_us + int(round((k + jitter) * period * 1e6))
        yield max(0.0, (target - sim.now) / 1e6)


def _ports(rng, lo=1024, hi=65535):
    return int(rng.integers(lo, hi + 1))


def _syn_flood(sim: _Simulator, attack, idx):
    rng = sim.rng(3, idx)
    for wait in _event_times(sim, attack, rng):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, _ports(rng), attack.attack_class)
        conn.up(SYN)
        sim.spawn(_reply(conn, SYN | ACK, sim.latency(rng)))


def _reply(conn: _Conn, flags, delay):
    yield delay
    conn.down(flags)


def _port_scan(sim: _Simulator, attack, idx):
    rng = sim.rng(4, idx)
    lo, hi = attack.params.get("port_range", (1, 1024))
    open_ports = set(attack.params.get("open_ports", (22, sim.cfg.broker_port)))
    ports = rng.permutation(np.arange(lo, hi + 1))
    src_port = _ports(rng, 40000, 60000)
    for port, wait in zip(ports, _event_times(sim, attack, rng)):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, src_port, attack.attack_class, int(port))
        conn.up(SYN)
        if int(port) in open_ports:
            sim.spawn(_open_probe(sim, conn, rng))
        else:
            sim.spawn(_reply(conn, RST | ACK, sim.latency(rng)))


def _open_probe(sim, conn, rng):
    yield sim.latency(rng)
    conn.down(SYN | ACK)
    yield sim.latency(rng)
    conn.up(RST)


def _brute_force(sim: _Simulator, attack, idx):
    rng = sim.rng(5, idx)
    n_creds = int(attack.params.get("credentials", 50))
    users = [f"admin{i}" if i % 3 else "admin" for i in range(n_creds)]
    for k, wait in enumerate(_event_times(sim, attack, rng)):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, _ports(rng), attack.attack_class)
        password = f"pw{int(rng.integers(10 ** 6)):06d}".encode()
        sim.spawn(_brute_attempt(sim, conn, users[k % n_creds], password, rng))


def _brute_attempt(sim, conn, user, password, rng):
    yield from conn.handshake(rng)
    yield sim.latency(rng)
    conn.up(PSH | ACK, encode(MqttMessage.connect(f"bf{conn.port}", username=user,
                                                  password=password)))
    yield sim.latency(rng)
    conn.down(PSH | ACK, encode(MqttMessage.connack(CONNACK_BAD_CREDENTIALS)))
    yield sim.latency(rng)
    conn.down(FIN | ACK)
    yield sim.latency(rng)
    conn.up(RST)


def _malformed(sim: _Simulator, attack, idx):
    rng = sim.rng(6, idx)
    kinds = list(MalformationKind)
    for k, wait in enumerate(_event_times(sim, attack, rng)):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, _ports(rng), attack.attack_class)
        payload = forge_malformed(kinds[k % len(kinds)], int(rng.integers(2 ** 63)))
        sim.spawn(_malformed_attempt(sim, conn, payload, rng))


def _malformed_attempt(sim, conn, payload, rng):
    yield from conn.handshake(rng)
    yield sim.latency(rng)
    conn.up(PSH | ACK, payload)
    yield sim.latency(rng)
    conn.open = False
    conn.down(RST | ACK)


def _invalid_sub_pub(sim: _Simulator, attack, idx):
    rng = sim.rng(8, idx)
    for k, wait in enumerate(_event_times(sim, attack, rng)):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, _ports(rng), attack.attack_class)
        sim.spawn(_invalid_session(sim, conn, k, rng))


def _invalid_session(sim, conn, k, rng):
    yield from conn.handshake(rng)
    yield sim.latency(rng)
    conn.up(PSH | ACK, encode(MqttMessage.connect(f"probe{conn.port}")))
    yield sim.latency(rng)
    conn.down(PSH | ACK, encode(MqttMessage.connack(0)))
    yield sim.latency(rng)
    variant = k % 3
    if variant in (0, 2):
        filt = ("$SYS/#", "$SYS/broker/clients/#", "$SYS/broker/log/#")[int(rng.integers(3))]
        conn.up(PSH | ACK, encode(MqttMessage.subscribe(k % 0xFFFF + 1, [(filt, 0)])))
        yield sim.latency(rng)
        conn.down(PSH | ACK, encode(MqttMessage.suback(k % 0xFFFF + 1, [SUBACK_FAILURE])))
        yield sim.latency(rng)
    if variant in (1, 2):
        topic = ("ward/#", "ward/+/hr", "#", "+/+")[int(rng.integers(4))]
        conn.up(PSH | ACK, encode(MqttMessage.publish(topic, b"{}")))
        yield sim.latency(rng)
    yield from conn.broker_close(rng)


def _will_payload(sim: _Simulator, attack, idx):
    rng = sim.rng(9, idx)
    size = int(attack.params.get("will_size", 4096))
    topic = attack.params.get("will_topic", "ward/bed9/hr")
    for wait in _event_times(sim, attack, rng):
        if wait:
            yield wait
        conn = _Conn(sim, attack.attacker_ip, _ports(rng), attack.attack_class)
        payload = rng.bytes(size)
        sim.spawn(_will_session(sim, conn, topic, payload, rng))


def _will_session(sim, conn, topic, payload, rng):
    yield from conn.handshake(rng)
    yield sim.latency(rng)
    conn.up(PSH | ACK, encode(MqttMessage.connect(
        f"w{conn.port}", will_flag=True, will_topic=topic, will_payload=payload)))
    yield sim.latency(rng)
    conn.down(PSH | ACK, encode(MqttMessage.connack(0)))
    for _ in range(int(rng.integers(1, 3))):
        yield 0.05 + rng.exponential(0.1)
        conn.up(PSH | ACK, encode(MqttMessage.publish(topic, b'{"v":0}')))
        yield sim.latency(rng)
        conn.down(ACK)
    yield 0.05 + rng.exponential(0.1)
    conn.open = False
    conn.up(RST)
    # abnormal disconnect: the broker publishes the registered will
    sim.route(topic, payload, conn.label)


_ATTACKS: dict[AttackClass, Callable] = {
    AttackClass.SYN_FLOOD: _syn_flood,
    AttackClass.PORT_SCAN: _port_scan,
    AttackClass.BRUTE_FORCE: _brute_force,
    AttackClass.MALFORMED: _malformed,
    AttackClass.INVALID_SUB_PUB: _invalid_sub_pub,
    AttackClass.WILL_PAYLOAD: _will_payload,
}


def simulate(config: ScenarioConfig) -> Simulation:
    """Run the scenario; returns packets in time order and a label per packet."""
    return _Simulator(config).run()


def benign_fraction(flows: list[FlowRecord]) -> float:
    if not flows:
        return float("nan")
    return sum(f.label == AttackClass.BENIGN for f in flows) / len(flows)


def build_dataset(config: ScenarioConfig, idle_timeout: float = 60.0) -> list[FlowRecord]:
    """Simulate, assemble flows and label each by its packets' majority label."""
    sim = simulate(config)
    flows = FlowAssembler(config.broker_ip, config.broker_port, idle_timeout).assemble(
        sim.packets, sim.labels)
    frac = benign_fraction(flows)
    log.info("scenario seed=%d: %d packets, %d flows, benign fraction %.4f",
             config.seed, len(sim.packets), len(flows), frac)
    if config.attacks and abs(frac - config.benign_fraction_target) > 0.05:
        log.warning("benign fraction %.4f misses target %.2f", frac,
                    config.benign_fraction_target)
    return flows
