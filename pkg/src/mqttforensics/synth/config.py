"""Scenario configuration for the synthetic MQTT testbed."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ForensicsError
from ..flows import AttackClass

BROKER_IP = "10.0.0.1"
ATTACKER_IP = "10.0.0.66"

PUBLISHER_TOPICS = ("ward/bed1/hr", "ward/bed2/spo2", "ward/bed3/bp",
                    "ward/bed4/temp", "ward/bed5/ecg")
SUBSCRIBER_FILTERS = ("ward/#", "ward/bed1/#", "ward/+/hr", "ward/bed2/spo2", "ward/bed3/+")

# Mean flows produced by one attack event (see simulator for the exchanges).
FLOWS_PER_EVENT = {
    AttackClass.INVALID_SUB_PUB: 3,
    AttackClass.SYN_FLOOD: 2,
    AttackClass.BRUTE_FORCE: 2,
    AttackClass.MALFORMED: 2,
    AttackClass.PORT_SCAN: 2,
    AttackClass.WILL_PAYLOAD: 2,
}
# Benign flows per simulated second for the default client population,
# measured on seeded runs of the default behaviour parameters.
BENIGN_FLOWS_PER_S = 1.81


class ScenarioError(ForensicsError):
    pass


@dataclass
class ClientSpec:
    ip: str
    client_id: str
    topic: str
    publish_interval_s: float = 1.0


@dataclass
class AttackSpec:
    attack_class: AttackClass
    start_s: float
    end_s: float
    intensity: float
    attacker_ip: str = ATTACKER_IP
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.attack_class, str):
            self.attack_class = AttackClass[self.attack_class]
        self.attack_class = AttackClass(self.attack_class)


@dataclass
class ScenarioConfig:
    """One broker, publishers, subscribers and a list of attack windows.

    ``benign_fraction_target`` is the benign share of flows the scenario was
    sized for; :func:`default_scenario` uses it to size attack windows and
    :func:`~mqttforensics.synth.build_dataset` warns when the achieved share
    misses it by more than 0.05.
    """

    seed: int = 0
    duration_s: float = 600.0
    broker_ip: str = BROKER_IP
    broker_port: int = 1883
    publishers: list[ClientSpec] = field(default_factory=list)
    subscribers: list[ClientSpec] = field(default_factory=list)
    attacks: list[AttackSpec] = field(default_factory=list)
    benign_fraction_target: float = 0.55
    session_publishes: tuple[int, int] = (3, 12)
    reconnect_gap_s: float = 2.0
    subscriber_session_s: float = 60.0

    def __post_init__(self):
        self.publishers = [p if isinstance(p, ClientSpec) else ClientSpec(**p)
                           for p in self.publishers]
        self.subscribers = [s if isinstance(s, ClientSpec) else ClientSpec(**s)
                            for s in self.subscribers]
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a)
                        for a in self.attacks]
        self.session_publishes = tuple(self.session_publishes)

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be positive")
        if not 0 < self.benign_fraction_target < 1:
            raise ScenarioError("benign_fraction_target must lie in (0, 1)")
        ips = [c.ip for c in self.publishers + self.subscribers]
        if len(set(ips)) != len(ips):
            raise ScenarioError("client IPs must be distinct")
        if self.broker_ip in ips:
            raise ScenarioError("a client shares the broker IP")
        lo, hi = self.session_publishes
        if not 1 <= lo <= hi:
            raise ScenarioError("session_publishes must be an increasing positive pair")
        for a in self.attacks:
            if a.attack_class == AttackClass.BENIGN:
                raise ScenarioError("attack windows cannot be BENIGN")
            if not 0 <= a.start_s < a.end_s <= self.duration_s:
                raise ScenarioError(f"bad window [{a.start_s}, {a.end_s}] for {a.attack_class.name}")
            if a.intensity <= 0:
                raise ScenarioError("attack intensity must be positive")
            if a.attacker_ip == self.broker_ip:
                raise ScenarioError("attacker cannot use the broker IP")
        by_ip = sorted(self.attacks, key=lambda a: (a.attacker_ip, a.start_s))
        for a, b in zip(by_ip, by_ip[1:]):
            if (a.attacker_ip == b.attacker_ip and b.start_s < a.end_s
                    and a.attack_class != b.attack_class):
                raise ScenarioError(
                    f"{a.attack_class.name} and {b.attack_class.name} overlap from {a.attacker_ip}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for a in d["attacks"]:
            a["attack_class"] = AttackClass(a["attack_class"]).name
        d["session_publishes"] = list(self.session_publishes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


def save_scenario(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ScenarioConfig.from_dict(data)
    except (TypeError, KeyError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario file {path}: {exc}") from None


def testbed_clients() -> tuple[list[ClientSpec], list[ClientSpec]]:
    """Default clients: five sensor publishers and five monitor subscribers."""
    pubs = [ClientSpec(f"10.0.0.{11 + i}", f"sensor-{i + 1}", PUBLISHER_TOPICS[i],
                       publish_interval_s=0.6 + 0.2 * i) for i in range(5)]
    subs = [ClientSpec(f"10.0.0.{21 + i}", f"monitor-{i + 1}", SUBSCRIBER_FILTERS[i],
                       publish_interval_s=0.0) for i in range(5)]
    return pubs, subs


_ATTACK_INTENSITY = {
    AttackClass.INVALID_SUB_PUB: 4.0,
    AttackClass.SYN_FLOOD: 100.0,
    AttackClass.BRUTE_FORCE: 8.0,
    AttackClass.MALFORMED: 6.0,
    AttackClass.PORT_SCAN: 80.0,
    AttackClass.WILL_PAYLOAD: 3.0,
}


def default_scenario(seed: int = 0, target_flows: int = 22_000,
                     benign_fraction: float = 0.55,
                     attack_classes=None, windows_per_class: int = 3) -> ScenarioConfig:
    """Testbed scenario sized to roughly ``target_flows`` flows.

    The benign share is set by simulated duration; attack windows are then
    sized so each configured class contributes an equal share of the
    malicious flows and are scattered over the timeline without overlap.
    """
    if attack_classes is None:
        attack_classes = [c for c in AttackClass if c != AttackClass.BENIGN]
    attack_classes = [AttackClass[c] if isinstance(c, str) else AttackClass(c)
                      for c in attack_classes]
    pubs, subs = testbed_clients()
    if not attack_classes:
        duration = target_flows / BENIGN_FLOWS_PER_S
        return ScenarioConfig(seed=seed, duration_s=round(duration, 1),
                              publishers=pubs, subscribers=subs,
                              benign_fraction_target=0.999)
    duration = benign_fraction * target_flows / BENIGN_FLOWS_PER_S
    per_class = (1 - benign_fraction) * target_flows / len(attack_classes)

    rng = np.random.default_rng([seed, 0xA77])
    slots = []
    for c in attack_classes:
        events = per_class / FLOWS_PER_EVENT[c]
        intensity = _ATTACK_INTENSITY[c]
        if c == AttackClass.PORT_SCAN:
            # one full scan of the port range per window
            n_ports = max(1, int(round(events / windows_per_class)))
            for _ in range(windows_per_class):
                slots.append((c, n_ports / intensity, intensity, {"port_range": [1, n_ports]}))
            continue
        span = events / intensity / windows_per_class
        for _ in range(windows_per_class):
            slots.append((c, span, intensity, {}))
    order = rng.permutation(len(slots))
    total_span = sum(s[1] for s in slots)
    margin = 30.0
    free = duration - 2 * margin - total_span
    if free <= 0:
        raise ScenarioError("attack windows do not fit in the scenario duration")
    gap = free / len(slots)
    t = margin + gap / 2
    attacks = []
    for i in order:
        c, span, intensity, params = slots[i]
        attacks.append(AttackSpec(c, round(t, 6), round(t + span, 6), intensity,
                                  ATTACKER_IP, params))
        t += span + gap
    attacks.sort(key=lambda a: a.start_s)
    return ScenarioConfig(seed=seed, duration_s=round(duration, 1), publishers=pubs,
                          subscribers=subs, attacks=attacks,
                          benign_fraction_target=benign_fraction)
