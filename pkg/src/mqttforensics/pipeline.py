"""Capture-to-evidence detection run."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ForensicsError
from .evidence import EvidenceStore
from .flows import (DEFAULT_BROKER_PORT, DEFAULT_IDLE_TIMEOUT, FEATURE_SCHEMA_VERSION,
                    AttackClass, FlowAssembler, feature_matrix)
from .learn import Mode, TrainedModel, load_model
from .packets import read_pcap
from .synth import BROKER_IP, ScenarioConfig, load_scenario, simulate

log = logging.getLogger(__name__)

EXIT_CLEAN = 0
EXIT_FLAGGED = 3


class DetectError(ForensicsError):
    pass


class SchemaMismatchError(DetectError):
    pass


@dataclass
class DetectSummary:
    flows_seen: int
    flagged: int
    per_class: dict[str, int] = field(default_factory=dict)
    mean_latency_ms: float = 0.0

    @property
    def exit_code(self) -> int:
        return EXIT_FLAGGED if self.flagged else EXIT_CLEAN

    def render(self) -> str:
        lines = [f"flows_seen: {self.flows_seen}", f"flagged: {self.flagged}"]
        lines += [f"  {name}: {n}" for name, n in self.per_class.items()]
        lines.append(f"mean_latency_ms: {self.mean_latency_ms:.4f}")
        return "\n".join(lines)


def _load_packets(source, broker_ip, broker_port):
    if isinstance(source, ScenarioConfig):
        config = source
    else:
        path = Path(source)
        if path.suffix.lower() in (".pcap", ".cap"):
            port = DEFAULT_BROKER_PORT if broker_port is None else broker_port
            return read_pcap(path), broker_ip or BROKER_IP, port
        config = load_scenario(path)
    return (simulate(config).packets, broker_ip or config.broker_ip,
            broker_port if broker_port is not None else config.broker_port)


def detect(source, model: TrainedModel | str | Path, store: EvidenceStore | str | Path,
           threshold: float = 0.5, broker_ip: str | None = None,
           broker_port: int | None = None,
           idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> DetectSummary:
    """Classify every flow of ``source`` and preserve the flagged ones.

    ``source`` is a PCAP path, a scenario file path or a ScenarioConfig.  A
    flow is flagged when its top class is an attack class scoring at least
    ``threshold``.
    """
    if not isinstance(model, TrainedModel):
        model = load_model(model)
    if model.feature_schema != FEATURE_SCHEMA_VERSION:
        raise SchemaMismatchError(f"model uses feature schema v{model.feature_schema}, "
                                  f"flow extractor produces v{FEATURE_SCHEMA_VERSION}")
    if model.mode != Mode.MULTICLASS:
        raise DetectError("detection needs a multi-class model to name attack classes")
    if not isinstance(store, EvidenceStore):
        store = EvidenceStore(store)
    check = store.verify()
    if not check.valid:
        raise DetectError(f"evidence store is not verifiable: {check.reason}")

    packets, broker_ip, broker_port = _load_packets(source, broker_ip, broker_port)
    t0 = time.perf_counter()
    flows = FlowAssembler(broker_ip, broker_port, idle_timeout).assemble(packets)
    if flows:
        labels, scores = model.predict(feature_matrix(flows))
    else:
        labels, scores = np.empty(0, dtype=np.int64), np.empty((0, len(model.class_names)))
    elapsed = time.perf_counter() - t0

    summary = DetectSummary(len(flows), 0)
    summary.mean_latency_ms = elapsed / len(flows) * 1e3 if flows else 0.0
    for flow, lab, row in zip(flows, labels, scores):
        verdict = AttackClass[model.class_names[lab]]
        if verdict == AttackClass.BENIGN or row[lab] < threshold:
            continue
        store.append(flow, verdict, float(row[lab]), model.kind.value)
        summary.flagged += 1
        summary.per_class[verdict.name] = summary.per_class.get(verdict.name, 0) + 1
    log.info("classified %d flows, flagged %d", summary.flows_seen, summary.flagged)
    return summary
