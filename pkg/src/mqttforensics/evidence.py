"""Append-only evidence store protected by a SHA-256 hash chain.

One canonical JSON object per line.  Each entry's hash covers the previous
entry's hash followed by the canonical serialization of its own fields, so
altering any persisted byte breaks the chain from that entry onwards.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

from .errors import ForensicsError
from .flows import FEATURE_NAMES, AttackClass, FeatureVector, FlowKey, FlowRecord
from .packets import Proto

ZERO_HASH = "00" * 32


class EvidenceError(ForensicsError):
    pass


class ContractError(EvidenceError, ValueError):
    pass


class AppendError(EvidenceError):
    pass


class IntegrityError(EvidenceError):
    pass


def canonical_json(obj) -> bytes:
    """Sorted keys, no spaces, ASCII only, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True,
                      allow_nan=False).encode("ascii")


def flow_to_dict(flow: FlowRecord) -> dict:
    k = flow.key
    return {
        "flow_id": flow.flow_id,
        "src_ip": k.src_ip, "dst_ip": k.dst_ip,
        "src_port": k.src_port, "dst_port": k.dst_port,
        "proto": k.proto.name,
        "direction": flow.direction,
        "first_ts": float(flow.first_ts), "last_ts": float(flow.last_ts),
        "features": [float(v) for v in flow.features],
        "label": flow.label.name if flow.label is not None else None,
    }


def flow_from_dict(d: dict) -> FlowRecord:
    if len(d["features"]) != len(FEATURE_NAMES):
        raise ValueError("wrong feature count")
    key = FlowKey(d["src_ip"], d["dst_ip"], d["src_port"], d["dst_port"], Proto[d["proto"]])
    label = AttackClass[d["label"]] if d["label"] is not None else None
    return FlowRecord(d["flow_id"], key, d["direction"], d["first_ts"], d["last_ts"],
                      FeatureVector(*d["features"]), label)


@dataclass(frozen=True)
class EvidenceEntry:
    entry_id: int
    flow: FlowRecord
    verdict: AttackClass
    score: float
    model_kind: str
    detected_at: float
    prev_hash: str
    entry_hash: str

    def body(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "flow": flow_to_dict(self.flow),
            "verdict": self.verdict.name,
            "score": float(self.score),
            "model_kind": self.model_kind,
            "detected_at": float(self.detected_at),
        }

    def to_line(self) -> bytes:
        record = self.body()
        record["prev_hash"] = self.prev_hash
        record["entry_hash"] = self.entry_hash
        return canonical_json(record) + b"\n"

    @classmethod
    def from_record(cls, rec: dict) -> "EvidenceEntry":
        return cls(rec["entry_id"], flow_from_dict(rec["flow"]), AttackClass[rec["verdict"]],
                   rec["score"], rec["model_kind"], rec["detected_at"], rec["prev_hash"],
                   rec["entry_hash"])


def chain_hash(prev_hash: str, body: dict) -> str:
    return hashlib.sha256(bytes.fromhex(prev_hash) + canonical_json(body)).hexdigest()


class VerifyResult(NamedTuple):
    valid: bool
    first_bad_entry: int | None
    n_entries: int
    reason: str = ""


def _check_line(line: bytes, expected_id: int, prev_hash: str) -> EvidenceEntry:
    rec = json.loads(line.decode("ascii"))
    entry = EvidenceEntry.from_record(rec)
    if entry.entry_id != expected_id:
        raise ValueError(f"entry_id {entry.entry_id} where {expected_id} expected")
    if entry.verdict == AttackClass.BENIGN:
        raise ValueError("BENIGN verdict in store")
    if entry.prev_hash != prev_hash:
        raise ValueError("prev_hash does not continue the chain")
    if chain_hash(prev_hash, entry.body()) != entry.entry_hash:
        raise ValueError("entry_hash mismatch")
    if entry.to_line() != line + b"\n":
        raise ValueError("line is not in canonical form")
    return entry


def _scan(data: bytes) -> tuple[VerifyResult, list[EvidenceEntry]]:
    entries: list[EvidenceEntry] = []
    prev = ZERO_HASH
    lines = data.split(b"\n")
    torn = lines.pop()  # bytes after the last newline
    for i, line in enumerate(lines):
        try:
            entry = _check_line(line, i, prev)
        except Exception as exc:  # any decode or schema failure marks the entry bad
            return VerifyResult(False, i, len(lines), f"entry {i}: {exc}"), entries
        entries.append(entry)
        prev = entry.entry_hash
    if torn:
        return VerifyResult(False, len(lines), len(lines) + 1,
                            f"entry {len(lines)}: torn final line"), entries
    return VerifyResult(True, None, len(lines)), entries


class EvidenceStore:
    """Single-appender store; readers take a shared advisory lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._tail: tuple[int, str] | None = None

    @contextmanager
    def _locked(self, exclusive: bool) -> Iterator[int]:
        flags = os.O_RDWR | os.O_CREAT | os.O_APPEND if exclusive else os.O_RDONLY
        if not exclusive and not self.path.exists():
            yield -1
            return
        fd = os.open(self.path, flags, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            yield fd
        finally:
            os.close(fd)

    def _read(self) -> bytes:
        return self.path.read_bytes() if self.path.exists() else b""

    def verify(self) -> VerifyResult:
        with self._locked(False):
            return _scan(self._read())[0]

    def entries(self) -> list[EvidenceEntry]:
        with self._locked(False):
            result, entries = _scan(self._read())
        if not result.valid:
            raise IntegrityError(f"evidence store {self.path} failed verification: {result.reason}")
        return entries

    def __len__(self):
        return len(self.entries())

    def append(self, flow: FlowRecord, verdict, score: float, model_kind: str,
               detected_at: float | None = None) -> EvidenceEntry:
        """Durably append one entry and return it.

        ``detected_at`` defaults to the flow's last timestamp, which keeps
        chains reproducible for replayed captures.
        """
        verdict = AttackClass[verdict] if isinstance(verdict, str) else AttackClass(verdict)
        if verdict == AttackClass.BENIGN:
            raise ContractError("BENIGN flows are not evidence")
        if not 0.0 <= score <= 1.0:
            raise ContractError(f"score {score} outside [0, 1]")
        with self._locked(True) as fd:
            if self._tail is None:
                result, entries = _scan(self._read())
                if not result.valid:
                    raise IntegrityError(f"refusing to extend a broken chain: {result.reason}")
                self._tail = (len(entries), entries[-1].entry_hash if entries else ZERO_HASH)
            next_id, prev = self._tail
            body_entry = EvidenceEntry(next_id, flow, verdict, float(score), str(model_kind),
                                       float(flow.last_ts if detected_at is None else detected_at),
                                       prev, "")
            entry = replace(body_entry, entry_hash=chain_hash(prev, body_entry.body()))
            line = entry.to_line()
            size = os.fstat(fd).st_size
            try:
                written = os.write(fd, line)
                if written != len(line):
                    raise OSError(f"short write ({written} of {len(line)} bytes)")
                os.fsync(fd)
            except OSError as exc:
                self._tail = None
                try:
                    os.ftruncate(fd, size)
                except OSError:
                    pass
                raise AppendError(f"append to {self.path} failed: {exc}") from exc
            self._tail = (next_id + 1, entry.entry_hash)
        return entry

    def query(self, attack_class=None, src_ip: str | None = None, dst_ip: str | None = None,
              time_range: tuple[float, float] | None = None) -> list[EvidenceEntry]:
        """Entries matching every given filter, in entry order.

        ``time_range`` keeps flows whose active interval overlaps
        ``[start, end]``.
        """
        if isinstance(attack_class, str):
            attack_class = AttackClass[attack_class]
        out = []
        for e in self.entries():
            if attack_class is not None and e.verdict != attack_class:
                continue
            if src_ip is not None and e.flow.key.src_ip != src_ip:
                continue
            if dst_ip is not None and e.flow.key.dst_ip != dst_ip:
                continue
            if time_range is not None:
                lo, hi = time_range
                if e.flow.last_ts < lo or e.flow.first_ts > hi:
                    continue
            out.append(e)
        return out


def append(store: EvidenceStore, flow: FlowRecord, verdict, score: float,
           model_kind: str, detected_at: float | None = None) -> EvidenceEntry:
    return store.append(flow, verdict, score, model_kind, detected_at)


def verify(store: EvidenceStore | str | Path) -> VerifyResult:
    if not isinstance(store, EvidenceStore):
        store = EvidenceStore(store)
    return store.verify()


def query(store: EvidenceStore | str | Path, **filters) -> list[EvidenceEntry]:
    if not isinstance(store, EvidenceStore):
        store = EvidenceStore(store)
    return store.query(**filters)
