"""Command-line entry point: ``mqttforensics <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ForensicsError
from .flows import (DEFAULT_BROKER_PORT, DEFAULT_IDLE_TIMEOUT, AttackClass, FlowAssembler,
                    export_csv, import_csv)
from .packets import read_pcap, write_pcap
from .synth import BROKER_IP, default_scenario, load_scenario, save_scenario, simulate

MODEL_KINDS = ("dt", "rf", "svm", "nb", "mlp", "gbt")


def write_labels(labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["packet_index", "label"])
        w.writerows((i, lab.name) for i, lab in enumerate(labels))


def read_labels(path) -> list[AttackClass]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["packet_index", "label"]:
        raise ForensicsError(f"{path}: expected a packet_index,label header")
    labels = []
    for n, (idx, name) in enumerate(rows[1:]):
        if int(idx) != n or name not in AttackClass.__members__:
            raise ForensicsError(f"{path}: bad label row {n}")
        labels.append(AttackClass[name])
    return labels


def _hyper(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ForensicsError(f"--hyper expects key=value, got {item!r}")
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value
    return out


def _dataset(path, mode):
    from .learn import Dataset
    return Dataset.from_flows(import_csv(path), mode)


def cmd_synth(args) -> int:
    if args.scenario:
        config = load_scenario(args.scenario)
    else:
        config = default_scenario(seed=args.seed, target_flows=args.target_flows)
    if args.save_scenario:
        save_scenario(config, args.save_scenario)
    sim = simulate(config)
    if args.pcap:
        write_pcap(sim.packets, args.pcap)
    if args.labels:
        write_labels(sim.labels, args.labels)
    if args.flows:
        flows = FlowAssembler(config.broker_ip, config.broker_port, args.timeout).assemble(
            sim.packets, sim.labels)
        export_csv(flows, args.flows)
        print(f"{len(flows)} flows written to {args.flows}")
    print(f"{len(sim.packets)} packets simulated")
    return 0


def cmd_flows(args) -> int:
    packets = read_pcap(args.pcap)
    labels = read_labels(args.labels) if args.labels else None
    flows = FlowAssembler(args.broker_ip, args.broker_port, args.timeout).assemble(packets, labels)
    export_csv(flows, args.out)
    print(f"{len(flows)} flows from {len(packets)} packets written to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .evaluate import resample
    from .learn import save_model, train
    d = resample(_dataset(args.data, args.mode), args.sampling, args.seed)
    model = train(args.kind, d, _hyper(args.hyper), args.seed)
    save_model(model, args.out)
    loss = "" if model.final_loss is None else f", final loss {model.final_loss:.6f}"
    print(f"{args.kind} trained on {len(d)} flows{loss}; saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import render_report, run_benchmark, save_report
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    report = run_benchmark(_dataset(args.data, args.mode), models, args.sampling,
                           args.test_fraction, args.seed, args.repeats)
    text = render_report(report, "text")
    if args.out:
        suffix = Path(args.out).suffix.lower()
        if suffix == ".json":
            save_report(report, args.out)
        else:
            fmt = {".csv": "csv", ".md": "markdown"}.get(suffix, "text")
            Path(args.out).write_text(render_report(report, fmt), encoding="utf-8")
    print(text, end="")
    return 0


def cmd_detect(args) -> int:
    from .pipeline import detect
    summary = detect(args.pcap or args.scenario, args.model, args.store, args.threshold,
                     args.broker_ip, args.broker_port, args.timeout)
    print(summary.render())
    return summary.exit_code


def cmd_evidence(args) -> int:
    from .evidence import EvidenceStore
    store = EvidenceStore(args.store)
    if args.action == "verify":
        result = store.verify()
        if result.valid:
            print(f"valid: {result.n_entries} entries")
            return 0
        print(f"INVALID: first bad entry {result.first_bad_entry} ({result.reason})")
        return 1
    time_range = None
    if args.start is not None or args.end is not None:
        time_range = (args.start if args.start is not None else float("-inf"),
                      args.end if args.end is not None else float("inf"))
    entries = store.query(attack_class=args.attack_class, src_ip=args.src, dst_ip=args.dst,
                          time_range=time_range)
    extra = ("entry_id", "verdict", "score", "model_kind", "detected_at", "entry_hash")
    rows = [(e.entry_id, e.verdict.name, repr(e.score), e.model_kind, repr(e.detected_at),
             e.entry_hash) for e in entries]
    export_csv([e.flow for e in entries], args.out or sys.stdout, extra, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqttforensics",
                                description="MQTT flow-based intrusion detection toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="simulate labeled testbed traffic")
    s.add_argument("--scenario", help="scenario JSON to run (default: built-in testbed)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target-flows", type=int, default=22_000)
    s.add_argument("--save-scenario", metavar="F", help="write the scenario used")
    s.add_argument("--pcap", metavar="F", help="write packets as PCAP")
    s.add_argument("--labels", metavar="F", help="write packet_index,label sidecar CSV")
    s.add_argument("--flows", metavar="F", help="write the labeled flow CSV")
    s.add_argument("--timeout", type=float, default=DEFAULT_IDLE_TIMEOUT,
                   help="flow idle timeout in seconds")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("flows", help="turn a PCAP into the flow CSV")
    f.add_argument("--pcap", required=True)
    f.add_argument("--labels", help="packet label sidecar CSV")
    f.add_argument("--out", required=True)
    f.add_argument("--broker-ip", default=BROKER_IP)
    f.add_argument("--broker-port", type=int, default=DEFAULT_BROKER_PORT)
    f.add_argument("--timeout", type=float, default=DEFAULT_IDLE_TIMEOUT)
    f.set_defaults(func=cmd_flows)

    t = sub.add_parser("train", help="fit one classifier on a labeled flow CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--kind", choices=MODEL_KINDS, required=True)
    t.add_argument("--mode", choices=("binary", "multi"), default="multi")
    t.add_argument("--sampling", choices=("under", "over", "none"), default="none")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hyper", nargs="*", metavar="KEY=VALUE")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="split, train and score models")
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("binary", "multi"), default="multi")
    e.add_argument("--sampling", choices=("under", "over", "none"), default="none")
    e.add_argument("--models", default=",".join(MODEL_KINDS))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--test-fraction", type=float, default=0.2)
    e.add_argument("--repeats", type=int, default=3)
    e.add_argument("--out", help="report file: .txt, .csv, .md or .json")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="classify a capture and store flagged flows")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--pcap")
    src.add_argument("--scenario")
    d.add_argument("--model", required=True)
    d.add_argument("--store", required=True)
    d.add_argument("--broker-ip")
    d.add_argument("--broker-port", type=int)
    d.add_argument("--threshold", type=float, default=0.5)
    d.add_argument("--timeout", type=float, default=DEFAULT_IDLE_TIMEOUT)
    d.set_defaults(func=cmd_detect)

    ev = sub.add_parser("evidence", help="inspect the evidence store")
    ev_sub = ev.add_subparsers(dest="action", required=True, metavar="action")
    v = ev_sub.add_parser("verify", help="check the hash chain")
    v.add_argument("store")
    q = ev_sub.add_parser("query", help="list entries as flow CSV plus verdict columns")
    q.add_argument("store")
    q.add_argument("--class", dest="attack_class", choices=[c.name for c in AttackClass])
    q.add_argument("--src")
    q.add_argument("--dst")
    q.add_argument("--from", dest="start", type=float)
    q.add_argument("--to", dest="end", type=float)
    q.add_argument("--out", help="CSV file (default: stdout)")
    ev.set_defaults(func=cmd_evidence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ForensicsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
