"""Software model of the data-plane pipeline.

Packets are grouped into bidirectional flows, per-direction statistics are
kept in integer registers, flows are cut by an active (packet count) and an
inactive (idle gap) timeout, and each finished flow's key vector is matched
against a compiled table program.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .features import DIRECTIONS, FLOW_SPEC, FeatureSpec
from .model_core import ContractError
from .rules import NO_MATCH
from .table_compiler import TableProgram, match_table

log = logging.getLogger(__name__)

TCP = 6
UDP = 17
SUPPORTED_PROTOS = (TCP, UDP)

DEFAULT_M = 16
DEFAULT_DELTA_US = 15_000_000
U32_MAX = (1 << 32) - 1

TRACE_COLUMNS = ("ts_us", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "len")

ACTIVE = "active"
INACTIVE = "inactive"
FLUSH = "flush"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class PacketRecord:
    ts_us: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int
    length: int

    @property
    def five_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.proto)


def reverse(key: tuple[int, int, int, int, int]) -> tuple[int, int, int, int, int]:
    s, d, sp, dp, p = key
    return (d, s, dp, sp, p)


@dataclass
class RegisterBank:
    count: int = 0
    size_ls: int = 0
    size_ss: int = 0
    size_max: int = 0
    size_min: int = 0
    t_first: int = 0
    t_last: int = 0
    iat_ls: int = 0
    iat_ss: int = 0
    iat_max: int = 0
    iat_min: int = 0

    def update(self, ts: int, length: int) -> None:
        if self.count == 0:
            self.t_first = ts
            self.size_max = self.size_min = length
        else:
            gap = ts - self.t_last
            self.iat_ls += gap
            self.iat_ss += gap * gap
            if self.count == 1:
                self.iat_max = self.iat_min = gap
            else:
                self.iat_max = max(self.iat_max, gap)
                self.iat_min = min(self.iat_min, gap)
            self.size_max = max(self.size_max, length)
            self.size_min = min(self.size_min, length)
        self.t_last = ts
        self.count += 1
        self.size_ls += length
        self.size_ss += length * length

    def size_d(self) -> int:
        return self.count * self.size_ss - self.size_ls * self.size_ls

    def iat_d(self) -> int:
        return self.count * self.iat_ss - self.iat_ls * self.iat_ls


@dataclass
class FlowState:
    key: tuple[int, int, int, int, int]  # forward 5-tuple
    banks: dict[str, RegisterBank] = field(default_factory=lambda: {d: RegisterBank() for d in DIRECTIONS})

    @property
    def packets(self) -> int:
        return self.banks["both"].count


@dataclass(frozen=True)
class FinalizedFlow:
    key: tuple[int, int, int, int, int]
    reason: str
    start_us: int
    packets: int
    int_key: tuple[int, ...]
    features: tuple[float, ...]


def _sat32(v: int) -> int:
    return min(v, U32_MAX)


def flow_key_vector(state: FlowState, spec: FeatureSpec = FLOW_SPEC) -> tuple[int, ...]:
    """Integer key vector in the layout order of ``spec``."""
    both = state.banks["both"]
    values = {"proto": state.key[4], "dst_port": state.key[3],
              "duration": _sat32(both.t_last - both.t_first)}
    for d in DIRECTIONS:
        b = state.banks[d]
        values[f"count_{d}"] = b.count
        for stat in ("size", "iat"):
            ls, ss = getattr(b, f"{stat}_ls"), getattr(b, f"{stat}_ss")
            values[f"{stat}_ls_{d}"] = ls
            values[f"{stat}_ss_{d}"] = ss
            values[f"{stat}_d_{d}"] = b.count * ss - ls * ls
            values[f"{stat}_max_{d}"] = _sat32(getattr(b, f"{stat}_max"))
            values[f"{stat}_min_{d}"] = _sat32(getattr(b, f"{stat}_min"))
    return tuple(values[f.name] for f in spec.layout)


def finalize_flow(state: FlowState, reason: str = FLUSH,
                  spec: FeatureSpec = FLOW_SPEC) -> FinalizedFlow:
    if state.packets < 1:
        raise ContractError("cannot finalize an empty flow")
    key = flow_key_vector(state, spec)
    return FinalizedFlow(state.key, reason, state.banks["both"].t_first, state.packets, key,
                         tuple(spec.real_view(key)))


class FlowTable:
    """Forward and backward lookup maps sharing one state per flow."""

    def __init__(self, m: int = DEFAULT_M, delta_us: int = DEFAULT_DELTA_US, lan_config=None,
                 spec: FeatureSpec = FLOW_SPEC):
        if m < 1:
            raise ValueError("active timeout m must be >= 1")
        if delta_us < 0:
            raise ValueError("inactive timeout must be >= 0")
        self.m = m
        self.delta_us = delta_us
        self.spec = spec
        self.lan = [ipaddress.ip_network(c, strict=False) for c in (lan_config or [])]
        self.forward: dict[tuple, FlowState] = {}
        self.backward: dict[tuple, FlowState] = {}
        self.skipped = 0
        self.ingested = 0
        self.last_ts: int | None = None

    def __len__(self) -> int:
        return len(self.forward)

    def _in_lan(self, ip: int) -> bool:
        addr = ipaddress.ip_address(ip)
        return any(addr in net for net in self.lan)

    def _forward_key(self, pkt: PacketRecord) -> tuple:
        key = pkt.five_tuple
        if self.lan and not self._in_lan(pkt.src_ip) and self._in_lan(pkt.dst_ip):
            return reverse(key)
        return key

    def _drop(self, state: FlowState) -> None:
        del self.forward[state.key]
        del self.backward[reverse(state.key)]

    def _finalize(self, state: FlowState, reason: str) -> FinalizedFlow:
        self._drop(state)
        return finalize_flow(state, reason, self.spec)

    def ingest(self, pkt: PacketRecord) -> list[FinalizedFlow]:
        if pkt.proto not in SUPPORTED_PROTOS:
            self.skipped += 1
            return []
        if self.last_ts is not None and pkt.ts_us < self.last_ts:
            raise TraceError(f"timestamp {pkt.ts_us} goes backwards (previous {self.last_ts})")
        self.last_ts = pkt.ts_us
        out = []
        key = pkt.five_tuple
        state, direction = self.forward.get(key), "fwd"
        if state is None:
            state, direction = self.backward.get(key), "bwd"
        if state is not None and pkt.ts_us - state.banks["both"].t_last > self.delta_us:
            out.append(self._finalize(state, INACTIVE))
            state = None
        if state is None:
            fkey = self._forward_key(pkt)
            direction = "fwd" if fkey == key else "bwd"
            state = FlowState(fkey)
            self.forward[fkey] = state
            self.backward[reverse(fkey)] = state
        state.banks["both"].update(pkt.ts_us, pkt.length)
        state.banks[direction].update(pkt.ts_us, pkt.length)
        self.ingested += 1
        if state.packets >= self.m:
            out.append(self._finalize(state, ACTIVE))
        return out

    def flush(self) -> list[FinalizedFlow]:
        """Finalize every live flow; idle flows report the inactive reason."""
        out = []
        for state in list(self.forward.values()):
            idle = (self.last_ts is not None
                    and self.last_ts - state.banks["both"].t_last > self.delta_us)
            out.append(self._finalize(state, INACTIVE if idle else FLUSH))
        return out


def ingest_packet(table: FlowTable, pkt: PacketRecord) -> list[FinalizedFlow]:
    return table.ingest(pkt)


def segment(packets: Iterable[PacketRecord], m: int = DEFAULT_M, delta_us: int = DEFAULT_DELTA_US,
            lan_config=None) -> list[FinalizedFlow]:
    table = FlowTable(m, delta_us, lan_config)
    out = []
    for pkt in packets:
        out.extend(table.ingest(pkt))
    return out + table.flush()


@dataclass(frozen=True)
class Verdict:
    flow: FinalizedFlow
    action: str
    entry_id: int
    clause_id: int


def run_trace(program: TableProgram, packets: Iterable[PacketRecord], m: int | None = None,
              delta_us: int = DEFAULT_DELTA_US, lan_config=None) -> Iterator[Verdict]:
    table = FlowTable(program.m if m is None else m, delta_us, lan_config)

    def judge(flow: FinalizedFlow) -> Verdict:
        action, k = match_table(program, flow.int_key)
        cid = program.entries[k].clause_id if k != NO_MATCH else NO_MATCH
        return Verdict(flow, action, k, cid)

    for pkt in packets:
        for flow in table.ingest(pkt):
            yield judge(flow)
    for flow in table.flush():
        yield judge(flow)
    if table.skipped:
        log.info("skipped %d packets with unsupported protocols", table.skipped)


# ------------------------------------------------------------ trace files

def _ip(text: str) -> int:
    return int(ipaddress.IPv4Address(text.strip()))


def read_trace(path) -> Iterator[PacketRecord]:
    """Stream packets from a trace CSV; errors name the 1-based record number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise TraceError(f"record 0: expected header {','.join(TRACE_COLUMNS)}")
        for no, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                if len(row) != len(TRACE_COLUMNS):
                    raise ValueError(f"expected {len(TRACE_COLUMNS)} columns, got {len(row)}")
                pkt = PacketRecord(int(row[0]), _ip(row[1]), _ip(row[2]), int(row[3]), int(row[4]),
                                   int(row[5]), int(row[6]))
                if pkt.ts_us < 0 or not 0 <= pkt.src_port < 65536 or not 0 <= pkt.dst_port < 65536 \
                        or not 0 <= pkt.length <= U32_MAX:
                    raise ValueError("field out of range")
            except ValueError as exc:
                raise TraceError(f"record {no}: {exc}") from exc
            yield pkt


def write_trace(packets: Iterable[PacketRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for p in packets:
            w.writerow([p.ts_us, ipaddress.IPv4Address(p.src_ip), ipaddress.IPv4Address(p.dst_ip),
                        p.src_port, p.dst_port, p.proto, p.length])


VERDICT_COLUMNS = ("src_ip", "dst_ip", "src_port", "dst_port", "proto", "start_us", "packets",
                   "reason", "action", "entry_id", "clause_id") + tuple(f"feat_{n}" for n in FLOW_SPEC.names)


def write_verdicts(verdicts: Iterable[Verdict], path) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            f = v.flow
            s, d, sp, dp, p = f.key
            w.writerow([ipaddress.IPv4Address(s), ipaddress.IPv4Address(d), sp, dp, p, f.start_us,
                        f.packets, f.reason, v.action, v.entry_id, v.clause_id]
                       + [repr(x) for x in f.features])
            n += 1
    return n


def read_verdicts(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
