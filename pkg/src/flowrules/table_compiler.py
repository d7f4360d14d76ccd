"""Compile rule sets into priority-ordered ternary match-action programs.

Clause intervals are first quantised onto integer key fields.  Mean and
variance constraints cannot be matched directly (no division on a switch), so
they are expanded into one row per possible packet count M, comparing the sum
field against a pre-multiplied threshold ``M*v`` and the derived field
``M*SS - LS^2`` against ``M^2*v``.

Two encodings are supported:

``direct``
    every field range is split into a prefix cover and the per-field covers
    are cross-multiplied into entries.
``staged``
    each constrained field is first mapped by a per-field ternary table onto a
    thermometer code over its cut points; every clause row then needs exactly
    one ternary entry over the codes.
"""

from __future__ import annotations

import itertools
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .features import MEAN, RAW, VAR, FeatureSpec, KeyField
from .rules import NO_MATCH, Clause, RuleSet
from .sct import Interval

log = logging.getLogger(__name__)

SET_BENIGN = "set_benign"
SET_ANOMALOUS = "set_anomalous"

PROGRAM_MAGIC = "flowrules-program"
PROGRAM_VERSION = 1
DEFAULT_ENTRY_CAP = 50_000


class CompileError(ValueError):
    pass


class ProgramParseError(ValueError):
    pass


# ------------------------------------------------------------ integer bounds

def _float_div(n: int, denom: int) -> float:
    return n / denom


def max_leq(v: float, denom: int = 1, faithful: bool = True) -> int:
    """Largest integer n with n/denom <= v.

    With ``faithful`` the comparison is made on the correctly rounded float
    n/denom, which is what a classifier working on the real-valued view sees.
    Otherwise it is the exact rational comparison, i.e. floor(denom*v).
    """
    n = math.floor(Fraction(v) * denom)
    if not faithful:
        return n
    if _float_div(n + 1, denom) > v:
        return n
    step = 1
    while _float_div(n + step, denom) <= v:
        step *= 2
    lo, hi = n + step // 2, n + step
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _float_div(mid, denom) <= v:
            lo = mid
        else:
            hi = mid
    return lo


def min_geq(v: float, denom: int = 1, faithful: bool = True) -> int:
    """Smallest integer n with n/denom >= v."""
    n = math.ceil(Fraction(v) * denom)
    if not faithful:
        return n
    if _float_div(n - 1, denom) < v:
        return n
    step = 1
    while _float_div(n - step, denom) >= v:
        step *= 2
    lo, hi = n - step, n - step // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _float_div(mid, denom) >= v:
            hi = mid
        else:
            lo = mid
    return hi


def quantize_interval(iv: Interval, width: int, denom: int = 1,
                      faithful: bool = True) -> tuple[int, int] | None:
    """Integer range of n in [0, 2^width) whose value n/denom satisfies ``iv``."""
    top = (1 << width) - 1
    lo = 0
    if iv.lo != -math.inf:
        lo = max_leq(iv.lo, denom, faithful) + 1 if iv.lo_open else min_geq(iv.lo, denom, faithful)
    hi = top if iv.hi == math.inf else max_leq(iv.hi, denom, faithful)
    lo, hi = max(lo, 0), min(hi, top)
    return (lo, hi) if lo <= hi else None


def quantize_clause(clause: Clause, spec: FeatureSpec, faithful: bool = True):
    """Raw-feature ranges of ``clause`` on integer key fields.

    Returns ``{field name: (lo, hi)}`` or None when some range quantises to
    nothing.  Derived (mean/var) features are left to ``expand_statistic``.
    """
    out: dict[str, tuple[int, int]] = {}
    for dim, iv in clause.bounds:
        feat = spec.features[dim]
        if feat.kind != RAW:
            continue
        key = feat.keys[0]
        rng = quantize_interval(iv, spec.field(key).width, 1, faithful)
        if rng is None:
            return None
        if key in out:
            a, b = out[key]
            rng = (max(a, rng[0]), min(b, rng[1]))
            if rng[0] > rng[1]:
                return None
        out[key] = rng
    return out


@dataclass(frozen=True)
class StatRow:
    count: int
    # None: the constraint holds unconditionally for this count
    bounds: tuple[int, int] | None


def expand_statistic(kind: str, iv: Interval, m: int, width: int = 128,
                     faithful: bool = False) -> list[StatRow]:
    """Per-count integer form of a mean or variance constraint.

    For count M the mean test ``LS/M in iv`` becomes ``LS in [lo, hi]`` with
    pre-multiplied bounds; the variance test ``D/M^2 in iv`` becomes
    ``D in [lo, hi]`` with ``D = M*SS - LS^2``.  For M = 0 the feature is the
    constant 0, so the row is kept unconstrained or dropped.
    """
    if kind not in (MEAN, VAR):
        raise ValueError(f"not a derived statistic: {kind}")
    if m < 1:
        raise ValueError("m must be >= 1")
    rows = []
    if iv.contains(0.0):
        rows.append(StatRow(0, None))
    for M in range(1, m + 1):
        denom = M if kind == MEAN else M * M
        rng = quantize_interval(iv, width, denom, faithful)
        if rng is not None:
            rows.append(StatRow(M, rng))
    return rows


def mean_holds(ls: int, M: int, v: float, op: str) -> bool:
    """Division-free mean test ``LS/M op v`` with op in {'<=', '>'}."""
    t = max_leq(v, M, faithful=False)
    return ls <= t if op == "<=" else ls >= t + 1


def var_holds(ls: int, ss: int, M: int, v: float, op: str) -> bool:
    """Division-free variance test ``SS/M - (LS/M)^2 op v``."""
    t = max_leq(v, M * M, faithful=False)
    d = M * ss - ls * ls
    return d <= t if op == "<=" else d >= t + 1


# ------------------------------------------------------------ ternary ranges

def range_to_ternary(lo: int, hi: int, width: int) -> list[tuple[int, int]]:
    """Minimal prefix cover of [lo, hi] as (value, mask) pairs."""
    full = (1 << width) - 1
    if not 0 <= lo <= hi <= full:
        raise ValueError(f"bad range [{lo}, {hi}] for width {width}")
    out = []
    while lo <= hi:
        size = (lo & -lo) if lo else 1 << width
        while lo + size - 1 > hi:
            size >>= 1
        out.append((lo, full & ~(size - 1)))
        lo += size
    return out


def ternary_match(x: int, value: int, mask: int) -> bool:
    return (x & mask) == value


# ------------------------------------------------------------ program model

@dataclass(frozen=True)
class TernaryEntry:
    # one (value, mask) per match field; mask 0 is a wildcard
    fields: tuple[tuple[int, int], ...]
    priority: int
    action: str
    clause_id: int

    def __post_init__(self):
        for value, mask in self.fields:
            if value & ~mask:
                raise ValueError("ternary value has bits outside its mask")


@dataclass(frozen=True)
class CodeTable:
    """Maps one key field onto a thermometer code over its cut points."""

    field: str
    width: int
    cuts: tuple[int, ...]
    entries: tuple[tuple[int, int, int], ...]  # (value, mask, code)

    @property
    def code_width(self) -> int:
        return max(len(self.cuts), 1)

    def lookup(self, x: int) -> int:
        return (1 << bisect_right(self.cuts, x)) - 1

    def lookup_ternary(self, x: int) -> int:
        for value, mask, code in self.entries:
            if x & mask == value:
                return code
        raise LookupError(f"no code table entry for {x}")


def build_code_table(name: str, width: int, cuts) -> CodeTable:
    cuts = tuple(sorted(set(c for c in cuts if 0 < c <= (1 << width) - 1)))
    edges = (0,) + cuts + (1 << width,)
    entries = []
    for j in range(len(edges) - 1):
        code = (1 << j) - 1
        for value, mask in range_to_ternary(edges[j], edges[j + 1] - 1, width):
            entries.append((value, mask, code))
    return CodeTable(name, width, cuts, tuple(entries))


@dataclass
class TableProgram:
    layout: tuple[KeyField, ...]
    match_fields: tuple[str, ...]
    entries: list[TernaryEntry]
    m: int
    encoding: str = "staged"
    code_tables: dict[str, CodeTable] = field(default_factory=dict)
    default_action: str = SET_ANOMALOUS
    spec_name: str = ""

    def match_key(self, key) -> list[int]:
        idx = {f.name: i for i, f in enumerate(self.layout)}
        if self.encoding == "direct":
            return [int(key[idx[n]]) for n in self.match_fields]
        return [self.code_tables[n].lookup(int(key[idx[n]])) for n in self.match_fields]


def match_table(program: TableProgram, key) -> tuple[str, int]:
    """First (highest-priority) matching entry: (action, entry index) or the default."""
    if len(key) != len(program.layout):
        raise ValueError(f"key has {len(key)} fields, layout has {len(program.layout)}")
    probe = program.match_key(key)
    for k, entry in enumerate(program.entries):
        if all((x & mask) == value for x, (value, mask) in zip(probe, entry.fields)):
            return entry.action, k
    return program.default_action, NO_MATCH


def match_clause(program: TableProgram, key) -> tuple[str, int]:
    action, k = match_table(program, key)
    return action, (program.entries[k].clause_id if k != NO_MATCH else NO_MATCH)


# ------------------------------------------------------------ compilation

def _clause_rows(clause: Clause, spec: FeatureSpec, m: int, cap: int):
    """Integer conjunctions (field -> range) realising one clause."""
    base = quantize_clause(clause, spec)
    if base is None:
        return []
    derived: dict[str, list[tuple[str, Interval, str]]] = {}
    for dim, iv in clause.bounds:
        feat = spec.features[dim]
        if feat.derived:
            count_key, value_key = feat.keys
            derived.setdefault(count_key, []).append((feat.kind, iv, value_key))

    per_count_key = []
    for count_key, constraints in sorted(derived.items()):
        width = spec.field(count_key).width
        lo, hi = base.get(count_key, (0, (1 << width) - 1))
        options = []
        for M in range(max(lo, 0), min(hi, m) + 1):
            ranges: dict[str, tuple[int, int]] = {count_key: (M, M)}
            ok = True
            for kind, iv, value_key in constraints:
                vw = spec.field(value_key).width
                if M == 0:
                    if not iv.contains(0.0):
                        ok = False
                        break
                    continue
                denom = M if kind == MEAN else M * M
                rng = quantize_interval(iv, vw, denom, faithful=True)
                if rng is None:
                    ok = False
                    break
                if value_key in ranges:
                    a, b = ranges[value_key]
                    rng = (max(a, rng[0]), min(b, rng[1]))
                    if rng[0] > rng[1]:
                        ok = False
                        break
                ranges[value_key] = rng
            if ok:
                options.append(ranges)
        per_count_key.append(options)

    n_rows = math.prod(len(o) for o in per_count_key) if per_count_key else 1
    if n_rows > cap:
        raise CompileError(f"clause {clause.id} expands to {n_rows} count rows (cap {cap})")
    rows = []
    for combo in itertools.product(*per_count_key):
        row = dict(base)
        for part in combo:
            row.update(part)
        rows.append(row)
    return rows


def compile_ruleset(ruleset: RuleSet, spec: FeatureSpec, m: int = 16, encoding: str = "staged",
                    cap: int = DEFAULT_ENTRY_CAP) -> TableProgram:
    if ruleset.dim != spec.dim:
        raise CompileError(f"rule set has {ruleset.dim} features, spec {spec.name} has {spec.dim}")
    if encoding not in ("staged", "direct"):
        raise ValueError(f"unknown encoding {encoding!r}")
    clause_rows = []
    total = 0
    for clause in ruleset.ordered():
        rows = _clause_rows(clause, spec, m, cap)
        if not rows:
            log.warning("clause %d is empty on the integer domain; dropped", clause.id)
        total += len(rows)
        if total > cap:
            raise CompileError(f"entry cap {cap} exceeded at clause {clause.id}")
        clause_rows.append((clause, rows))

    used = sorted({name for _, rows in clause_rows for row in rows for name in row},
                  key=spec.field_index)
    code_tables: dict[str, CodeTable] = {}
    if encoding == "staged":
        for name in used:
            cuts = set()
            for _, rows in clause_rows:
                for row in rows:
                    if name in row:
                        cuts.update((row[name][0], row[name][1] + 1))
            code_tables[name] = build_code_table(name, spec.field(name).width, cuts)

    flat: list[tuple[Clause, list[list[tuple[int, int]]]]] = []
    for clause, rows in clause_rows:
        for row in rows:
            per_field = []
            for name in used:
                if name not in row:
                    per_field.append([(0, 0)])
                elif encoding == "direct":
                    per_field.append(range_to_ternary(*row[name], spec.field(name).width))
                else:
                    per_field.append([_code_match(code_tables[name], *row[name])])
            flat.append((clause, per_field))

    n_entries = sum(math.prod(len(f) for f in per) for _, per in flat)
    if n_entries > cap:
        worst = max(flat, key=lambda cp: math.prod(len(f) for f in cp[1]))[0]
        raise CompileError(f"program needs {n_entries} entries (cap {cap}); "
                           f"largest contributor is clause {worst.id}")
    entries = []
    for clause, per_field in flat:
        action = SET_BENIGN if clause.benign else SET_ANOMALOUS
        for combo in itertools.product(*per_field):
            entries.append(TernaryEntry(tuple(combo), 0, action, clause.id))
    n = len(entries)
    entries = [TernaryEntry(e.fields, n - k, e.action, e.clause_id) for k, e in enumerate(entries)]
    return TableProgram(layout=spec.layout, match_fields=tuple(used), entries=entries, m=m,
                        encoding=encoding, code_tables=code_tables, spec_name=spec.name)


def _code_match(table: CodeTable, lo: int, hi: int) -> tuple[int, int]:
    """Ternary (value, mask) over a thermometer code selecting [lo, hi]."""
    s = bisect_right(table.cuts, lo)  # code index of lo
    t = bisect_right(table.cuts, hi)  # code index of hi
    value = mask = 0
    if s >= 1:
        value |= 1 << (s - 1)
        mask |= 1 << (s - 1)
    if t < len(table.cuts):
        mask |= 1 << t
    return value, mask


# ------------------------------------------------------------ program file

def _hex(v: int) -> str:
    return format(v, "x")


def dumps_program(p: TableProgram) -> str:
    lines = [f"{PROGRAM_MAGIC} {PROGRAM_VERSION}",
             f"spec {p.spec_name or '-'}",
             f"encoding {p.encoding}",
             f"m {p.m}",
             f"default {p.default_action}"]
    for f in p.layout:
        lines.append(f"field {f.name} {f.width}")
    lines.append("match " + " ".join(p.match_fields))
    for name in p.match_fields:
        if name in p.code_tables:
            ct = p.code_tables[name]
            lines.append(f"codetable {name} {ct.width} cuts " + " ".join(_hex(c) for c in ct.cuts))
            for value, mask, code in ct.entries:
                lines.append(f"  code {_hex(value)}/{_hex(mask)} {_hex(code)}")
    for e in p.entries:
        cells = " ".join("*" if mask == 0 else f"{_hex(v)}/{_hex(mask)}" for v, mask in e.fields)
        lines.append(f"entry {e.priority} {e.action} {e.clause_id} {cells}".rstrip())
    return "\n".join(lines) + "\n"


def loads_program(text: str) -> TableProgram:
    layout, match_fields, entries = [], (), []
    code_tables: dict[str, CodeTable] = {}
    header = {}
    current = None
    lines = text.splitlines()
    if not lines or lines[0].split() != [PROGRAM_MAGIC, str(PROGRAM_VERSION)]:
        raise ProgramParseError("line 1: not a flowrules program (bad magic or version)")
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            tag = parts[0]
            if tag in ("spec", "encoding", "m", "default"):
                header[tag] = parts[1]
            elif tag == "field":
                layout.append(KeyField(parts[1], int(parts[2])))
            elif tag == "match":
                match_fields = tuple(parts[1:])
            elif tag == "codetable":
                current = (parts[1], int(parts[2]), tuple(int(c, 16) for c in parts[4:]), [])
                code_tables[parts[1]] = current
            elif tag == "code":
                v, mk = (int(s, 16) for s in parts[1].split("/"))
                current[3].append((v, mk, int(parts[2], 16)))
            elif tag == "entry":
                cells = []
                for cell in parts[4:]:
                    if cell == "*":
                        cells.append((0, 0))
                    else:
                        v, mk = (int(s, 16) for s in cell.split("/"))
                        cells.append((v, mk))
                if len(cells) != len(match_fields):
                    raise ValueError(f"expected {len(match_fields)} match cells, got {len(cells)}")
                entries.append(TernaryEntry(tuple(cells), int(parts[1]), parts[2], int(parts[3])))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, IndexError, TypeError) as exc:
            raise ProgramParseError(f"line {no}: {exc}") from exc
    return TableProgram(
        layout=tuple(layout), match_fields=match_fields, entries=entries, m=int(header["m"]),
        encoding=header["encoding"],
        code_tables={k: CodeTable(k, w, cuts, tuple(es)) for k, (_, w, cuts, es) in code_tables.items()},
        default_action=header["default"],
        spec_name="" if header.get("spec") == "-" else header.get("spec", ""))


def save_program(p: TableProgram, path) -> None:
    Path(path).write_text(dumps_program(p))


def load_program(path) -> TableProgram:
    return loads_program(Path(path).read_text())
