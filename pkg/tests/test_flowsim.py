import ipaddress
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrules.features import FLOW_SPEC
from flowrules.flowsim import (ACTIVE, FLUSH, INACTIVE, TCP, UDP, FlowState, FlowTable, PacketRecord, TraceError,
                               finalize_flow, read_trace, read_verdicts, run_trace, segment, write_trace,
                               write_verdicts)
from flowrules.harness.synth import gen_flows, recipes_to_trace
from flowrules.model_core import ContractError
from flowrules.rules import BENIGN_HYPERCUBE, PRIORITY, Clause, RuleSet
from flowrules.sct import Interval
from flowrules.table_compiler import SET_ANOMALOUS, SET_BENIGN, compile_ruleset

A = int(ipaddress.IPv4Address("10.0.0.1"))
B = int(ipaddress.IPv4Address("192.168.1.9"))


def fwd(ts, size, sport=1234, dport=80, proto=TCP):
    return PacketRecord(ts, A, B, sport, dport, proto, size)


def bwd(ts, size, sport=1234, dport=80, proto=TCP):
    return PacketRecord(ts, B, A, dport, sport, proto, size)


def feats(flow):
    return dict(zip(FLOW_SPEC.names, flow.features))


def reg(flow, name):
    return flow.int_key[FLOW_SPEC.field_index(name)]


def test_three_packet_registers():
    (flow,) = segment([fwd(0, 100), bwd(10, 200), fwd(40, 300)])
    assert flow.reason == FLUSH and flow.packets == 3 and flow.key == (A, B, 1234, 80, TCP)
    assert [reg(flow, f"{s}_both") for s in ("count", "size_ls", "size_ss", "iat_ls", "iat_ss")] == \
        [3, 600, 140000, 40, 1000]
    assert [reg(flow, f"{s}_fwd") for s in ("count", "size_ls", "iat_ls", "iat_max", "iat_min")] == \
        [2, 400, 40, 40, 40]
    f = feats(flow)
    assert f["duration_us"] == 40
    assert f["size_mean_both"] == 200.0
    assert f["size_var_both"] == (3 * 140000 - 600 ** 2) / 9
    assert f["iat_mean_both"] == 40 / 3
    assert (f["iat_max_both"], f["iat_min_both"]) == (30, 10)
    assert (f["size_max_bwd"], f["size_min_bwd"], f["iat_max_bwd"]) == (200, 200, 0)


def test_active_timeout_includes_the_triggering_packet():
    flows = segment([fwd(t, 60) for t in range(5)], m=2)
    assert [(f.packets, f.reason) for f in flows] == [(2, ACTIVE), (2, ACTIVE), (1, FLUSH)]


def test_inactive_timeout():
    flows = segment([fwd(0, 60), fwd(500, 60), fwd(2000, 60)], delta_us=1000)
    assert [(f.packets, f.reason, f.start_us) for f in flows] == [(2, INACTIVE, 0), (1, FLUSH, 2000)]


def test_idle_flow_reports_inactive_on_flush():
    flows = segment([fwd(0, 60), fwd(5000, 60, sport=9)], delta_us=1000)
    assert sorted(f.reason for f in flows) == [FLUSH, INACTIVE]


def test_gap_equal_to_delta_keeps_the_flow():
    assert len(segment([fwd(0, 60), fwd(1000, 60)], delta_us=1000)) == 1


def test_empty_and_single_packet():
    assert segment([]) == []
    (flow,) = segment([fwd(7, 99)])
    assert flow.reason == FLUSH and flow.packets == 1
    f = feats(flow)
    assert f["size_mean_fwd"] == 99.0 and f["size_var_fwd"] == 0.0 and f["iat_mean_fwd"] == 0.0


def test_backward_only_direction_features_are_zero():
    (flow,) = segment([fwd(0, 60), fwd(10, 70)])
    f = feats(flow)
    assert all(f[f"{s}_bwd"] == 0 for s in ("pkt_count", "size_mean", "size_var", "size_max", "iat_mean"))


def test_unsupported_protocol_is_skipped():
    table = FlowTable()
    assert table.ingest(fwd(0, 60, proto=1)) == []
    table.ingest(fwd(1, 60, proto=UDP))
    assert table.skipped == 1 and table.ingested == 1 and len(table) == 1


def test_backwards_timestamp_is_an_error():
    table = FlowTable()
    table.ingest(fwd(10, 60))
    with pytest.raises(TraceError):
        table.ingest(fwd(9, 60))


def test_empty_flow_cannot_be_finalized():
    with pytest.raises(ContractError):
        finalize_flow(FlowState((A, B, 1, 2, TCP)))


def test_bad_parameters():
    with pytest.raises(ValueError):
        FlowTable(m=0)
    with pytest.raises(ValueError):
        FlowTable(delta_us=-1)


def test_lan_config_orients_flows_from_the_inside():
    (flow,) = segment([bwd(0, 60), fwd(5, 60)], lan_config=["10.0.0.0/8"])
    assert flow.key == (A, B, 1234, 80, TCP)
    assert reg(flow, "count_fwd") == 1 and feats(flow)["dst_port"] == 80
    (flow,) = segment([bwd(0, 60), fwd(5, 60)])
    assert flow.key == (B, A, 80, 1234, TCP)


def test_trace_round_trip_and_errors(tmp_path):
    pkts = [fwd(0, 60), bwd(3, 70, dport=53, proto=UDP)]
    path = tmp_path / "t.csv"
    write_trace(pkts, path)
    assert list(read_trace(path)) == pkts
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + ["5,10.0.0.1,10.0.0.2,1,2,6,oops"]) + "\n")
    with pytest.raises(TraceError, match="record 3"):
        list(read_trace(path))
    path.write_text("a,b\n")
    with pytest.raises(TraceError, match="record 0"):
        list(read_trace(path))


# ------------------------------------------------------------ offline oracle

def naive_features(packets, fwd_of):
    """Features recomputed from a packet list with exact arithmetic."""
    out = {"l4_proto": packets[0].proto, "dst_port": packets[0].dst_port,
           "duration_us": packets[-1].ts_us - packets[0].ts_us}
    for d, sel in (("fwd", fwd_of), ("bwd", lambda p: not fwd_of(p)), ("both", lambda p: True)):
        ps = [p for p in packets if sel(p)]
        M = len(ps)
        sizes = [p.length for p in ps]
        gaps = [b.ts_us - a.ts_us for a, b in zip(ps, ps[1:])]
        out[f"pkt_count_{d}"] = M
        for stat, xs in (("size", sizes), ("iat", gaps)):
            out[f"{stat}_max_{d}"] = max(xs, default=0)
            out[f"{stat}_min_{d}"] = min(xs, default=0)
            if M == 0:
                out[f"{stat}_mean_{d}"] = out[f"{stat}_var_{d}"] = 0.0
                continue
            out[f"{stat}_mean_{d}"] = float(Fraction(sum(xs), M))
            out[f"{stat}_var_{d}"] = float(Fraction(sum(x * x for x in xs), M) - Fraction(sum(xs), M) ** 2)
    return out


flow_packets = st.lists(st.tuples(st.integers(0, 10**6), st.booleans(), st.integers(40, 1500)),
                        min_size=1, max_size=16)


@settings(max_examples=1000, deadline=None)
@given(flow_packets)
def test_features_match_offline_recomputation(raw):
    t = 0
    pkts = []
    for gap, is_fwd, size in raw:
        t += gap
        pkts.append(fwd(t, size) if is_fwd else bwd(t, size))
    flows = segment(pkts, m=16, delta_us=10**9)
    assert len(flows) == 1
    first = pkts[0]
    want = naive_features(pkts, lambda p: p.src_ip == first.src_ip)
    got = feats(flows[0])
    assert got == pytest.approx(want, rel=1e-12, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(0, 3), st.booleans()), max_size=80),
       st.integers(1, 6), st.integers(0, 2000))
def test_segmentation_invariants(raw, m, delta):
    t = 0
    pkts = []
    for gap, port, is_fwd in raw:
        t += gap
        pkts.append(fwd(t, 100, sport=port) if is_fwd else bwd(t, 100, sport=port))
    flows = segment(pkts, m=m, delta_us=delta)
    assert sum(f.packets for f in flows) == len(pkts)
    for f in flows:
        assert 1 <= f.packets <= m
        assert feats(f)["iat_max_both"] <= delta
        assert f.reason != ACTIVE or f.packets == m


def test_recipes_produce_their_intended_registers():
    recipes = gen_flows(300, 60, seed=5)
    flows = {f.key: f for f in segment(recipes_to_trace(recipes), m=16, delta_us=10**9)}
    assert len(flows) == len(recipes)
    for r in recipes:
        flow = flows[r.key]
        for d, want in r.intended().items():
            assert reg(flow, f"count_{d}") == want["count"]
            assert reg(flow, f"size_ls_{d}") == want["size_ls"]
            assert reg(flow, f"size_ss_{d}") == want["size_ss"]


def test_run_trace_and_verdict_file(tmp_path):
    d = FLOW_SPEC.names.index("dst_port")
    rs = RuleSet((Clause(0, BENIGN_HYPERCUBE, 0, PRIORITY[BENIGN_HYPERCUBE],
                         ((d, Interval(hi=100.0)),)),), FLOW_SPEC.dim, FLOW_SPEC.names)
    prog = compile_ruleset(rs, FLOW_SPEC)
    pkts = [fwd(0, 60), fwd(1, 60, sport=7, dport=443), bwd(2, 80)]
    verdicts = list(run_trace(prog, pkts))
    assert {v.flow.key[3]: v.action for v in verdicts} == {80: SET_BENIGN, 443: SET_ANOMALOUS}
    assert {v.flow.key[3]: v.clause_id for v in verdicts} == {80: 0, 443: -1}
    path = tmp_path / "v.csv"
    assert write_verdicts(verdicts, path) == 2
    rows = read_verdicts(path)
    assert [r["action"] for r in rows] == [v.action for v in verdicts]
    assert [float(r["feat_size_mean_both"]) for r in rows] == [v.flow.features[FLOW_SPEC.names.index(
        "size_mean_both")] for v in verdicts]
