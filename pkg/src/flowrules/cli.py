"""Command-line entry point: ``flowrules <verb> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flowsim
from .dbe import DbeParams
from .debugger import exclude, patch, save_delta
from .features import FLOW_SPEC, raw_spec
from .harness.metrics import EvalReport, fidelity, robustness, tpr_tnr
from .harness.synth import (SHIFTED, UNIFORM, SyntheticSpec, gen_synthetic, load_labels, load_matrix,
                            write_synthetic)
from .interpreter import Normalizer, interpret, top_k
from .model_core import calibrate_threshold, load_model, save_model, train_gmm, train_iforest
from .rules import ANOMALY, BENIGN, classify_batch, extract_rules, load_ruleset, save_ruleset
from .sct import SctParams
from .table_compiler import DEFAULT_ENTRY_CAP, compile_ruleset, load_program, save_program

log = logging.getLogger("flowrules")


def load_features(path, m: int = flowsim.DEFAULT_M, delta_us: int = flowsim.DEFAULT_DELTA_US):
    """Feature matrix and names from a vector CSV or, if it is one, a packet trace."""
    with open(path) as fh:
        header = tuple(h.strip() for h in fh.readline().strip().split(","))
    if header == flowsim.TRACE_COLUMNS:
        flows = flowsim.segment(flowsim.read_trace(path), m, delta_us)
        X = np.array([f.features for f in flows], dtype=float).reshape(-1, FLOW_SPEC.dim)
        return X, list(FLOW_SPEC.names)
    return load_matrix(path)


def _threshold(model, override):
    phi = override if override is not None else model.threshold
    if phi is None:
        raise SystemExit("model has no calibrated threshold; pass --threshold")
    return phi


def _spec_for(rs, width: int):
    if tuple(rs.feature_names or ()) == FLOW_SPEC.names:
        return FLOW_SPEC
    return raw_spec(rs.dim, width, rs.feature_names)


def _out(path):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_train(a):
    X, _ = load_features(a.data)
    if a.model == "iforest":
        model = train_iforest(X, a.trees, a.subsample, a.seed)
    else:
        model = train_gmm(X, a.components, a.iterations, a.seed)
    model.threshold = calibrate_threshold(model, X, a.quantile)
    save_model(model, a.out)
    print(f"trained {a.model} on {len(X)} samples, threshold {model.threshold:.6g} -> {a.out}")


def _dbe_params(a) -> DbeParams:
    return DbeParams(n_explorers=a.explorers, n_aux=a.aux, rho=a.rho, eta=a.eta,
                     max_iters=a.max_iters, delta=a.delta, seed=a.seed)


def cmd_extract(a):
    model = load_model(a.model)
    X, names = load_features(a.data)
    rs = extract_rules(model, _threshold(model, a.threshold), X,
                       SctParams(max_depth=a.max_depth, epsilon=a.epsilon), _dbe_params(a), names)
    save_ruleset(rs, a.out)
    print(f"extracted {len(rs.clauses)} clauses from {len(rs.tree.leaves)} leaves -> {a.out}")


def cmd_compile(a):
    rs = load_ruleset(a.rules)
    prog = compile_ruleset(rs, _spec_for(rs, a.width), a.m, a.encoding, a.cap)
    save_program(prog, a.out)
    print(f"compiled {len(rs.clauses)} clauses into {len(prog.entries)} entries -> {a.out}")


def cmd_simulate(a):
    prog = load_program(a.program)
    verdicts = flowsim.run_trace(prog, flowsim.read_trace(a.trace), a.m, a.delta_us, a.lan)
    n = flowsim.write_verdicts(verdicts, a.out)
    print(f"{n} flow verdicts -> {a.out}")


def cmd_classify(a):
    rs = load_ruleset(a.rules)
    X, _ = load_features(a.features)
    benign, ids = classify_batch(rs, X)
    fh = _out(a.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["row", "decision", "clause_id"])
    for i, (b, cid) in enumerate(zip(benign, ids)):
        w.writerow([i, BENIGN if b else ANOMALY, int(cid)])
    if a.out:
        fh.close()


def _bound_str(clause, dim) -> str:
    iv = clause.interval(dim) if clause is not None else None
    if iv is None:
        return "*"
    left = "(" if iv.lo_open else "["
    return f"{left}{iv.lo:g}, {iv.hi:g}]"


def cmd_interpret(a):
    rs = load_ruleset(a.rules)
    X, _ = load_features(a.features)
    norm = Normalizer.from_ruleset(rs)
    names = rs.feature_names or [f"f{i}" for i in range(rs.dim)]
    benign, ids = classify_batch(rs, X)
    fh = _out(a.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["row", "decision", "clause_id", "rank", "feature", "value", "bound", "weight"])
    for i, (x, b, cid) in enumerate(zip(X, benign, ids)):
        iv = interpret(x, BENIGN if b else ANOMALY, int(cid), rs, norm)
        ref = rs.by_id(iv.reference_id) if iv.reference_id >= 0 else None
        for rank, (dim, weight) in enumerate(top_k(iv, a.topk), start=1):
            w.writerow([i, iv.decision, int(cid), rank, names[dim], f"{x[dim]:g}", _bound_str(ref, dim),
                        f"{weight:.6g}"])
    if a.out:
        fh.close()


def cmd_debug(a):
    rs = load_ruleset(a.rules)
    model = load_model(a.model)
    fps, _ = load_features(a.fps)
    if a.mode == "exclude":
        new, delta = exclude(rs, fps, a.margin)
    else:
        new, delta = patch(rs, fps, model, _threshold(model, a.threshold), _dbe_params(a))
    save_ruleset(new, a.out)
    if a.delta_out:
        save_delta(delta, a.delta_out)
    print(f"added {len(delta.added)} clauses touching leaves {list(delta.affected_leaves)} -> {a.out}")


def cmd_eval(a):
    rs = load_ruleset(a.rules)
    model = load_model(a.model)
    phi = _threshold(model, a.threshold)
    report = EvalReport(n_clauses=len(rs.clauses))
    if a.features:
        X, _ = load_features(a.features)
        report.fidelity = fidelity(rs, model, phi, X)
        report.robustness = robustness(rs, model, phi, X, a.sigma_frac, a.seed)
    if a.verdicts and a.labels:
        labels = load_labels(a.labels)
        rows = flowsim.read_verdicts(a.verdicts)
        keys = [(flowsim._ip(r["src_ip"]), flowsim._ip(r["dst_ip"]), int(r["src_port"]),
                 int(r["dst_port"]), int(r["proto"])) for r in rows]
        known = [k in labels for k in keys]
        flagged = [r["action"] == "set_anomalous" for r, ok in zip(rows, known) if ok]
        attack = [labels[k] == "attack" for k, ok in zip(keys, known) if ok]
        report.tpr, report.tnr = tpr_tnr(flagged, attack)
    if a.program:
        report.n_entries = len(load_program(a.program).entries)
    text = json.dumps(report.to_dict(), indent=1)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)


def cmd_synth(a):
    spec = SyntheticSpec(d=a.d, n_modes=a.modes, n_train=a.n_train, n_test=a.n_test,
                         n_anomaly=a.n_anomaly, anomaly=a.anomaly, seed=a.seed)
    data = gen_synthetic(spec, a.train_flows, a.test_flows, a.attack_flows)
    for p in write_synthetic(data, a.out):
        print(p)


def _add_dbe_flags(p, tolerance_flag: str = "--delta"):
    p.add_argument("--threshold", type=float, help="override the model's calibrated threshold")
    p.add_argument("--explorers", type=int, default=16)
    p.add_argument("--aux", type=int, default=8)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument(tolerance_flag, dest="delta", type=float, default=0.01,
                   help="contour tolerance as a fraction of the score range")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrules", description="Rule extraction toolkit for anomaly-based NIDS")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[seed], help="train a source model and calibrate its threshold")
    p.add_argument("--model", choices=["iforest", "gmm"], default="iforest")
    p.add_argument("--data", required=True)
    p.add_argument("--quantile", type=float, default=0.01)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--subsample", type=int, default=256)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[seed], help="extract a rule set from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.05)
    _add_dbe_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compile", parents=[seed], help="compile a rule set into a ternary table program")
    p.add_argument("--rules", required=True)
    p.add_argument("--m", type=int, default=flowsim.DEFAULT_M)
    p.add_argument("--width", type=int, default=16, help="key width for non-flow feature sets")
    p.add_argument("--encoding", choices=["staged", "direct"], default="staged")
    p.add_argument("--cap", type=int, default=DEFAULT_ENTRY_CAP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", parents=[seed], help="run a packet trace through a table program")
    p.add_argument("--program", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--m", type=int, help="active timeout (defaults to the program's m)")
    p.add_argument("--delta-us", type=int, default=flowsim.DEFAULT_DELTA_US)
    p.add_argument("--lan", nargs="*", help="LAN CIDRs; flows from them are forward")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", parents=[seed], help="classify feature vectors with a rule set")
    p.add_argument("--rules", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("interpret", parents=[seed], help="top-k feature importance per decision")
    p.add_argument("--rules", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("debug", parents=[seed], help="repair false positives with appended clauses")
    p.add_argument("--rules", required=True)
    p.add_argument("--fps", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", dest="delta_out", help="write the rule delta here")
    p.add_argument("--mode", choices=["auto", "exclude"], default="auto")
    p.add_argument("--margin", type=float, default=0.01)
    _add_dbe_flags(p, "--dbe-delta")
    p.set_defaults(func=cmd_debug)

    p = sub.add_parser("eval", parents=[seed], help="fidelity, robustness and detection rates")
    p.add_argument("--rules", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--features")
    p.add_argument("--sigma-frac", type=float, default=0.01)
    p.add_argument("--verdicts")
    p.add_argument("--labels")
    p.add_argument("--program")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[seed], help="generate synthetic vectors and packet traces")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--modes", type=int, default=3)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--n-anomaly", type=int, default=2000)
    p.add_argument("--anomaly", choices=[UNIFORM, SHIFTED], default=UNIFORM)
    p.add_argument("--train-flows", type=int, default=3000)
    p.add_argument("--test-flows", type=int, default=1500)
    p.add_argument("--attack-flows", type=int, default=500)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
