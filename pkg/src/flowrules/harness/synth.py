"""Synthetic workloads: mixture vectors and labelled packet traces.

Vector data is a Gaussian mixture over unsigned 16-bit integer features, so
rule sets extracted from it compile against ``raw_spec(d, 16)``.  Packet
traces are built from per-flow recipes (benign services and a few attack
patterns); each recipe remembers the registers it is meant to produce.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..flowsim import TCP, UDP, PacketRecord, write_trace

log = logging.getLogger(__name__)

UNIFORM = "uniform-background"
SHIFTED = "shifted-cluster"
ATTACK = "attack"
BENIGN = "benign"

U16_MAX = 65535


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 8
    n_modes: int = 3
    n_train: int = 5000
    n_test: int = 2000
    n_anomaly: int = 2000
    anomaly: str = UNIFORM
    shift_sigma: float = 10.0
    seed: int = 0
    means: tuple | None = None
    stds: tuple | None = None
    weights: tuple | None = None

    def __post_init__(self):
        if min(self.d, self.n_modes, self.n_train, self.n_test, self.n_anomaly) < 1:
            raise ValueError("dimensions, modes and sizes must be >= 1")
        if self.anomaly not in (UNIFORM, SHIFTED):
            raise ValueError(f"unknown anomaly generator {self.anomaly!r}")
        if self.weights is not None and not np.isclose(sum(self.weights), 1.0):
            raise ValueError("mixture weights must sum to 1")

    def mixture(self):
        """(means, stds, weights), drawing any unset part from the seed."""
        rng = np.random.default_rng([self.seed, 1])
        k, d = self.n_modes, self.d
        means = np.asarray(self.means, float) if self.means is not None else rng.uniform(10000, 55000, (k, d))
        stds = np.asarray(self.stds, float) if self.stds is not None else rng.uniform(500, 2000, (k, d))
        weights = np.asarray(self.weights, float) if self.weights is not None else np.full(k, 1.0 / k)
        if means.shape != (k, d) or stds.shape != (k, d) or weights.shape != (k,):
            raise ValueError("mixture parameter shapes do not match (n_modes, d)")
        return means, stds, weights


def _draw_mixture(n, means, stds, weights, rng) -> np.ndarray:
    out = np.empty((0, means.shape[1]))
    rejected = 0
    while len(out) < n:
        k = rng.choice(len(weights), n - len(out), p=weights)
        X = np.rint(means[k] + rng.standard_normal((len(k), means.shape[1])) * stds[k])
        ok = ((X >= 0) & (X <= U16_MAX)).all(axis=1)
        rejected += int((~ok).sum())
        out = np.vstack([out, X[ok]])
    if rejected:
        log.warning("resampled %d vectors outside the 16-bit feature domain", rejected)
    return out


@dataclass
class SyntheticData:
    train: np.ndarray
    test: np.ndarray
    anomalies: np.ndarray
    trace_train: list[PacketRecord] = field(default_factory=list)
    trace_test: list[PacketRecord] = field(default_factory=list)
    labels_test: dict = field(default_factory=dict)


def gen_vectors(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means, stds, weights = spec.mixture()
    rng = np.random.default_rng([spec.seed, 2])
    train = _draw_mixture(spec.n_train, means, stds, weights, rng)
    test = _draw_mixture(spec.n_test, means, stds, weights, rng)
    if spec.anomaly == UNIFORM:
        anomalies = rng.integers(0, U16_MAX + 1, (spec.n_anomaly, spec.d)).astype(float)
    else:
        j = int(rng.integers(len(weights)))
        # push away from the nearer domain edge, Mahalanobis distance shift_sigma
        sign = np.where(means[j] < U16_MAX / 2, 1.0, -1.0)
        centre = means[j] + sign * spec.shift_sigma * stds[j] / np.sqrt(spec.d)
        anomalies = _draw_mixture(spec.n_anomaly, centre[None, :], stds[j][None, :], np.ones(1), rng)
    return train, test, anomalies


def gen_drift_fps(spec: SyntheticSpec, is_flagged, n: int = 50, seed: int = 0,
                  spread: float = 0.25) -> np.ndarray:
    """Benign drift samples that a detector flags: operator-style false positives.

    A new tight benign cluster is placed a few stds away from one mixture mode
    along one axis; the first placement for which ``is_flagged`` rejects at
    least ``n`` draws is used, and ``n`` flagged draws are returned.
    """
    means, stds, _ = spec.mixture()
    rng = np.random.default_rng([spec.seed, seed, 4])
    placements = [(k, j, s) for s in (3.0, 4.0, 5.0, 6.0)
                  for k in rng.permutation(len(means)) for j in rng.permutation(spec.d)]
    for k, j, shift in placements:
        centre = means[k].copy()
        centre[j] += shift * stds[k][j] * (1.0 if centre[j] < U16_MAX / 2 else -1.0)
        X = _draw_mixture(20 * n, centre[None, :], spread * stds[k][None, :], np.ones(1), rng)
        flagged = X[np.asarray(is_flagged(X), dtype=bool)]
        if len(flagged) >= n:
            return flagged[:n]
    raise RuntimeError("no drift placement produced enough flagged samples")


# ------------------------------------------------------------ flow recipes

@dataclass
class FlowRecipe:
    kind: str
    label: str
    key: tuple[int, int, int, int, int]
    # (timestamp, is_forward, size)
    packets: list[tuple[int, bool, int]]

    def intended(self) -> dict[str, dict[str, int]]:
        """Count, size sum and size square-sum each direction should end up with."""
        out = {}
        for d, sel in (("fwd", lambda f: f), ("bwd", lambda f: not f), ("both", lambda f: True)):
            sizes = [s for _, f, s in self.packets if sel(f)]
            out[d] = {"count": len(sizes), "size_ls": sum(sizes), "size_ss": sum(s * s for s in sizes)}
        return out

    def records(self) -> list[PacketRecord]:
        s, d, sp, dp, p = self.key
        return [PacketRecord(t, s, d, sp, dp, p, size) if fwd else PacketRecord(t, d, s, dp, sp, p, size)
                for t, fwd, size in self.packets]


def _series(rng, n, iat_lo, iat_hi) -> list[int]:
    gaps = rng.integers(iat_lo, iat_hi + 1, max(n - 1, 0))
    return [0] + list(np.cumsum(gaps).astype(int))


def _web(rng):
    rounds = int(rng.integers(2, 7))
    dirs = [True, False] * rounds
    sizes = [int(rng.integers(80, 601)) if f else int(rng.integers(600, 1501)) for f in dirs]
    return TCP, 443, dirs, sizes, _series(rng, len(dirs), 200, 20000)


def _dns(rng):
    return UDP, 53, [True, False], [int(rng.integers(60, 91)), int(rng.integers(90, 401))], \
        _series(rng, 2, 500, 5000)


def _ssh(rng):
    n = int(rng.integers(6, 15))
    dirs = [bool(v) for v in rng.integers(0, 2, n)]
    dirs[0] = True
    return TCP, 22, dirs, [int(v) for v in rng.integers(60, 201, n)], _series(rng, n, 20000, 300000)


def _bulk(rng):
    dirs = [True] + [bool(i % 4 == 0) for i in range(1, 16)]
    sizes = [60 if f else int(rng.integers(1400, 1501)) for f in dirs]
    return TCP, 8080, dirs, sizes, _series(rng, 16, 100, 2000)


def _scan(rng):
    n = int(rng.integers(1, 3))
    return TCP, int(rng.integers(1, 1025)), [True] * n, [int(v) for v in rng.integers(40, 61, n)], \
        _series(rng, n, 1, 50)


def _flood(rng):
    return UDP, 80, [True] * 16, [int(v) for v in rng.integers(1000, 1401, 16)], _series(rng, 16, 5, 50)


def _exfil(rng):
    return TCP, 443, [True] * 16, [int(v) for v in rng.integers(1400, 1501, 16)], _series(rng, 16, 50, 400)


BENIGN_SERVICES = {"web": (_web, 0.45), "dns": (_dns, 0.25), "ssh": (_ssh, 0.15), "bulk": (_bulk, 0.15)}
ATTACKS = {"scan": _scan, "flood": _flood, "exfil": _exfil}


def gen_flows(n_benign: int, n_attack: int = 0, seed: int = 0, mean_gap_us: int = 2000) -> list[FlowRecipe]:
    """Recipes with unique 5-tuples and no more than 16 packets each."""
    rng = np.random.default_rng([seed, 3])
    kinds = [BENIGN] * n_benign + [ATTACK] * n_attack
    rng.shuffle(kinds)
    names = list(BENIGN_SERVICES)
    probs = np.array([BENIGN_SERVICES[n][1] for n in names])
    attacks = list(ATTACKS)
    client_base = int(ipaddress.IPv4Address("10.0.0.0"))
    server_base = int(ipaddress.IPv4Address("192.168.1.0"))
    attacker = int(ipaddress.IPv4Address("172.16.0.66"))
    start = 0
    recipes = []
    for i, label in enumerate(kinds):
        start += int(rng.exponential(mean_gap_us)) + 1
        if label == BENIGN:
            kind = names[rng.choice(len(names), p=probs)]
            proto, port, dirs, sizes, times = BENIGN_SERVICES[kind][0](rng)
            src = client_base + 1 + int(rng.integers(0, 250))
        else:
            kind = attacks[int(rng.integers(len(attacks)))]
            proto, port, dirs, sizes, times = ATTACKS[kind](rng)
            src = attacker
        key = (src, server_base + 1 + int(rng.integers(0, 20)), 20000 + i % 40000, port, proto)
        recipes.append(FlowRecipe(kind, label, key,
                                  [(start + int(t), f, s) for t, f, s in zip(times, dirs, sizes)]))
    return recipes


def recipes_to_trace(recipes: list[FlowRecipe]) -> list[PacketRecord]:
    pkts = [p for r in recipes for p in r.records()]
    pkts.sort(key=lambda p: p.ts_us)  # stable, so in-flow order survives ties
    return pkts


def labels_of(recipes: list[FlowRecipe]) -> dict[tuple, str]:
    return {r.key: r.label for r in recipes}


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec(), n_train_flows: int = 3000,
                  n_test_flows: int = 1500, n_attack_flows: int = 500) -> SyntheticData:
    train, test, anomalies = gen_vectors(spec)
    train_recipes = gen_flows(n_train_flows, 0, seed=spec.seed)
    test_recipes = gen_flows(n_test_flows, n_attack_flows, seed=spec.seed + 1_000_003)
    return SyntheticData(train, test, anomalies, recipes_to_trace(train_recipes),
                         recipes_to_trace(test_recipes), labels_of(test_recipes))


# ------------------------------------------------------------ files

def save_matrix(X, path, names=None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = list(names) if names is not None else [f"f{i}" for i in range(X.shape[1])]
    np.savetxt(path, X, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def load_matrix(path) -> tuple[np.ndarray, list[str]]:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if X.size and X.shape[1] != len(names):
        raise ValueError(f"{path}: header has {len(names)} columns, rows have {X.shape[1]}")
    return X.reshape(-1, len(names)), names


def save_labels(labels: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_ip", "dst_ip", "src_port", "dst_port", "proto", "label"])
        for (s, d, sp, dp, p), lab in labels.items():
            w.writerow([ipaddress.IPv4Address(s), ipaddress.IPv4Address(d), sp, dp, p, lab])


def load_labels(path) -> dict:
    with open(path, newline="") as fh:
        return {(int(ipaddress.IPv4Address(r["src_ip"])), int(ipaddress.IPv4Address(r["dst_ip"])),
                 int(r["src_port"]), int(r["dst_port"]), int(r["proto"])): r["label"]
                for r in csv.DictReader(fh)}


def write_synthetic(data: SyntheticData, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in ("train.csv", "test.csv", "anomalies.csv", "trace_train.csv",
                               "trace_test.csv", "labels_test.csv")]
    save_matrix(data.train, paths[0])
    save_matrix(data.test, paths[1])
    save_matrix(data.anomalies, paths[2])
    write_trace(data.trace_train, paths[3])
    write_trace(data.trace_test, paths[4])
    save_labels(data.labels_test, paths[5])
    return paths
