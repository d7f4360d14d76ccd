"""Feature specifications: how analysis features map onto integer key fields.

A feature is either ``raw`` (one key field, read as-is), ``mean`` (a sum field
divided by a count field) or ``var`` (a derived field ``M*SS - LS^2`` divided
by ``M^2``).  The real-valued view of a key vector is what rule sets classify;
table programs only ever see the integers.
"""

from __future__ import annotations

from dataclasses import dataclass

RAW = "raw"
MEAN = "mean"
VAR = "var"

DIRECTIONS = ("fwd", "bwd", "both")


@dataclass(frozen=True)
class KeyField:
    name: str
    width: int

    @property
    def max(self) -> int:
        return (1 << self.width) - 1


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    # raw: (field,)  mean: (count, sum)  var: (count, derived)
    keys: tuple[str, ...]
    direction: str = "n/a"
    unit: str = ""

    @property
    def derived(self) -> bool:
        return self.kind in (MEAN, VAR)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    features: tuple[Feature, ...]
    layout: tuple[KeyField, ...]

    def __post_init__(self):
        names = {f.name for f in self.layout}
        for feat in self.features:
            missing = [k for k in feat.keys if k not in names]
            if missing:
                raise ValueError(f"feature {feat.name} references unknown key fields {missing}")

    @property
    def dim(self) -> int:
        return len(self.features)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def field_index(self, name: str) -> int:
        for i, f in enumerate(self.layout):
            if f.name == name:
                return i
        raise KeyError(name)

    def field(self, name: str) -> KeyField:
        return self.layout[self.field_index(name)]

    def real_view(self, key) -> list[float]:
        """Analysis vector of an integer key vector (correctly rounded)."""
        idx = {f.name: i for i, f in enumerate(self.layout)}
        out = []
        for feat in self.features:
            if feat.kind == RAW:
                out.append(float(key[idx[feat.keys[0]]]))
                continue
            count = key[idx[feat.keys[0]]]
            num = key[idx[feat.keys[1]]]
            if count == 0:
                out.append(0.0)
            elif feat.kind == MEAN:
                out.append(num / count)
            else:
                out.append(num / (count * count))
        return out


def raw_spec(dim: int, width: int = 16, names=None) -> FeatureSpec:
    """Spec where every feature is its own unsigned integer key field."""
    names = tuple(names) if names is not None else tuple(f"f{i}" for i in range(dim))
    layout = tuple(KeyField(n, width) for n in names)
    return FeatureSpec(f"raw{dim}x{width}", tuple(Feature(n, RAW, (n,)) for n in names), layout)


def _flow_spec() -> FeatureSpec:
    feats = [
        Feature("l4_proto", RAW, ("proto",)),
        Feature("dst_port", RAW, ("dst_port",), "fwd"),
        Feature("duration_us", RAW, ("duration",), "both", "us"),
    ]
    layout = [KeyField("proto", 8), KeyField("dst_port", 16), KeyField("duration", 32)]
    for d in DIRECTIONS:
        feats.append(Feature(f"pkt_count_{d}", RAW, (f"count_{d}",), d, "packets"))
    for stat, unit in (("size", "bytes"), ("iat", "us")):
        for kind in (MEAN, "max", "min", VAR):
            for d in DIRECTIONS:
                name = f"{stat}_{kind}_{d}"
                if kind == MEAN:
                    keys = (f"count_{d}", f"{stat}_ls_{d}")
                elif kind == VAR:
                    keys = (f"count_{d}", f"{stat}_d_{d}")
                else:
                    keys = (f"{stat}_{kind}_{d}",)
                feats.append(Feature(name, kind if kind in (MEAN, VAR) else RAW, keys, d, unit))
    for d in DIRECTIONS:
        layout.append(KeyField(f"count_{d}", 32))
        for stat in ("size", "iat"):
            layout += [
                KeyField(f"{stat}_ls_{d}", 64),
                KeyField(f"{stat}_ss_{d}", 96),
                KeyField(f"{stat}_d_{d}", 128),
                KeyField(f"{stat}_max_{d}", 32),
                KeyField(f"{stat}_min_{d}", 32),
            ]
    return FeatureSpec("flow30", tuple(feats), tuple(layout))


FLOW_SPEC = _flow_spec()
