"""Built-in datasets: the rule-consistent network-traffic fixture and a UCI Adult loader."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .knowledge import GroupDef, PropertyMap, Rule, RuleSet
from .schema import CONTINUOUS, DISCRETE, ColumnSpec, DataTable, TableSchema, from_columns, load_csv

PROTOCOLS = ("DNS", "NTP", "HTTP")
PROTOCOL_PROBS = (0.4, 0.2, 0.4)
ZONES = ("external", "gateway", "home")
WEB_PORTS = ("80", "443", "8080")


def network_schema() -> TableSchema:
    return TableSchema((
        ColumnSpec("protocol", DISCRETE, PROTOCOLS),
        ColumnSpec("dst_port", DISCRETE, None, masked_by="port_group"),
        ColumnSpec("src_zone", DISCRETE, ZONES),
        ColumnSpec("bytes", CONTINUOUS),
    ), target="protocol", sensitive=("src_zone",))


def network_rules() -> RuleSet:
    pmap = PropertyMap("port_group", "dst_port", (
        GroupDef("p53", values=("53",)),
        GroupDef("p123", values=("123",)),
        GroupDef("web", values=WEB_PORTS),
        GroupDef("dynamic", interval=(49152, 65535)),
    ))
    return RuleSet((
        Rule("r1", (("protocol", "DNS"),), (("port_group", "p53"), ("src_zone", "home"))),
        Rule("r2", (("protocol", "NTP"),), (("port_group", "p123"),)),
        Rule("r3", (("protocol", "HTTP"),), (("port_group", "web"),)),
    ), (pmap,))


def mini_network(n: int = 2000, seed: int = 0) -> tuple[DataTable, RuleSet]:
    """Generates rows that satisfy every rule by construction."""
    rng = np.random.default_rng(seed)
    proto = rng.choice(len(PROTOCOLS), size=n, p=PROTOCOL_PROBS)
    port = np.where(proto == 0, "53", np.where(proto == 1, "123", "80")).astype(object)
    web = proto == 2
    port[web] = rng.choice(np.array(WEB_PORTS, dtype=object), size=int(web.sum()), p=(0.3, 0.6, 0.1))
    zone = rng.choice(len(ZONES), size=n)
    zone[proto == 0] = ZONES.index("home")
    big = rng.normal(1400.0, 150.0, size=n)
    small = rng.normal(100.0, 15.0, size=n)
    nbytes = np.round(np.where(web, big, small), 3)
    table = from_columns(network_schema(), {
        "protocol": [PROTOCOLS[i] for i in proto],
        "dst_port": list(port),
        "src_zone": [ZONES[i] for i in zone],
        "bytes": nbytes,
    })
    return table, network_rules()


FIXTURES = {"mini_network": mini_network}


def builtin_fixture(name: str, n: int = 2000, seed: int = 0) -> tuple[DataTable, RuleSet]:
    try:
        return FIXTURES[name](n, seed)
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None


# ---------------------------------------------------------------------------
# UCI Adult

ADULT_COLUMNS = (
    ("age", CONTINUOUS), ("workclass", DISCRETE), ("fnlwgt", CONTINUOUS), ("education", DISCRETE),
    ("education_num", CONTINUOUS), ("marital_status", DISCRETE), ("occupation", DISCRETE),
    ("relationship", DISCRETE), ("race", DISCRETE), ("sex", DISCRETE), ("capital_gain", CONTINUOUS),
    ("capital_loss", CONTINUOUS), ("hours_per_week", CONTINUOUS), ("native_country", DISCRETE),
    ("income", DISCRETE),
)

REGIONS = {
    "north_america": ("United-States", "Canada", "Outlying-US(Guam-USVI-etc)"),
    "latin_america": ("Mexico", "Puerto-Rico", "Cuba", "Jamaica", "Dominican-Republic", "El-Salvador",
                      "Guatemala", "Haiti", "Honduras", "Nicaragua", "Columbia", "Ecuador", "Peru",
                      "Trinadad&Tobago"),
    "europe": ("England", "Germany", "Italy", "Poland", "Portugal", "France", "Greece", "Ireland",
               "Yugoslavia", "Hungary", "Scotland", "Holand-Netherlands"),
    "asia": ("Philippines", "India", "China", "Japan", "Vietnam", "Taiwan", "Iran", "Thailand",
             "Cambodia", "Laos", "Hong", "South"),
}


def adult_schema() -> TableSchema:
    cols = [ColumnSpec(n, k, masked_by="region" if n == "native_country" else None) for n, k in ADULT_COLUMNS]
    return TableSchema(tuple(cols), target="income", sensitive=("race",))


def adult_rules() -> RuleSet:
    pmap = PropertyMap("region", "native_country",
                       tuple(GroupDef(k, values=v) for k, v in REGIONS.items()), catch_all="other")
    return RuleSet((
        Rule("husband_male", (("relationship", "Husband"),), (("sex", "Male"),)),
        Rule("wife_female", (("relationship", "Wife"),), (("sex", "Female"),)),
    ), (pmap,))


def load_adult(path: str | Path, n: int | None = None, seed: int = 0) -> tuple[DataTable, RuleSet]:
    """Raw adult.data (no header, ", " separated, "?" missing); optional seeded subsample."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    rows = [[f.strip() for f in ln.split(",")] for ln in lines]
    rows = [r for r in rows if len(r) == len(ADULT_COLUMNS) and "?" not in r]
    if n is not None and n < len(rows):
        keep = np.sort(np.random.default_rng(seed).choice(len(rows), size=n, replace=False))
        rows = [rows[i] for i in keep]
    cols = {}
    for j, (name, kind) in enumerate(ADULT_COLUMNS):
        vals = [r[j] for r in rows]
        cols[name] = np.array(vals, dtype=np.float64) if kind == CONTINUOUS else [v.rstrip(".") for v in vals]
    return from_columns(adult_schema(), cols), adult_rules()


__all__ = ["builtin_fixture", "mini_network", "network_rules", "network_schema", "load_adult", "adult_rules",
           "adult_schema", "load_csv"]
