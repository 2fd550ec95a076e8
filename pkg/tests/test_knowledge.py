import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgsynth.fixtures import mini_network, network_rules
from kgsynth.knowledge import (GroupDef, MaskError, PropertyMap, Rule, RuleError, RuleSet, apply_property_masks,
                               check_compliance, check_training_rows, decode_mask, evaluate_rules, flagged_table,
                               kg_query, rule_flags, validate_ruleset)
from kgsynth.schema import CONTINUOUS, DISCRETE, ColumnSpec, TableSchema, from_columns

PORT_RANGES = PropertyMap("port_group", "port", (
    GroupDef("well_known", interval=(0, 1023)),
    GroupDef("registered", interval=(1024, 49151)),
    GroupDef("dynamic", interval=(49152, 65535)),
))


def traffic(ports, protocols=None):
    schema = TableSchema((ColumnSpec("protocol", DISCRETE), ColumnSpec("port", DISCRETE, masked_by="port_group"),
                          ColumnSpec("bytes", CONTINUOUS)))
    n = len(ports)
    return from_columns(schema, {"protocol": protocols or ["DNS"] * n, "port": [str(p) for p in ports],
                                 "bytes": np.arange(n, dtype=float)})


def test_interval_masks():
    t = traffic([53, 60000, 8080])
    m = apply_property_masks(t, RuleSet((), (PORT_RANGES,)))
    assert list(m["port_group"]) == ["well_known", "dynamic", "registered"]
    assert "port" not in m.schema
    assert np.array_equal(m["bytes"], t["bytes"])
    assert m.schema.names == ["protocol", "port_group", "bytes"]


def test_uncovered_value_without_catch_all():
    pm = PropertyMap("g", "port", (GroupDef("a", values=("1",)),))
    with pytest.raises(MaskError):
        apply_property_masks(traffic([2]), RuleSet((), (pm,)))
    pm2 = PropertyMap("g", "port", (GroupDef("a", values=("1",)),), catch_all="other")
    assert list(apply_property_masks(traffic([2]), RuleSet((), (pm2,)))["g"]) == ["other"]


def test_double_mask_refused():
    rs = RuleSet((), (PORT_RANGES,))
    m = apply_property_masks(traffic([53]), rs)
    with pytest.raises(MaskError):
        apply_property_masks(m, rs)


def test_group_definition_errors():
    with pytest.raises(MaskError):
        GroupDef("x", values=())
    with pytest.raises(MaskError):
        GroupDef("x", interval=(5, 1))
    with pytest.raises(MaskError):
        GroupDef("x", values=("1",), interval=(0, 1))


def test_fixture_ruleset_is_valid():
    t, rules = mini_network(300, 0)
    assert validate_ruleset(rules, t.schema, t).ok


def test_unknown_column_and_conflict_reported():
    t, rules = mini_network(50, 0)
    bad = RuleSet((Rule("x", (("proto", "DNS"),), (("src_zone", "home"),)),), rules.property_maps)
    assert "unknown column" in validate_ruleset(bad, t.schema).kinds()
    clash = RuleSet((Rule("a", (("protocol", "DNS"),), (("port_group", "p53"),)),
                     Rule("b", (("protocol", "DNS"),), (("port_group", "web"),))), rules.property_maps)
    assert "conflict" in validate_ruleset(clash, t.schema).kinds()
    cat = RuleSet((Rule("a", (("protocol", "SMTP"),), (("port_group", "p53"),)),), rules.property_maps)
    assert "unknown category" in validate_ruleset(cat, t.schema).kinds()
    dup = RuleSet((Rule("a", (("protocol", "DNS"),), (("src_zone", "home"), ("src_zone", "gateway"))),),
                  rules.property_maps)
    assert "repeated consequent column" in validate_ruleset(dup, t.schema).kinds()


def test_uncovered_value_reported_against_table():
    t, rules = mini_network(50, 0)
    t2 = from_columns(t.schema, {"protocol": ["DNS"], "dst_port": ["22"], "src_zone": ["home"], "bytes": [1.0]})
    assert "uncovered value" in validate_ruleset(rules, t.schema, t2).kinds()


def test_evaluate_rules_ignores_consequent():
    rules = network_rules()
    assert list(evaluate_rules({"protocol": "DNS", "port_group": "web"}, rules)) == [1, 0, 0]
    only_r1 = RuleSet(rules.rules[:1])
    assert list(evaluate_rules({"protocol": "HTTP"}, only_r1)) == [0]
    assert evaluate_rules({"protocol": "HTTP"}, RuleSet()).shape == (0,)


def test_vectorised_flags_match_rowwise():
    t, rules = mini_network(200, 3)
    m = apply_property_masks(t, rules)
    flags = rule_flags(m, rules)
    for i in range(m.row_count):
        assert np.array_equal(flags[i], evaluate_rules(m.row(i), rules))


def test_compliance_counts():
    t, rules = mini_network(10, 0)
    m = apply_property_masks(t, rules)
    assert check_compliance(m, rules).rate == 1.0
    data = dict(m.data)
    pg = data["port_group"].copy()
    i = int(np.flatnonzero(m["protocol"] == "HTTP")[0])
    pg[i] = "p53"
    data["port_group"] = pg
    bad = type(m)(m.schema, data)
    rep = check_compliance(bad, rules)
    assert rep.rate == pytest.approx(0.9)
    assert rep.row_indices == [i]
    assert rep.violations["r3"] == 1
    with pytest.raises(RuleError):
        check_training_rows(bad, rules)
    assert check_training_rows(bad, rules, policy="warn").violating_rows == 1


def test_empty_table_compliance_is_vacuous():
    t, rules = mini_network(5, 0)
    rep = check_compliance(apply_property_masks(t, rules).take([]), rules)
    assert rep.rate == 1.0 and rep.vacuous


def test_kg_query_semantics():
    rules = network_rules()
    assert dict(kg_query(("r1", "1"), rules).targets) == {
        "r1": "1", "protocol": "DNS", "port_group": "p53", "src_zone": "home"}
    assert dict(kg_query(("r1", "0"), rules).targets) == {"r1": "0"}
    assert dict(kg_query(("src_zone", "gateway"), rules).targets) == {"src_zone": "gateway"}
    # a single-column cond equal to a rule's whole antecedent pulls in its consequent
    assert dict(kg_query(("protocol", "NTP"), rules).targets) == {"protocol": "NTP", "port_group": "p123"}
    with pytest.raises(RuleError):
        kg_query(("r1",), rules)


def test_multi_column_antecedent_only_via_flag():
    rules = RuleSet((Rule("r", (("a", "x"), ("b", "y")), (("c", "z"),)),))
    assert dict(kg_query(("a", "x"), rules).targets) == {"a": "x"}
    assert dict(kg_query(("r", "1"), rules).targets) == {"r": "1", "a": "x", "b": "y", "c": "z"}


def test_kg_targets_one_per_segment():
    t, rules = mini_network(100, 0)
    m = flagged_table(apply_property_masks(t, rules), rules)
    for c in m.schema.discrete():
        for v in c.categories:
            targets = kg_query((c.name, v), rules).targets
            assert len({s for s, _ in targets}) == len(targets)


def test_decode_mask_members_and_determinism():
    pm = network_rules().map_named("port_group")
    assert decode_mask("p53", pm, 0) == "53"
    v = int(decode_mask("dynamic", pm, 5))
    assert 49152 <= v <= 65535
    assert decode_mask("dynamic", pm, 5) == decode_mask("dynamic", pm, 5)
    with pytest.raises(MaskError):
        decode_mask("nope", pm, 0)


def test_decode_mask_covers_small_interval():
    pm = PropertyMap("g", "p", (GroupDef("small", interval=(10, 17)),))
    rng = np.random.default_rng(0)
    seen = {decode_mask("small", pm, rng) for _ in range(50 * 8)}
    assert seen == {str(i) for i in range(10, 18)}


def test_prefix_group_decodes_with_prefix():
    pm = PropertyMap("net", "ip", (GroupDef("lan", prefix="10.0.0."),))
    out = decode_mask("lan", pm, 1)
    assert out.startswith("10.0.0.") and 0 <= int(out.rsplit(".", 1)[1]) <= 255


def test_rules_file_round_trip(tmp_path):
    rules = network_rules()
    rules.save(tmp_path / "r.json")
    back = RuleSet.load(tmp_path / "r.json")
    assert back == rules and back.digest() == rules.digest()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(RuleError):
        RuleSet.load(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        RuleSet.load(tmp_path / "missing.json")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 65535))
def test_interval_masks_partition_ports(port):
    labels = [g.label for g in PORT_RANGES.groups if g.contains(str(port))]
    assert len(labels) == 1
