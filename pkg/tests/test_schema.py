import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgsynth.schema import (CONTINUOUS, DISCRETE, ColumnSpec, DataError, DataTable, SchemaError, TableSchema,
                            from_columns, load_csv, split_train_holdout)


def color_schema(categories=None):
    return TableSchema((ColumnSpec("color", DISCRETE, categories), ColumnSpec("x", CONTINUOUS)))


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_infers_categories(tmp_path):
    p = write(tmp_path, "x,color\n1.5,red\n2,blue\n-3,red\n")
    t = load_csv(p, color_schema())
    assert t.row_count == 3
    assert t.schema.column("color").categories == ("blue", "red")
    # columns come back in schema order
    assert t.schema.names == ["color", "x"]
    assert t.rows[0] == ("red", 1.5)


def test_missing_cell_policies(tmp_path):
    p = write(tmp_path, "color,x\nred,1\nblue,\nred,3\n")
    assert load_csv(p, color_schema()).row_count == 2
    with pytest.raises(DataError, match="missing"):
        load_csv(p, color_schema(), missing_policy="error")


def test_closed_categories_reject_unknown(tmp_path):
    p = write(tmp_path, "color,x\nred,1\ngreen,2\n")
    with pytest.raises(DataError, match="unknown category"):
        load_csv(p, color_schema(("red", "blue")))


@pytest.mark.parametrize("text,exc,msg", [
    ("color,y\nred,1\n", DataError, "header"),
    ("color,x\nred,abc\n", DataError, "unparsable"),
    ("color,x\n", DataError, "empty"),
])
def test_load_errors(tmp_path, text, exc, msg):
    with pytest.raises(exc, match=msg):
        load_csv(write(tmp_path, text), color_schema())


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv", color_schema())


def test_schema_invariants():
    with pytest.raises(SchemaError):
        TableSchema((ColumnSpec("a", DISCRETE), ColumnSpec("a", CONTINUOUS)))
    with pytest.raises(SchemaError):
        TableSchema((ColumnSpec("a", DISCRETE),), target="b")
    with pytest.raises(SchemaError):
        ColumnSpec("x", CONTINUOUS, ("a",))
    with pytest.raises(SchemaError):
        ColumnSpec("x", DISCRETE, ("a", "a"))


def test_schema_file_round_trip(tmp_path):
    s = TableSchema((ColumnSpec("p", DISCRETE, ("a", "b")), ColumnSpec("port", DISCRETE, masked_by="grp"),
                     ColumnSpec("x", CONTINUOUS)), target="p", sensitive=("port",))
    s.save(tmp_path / "s.json")
    assert TableSchema.load(tmp_path / "s.json") == s


def test_split_sizes_and_determinism():
    t = from_columns(color_schema(), {"color": ["red"] * 10, "x": np.arange(10.0)})
    a, b = split_train_holdout(t, 0.3, seed=7)
    assert (a.row_count, b.row_count) == (7, 3)
    a2, b2 = split_train_holdout(t, 0.3, seed=7)
    assert a.equals(a2) and b.equals(b2)
    c, d = split_train_holdout(t.take(np.arange(4)), 0.5, seed=1)
    assert (c.row_count, d.row_count) == (2, 2)
    assert sorted(np.r_[c["x"], d["x"]]) == [0.0, 1.0, 2.0, 3.0]


def test_split_errors():
    t = from_columns(color_schema(), {"color": ["red"], "x": [1.0]})
    with pytest.raises(ValueError):
        split_train_holdout(t, 0.5, 0)
    t2 = from_columns(color_schema(), {"color": ["red"] * 3, "x": [1.0, 2, 3]})
    for f in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            split_train_holdout(t2, f, 0)


def test_split_seed_changes_membership():
    t = from_columns(color_schema(), {"color": ["red"] * 50, "x": np.arange(50.0)})
    _, h1 = split_train_holdout(t, 0.2, 1)
    _, h2 = split_train_holdout(t, 0.2, 2)
    assert h1.row_count == h2.row_count == 10
    assert not np.array_equal(h1["x"], h2["x"])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c d"]),
                          st.floats(allow_nan=False, allow_infinity=False, width=64)), min_size=1, max_size=30))
def test_csv_round_trip(tmp_path_factory, rows):
    t = from_columns(color_schema(), {"color": [r[0] for r in rows], "x": [r[1] for r in rows]})
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    t.to_csv(p)
    back = load_csv(p, color_schema())
    assert back.equals(t)


def test_nonfinite_rejected():
    with pytest.raises(DataError):
        from_columns(color_schema(), {"color": ["a"], "x": [float("nan")]})
    with pytest.raises(DataError):
        DataTable(color_schema(), {"color": np.array(["a"], dtype=object), "x": np.array([np.inf])})
