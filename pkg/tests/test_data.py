"""CSV ingestion, preprocessing and filtering checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thresholdcurves import data
from thresholdcurves.errors import SchemaError, ValidationError

SCHEMA = data.ColumnSchema(
    x_columns=(data.ColumnSpec("age", "continuous"), data.ColumnSpec("female", "binary")),
    z_columns=(data.ColumnSpec("acuity", "binary"), data.ColumnSpec("hr", "continuous")),
    t_column="hours",
    a_column="admit",
    y_column="revisit",
)


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


BASE = "age,female,acuity,hr,hours,admit,revisit\n"


def test_load_and_standardize(tmp_path):
    path = _write(
        tmp_path,
        BASE + "1,0,1,60,1.0,1,0\n2,1,0,70,2.0,0,0\n3,0,1,80,0.5,1,1\n",
    )
    ds = data.load_csv(path, SCHEMA)
    # {1,2,3} standardizes to {-1,0,1} with the n-1 sd convention.
    np.testing.assert_allclose(ds.x[:, 0], [-1.0, 0.0, 1.0])
    assert ds.standardization["age"] == (2.0, 1.0)
    # round trip
    np.testing.assert_allclose(ds.destandardize("age", ds.x[:, 0]), [1.0, 2.0, 3.0], atol=1e-12)
    assert ds.provenance.rows_read == 3
    assert ds.n == 3


def test_median_imputation(tmp_path):
    path = _write(tmp_path, BASE + "1,0,1,60,1,1,0\n2,1,0,,2,0,0\n3,0,1,80,1,1,1\n")
    ds = data.load_csv(path, SCHEMA, data.LoadOptions(standardize=False))
    assert ds.provenance.cells_imputed == 1
    assert ds.z[1, 1] == 70.0  # median of {60, 80}


def test_t_floor_clamp(tmp_path):
    path = _write(tmp_path, BASE + "1,0,1,60,0,1,0\n2,1,0,70,2,0,0\n")
    ds = data.load_csv(path, SCHEMA, data.LoadOptions(t_floor=1e-4))
    assert ds.t[0] == 1e-4
    assert ds.provenance.rows_clamped == 1


def test_missing_column_is_schema_error(tmp_path):
    path = _write(tmp_path, "age,female,acuity,hours,admit,revisit\n1,0,1,1,1,0\n")
    with pytest.raises(SchemaError):
        data.load_csv(path, SCHEMA)


def test_nonbinary_value_names_row(tmp_path):
    path = _write(tmp_path, BASE + "1,0,1,60,1,1,0\n2,2,0,70,2,0,0\n")
    with pytest.raises(ValidationError, match="row 1"):
        data.load_csv(path, SCHEMA)


def test_unparseable_cell(tmp_path):
    path = _write(tmp_path, BASE + "1,0,1,abc,1,1,0\n")
    with pytest.raises(ValidationError, match="unparseable"):
        data.load_csv(path, SCHEMA)


def test_missing_binary_is_error(tmp_path):
    path = _write(tmp_path, BASE + "1,,1,60,1,1,0\n")
    with pytest.raises(ValidationError, match="missing binary"):
        data.load_csv(path, SCHEMA)


def test_deterministic(tmp_path):
    path = _write(tmp_path, BASE + "1,0,1,60,1,1,0\n2,1,0,70,2,0,0\n3,0,1,80,1,1,1\n")
    d1 = data.load_csv(path, SCHEMA)
    d2 = data.load_csv(path, SCHEMA)
    np.testing.assert_array_equal(d1.x, d2.x)
    np.testing.assert_array_equal(d1.z, d2.z)
    np.testing.assert_array_equal(d1.t, d2.t)


@pytest.fixture()
def small_ds(tmp_path):
    rows = ["%g,%d,%d,%g,%g,%d,%d" % (i, i % 2, (i + 1) % 2, 60 + i, 0.5 + 0.1 * i, i % 2, 0)
            for i in range(10)]
    path = _write(tmp_path, BASE + "\n".join(rows) + "\n")
    return data.load_csv(path, SCHEMA, data.LoadOptions(standardize=False))


def test_filter_identity(small_ds):
    out = data.filter_rows(small_ds, lambda row: True)
    assert out.n == small_ds.n
    np.testing.assert_array_equal(out.x, small_ds.x)


def test_filter_triple_and_composition(small_ds):
    admitted = data.filter_rows(small_ds, ("admit", "==", 1))
    assert admitted.n == int(small_ds.a.sum())
    assert np.all(admitted.a == 1)

    # p then q equals p-and-q
    both = data.filter_rows(data.filter_rows(small_ds, ("admit", "==", 1)), ("age", "<", 5))
    combo = data.filter_rows(small_ds, lambda r: r["admit"] == 1 and r["age"] < 5)
    np.testing.assert_array_equal(both.x, combo.x)


def test_filter_median_split(small_ds):
    med = float(np.median(small_ds.column("age")))
    lo = data.filter_rows(small_ds, ("age", "<=", med))
    hi = data.filter_rows(small_ds, ("age", ">", med))
    assert lo.n + hi.n == small_ds.n
    assert abs(lo.n - hi.n) <= 1


def test_filter_unknown_column(small_ds):
    with pytest.raises(SchemaError):
        data.filter_rows(small_ds, ("nope", "==", 1))
    with pytest.raises(SchemaError):
        data.filter_rows(small_ds, lambda r: r["nope"] == 1)


def test_schema_roundtrip():
    doc = SCHEMA.to_json()
    assert data.ColumnSchema.from_json(doc) == SCHEMA


def test_schema_rejects_duplicates():
    with pytest.raises(SchemaError):
        data.ColumnSchema(
            x_columns=(data.ColumnSpec("a", "binary"),),
            z_columns=(data.ColumnSpec("a", "binary"),),
            t_column="t", a_column="adm", y_column="y",
        )


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30, unique=True))
@settings(max_examples=40, deadline=None)
def test_standardize_round_trip_property(values):
    arr = np.asarray(values)
    mean, sd = arr.mean(), arr.std(ddof=1)
    if sd == 0:
        sd = 1.0
    std = (arr - mean) / sd
    np.testing.assert_allclose(std * sd + mean, arr, atol=1e-9 * max(1.0, np.abs(arr).max()))
