import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pstrata.data import (
    CsvSchema,
    DataError,
    Dataset,
    StrataConfig,
    Stratum,
    compatible_strata,
    load_csv,
    validate_consistency,
    write_csv,
)

N, C, A, D = (Stratum.NEVER_TAKER, Stratum.COMPLIER, Stratum.ALWAYS_TAKER, Stratum.DEFIER)

# observed (z, d) cell -> strata that can produce it, before pruning
CELLS = {(0, 0): {N, C}, (0, 1): {A, D}, (1, 0): {N, D}, (1, 1): {A, C}}


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_stratum_codes():
    assert [s.d_at(0) for s in (N, C, A, D)] == [0, 0, 1, 1]
    assert [s.d_at(1) for s in (N, C, A, D)] == [0, 1, 1, 0]
    assert Stratum.parse("c") is C and Stratum.parse("always_taker") is A
    with pytest.raises(ValueError):
        Stratum.parse("sometimes_taker")


def test_compatible_strata_examples():
    mono = StrataConfig.default(monotonicity=True)
    full = StrataConfig.default(monotonicity=False)
    assert compatible_strata(0, 1, mono) == (A,)
    assert set(compatible_strata(1, 0, full)) == {N, D}
    assert set(compatible_strata(1, 1, mono)) == {A, C}


def test_compatible_strata_exhaustive():
    for r in range(2, 5):
        for active in itertools.combinations((N, C, A, D), r):
            cfg = StrataConfig(active, reference_stratum=active[0], monotonicity=D not in active)
            for (z, d), cell in CELLS.items():
                got = compatible_strata(z, d, cfg)
                assert set(got) == cell & set(active)
                assert all(s.d_at(z) == d for s in got)


def test_strata_config_invariants():
    with pytest.raises(ValueError):
        StrataConfig((N, C, A, D), monotonicity=True)
    with pytest.raises(ValueError):
        StrataConfig((C, A), reference_stratum=N)
    with pytest.raises(ValueError):
        StrataConfig((C,), reference_stratum=C)
    cfg = StrataConfig.default(False, False)
    assert StrataConfig.from_dict(cfg.to_dict()) == cfg


def test_load_csv_three_rows(tmp_path):
    path = _write(tmp_path, "id,time,censored,z,d\n1,1.5,0,0,0\n2,2.0,1,1,1\n3,0.7,0,1,0\n")
    data = load_csv(path)
    assert data.n == 3
    assert data.delta.tolist() == [0, 1, 0]
    assert data.z.tolist() == [0, 1, 1]


def test_load_csv_negative_time_names_row(tmp_path):
    path = _write(tmp_path, "time,censored,z,d\n1.0,0,0,0\n-1,0,1,1\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(path)


def test_load_csv_extra_column_warns(tmp_path):
    path = _write(tmp_path, "time,censored,z,d,site\n1.0,0,0,0,A\n2.0,1,1,1,B\n")
    with pytest.warns(UserWarning, match="site"):
        data = load_csv(path)
    assert data.n == 2 and data.p == 0


@pytest.mark.parametrize("text,match", [
    ("time,censored,z\n1,0,0\n", "missing column"),
    ("time,censored,z,d\n1,0,2,0\n", "row 1"),
    ("time,censored,z,d\n1,0,0,0\nabc,0,0,0\n", "row 2"),
    ("time,censored,z,d\n0,0,0,0\n", "time 0"),
])
def test_load_csv_errors(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        load_csv(_write(tmp_path, text))


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_event_role_converts(tmp_path):
    path = _write(tmp_path, "time,event,z,d\n1,1,0,0\n2,0,1,1\n")
    data = load_csv(path, CsvSchema(status="event", status_role="event"))
    assert data.delta.tolist() == [0, 1]


def test_ids_synthesized_from_row_numbers(tmp_path):
    data = load_csv(_write(tmp_path, "time,censored,z,d\n1,0,0,0\n2,1,1,1\n"))
    assert data.ids == ("1", "2")


def test_standardization(tmp_path, rng):
    n = 50
    age = rng.normal(60, 8, n)
    sex = rng.integers(0, 2, n)
    rows = "\n".join(f"{i},{1 + i % 3},0,{i % 2},0,{float(a)!r},{s}"
                     for i, (a, s) in enumerate(zip(age, sex)))
    path = _write(tmp_path, "id,time,censored,z,d,age,sex\n" + rows + "\n")
    data = load_csv(path, CsvSchema(covariates=("age", "sex")))
    assert abs(data.x[:, 0].mean()) < 1e-9
    assert abs(data.x[:, 0].std(ddof=1) - 1) < 1e-9
    assert data.x[:, 1].tolist() == sex.astype(float).tolist()
    assert np.allclose(data.raw_x()[:, 0], age, rtol=0, atol=1e-12)


@given(st.integers(1, 30), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_csv_round_trip(tmp_path_factory, n, p, seed):
    rng = np.random.default_rng(seed)
    names = tuple(f"v{j}" for j in range(p))
    data = Dataset(tuple(f"id{i}" for i in range(n)), rng.normal(3, 2, (n, p)),
                   rng.integers(0, 2, n), rng.integers(0, 2, n), rng.exponential(1, n) + 1e-3,
                   rng.integers(0, 2, n), names, {c: (0.0, 1.0) for c in names})
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(data, path, header_lines=["note: round trip"])
    back = load_csv(path, CsvSchema(covariates=names), standardize=False)
    assert back.ids == data.ids
    for name in ("z", "d", "delta"):
        assert np.array_equal(getattr(back, name), getattr(data, name))
    assert np.allclose(back.y, data.y, rtol=0, atol=1e-12)
    assert np.allclose(back.x, data.x, rtol=0, atol=1e-12)


def _cells_dataset(cells):
    z = [c[0] for c in cells]
    d = [c[1] for c in cells]
    n = len(cells)
    return Dataset(tuple(str(i) for i in range(n)), np.zeros((n, 0)), z, d,
                   np.ones(n), np.zeros(n, dtype=int))


def test_validate_consistency_examples():
    mono = StrataConfig.default()
    assert validate_consistency(_cells_dataset([(0, 0), (0, 1), (1, 0), (1, 1)]), mono) == []
    no_a = StrataConfig((N, C), N)
    diags = validate_consistency(_cells_dataset([(0, 0), (0, 1), (1, 1)]), no_a)
    errors = [g for g in diags if g.level == "error"]
    assert len(errors) == 1 and "Z=0, D=1" in errors[0].message
    diags = validate_consistency(_cells_dataset([(0, 0), (0, 1)]), mono)
    assert any(g.code == "arm_empty" and "Z=1" in g.message for g in diags)


def test_dataset_rejects_bad_values():
    with pytest.raises(DataError):
        Dataset(("a",), np.zeros((1, 0)), [2], [0], [1.0], [0])
    with pytest.raises(DataError):
        Dataset(("a",), np.zeros((1, 0)), [0], [0], [np.inf], [0])
    with pytest.raises(DataError):
        Dataset(("a", "a"), np.zeros((2, 0)), [0, 0], [0, 0], [1.0, 1.0], [0, 0])
