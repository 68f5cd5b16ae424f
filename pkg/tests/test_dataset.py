import numpy as np
import pytest

from gaitnet import dataset as D
from gaitnet.errors import FormatError, SchemaMismatchError, VersionError
from gaitnet.oracle import Oracle
from gaitnet.schema import ConditionSchema


@pytest.fixture(scope="module")
def oracle():
    return Oracle.desk()


def tiny_schema(d=3):
    return ConditionSchema(
        tuple(f"p{i}" for i in range(d)),
        ("muscle",) * d,
        np.zeros(d),
        np.arange(1, d + 1, dtype=float),
        np.full(d, 0.5),
    )


def test_sample_uniform_basic(oracle):
    s = oracle.schema
    assert D.sample_uniform(0, s, 0).shape == (0, s.n_params)
    x = D.sample_uniform(100_000, s, 1)
    assert np.all((x >= s.lo) & (x <= s.hi))
    sd = (s.hi - s.lo) / np.sqrt(12)
    assert np.all(np.abs(x.mean(axis=0) - (s.lo + s.hi) / 2) < 3 * sd / np.sqrt(len(x)) + 1e-12)
    assert np.array_equal(D.sample_uniform(10, s, 3), D.sample_uniform(10, s, 3))


def test_sample_grid_corners(oracle):
    s = oracle.schema
    x = D.sample_grid(5000, s, 2)
    anat = s.anatomy_idx
    assert np.all((x[:, anat] == s.lo[anat]) | (x[:, anat] == s.hi[anat]))
    gi = s.gait_idx
    assert np.all((x[:, gi] >= s.lo[gi]) & (x[:, gi] <= s.hi[gi]))
    assert len(np.unique(x[:, gi])) > 100  # gait stays continuous
    freq = (x[:, anat] == s.lo[anat]).mean(axis=0)
    assert np.all(np.abs(freq - 0.5) < 3 * 0.5 / np.sqrt(len(x)) + 0.01)
    full = D.sample_grid(200, s, 2, gait_corners=True)
    assert np.all((full == s.lo) | (full == s.hi))


def test_grid_coupon_collector():
    s = tiny_schema(3)
    x = D.sample_grid(200, s, 5, gait_corners=True)
    assert len({tuple(r) for r in x}) == 8
    # with no gait parameters the default mode is already fully cornered
    y = D.sample_grid(200, s, 5)
    assert np.all((y == s.lo) | (y == s.hi))


def test_unknown_strategy(oracle):
    with pytest.raises(ValueError, match="bogus"):
        D.sample("bogus", 3, oracle.schema, 0)


def test_generate_reference(oracle):
    ds = D.generate(oracle.schema.reference[None], oracle)
    assert len(ds) == 1
    base = oracle.simulate(oracle.reference_anatomy(), oracle.reference_gait()).flatten()
    assert np.array_equal(ds.gaits[0], base.astype(np.float32))


def test_generate_order_and_parallel(oracle, tmp_path):
    cond = D.sample_uniform(2 * D.CHUNK + 17, oracle.schema, 4)
    a = D.generate(cond, oracle, "uniform", 4, workers=1)
    b = D.generate(cond, oracle, "uniform", 4, workers=3)
    D.write(a, tmp_path / "a.bgnd")
    D.write(b, tmp_path / "b.bgnd")
    assert (tmp_path / "a.bgnd").read_bytes() == (tmp_path / "b.bgnd").read_bytes()
    # each tuple matches its own simulation
    i = 1500
    sim = oracle.simulate_batch(a.conditions[i : i + 1].astype(np.float64))[0].astype(np.float32)
    assert np.array_equal(a.gaits[i], sim)


def test_generate_count(oracle, tmp_path):
    ds = D.generate(D.sample_grid(10_000, oracle.schema, 5), oracle, "grid", 5)
    assert len(ds) == 10_000
    D.write(ds, tmp_path / "g.bgnd")
    assert D.read(tmp_path / "g.bgnd").conditions.shape[0] == 10_000


def test_split_holdout(oracle):
    ds = D.generate(D.sample_uniform(300, oracle.schema, 6), oracle, "uniform", 6)
    tr, ho = D.split_holdout(ds, 0, 1)
    assert len(ho) == 0 and tr.equals(ds)
    tr, ho = D.split_holdout(ds, 51, 1)
    assert (len(tr), len(ho)) == (249, 51)
    rows = {r.tobytes() for r in tr.conditions} | {r.tobytes() for r in ho.conditions}
    assert len(rows) == 300
    assert not ({r.tobytes() for r in tr.conditions} & {r.tobytes() for r in ho.conditions})
    tr2, ho2 = D.split_holdout(ds, 51, 1)
    assert tr2.equals(tr) and ho2.equals(ho)


def test_split_with_pathologies(oracle):
    ds = D.generate(D.sample_grid(200, oracle.schema, 7), oracle, "grid", 7)
    path = D.pathology_dataset(oracle)
    assert path.meta["case_names"] == [
        "normal", "foot_drop", "equinus", "stiff_knee", "crouch", "trendelenburg", "waddling"
    ]
    tr, ho = D.split_holdout(ds, 51, 0, forced=path)
    assert len(ho) == 51 and len(tr) == 200 - 44
    assert ho.meta["case_names"][-7:] == path.meta["case_names"]
    assert np.array_equal(ho.gaits[-7:], path.gaits)


def test_split_holdout_large(oracle):
    cond = D.sample_uniform(10_000, oracle.schema, 8)
    ds = D.Dataset(oracle.schema, oracle.hash, 1, cond.astype(np.float32), np.zeros((10_000, 1), np.float32))
    tr, ho = D.split_holdout(ds, 51, 3)
    assert (len(tr), len(ho)) == (9949, 51)


def test_round_trip_random(oracle, tmp_path):
    rng = np.random.default_rng(9)
    for k in range(5):
        n = int(rng.integers(0, 40))
        ds = D.generate(D.sample_uniform(n, oracle.schema, k), oracle, "uniform", k)
        back = D.from_bytes(D.to_bytes(ds), expected_hash=oracle.hash)
        assert back.equals(ds)
        assert D.to_bytes(back) == D.to_bytes(ds)


def test_empty_round_trip(oracle, tmp_path):
    ds = D.generate(np.zeros((0, oracle.schema.n_params)), oracle)
    D.write(ds, tmp_path / "e.bgnd")
    back = D.read(tmp_path / "e.bgnd")
    assert len(back) == 0 and back.equals(ds)
    with pytest.warns(UserWarning):
        D.warn_if_empty(back)


def test_read_errors(oracle):
    ds = D.generate(D.sample_uniform(3, oracle.schema, 0), oracle)
    data = D.to_bytes(ds)
    with pytest.raises(SchemaMismatchError):
        D.from_bytes(data, expected_hash="0" * 64)
    with pytest.raises(FormatError, match="truncated"):
        D.from_bytes(data[:-100])
    with pytest.raises(FormatError, match="truncated"):
        D.from_bytes(data[:30])
    with pytest.raises(FormatError, match="magic"):
        D.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(VersionError):
        D.from_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    bad = bytearray(data)
    bad[-50] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        D.from_bytes(bytes(bad))


def test_file_is_self_describing(oracle):
    ds = D.generate(D.sample_grid(4, oracle.schema, 1), oracle, "grid", 1)
    back = D.from_bytes(D.to_bytes(ds))
    assert back.schema == oracle.schema
    assert back.strategy == "grid" and back.seed == 1
    assert back.oracle_hash == oracle.hash


def test_csv_export(oracle, tmp_path):
    ds = D.generate(D.sample_uniform(4, oracle.schema, 2), oracle)
    D.write_csv(ds, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",") == list(oracle.schema.names)
    assert len(lines) == 5
    assert float(lines[1].split(",")[0]) == float(ds.conditions[0, 0])
