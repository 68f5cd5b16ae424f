import numpy as np
import pytest

from gaitnet import dataset as D
from gaitnet import nn
from gaitnet.errors import NonFiniteError, SchemaMismatchError
from gaitnet.forward import (
    PHASE_TABLE,
    FgnConfig,
    build_fgn,
    fgn_batch_loss,
    fgn_inputs,
    load_fgn,
    lr_at,
    phase_features,
    pose_at,
    rollout,
    rollout_batch,
    train_fgn,
)
from gaitnet.gait import PHASES, PoseLayout, d_gait, d_pose
from gaitnet.oracle import Oracle
from gaitnet.schema import ConditionSchema


@pytest.fixture(scope="module")
def oracle():
    return Oracle.desk()


@pytest.fixture(scope="module")
def small_ds(oracle):
    return D.generate(D.sample_uniform(40, oracle.schema, 3), oracle, "uniform", 3)


@pytest.fixture(scope="module")
def small_fgn(small_ds):
    cfg = FgnConfig(hidden=[32, 32], batch_size=64, learning_rate=1e-3, epochs=3, seed=1)
    return train_fgn(small_ds, cfg)[0]


def test_build_dims(oracle):
    net = build_fgn(FgnConfig(), oracle.schema)
    assert net.n_in == 42 and net.n_out == 57
    assert net.layer_sizes == [42, 512, 512, 512, 57]
    assert net.hidden_activation == "relu" and net.output_activation == "linear"


def test_config_round_trips_through_header(oracle, tmp_path):
    cfg = FgnConfig(hidden=[8, 4], epochs=2)
    net = build_fgn(cfg, oracle.schema)
    nn.save_weights(net, tmp_path / "f.bgnw")
    back = load_fgn(tmp_path / "f.bgnw", oracle.schema)
    assert FgnConfig(**back.meta["config"]) == cfg
    assert back.param_bytes() == net.param_bytes()


def test_schema_mismatch_on_load(oracle, tmp_path):
    net = build_fgn(FgnConfig(hidden=[4]), oracle.schema)
    nn.save_weights(net, tmp_path / "f.bgnw")
    d = oracle.schema.to_dict()
    d["parameters"][0]["max"] = 1.3
    other = ConditionSchema.from_dict(d)
    with pytest.raises(SchemaMismatchError):
        load_fgn(tmp_path / "f.bgnw", other)


def test_config_validation():
    with pytest.raises(ValueError):
        FgnConfig(hidden=[0])
    with pytest.raises(ValueError):
        FgnConfig(batch_size=0)
    with pytest.raises(ValueError):
        FgnConfig(learning_rate=0.0)


def test_phase_features():
    assert np.allclose(phase_features(0.0), [1.0, 0.0])
    assert np.allclose(phase_features(2 * np.pi), [-1.0, 0.0])
    assert np.allclose(phase_features(4 * np.pi), phase_features(0.0))
    # injective over the canonical frames and continuous across the seam
    assert len({tuple(np.round(r, 12)) for r in PHASE_TABLE}) == 60
    step = np.linalg.norm(np.diff(np.vstack([PHASE_TABLE, PHASE_TABLE[:1]]), axis=0), axis=1)
    assert np.allclose(step, step[0])


def test_lr_schedule():
    assert lr_at(1e-3, None, 5, 10) == 1e-3
    assert lr_at(1e-3, 1e-5, 0, 10) == 1e-3
    assert np.isclose(lr_at(1e-3, 1e-5, 9, 10), 1e-5)


def test_overfit_single_tuple(oracle):
    ds = D.generate(oracle.schema.reference[None], oracle)
    cfg = FgnConfig(
        hidden=[128, 128], batch_size=60, learning_rate=1e-2, lr_final=1e-4, epochs=800,
        frames_per_tuple=60, dtype="float64", patience=10**6,
    )
    _, hist = train_fgn(ds, cfg)
    assert hist[-1] < 1e-4
    assert hist[-1] <= hist[0]


def test_loss_matches_d_pose(oracle, small_ds):
    net = build_fgn(FgnConfig(hidden=[16], dtype="float64"), oracle.schema)
    layout = oracle.layout
    cond = oracle.schema.normalize(small_ds.conditions.astype(np.float64))
    frames = small_ds.gaits.astype(np.float64).reshape(len(small_ds), 60, -1)
    fi = np.arange(len(small_ds)) % 60
    x = fgn_inputs(PHASE_TABLE[fi], cond)
    loss, _, _ = fgn_batch_loss(net, x, frames[np.arange(len(small_ds)), fi], layout)
    pred = nn.forward(net, x)
    ref = d_pose(pred, frames[np.arange(len(small_ds)), fi], layout)
    assert np.max(np.abs(loss - ref)) < 1e-10


def test_training_is_order_independent(small_ds):
    cfg = FgnConfig(hidden=[16], batch_size=32, learning_rate=1e-3, epochs=2, seed=4)
    a, ha = train_fgn(small_ds, cfg)
    perm = np.random.default_rng(0).permutation(len(small_ds))
    shuffled = small_ds.subset(perm)
    b, hb = train_fgn(shuffled, cfg)
    assert a.param_bytes() == b.param_bytes()
    assert ha == hb


def test_training_does_not_mutate_dataset(small_ds):
    before = D.to_bytes(small_ds)
    train_fgn(small_ds, FgnConfig(hidden=[8], batch_size=32, epochs=1))
    assert D.to_bytes(small_ds) == before


def test_history_csv(small_ds, tmp_path):
    _, hist = train_fgn(small_ds, FgnConfig(hidden=[8], batch_size=32, epochs=3), history_csv=tmp_path / "h.csv")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 4
    assert float(rows[-1].split(",")[1]) == hist[-1]


def test_divergence_reports(small_ds):
    with pytest.raises(NonFiniteError, match="diverged"):
        train_fgn(small_ds, FgnConfig(hidden=[8], batch_size=32, learning_rate=1e30, epochs=3))


def test_empty_dataset(oracle):
    empty = D.generate(np.zeros((0, oracle.schema.n_params)), oracle)
    with pytest.raises(ValueError):
        train_fgn(empty, FgnConfig(hidden=[4]))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_rollout_matches_per_frame(small_fgn, oracle, dtype):
    net = small_fgn.astype(dtype)
    a, g = oracle.reference_anatomy(), oracle.reference_gait()
    pattern = rollout(net, a, g)
    for k in range(60):
        assert np.array_equal(pattern.frames[k], pose_at(net, PHASES[k], a, g))
    again = rollout(net, a, g)
    assert np.array_equal(again.frames, pattern.frames)


def test_rollout_batch_matches_single(small_fgn, small_ds):
    cond = small_ds.conditions.astype(np.float64)
    batch = rollout_batch(small_fgn, cond)
    assert batch.shape == (len(cond), 3420)
    one = rollout_batch(small_fgn, cond[5:6])
    assert np.array_equal(one[0], batch[5])


def test_reference_rollout_close_to_oracle(oracle):
    ds = D.generate(D.sample_uniform(2000, oracle.schema, 11), oracle, "uniform", 11)
    train, hold = D.split_holdout(ds, 40, 0)
    cfg = FgnConfig(
        hidden=[128, 128], batch_size=128, learning_rate=3e-3, lr_final=1e-4, epochs=60, frames_per_tuple=4
    )
    net, _ = train_fgn(train, cfg)
    layout = PoseLayout(9)
    held = d_gait(rollout_batch(net, hold.conditions.astype(np.float64)), hold.gaits.astype(np.float64), layout)
    ref = d_gait(
        rollout_batch(net, oracle.schema.reference[None]),
        oracle.simulate_batch(oracle.schema.reference[None]),
        layout,
    )
    # the centre of the box is easier than random conditions
    assert ref[0] < held.mean()
