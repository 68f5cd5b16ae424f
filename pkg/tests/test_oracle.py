import json

import numpy as np
import pytest

from gaitnet.errors import FormatError, RangeError, VersionError
from gaitnet.gait import N_FRAMES, PHASES, d_gait
from gaitnet.oracle import Oracle, _harmonics
from gaitnet.schema import ConditionSchema


@pytest.fixture(scope="module")
def oracle():
    return Oracle.desk()


def random_full(oracle, n, seed):
    s = oracle.schema
    return np.random.default_rng(seed).uniform(s.lo, s.hi, size=(n, s.n_params))


def test_desk_dimensions(oracle):
    s = oracle.schema
    assert len(s.skeleton_idx) == 6 and len(s.muscle_idx) == 32 and len(s.gait_idx) == 2
    assert oracle.layout.pose_dim == 57 and oracle.layout.gait_dim == 3420
    assert np.all(s.reference[s.muscle_idx] == 1.0)
    assert oracle.influence.shape == (40, 32)
    assert len(oracle.redundancy) >= 2
    assert oracle.inert_params == ["w_hip_adductor_l", "w_hip_adductor_r"]


def test_reference_gives_base_trajectory(oracle):
    ch = oracle.channels(oracle.schema.reference[None])[0]
    expected = np.empty((N_FRAMES, oracle.n_channels))
    for j in oracle.joints:
        for ax in "xyz":
            b = oracle.spec["base"][f"{j}.{ax}"]
            k = oracle.channel_index(f"{j}.{ax}")
            expected[:, k] = b["mean"] + _harmonics(b["harmonics"], PHASES)
    for name in ("h", "vx", "vy"):
        r = oracle.spec["root"][name]
        expected[:, oracle.channel_index(f"root.{name}")] = r["mean"] + _harmonics(r["harmonics"], PHASES)
    for chn, amp in oracle.spec.get("cycle_asymmetry", {}).items():
        expected[:, oracle.channel_index(chn)] += amp * np.sin(0.5 * PHASES)
    assert np.allclose(ch, expected, atol=1e-12)


def test_two_cycles_repeat_up_to_asymmetry(oracle):
    ch = oracle.channels(random_full(oracle, 3, 0))
    asym = np.zeros(oracle.n_channels)
    for chn, amp in oracle.spec["cycle_asymmetry"].items():
        asym[oracle.channel_index(chn)] = amp
    diff = ch[:, 30:] - ch[:, :30]
    expected = -2 * asym[None, None, :] * np.sin(0.5 * PHASES[:30])[None, :, None]
    assert np.allclose(diff, expected, atol=1e-10)


def test_simulate_deterministic(oracle):
    c = random_full(oracle, 5, 1)
    assert np.array_equal(oracle.simulate_batch(c), oracle.simulate_batch(c.copy()))


def test_trendelenburg_pair_bit_identical(oracle):
    s = oracle.schema
    a = oracle.reference_anatomy()
    b = a.copy()
    a[s.position("w_hip_abductor_l")] = 0.5
    b[s.position("c_hip_adductor_r")] = 0.5
    g = oracle.reference_gait()
    ga, gb = oracle.simulate(a, g), oracle.simulate(b, g)
    assert np.array_equal(ga.frames, gb.frames)
    ref = oracle.simulate(oracle.reference_anatomy(), g)
    assert d_gait(ga.flatten(), ref.flatten(), oracle.layout) > 1e-3


@pytest.mark.parametrize("k", [0, 1])
def test_certified_redundancy_random(oracle, k):
    rng = np.random.default_rng(100 + k)
    s = oracle.schema
    ai = s.anatomy_idx
    r = oracle.redundancy[k].direction
    lo, hi = s.lo[ai], s.hi[ai]
    worst = 0.0
    for _ in range(100):
        a = rng.uniform(lo, hi)
        # largest step keeping the moved condition in range
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(r > 0, (hi - a) / r, np.where(r < 0, (lo - a) / r, np.inf))
            dn = np.where(r > 0, (a - lo) / r, np.where(r < 0, (a - hi) / r, np.inf))
        eps = rng.uniform(-dn.min(), up.min())
        g = rng.uniform(s.lo[s.gait_idx], s.hi[s.gait_idx])
        moved = oracle.redundant_pair(a, k, eps)
        x = oracle.simulate(a, g).frames
        y = oracle.simulate(moved, g).frames
        worst = max(worst, np.abs(x - y).max())
    assert worst <= 1e-12


def test_redundant_pair_cases(oracle):
    a = oracle.reference_anatomy()
    assert np.array_equal(oracle.redundant_pair(a, 0, 0.0), a)
    with pytest.raises(RangeError, match="outside"):
        oracle.redundant_pair(a, 0, 0.9)
    moved = oracle.redundant_pair(a, 1, -0.2)
    assert not np.array_equal(moved, a)


def test_redundancy_directions_are_in_null_space(oracle):
    for red in oracle.redundancy:
        rm = red.direction[oracle.schema.muscle_idx]
        assert np.array_equal(oracle.influence @ rm, np.zeros(len(oracle.influence)))


def test_inert_parameters_have_no_effect(oracle):
    s = oracle.schema
    c = random_full(oracle, 20, 2)
    c2 = c.copy()
    for name in oracle.inert_params:
        c2[:, s.position(name)] = np.random.default_rng(3).uniform(s.lo[0], s.hi[0], size=20)
    assert np.array_equal(oracle.simulate_batch(c), oracle.simulate_batch(c2))


def _row_pairs(oracle):
    pairs = []
    for i, row in enumerate(oracle.spec["responses"]):
        for name in row["influence"]:
            pairs.append((i, name))
    return pairs


def test_monotone_response(oracle):
    """Each (muscle, response row) amplitude is monotone over a 10-point sweep."""
    s = oracle.schema
    base = oracle.channels(s.reference[None])[0]
    for i, name in _row_pairs(oracle):
        k = oracle._row_channel[i]
        shape = oracle._row_shapes[i, :, k]
        cond = np.repeat(s.reference[None], 10, axis=0)
        p = s.position(name)
        cond[:, p] = np.linspace(s.lo[p], s.hi[p], 10)
        dev = oracle.channels(cond)[:, :, k] - base[None, :, k]
        amp = dev @ shape / (shape @ shape)
        steps = np.diff(amp)
        assert np.all(steps > 0) or np.all(steps < 0), (oracle.response_names[i], name, amp)


def test_ankle_push_off_decreases_with_weakness(oracle):
    s = oracle.schema
    k = oracle.channel_index("ankle_l.x")
    p = s.position("w_plantarflexor_l")
    cond = np.repeat(s.reference[None], 10, axis=0)
    cond[:, p] = np.linspace(s.hi[p], s.lo[p], 10)  # increasingly weak
    push_off = -oracle.channels(cond)[:, :, k].min(axis=1)
    assert np.all(np.diff(push_off) < 0)


def test_height_dips_with_knee_extensor_weakness(oracle):
    s = oracle.schema
    k = oracle.channel_index("root.h")
    cond = np.repeat(s.reference[None], 5, axis=0)
    for side in "lr":
        cond[:, s.position(f"w_knee_extensor_{side}")] = np.linspace(1.0, 0.25, 5)
    h_min = oracle.channels(cond)[:, :, k].min(axis=1)
    assert np.all(np.diff(h_min) < 0)


def test_velocity_scales_with_stride_and_cadence(oracle):
    s = oracle.schema
    k = oracle.channel_index("root.vx")
    c = np.repeat(s.reference[None], 2, axis=0)
    c[1, s.position("stride")] = 1.2
    c[1, s.position("cadence")] = 1.1
    vx = oracle.channels(c)[:, :, k].mean(axis=1)
    assert vx[1] / vx[0] == pytest.approx(1.2 * 1.1, rel=1e-9)


def test_lipschitz_bound(oracle):
    L = oracle.lipschitz_bound
    assert L is not None and L > 0
    s = oracle.schema
    rng = np.random.default_rng(5)
    u = rng.uniform(size=(500, s.n_params))
    u2 = np.clip(u + rng.normal(scale=rng.choice([0.3, 0.03, 0.003], size=(500, 1)), size=u.shape), 0, 1)
    g1 = oracle.simulate_batch(s.denormalize(u))
    g2 = oracle.simulate_batch(s.denormalize(u2))
    ratio = np.linalg.norm(g1 - g2, axis=1) / np.linalg.norm(u - u2, axis=1)
    assert ratio.max() <= L


def test_out_of_range_rejected(oracle):
    c = oracle.schema.reference.copy()
    c[oracle.schema.position("stride")] = 1.5
    with pytest.raises(RangeError, match="stride"):
        oracle.simulate_batch(c[None])


def test_valid_ranges(oracle, tmp_path):
    s = oracle.valid_ranges()
    assert np.all(s.lo < s.hi)
    assert np.all((s.reference >= s.lo) & (s.reference <= s.hi))
    s.write(tmp_path / "schema.json")
    back = ConditionSchema.read(tmp_path / "schema.json")
    assert back == s and back.hash == s.hash


def test_schema_file_errors(oracle, tmp_path):
    d = oracle.schema.to_dict()
    with pytest.raises(VersionError):
        ConditionSchema.from_dict({**d, "version": 99})
    with pytest.raises(FormatError):
        ConditionSchema.from_json("{not json")
    bad = json.loads(json.dumps(d))
    bad["parameters"][0]["min"] = bad["parameters"][0]["max"]
    with pytest.raises(FormatError, match="min >= max"):
        ConditionSchema.from_dict(bad)


def test_oracle_file_round_trip(oracle, tmp_path):
    p = tmp_path / "oracle.json"
    p.write_text(json.dumps(oracle.spec))
    o2 = Oracle.from_file(p)
    assert o2.hash == oracle.hash
    c = random_full(oracle, 4, 6)
    assert np.array_equal(o2.simulate_batch(c), oracle.simulate_batch(c))
    with pytest.raises(VersionError):
        Oracle({**oracle.spec, "version": 2})


def test_invalid_redundancy_certificate_rejected(oracle):
    spec = json.loads(json.dumps(oracle.spec))
    spec["redundancy"].append({"name": "bogus", "direction": {"w_knee_extensor_l": 1.0}})
    with pytest.raises(FormatError, match="null space"):
        Oracle(spec)
