import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecnet.bench.bump import BumpTaskConfig, Encoding, Holdout, HoldoutKind, bump_image, encode_position, sample_centers
from vecnet.bench.nbody import (
    N_FEATURES,
    BodyState,
    FeatureLayout,
    Force,
    SimConfig,
    SimulationError,
    accelerations,
    features,
    force,
    generate_nbody_dataset,
    id_conditions,
    ood_conditions,
    rk4_integrate,
    rk4_step,
    simulate,
)
from vecnet.bench.signals import Difficulty, Family, primitive, sample_signal, signal_matrix, t_grid

# bump task


def test_bump_peak_and_neighbour_value():
    cfg = BumpTaskConfig()
    img = bump_image(cfg, [(14.0, 14.0)]).reshape(28, 28)
    assert img[14, 14] == 1.0
    assert img[14, 15] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert img[13, 14] == pytest.approx(0.6065306597126334, abs=1e-15)


def test_bump_row_is_y():
    img = bump_image(BumpTaskConfig(), [(3.0, 20.0)]).reshape(28, 28)
    assert np.unravel_index(np.argmax(img), img.shape) == (20, 3)


def test_bump_superposition_is_linear():
    cfg = BumpTaskConfig(n_bumps=2)
    one = bump_image(cfg, [(5.5, 7.25)])
    np.testing.assert_array_equal(bump_image(cfg, [(5.5, 7.25), (5.5, 7.25)]), 2 * one)
    a, b = bump_image(cfg, [(2.0, 3.0)]), bump_image(cfg, [(20.0, 11.0)])
    np.testing.assert_allclose(bump_image(cfg, [(2.0, 3.0), (20.0, 11.0)]), a + b, rtol=0, atol=1e-15)


def test_bump_sharp_variant():
    img = bump_image(BumpTaskConfig(sigma=0.5), [(10.0, 10.0)]).reshape(28, 28)
    assert img[10, 11] == pytest.approx(math.exp(-2.0), abs=1e-15)


@pytest.mark.parametrize("centers", [[], [(-0.1, 3.0)], [(3.0, 27.5)]])
def test_bump_rejects_bad_centres(centers):
    with pytest.raises(ValueError):
        bump_image(BumpTaskConfig(), centers)


def test_bump_config_validation():
    with pytest.raises(ValueError):
        BumpTaskConfig(holdout=Holdout(half_side=14.0))
    with pytest.raises(ValueError):
        BumpTaskConfig(holdout=Holdout(HoldoutKind.ANNULUS, r_in=5.0, r_out=14.0))
    with pytest.raises(ValueError):
        BumpTaskConfig(sigma=0.0)


@pytest.mark.parametrize("enc, dim", [("bump", 56), ("one_hot", 56), ("fourier_14", 56), ("fourier_7", 28),
                                      ("scalar", 2)])
def test_encoding_dims(enc, dim):
    cfg = BumpTaskConfig(encoding=enc)
    assert cfg.encoding_dim == dim
    assert encode_position(cfg, 3.3, 17.0).shape == (dim,)


def test_encoding_examples():
    np.testing.assert_array_equal(encode_position(BumpTaskConfig(encoding="scalar"), 14, 14), [0.5, 0.5])
    oh = encode_position(BumpTaskConfig(encoding=Encoding.ONE_HOT), 0, 27)
    assert oh[0] == 1 and oh[28 + 27] == 1 and oh.sum() == 2
    f = encode_position(BumpTaskConfig(encoding="fourier_7"), 7.0, 0.0)
    # j = 1 at c = N/4: sin = 1, cos = 0
    assert f[0] == pytest.approx(1.0) and f[1] == pytest.approx(0.0, abs=1e-15)
    assert f[14] == 0.0 and f[15] == 1.0


def test_encoding_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode_position(BumpTaskConfig(), 28.0, 1.0)


@pytest.mark.parametrize("kind", ["square", "annulus"])
def test_sample_centers_respects_holdout(kind):
    cfg = BumpTaskConfig(holdout=Holdout(kind))
    rng = np.random.default_rng(0)
    inside = sample_centers(cfg, 200, rng, True)
    outside = sample_centers(cfg, 200, rng, False)
    assert cfg.holdout.contains(inside, 28).all()
    assert not cfg.holdout.contains(outside, 28).any()


def test_square_holdout_is_half_open():
    h = Holdout(half_side=4.0)
    c0 = 13.5
    assert h.contains(np.array([[c0 - 4.0, c0]]), 28)[0]
    assert not h.contains(np.array([[c0 + 4.0, c0]]), 28)[0]


# signals


def test_primitive_examples():
    t = np.array([math.pi / 2, math.pi])
    assert primitive(Family.SIN, t, 1.0, 1, 0.0)[0] == pytest.approx(1.0, abs=1e-15)
    assert primitive("gauss", t, 1.7, 3)[1] == 1.7
    assert primitive("poly", np.array([2 * math.pi]), 0.8, 4)[0] == pytest.approx(0.8)


def test_t_grid_endpoints():
    t = t_grid()
    assert t.size == 512 and t[0] == 0.0 and t[-1] == pytest.approx(2 * math.pi)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**40))
def test_easy_ood_is_sum_of_two_distinct_families(seed):
    s = sample_signal(seed, Difficulty.EASY_OOD)
    assert np.max(np.abs(s.values - (s.components[0] + s.components[1]))) <= 1e-12
    fams = [d["family"] for d in s.descriptor["sum"]]
    assert fams[0] != fams[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**40), st.sampled_from(list(Difficulty)))
def test_samples_are_deterministic_and_finite(seed, diff):
    a, b = sample_signal(seed, diff), sample_signal(seed, diff)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.descriptor == b.descriptor
    assert np.all(np.isfinite(a.values))


def test_id_sample_matches_descriptor():
    s = sample_signal(11, "id")
    d = s.descriptor
    assert 0.5 <= d["a"] <= 2.0 and d["f"] in range(1, 6) and 0 <= d["phi"] < 2 * math.pi
    np.testing.assert_array_equal(s.values, primitive(d["family"], s.t_grid, d["a"], d["f"], d["phi"]))


def test_hard_ood_covers_quoted_template():
    names = {sample_signal(s, "hard_ood").descriptor["template"] for s in range(200)}
    assert "nested_sin_cos" in names and len(names) == 4


def test_signal_matrix_shape_and_seed_separation():
    A = signal_matrix(5, "id", seed=0)
    assert A.shape == (5, 512)
    assert not np.array_equal(A, signal_matrix(5, "id", seed=1))
    with pytest.raises(ValueError):
        signal_matrix(0, "id")


# n-body


def state(pos, vel):
    return BodyState(np.array(pos, float), np.array(vel, float))


def test_force_examples():
    s = state([[0, 0], [1, 0]], [[1, 0], [0, 0]])
    np.testing.assert_allclose(force("drag", s, 0), [-0.3, 0])
    np.testing.assert_allclose(force("lorentz", s, 0), [0, 2])
    np.testing.assert_allclose(force("spring", s, 0, 1), [0, 0], atol=1e-15)
    g = force("gravity", s, 0, 1)
    np.testing.assert_allclose(g, [1 / 1.01, 0], rtol=1e-15)  # toward body 1


def test_pairwise_force_needs_partner():
    s = state([[0, 0], [1, 0]], [[0, 0], [0, 0]])
    with pytest.raises(ValueError):
        force("gravity", s, 0, 0)
    with pytest.raises(ValueError):
        force(Force.SPRING, s, 1)


def test_accelerations_sum_pairwise_forces():
    rng = np.random.default_rng(0)
    s = state(rng.uniform(-2, 2, (4, 2)), rng.normal(size=(4, 2)))
    kinds = (Force.GRAVITY, Force.SPRING, Force.DRAG, Force.LORENTZ)
    acc = accelerations(kinds, s.positions, s.velocities)
    for i in range(4):
        ref = force("drag", s, i) + force("lorentz", s, i)
        ref += sum(force(k, s, i, j) for k in ("gravity", "spring") for j in range(4) if j != i)
        np.testing.assert_allclose(acc[i], ref, rtol=1e-13, atol=1e-15)


def test_single_body_drag_target():
    v = np.array([[0.7, -1.2]])
    np.testing.assert_array_equal(accelerations([Force.DRAG], np.zeros((1, 2)), v), -0.3 * v)


def test_free_motion_advances_by_v_dt():
    cfg = SimConfig(forces=(), boundary=False)
    s = state([[0.1, 0.2], [1.0, -1.0]], [[0.3, -0.4], [1.0, 2.0]])
    out = rk4_step(cfg, s)
    np.testing.assert_array_equal(out.positions, s.positions + s.velocities * 0.005)
    np.testing.assert_array_equal(out.velocities, s.velocities)


def test_rk4_exact_for_constant_acceleration():
    a = np.array([0.7, -1.3])
    x0, v0 = np.array([0.2, 0.1]), np.array([-0.5, 0.4])
    x, v = x0, v0
    h = 0.01
    for _ in range(100):
        x, v = rk4_integrate(x, v, h, lambda x, v: a)
    T = 1.0
    assert np.max(np.abs(x - (x0 + v0 * T + 0.5 * a * T * T))) <= 1e-14
    assert np.max(np.abs(v - (v0 + a * T))) <= 1e-14


def _circular_orbit_error(dt, periods=1.0):
    # two unit masses in a circular orbit under softened gravity
    r = 1.0
    omega = math.sqrt(1.0 / ((2 * r) ** 2 + 0.01) / r)
    speed = omega * r
    cfg = SimConfig(forces=("gravity",), dt=dt, boundary=False)
    s = state([[r, 0], [-r, 0]], [[0, speed], [0, -speed]])
    T = 2 * math.pi / omega * periods
    steps = int(round(T / dt))
    traj = simulate(cfg, s, steps)
    th = omega * steps * dt
    exact = np.array([[r * math.cos(th), r * math.sin(th)], [-r * math.cos(th), -r * math.sin(th)]])
    return np.max(np.abs(traj.positions[-1] - exact))


def test_rk4_fourth_order_convergence():
    e1, e2, e3 = (_circular_orbit_error(dt) for dt in (0.02, 0.01, 0.005))
    assert 10 <= e1 / e2 <= 22 and 10 <= e2 / e3 <= 22


def test_soft_boundary_damps_only_outside_bodies():
    cfg = SimConfig(forces=(), dt=1e-9)
    s = state([[2.6, 0.0], [0.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
    out = rk4_step(cfg, s)
    np.testing.assert_allclose(out.positions[0], (s.positions[0] + 1e-9) * 0.98)
    np.testing.assert_allclose(out.velocities[0], [0.9, 0.9])
    np.testing.assert_array_equal(out.velocities[1], [1.0, 1.0])


def test_non_finite_state_raises():
    with pytest.raises(SimulationError):
        state([[np.nan, 0]], [[0, 0]])
    s = state([[0.0, 0.0]], [[1.0, 0.0]])
    with pytest.raises(SimulationError):
        rk4_step(SimConfig(), s, accel_fn=lambda x, v: np.full_like(x, np.inf))


def test_sim_config_defaults():
    c = SimConfig()
    assert (c.dt, c.box, c.position_damping, c.velocity_damping) == (0.005, 2.5, 0.98, 0.9)
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)


@pytest.mark.parametrize("layout", list(FeatureLayout))
def test_dataset_shapes_and_targets(layout):
    d = generate_nbody_dataset([0, 1], ["drag"], 3, horizon=10, layout=layout)
    assert d.features.shape == (60, N_FEATURES) == (60, 22)
    assert d.targets.shape == (60, 2)
    assert np.all(np.isfinite(d.features))


def test_drag_dataset_target_is_minus_gamma_v():
    d = generate_nbody_dataset([3], ["drag"], 4, horizon=5)
    np.testing.assert_array_equal(d.targets, -0.3 * d.features[:, 16:18])


def test_dataset_is_deterministic_and_rejects_bad_n():
    a = generate_nbody_dataset([5], ["gravity", "spring"], 5, horizon=8)
    b = generate_nbody_dataset([5], ["spring", "gravity"], 5, horizon=8)
    np.testing.assert_array_equal(a.features, b.features)
    for n in (1, 2, 6):
        with pytest.raises(ValueError):
            generate_nbody_dataset([0], ["drag"], n)


def test_force_channel_features_are_additive_in_forces():
    rng = np.random.default_rng(1)
    pos, vel = rng.uniform(-2, 2, (5, 2)), rng.normal(size=(5, 2))
    single = sum(features(pos, vel, [f]) for f in Force)
    both = features(pos, vel, list(Force))
    np.testing.assert_allclose(both[:, :20], single[:, :20], rtol=0, atol=1e-15)


def test_kinematic_layout():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
    vel = np.array([[1.0, 2.0], [0.5, 0.0], [0.0, -1.0]])
    f = features(pos, vel, ["gravity"], FeatureLayout.KINEMATIC)
    np.testing.assert_array_equal(f[0, :4], [0, 0, 1, 2])
    # nearest neighbour first: body 1 then body 2
    np.testing.assert_array_equal(f[0, 4:12], [1, 0, -0.5, -2, 0, 3, -1, -3])
    assert not f[0, 12:20].any()
    assert f[0, 20] == pytest.approx(math.sqrt(5)) and f[2, 21] == 3.0


def test_condition_splits():
    assert [c.name for c in id_conditions()] == ["gravity/n5", "spring/n5", "drag/n5", "lorentz/n5"]
    ood = ood_conditions()
    assert len(ood) == 11 * 3
    assert all(len(c.forces) >= 2 for c in ood)
