import numpy as np
import pytest

from robocore import isa, oracle, scene, simcore, workloads
from robocore.scene import OccupancyGrid


# --- collision environments ----------------------------------------------------------------------


@pytest.mark.parametrize("kind", workloads.ENV_KINDS)
def test_collision_fraction_near_target(kind):
    wl = workloads.gen_env(kind, 1, n_points=16384, n_obbs=512, max_depth=6)
    assert abs(wl.collision_fraction - workloads.COLLISION_TARGETS[kind]) <= 0.1
    # the stored count is the exact flat answer
    fc = workloads.FlatCollider(wl.octree)
    assert wl.expected_collisions == sum(fc.collides(o) for o in wl.obbs)


def test_gen_env_is_deterministic():
    a = workloads.gen_env("dresser", 9, n_points=4096, n_obbs=64, max_depth=5)
    b = workloads.gen_env("dresser", 9, n_points=4096, n_obbs=64, max_depth=5)
    c = workloads.gen_env("dresser", 10, n_points=4096, n_obbs=64, max_depth=5)
    assert np.array_equal(a.points.points, b.points.points)
    assert all(np.array_equal(x.center, y.center) and np.array_equal(x.axes, y.axes) for x, y in zip(a.obbs, b.obbs))
    assert a.octree.digest() == b.octree.digest()
    assert not np.array_equal(a.points.points, c.points.points)


def test_gen_env_rejects_unknown_kind():
    with pytest.raises(ValueError):
        workloads.gen_env("kitchen", 1)


def test_surface_samples_lie_on_boxes(rng):
    boxes = workloads.env_boxes("cubby", rng)
    pts = workloads.sample_box_surfaces(boxes, 2000, rng)
    on_some = np.zeros(len(pts), dtype=bool)
    for c, h in boxes:
        lo, hi = c - h, c + h
        inside = np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)
        on_face = np.any(np.isclose(pts, lo) | np.isclose(pts, hi), axis=1)
        on_some |= inside & on_face
    assert on_some.all()


def test_flat_collider_matches_flat_scan(small_env):
    fc = workloads.FlatCollider(small_env.octree)
    centers, halves = small_env.octree.occupied_boxes()
    for o in small_env.obbs[:100]:
        assert fc.collides(o) == oracle.collide_flat(o, centers, halves)


def test_workload_scene_roundtrip(tmp_path, small_env):
    path = scene.save_scene(small_env.to_scene(), tmp_path / "w.scene.json")
    back = workloads.CollisionWorkload.from_scene(scene.load_scene(path))
    assert back.kind == "cubby" and back.expected_collisions == small_env.expected_collisions
    assert back.octree.digest() == small_env.octree.digest()


def test_random_pairs_mix_outcomes(rng):
    o, c, h = workloads.random_pairs(rng, 2000)
    res, _ = simcore.test_pairs(isa.assemble_sact("rc_cr"), o, c, h)
    assert 0.3 < res.mean() < 0.7


def test_collision_oracle_check_reports_flipped_result(small_env):
    r = simcore.run(isa.assemble_sact("rc_cr_cu"), small_env.octree, small_env.obbs[:40])
    assert workloads.collision_oracle_check(small_env, r.results, limit=40) == []
    flipped = r.results.copy()
    flipped[7] = not flipped[7]
    assert workloads.collision_oracle_check(small_env, flipped, limit=40) == [7]


# --- ball query ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ball_results(small_ball):
    return {
        (f, ee): workloads.run_ball_query(small_ball, f, early_exit=ee)
        for f in ("pray", "psphere")
        for ee in (False, True)
    }


def test_ball_query_groups_match_brute_force(small_ball, ball_results):
    for key, res in ball_results.items():
        assert workloads.ball_query_oracle_check(small_ball, res, sample=None) == [], key


def test_psphere_early_exit_saves_nodes(ball_results):
    assert ball_results[("psphere", True)].total_nodes < ball_results[("psphere", False)].total_nodes
    # P-Ray rays cannot stop early, so the cap changes nothing in traversal
    assert ball_results[("pray", True)].total_nodes == ball_results[("pray", False)].total_nodes


def test_psphere_full_sets_equal_pray_full_sets(small_ball, ball_results):
    ray = ball_results[("pray", False)].full_sets
    sph = ball_results[("psphere", False)].full_sets
    r = small_ball.radius
    for c, (a, b) in enumerate(zip(ray, sph)):
        diff = np.setxor1d(a, b)
        if len(diff):
            center = small_ball.center_points[c]
            band = oracle.radius_band(small_ball.points, center, r)
            assert np.isin(diff, band).all()


def test_psphere_traverses_fewer_nodes(ball_results):
    assert ball_results[("psphere", True)].total_nodes < ball_results[("pray", True)].total_nodes


def test_ball_query_row_fields(ball_results):
    row = ball_results[("psphere", True)].row()
    assert row["formulation"] == "P-Sphere" and row["early_exit"] is True
    assert row["total_rays"] == 64 and row["total_spheres"] == 4096
    assert row["avg_nodes_per_ray"] == pytest.approx(row["total_nodes_traversed"] / 64)


def test_ball_query_checker_catches_bad_group(small_ball, ball_results):
    res = ball_results[("psphere", False)]
    bad = [g.copy() for g in res.groups]
    far = int(np.argmax(np.linalg.norm(small_ball.points - small_ball.center_points[0], axis=1)))
    bad[0] = np.append(bad[0][:-1] if len(bad[0]) == small_ball.k_max else bad[0], far)
    tampered = workloads.BallQueryResult(**{**res.__dict__, "groups": bad})
    assert workloads.ball_query_oracle_check(small_ball, tampered, sample=None) == [0]


def test_gen_ball_query_validation():
    with pytest.raises(ValueError):
        workloads.gen_ball_query(1, n=10, k=20)
    with pytest.raises(ValueError):
        workloads.gen_ball_query(1, n=10, k=5, K=0)


# --- MCL ray casting -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_mcl():
    return workloads.gen_mcl(4, particles=8, rays_per_particle=36, iterations=12, dims=(32, 32, 4))


def test_grid_cast_matches_brute_force(small_mcl):
    for it in (0, 6, 11):
        o, d = small_mcl.rays(it)
        r = simcore.run(isa.assemble_grid_step("rc_cr"), small_mcl.grid, (o, d), t_max=small_mcl.t_max)
        cells, ambiguous = workloads.ray_cast_ref(small_mcl.grid, o, d, small_mcl.t_max)
        ok = ambiguous | np.all(r.results.cell == cells, axis=1)
        assert ok.all()
        assert np.array_equal(r.results.hit[~ambiguous], (cells[:, 0] >= 0)[~ambiguous])


def test_ray_cast_ref_hand_case():
    occ = np.zeros((4, 1, 1), dtype=bool)
    occ[2, 0, 0] = True
    g = OccupancyGrid((0.0, 0.0, 0.0), 1.0, occ)
    cells, amb = workloads.ray_cast_ref(g, [[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]], [[1, 0, 0], [-1, 0, 0]], 10.0)
    assert cells.tolist() == [[2, 0, 0], [-1, -1, -1]] and not amb.any()


def test_mcl_policy_follows_previous_iteration(small_mcl):
    res = workloads.run_mcl(small_mcl)
    assert len(res.rows) == small_mcl.iterations
    assert res.rows[0]["path"] == "sim"
    for prev, row in zip(res.rows, res.rows[1:]):
        expect = "sim" if prev["avg_nodes_per_ray"] >= small_mcl.switch_threshold else "host"
        assert row["path"] == expect
    assert res.totals["dynamic"] == pytest.approx(sum(r["cost_chosen"] for r in res.rows))
    changes = sum(a["path"] != b["path"] for a, b in zip(res.rows, res.rows[1:]))
    assert res.switches == changes


def test_fully_occupied_grid_switches_to_host():
    g = OccupancyGrid((0.0, 0.0, 0.0), 0.1, np.ones((16, 16, 4), dtype=bool))
    wl = workloads.gen_mcl(2, particles=4, rays_per_particle=16, iterations=4, grid=g)
    res = workloads.run_mcl(wl)
    assert [r["path"] for r in res.rows] == ["sim", "host", "host", "host"]
    assert all(r["avg_nodes_per_ray"] == 1.0 for r in res.rows)
    assert res.switches == 1
