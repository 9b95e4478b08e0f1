import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from robocore import geom, isa, oracle, simcore
from robocore.geom import Aabb
from robocore.simcore import CacheConfig, LruCache, SimConfig
from robocore.workloads import random_pairs


@pytest.fixture(scope="module")
def runs(small_env):
    """One run per variant on the shared small scene."""
    out = {}
    for name in ("tta+", "rc_p", "rc_cr", "rc_p_cl", "rc_cr_cl", "rc_p_cu", "rc_cr_cu"):
        out[name] = simcore.run(isa.assemble_sact(name), small_env.octree, small_env.obbs)
    return out


# --- configuration ----------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"num_cores": 0},
        {"warp_size": -1},
        {"mem_latency": 0},
        {"core_clock_mhz": 0.0},
        {"latencies": {"SUB3": 0}},
        {"latencies": {"FOO": 1}},
        {"energy_weights": {"bogus": 1.0}},
        {"collision_unit_latency_scale": 0.0},
        {"stack_limit": 0},
    ],
)
def test_config_rejects_invalid_values(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown SimConfig keys"):
        SimConfig.from_dict({"num_corez": 4})
    with pytest.raises(ValueError, match="unknown l1 keys"):
        SimConfig.from_dict({"l1": {"ways": 4}})


def test_config_roundtrip_and_digest():
    cfg = SimConfig.from_dict({"num_cores": 4, "l2": {"latency": 200}})
    assert cfg.l2.latency == 200 and cfg.l2.assoc == 16
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == SimConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != SimConfig().digest()


def test_memory_latency_converted_to_core_clock():
    cfg = SimConfig()
    assert cfg.mem_latency_core == pytest.approx(300 * 1365 / 3500)
    assert SimConfig(mem_clock_mhz=1365.0).mem_latency_core == pytest.approx(300)


def test_cache_config_validation():
    with pytest.raises(ValueError):
        CacheConfig(64, 0, 20)  # smaller than a line
    with pytest.raises(ValueError):
        CacheConfig(128 * 6, 4, 20)  # 6 lines do not split into 4 ways


def test_lru_cache_fully_associative_eviction():
    c = LruCache(CacheConfig(3 * 128, 0, 20))
    assert [c.access(x) for x in (1, 2, 3, 1, 4, 2, 1)] == [False, False, False, True, False, False, True]
    assert (c.hits, c.misses) == (2, 5)


def test_lru_cache_sets_are_independent():
    c = LruCache(CacheConfig(4 * 128, 2, 20))  # two sets of two ways
    for line in (0, 2, 1, 3, 5):
        c.access(line)
    assert c.access(0) and c.access(2)  # even set untouched by odd lines
    assert not c.access(1)  # evicted by 5


# --- functional equivalence ----------------------------------------------------------------------


def test_results_match_reference_walk(small_env, runs):
    ref = [oracle.collide_ref(o, small_env.octree) for o in small_env.obbs]
    for name, r in runs.items():
        for i, (obb, (c, n)) in enumerate(zip(small_env.obbs, ref)):
            if bool(r.results[i]) != c or r.nodes_traversed[i] != n:
                assert oracle.in_margin_band(obb, small_env.octree), (name, i)


def test_exit_histogram_matches_reference(small_env):
    for spheres in (False, True):
        r = simcore.run(isa.assemble_sact("rc_cr_cu", spheres), small_env.octree, small_env.obbs)
        ref = oracle.count_exit_stages(small_env.obbs, small_env.octree, spheres)
        assert r.stats.exit_histogram.tolist() == ref.tolist()


def test_pair_datapath_matches_staged_reference(rng):
    o, c, h = random_pairs(rng, 3000)
    near = oracle.pair_in_band(o, c, h)
    for name in ("tta+", "rc_cr_cu"):
        res, _ = simcore.test_pairs(isa.assemble_sact(name), o, c, h)
        for i, obb in enumerate(o):
            if not near[i]:
                assert res[i] == geom.sat_full(obb, Aabb(c[i], h[i]))


def test_invalid_program_is_refused(small_env):
    p = isa.assemble_sact("rc_p_cu")
    with pytest.raises(isa.ProgramError):
        simcore.run(replace(p, variant=isa.variant("rc_p")), small_env.octree, small_env.obbs)


def test_run_rejects_empty_and_unknown_inputs(small_env):
    p = isa.assemble_sact("rc_cr")
    with pytest.raises(ValueError):
        simcore.run(p, small_env.octree, [])
    with pytest.raises(TypeError):
        simcore.run(p, object(), small_env.obbs)


# --- timing and activity ----------------------------------------------------------------------------


def test_runs_are_deterministic(small_env, runs):
    again = simcore.run(isa.assemble_sact("rc_cr_cu"), small_env.octree, small_env.obbs)
    a = simcore.stats_row(runs["rc_cr_cu"].stats, scene="s", variant="v")
    b = simcore.stats_row(again.stats, scene="s", variant="v")
    assert simcore.rows_to_csv([a]) == simcore.rows_to_csv([b])


def test_clustered_timing_equals_collision_units(runs):
    for ee in ("p", "cr"):
        assert runs[f"rc_{ee}_cl"].stats.total_cycles == runs[f"rc_{ee}_cu"].stats.total_cycles
        assert runs[f"rc_{ee}_cl"].stats.interconnect_packets == runs[f"rc_{ee}_cu"].stats.interconnect_packets


def test_packet_and_uop_ordering(runs):
    s = {k: r.stats for k, r in runs.items()}
    assert s["tta+"].interconnect_packets == s["rc_p"].interconnect_packets
    assert s["rc_p"].interconnect_packets > s["rc_cr"].interconnect_packets
    assert s["rc_cr"].interconnect_packets > s["rc_cr_cu"].interconnect_packets
    for st in s.values():
        assert st.uops_decoded >= st.uops_computed
    # predication decodes everything but skips work after the exit
    assert s["rc_p"].uops_decoded == s["tta+"].uops_decoded
    assert s["rc_p"].uops_computed < s["tta+"].uops_computed


def test_cycle_ordering(runs):
    c = {k: r.stats.total_cycles for k, r in runs.items()}
    assert c["rc_cr_cu"] <= c["rc_p_cu"] <= c["rc_p"]
    assert c["rc_cr_cu"] <= c["rc_cr"] <= c["rc_p"]


def test_utilization_bounded(runs):
    for r in runs.values():
        st = r.stats
        assert st.total_cycles > 0
        assert all(0.0 <= u <= 1.0 for u in st.utilization(1).values())
        assert 0.0 <= st.interconnect_occupancy <= 1.0
        assert len(st.query_latency) == r.trace.n_queries
        assert np.all(st.query_latency <= st.total_cycles)


def test_energy_report_sums_and_scales(small_env, runs):
    st = runs["rc_cr"].stats
    assert st.energy_total == pytest.approx(sum(st.energy.values()))
    cfg = SimConfig(energy_weights={"packet": 2 * SimConfig().energy_weights["packet"]})
    doubled = simcore.energy_report(st, cfg)
    assert doubled["interconnect"] == pytest.approx(2 * st.energy["interconnect"])
    assert doubled["l2"] == pytest.approx(st.energy["l2"])


def test_slower_collision_units_never_speed_up(small_env, runs):
    slow = simcore.run(
        isa.assemble_sact("rc_cr_cu"), small_env.octree, small_env.obbs, SimConfig(collision_unit_latency_scale=2.0)
    )
    assert slow.stats.total_cycles >= runs["rc_cr_cu"].stats.total_cycles
    assert slow.stats.interconnect_packets == runs["rc_cr_cu"].stats.interconnect_packets


def test_fetch_counts_cover_visits(runs):
    for r in runs.values():
        st = r.stats
        assert st.fetch_l1 + st.fetch_l2 + st.fetch_mem >= 1
        assert st.nodes_traversed == int(r.trace.nodes_traversed.sum())


# --- reporting --------------------------------------------------------------------------------------


def test_stats_json_has_labelled_histogram(runs):
    d = runs["rc_cr_cu"].stats.to_json()
    assert "FullOverlap" in d["exit_histogram"] and "BoxNormalAxis(0)" in d["exit_histogram"]
    assert d["energy_total"] == pytest.approx(sum(d["energy"].values()))


def test_run_batch_and_csv(small_env, tmp_path):
    exps = [
        simcore.Experiment("cubby", isa.assemble_sact(v), small_env.octree, small_env.obbs[:32])
        for v in ("rc_p", "rc_cr")
    ]
    rows = simcore.run_batch(exps)
    text = simcore.rows_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert [r["variant"] for r in parsed] == ["rc_p", "rc_cr"]
    assert parsed[0]["cycles"].count(".") == 1 and len(parsed[0]["cycles"].split(".")[1]) == 6
    path = tmp_path / "out.csv"
    simcore.write_atomic(path, text)
    assert path.read_text() == text and not (tmp_path / "out.csv.tmp").exists()
