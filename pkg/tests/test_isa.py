from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from robocore import geom, isa
from robocore.geom import Aabb, ExitStage, Ray, Sphere
from robocore.isa import NodeType, UopKind
from robocore.workloads import random_pairs


@pytest.mark.parametrize("name", sorted(isa.VARIANTS))
@pytest.mark.parametrize("spheres", [False, True])
def test_every_program_validates(name, spheres):
    p = isa.assemble_sact(name, spheres)
    assert isa.validate(p) == []
    assert isa.check(p) is p


@pytest.mark.parametrize(
    "name,spheres,size",
    [
        ("tta+", False, 47),
        ("tta+", True, 81),
        ("rc_p", False, 47),
        ("rc_p", True, 81),
        ("rc_cr", False, 47),
        ("rc_cr", True, 81),
        ("rc_p_cu", False, 20),
        ("rc_cr_cu", False, 20),
    ],
)
def test_program_sizes(name, spheres, size):
    p = isa.assemble_sact(name, spheres)
    assert p.test_uop_count == size
    # conditional-return programs carry one extra RETURN
    assert len(p) == size + (1 if p.variant.cond_return else 0)


def test_uop_mix_matches_stage_table():
    p = isa.assemble_sact("rc_p", spheres_enabled=True)
    expected = Counter()
    for stage, mix in isa.STAGE_UOPS.items():
        for kind, n in mix.items():
            expected[kind] += n * isa.STAGE_TESTS[stage]
    assert p.kind_counts() == expected


def test_collision_units_fuse_axis_tests():
    p = isa.assemble_sact("rc_cr_cu")
    counts = p.kind_counts()
    assert counts[UopKind.BOXN] == 6 and counts[UopKind.EXE] == 9
    assert counts[UopKind.CROSS] == 0 and counts[UopKind.DOT] == 0


def test_cond_return_compares_have_two_destinations():
    p = isa.assemble_sact("rc_cr")
    for (nt, pc), entry in p.dest_table.items():
        u = p.uops[pc]
        assert entry.dual == (u.kind in isa.COMPARE_KINDS)
        if u.exit_when is not None:
            taken = entry.route if u.exit_when else entry.false_route
            assert taken.next_pc is not None and p.uops[taken.next_pc].kind is UopKind.RETURN
    assert not any(e.dual for _, e in isa.assemble_sact("rc_p").dest_table.items())


def test_predication_marks_everything_after_first_exit():
    p = isa.assemble_sact("rc_p")
    first = next(pc for pc, u in enumerate(p.uops) if u.exit_when is not None)
    assert not any(u.predicated for u in p.uops[: first + 1])
    assert all(u.predicated for u in p.uops[first + 1 :])
    assert not any(u.predicated for u in isa.assemble_sact("tta+").uops)


def test_clustered_variants_route_to_cluster_ports():
    p = isa.assemble_sact("rc_cr_cl")
    ports = {p.unit_of(pc) for pc in range(len(p))}
    assert {"CLUSTER_A", "CLUSTER_B"} <= ports


# --- validation catches malformed programs -----------------------------------------------------


def _with_uops(p, uops):
    return replace(p, uops=tuple(uops))


def test_validate_rejects_fused_ops_without_units():
    cu = isa.assemble_sact("rc_p_cu")
    bad = replace(cu, variant=isa.variant("rc_p"))
    assert any("collision units" in d.message for d in isa.validate(bad))


def test_validate_rejects_bad_register():
    p = isa.assemble_sact("tta+")
    uops = list(p.uops)
    uops[3] = replace(uops[3], dst=99)
    with pytest.raises(isa.ProgramError, match="register index out of range"):
        isa.check(_with_uops(p, uops))


def test_validate_rejects_dangling_route():
    p = isa.assemble_sact("tta+")
    table = isa.OpDestTable(dict(p.dest_table.entries))
    table.entries[(NodeType.OCTREE_LEAF, 5)] = isa.DestEntry(isa.Route(500, "SUB3"))
    msgs = [d.message for d in isa.validate(replace(p, dest_table=table))]
    assert any("dangling" in m for m in msgs)
    assert any("unreachable" in m for m in msgs)


def test_validate_rejects_single_entry_compare_under_cond_return():
    p = isa.assemble_sact("rc_cr")
    table = isa.OpDestTable(dict(p.dest_table.entries))
    key = next(k for k, e in table.items() if e.dual)
    table.entries[key] = isa.DestEntry(table.entries[key].route)
    assert any("two destination" in d.message for d in isa.validate(replace(p, dest_table=table)))


def test_validate_rejects_unpredicated_tail():
    p = isa.assemble_sact("rc_p")
    uops = list(p.uops)
    uops[-1] = replace(uops[-1], predicated=False)
    assert any("predicate" in d.message for d in isa.validate(_with_uops(p, uops)))


def test_validate_rejects_use_before_def():
    p = isa.assemble_sact("tta+")
    uops = list(p.uops)
    uops[0], uops[5] = uops[5], uops[0]
    assert any("undefined registers" in d.message for d in isa.validate(_with_uops(p, uops)))


def test_unknown_variant():
    with pytest.raises(KeyError):
        isa.variant("rc_x")


def test_dump_lists_every_uop():
    p = isa.assemble_sact("rc_cr_cu")
    text = p.dump()
    assert text.count("\n") == len(p) + 1
    assert "false:" in text


# --- interpreter equivalence -----------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(isa.VARIANTS))
@pytest.mark.parametrize("spheres", [False, True])
def test_interpreter_matches_staged_test(name, spheres):
    p = isa.assemble_sact(name, spheres)
    rng = np.random.default_rng(len(name) + spheres)
    o, c, h = random_pairs(rng, 150)
    for obb, ac, ah in zip(o, c, h):
        box = Aabb(ac, ah)
        ref = geom.sat_staged(obb, box, enable_spheres=spheres)
        got = isa.interpret(p, obb, box)
        assert got.collides == ref.collides
        assert got.exit == ref.exit


def test_uop_costs_follow_early_exit_style(rng):
    o, c, h = random_pairs(rng, 300)
    programs = {n: isa.assemble_sact(n) for n in ("tta+", "rc_p", "rc_cr")}
    for obb, ac, ah in zip(o, c, h):
        box = Aabb(ac, ah)
        r = {n: isa.interpret(p, obb, box) for n, p in programs.items()}
        # without early exit every μop is decoded and computed
        assert r["tta+"].uops_executed == r["tta+"].uops_computed == 47
        # predication decodes all, computes only up to the exit
        assert r["rc_p"].uops_executed == 47
        # the same compute work as conditional return, which also spends one RETURN
        assert r["rc_cr"].uops_computed - r["rc_p"].uops_computed in (0, 1)
        # conditional return stops decoding at the exit
        assert r["rc_cr"].uops_executed <= 48
        if r["rc_cr"].exit is not ExitStage.FULL_OVERLAP:
            assert r["rc_cr"].uops_executed < 47


def test_execute_batch_matches_interpret(rng):
    p = isa.assemble_sact("rc_cr_cu", True)
    o, c, h = random_pairs(rng, 200)
    regs = isa.pack_sact(
        np.array([x.center for x in o]),
        np.array([x.half_extents for x in o]),
        np.array([x.axes for x in o]),
        c,
        h,
        np.float64,
    )
    r = isa.execute(p, NodeType.OCTREE_LEAF, regs)
    for i, (obb, ac, ah) in enumerate(zip(o, c, h)):
        single = isa.interpret(p, obb, Aabb(ac, ah))
        assert bool(r.result[i]) == single.collides
        assert ExitStage(int(r.stage[i])) == single.exit
        assert int(r.decoded[i]) == single.uops_executed


# --- ball query and grid programs --------------------------------------------------------------------


@pytest.mark.parametrize("formulation", ["pray", "psphere"])
@pytest.mark.parametrize("name", ["rc_p_cu", "rc_cr_cu"])
def test_ball_query_programs(formulation, name, rng):
    p = isa.check(isa.assemble_ball_query(formulation, 16, name))
    for _ in range(200):
        q = rng.uniform(-1, 1, 3)
        box = Aabb(rng.uniform(-1, 1, 3), rng.uniform(0.05, 0.6, 3))
        inside = bool(np.all(np.abs(q - box.center) <= box.half_extents))
        assert isa.interpret(p, Ray.point(q), box).collides == inside
        s = Sphere(rng.uniform(-1, 1, 3), 0.5)
        assert isa.interpret(p, Ray.point(q), s).collides == (np.linalg.norm(q - s.center) <= 0.5)


def test_ball_query_cap_only_on_cond_return_psphere():
    has_cap = lambda p: any(u.terminate_query for u in p.uops)  # noqa: E731
    assert has_cap(isa.assemble_ball_query("psphere", 8, "rc_cr_cu"))
    assert not has_cap(isa.assemble_ball_query("pray", 8, "rc_cr_cu"))
    assert not has_cap(isa.assemble_ball_query("psphere", 8, "rc_p_cu"))
    with pytest.raises(ValueError):
        isa.assemble_ball_query("pcube", 8)


@pytest.mark.parametrize("name", ["rc_p", "rc_cr"])
def test_grid_step_program_validates(name):
    assert isa.validate(isa.assemble_grid_step(name)) == []
