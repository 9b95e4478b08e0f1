"""Command-line entry point: ``robocore <command> [options]``.

Commands
  collide    run architecture variants on a collision scene and cross-check the oracle
  ballquery  P-Ray versus P-Sphere ball query with a radius sweep
  mcl        ray-casting localization with dynamic simulator/host switching
  sweep      collision-unit latency sweep
  verify     property suite against the reference oracles
  gen-scene  write a synthetic collision scene to a ``.scene.json`` file

Every command takes an optional JSON config (``--config``); flags override
file fields.  Exit codes: 0 success, 1 oracle mismatch, 2 config or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import geom, isa, oracle, scene, simcore, workloads

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2

DEFAULT_VARIANTS = ("tta+", "rc_p", "rc_cr", "rc_p_cu", "rc_cr_cu")


class ConfigError(Exception):
    """Invalid experiment configuration or unreadable input."""


_BALL_KEYS = {"n": int, "k": int, "radius": float, "k_max": int, "leaf_size": int, "oracle_sample": int}
_MCL_KEYS = {
    "particles": int,
    "rays_per_particle": int,
    "iterations": int,
    "switch_threshold": float,
    "host_cost_per_step": float,
    "sim_launch_cycles": float,
}
_VERIFY_KEYS = {"pairs": int, "queries": int}


@dataclass
class ExperimentConfig:
    scenario: str = "cubby"
    scene_file: str | None = None
    n_points: int = 65536
    n_obbs: int = 4096
    max_depth: int = 8
    variants: list[str] = field(default_factory=lambda: list(DEFAULT_VARIANTS))
    spheres: bool = False
    sim: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    out_csv: str | None = None
    out_json: str | None = None
    scales: list[float] | None = None
    oracle_limit: int | None = None
    ball: dict[str, Any] = field(default_factory=dict)
    mcl: dict[str, Any] = field(default_factory=dict)
    verify: dict[str, Any] = field(default_factory=dict)

    def sim_config(self) -> simcore.SimConfig:
        try:
            return simcore.SimConfig.from_dict(self.sim)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"sim: {e}") from None


def _check_section(name: str, d: Any, schema: dict[str, type]) -> dict[str, Any]:
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(d) - set(schema)
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (schema[k] is int and not isinstance(v, int)):
            raise ConfigError(f"{name}.{k} must be {schema[k].__name__}")
        out[k] = schema[k](v)
    return out


def parse_config(d: dict[str, Any]) -> ExperimentConfig:
    """Validate a JSON config document; unknown keys are rejected."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = ExperimentConfig()
    for k, v in d.items():
        setattr(cfg, k, v)
    if cfg.scenario not in workloads.ENV_KINDS:
        raise ConfigError(f"scenario must be one of {list(workloads.ENV_KINDS)}")
    for name in ("n_points", "n_obbs", "max_depth"):
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{name} must be a positive integer")
    if not 1 <= cfg.max_depth <= 16:
        raise ConfigError("max_depth must be in [1, 16]")
    if isinstance(cfg.variants, str):
        cfg.variants = [s for s in cfg.variants.split(",") if s]
    if not isinstance(cfg.variants, list) or not cfg.variants:
        raise ConfigError("variants must be a nonempty list")
    for v in cfg.variants:
        if v not in isa.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(isa.VARIANTS)}")
    if not isinstance(cfg.spheres, bool):
        raise ConfigError("spheres must be true or false")
    if not isinstance(cfg.sim, dict):
        raise ConfigError("sim must be an object")
    cfg.sim_config()
    if cfg.seed is not None and (isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    for name in ("scene_file", "out_csv", "out_json"):
        v = getattr(cfg, name)
        if v is not None and not isinstance(v, str):
            raise ConfigError(f"{name} must be a path string")
    if cfg.scales is not None:
        if not isinstance(cfg.scales, list) or not cfg.scales:
            raise ConfigError("scales must be a nonempty list of positive numbers")
        if any(isinstance(s, bool) or not isinstance(s, (int, float)) or s <= 0 for s in cfg.scales):
            raise ConfigError("scales must be positive numbers")
        cfg.scales = [float(s) for s in cfg.scales]
    if cfg.oracle_limit is not None and (not isinstance(cfg.oracle_limit, int) or cfg.oracle_limit < 0):
        raise ConfigError("oracle_limit must be a non-negative integer")
    cfg.ball = _check_section("ball", cfg.ball, _BALL_KEYS)
    cfg.mcl = _check_section("mcl", cfg.mcl, _MCL_KEYS)
    cfg.verify = _check_section("verify", cfg.verify, _VERIFY_KEYS)
    return cfg


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    doc: dict[str, Any] = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config} is not valid JSON: {e}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.variants:
        doc["variants"] = args.variants
    if args.out_csv:
        doc["out_csv"] = args.out_csv
    if args.out_json:
        doc["out_json"] = args.out_json
    if args.scale:
        try:
            doc["scales"] = [float(s) for s in args.scale.split(",") if s]
        except ValueError:
            raise ConfigError(f"--scale expects comma-separated numbers, got {args.scale!r}") from None
    if getattr(args, "scene", None):
        doc["scene_file"] = args.scene
    if getattr(args, "scenario", None):
        doc["scenario"] = args.scenario
    return parse_config(doc)


def _require_seed(cfg: ExperimentConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("--seed is required (or set \"seed\" in the config)")
    return cfg.seed


def _emit(cfg: ExperimentConfig, rows: list[dict[str, Any]], doc: dict[str, Any]) -> None:
    csv_text = simcore.rows_to_csv(rows)
    try:
        if cfg.out_csv:
            simcore.write_atomic(cfg.out_csv, csv_text)
        else:
            sys.stdout.write(csv_text)
        if cfg.out_json:
            simcore.write_atomic(cfg.out_json, json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")
    except OSError as e:
        raise ConfigError(f"cannot write output: {e}") from None


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


# --- collision -------------------------------------------------------------------------------------


def _collision_workload(cfg: ExperimentConfig) -> workloads.CollisionWorkload:
    if cfg.scene_file:
        try:
            sc = scene.load_scene(cfg.scene_file)
        except OSError as e:
            raise ConfigError(f"cannot read scene {cfg.scene_file}: {e.strerror or e}") from None
        except scene.SceneFormatError as e:
            raise ConfigError(f"bad scene file {cfg.scene_file}: {e}") from None
        if not sc.obbs:
            raise ConfigError(f"scene {cfg.scene_file} has no OBB queries")
        return workloads.CollisionWorkload.from_scene(sc)
    seed = _require_seed(cfg)
    return workloads.gen_env(cfg.scenario, seed, n_points=cfg.n_points, n_obbs=cfg.n_obbs, max_depth=cfg.max_depth)


def _oracle_mismatches(wl: workloads.CollisionWorkload, collides, limit: int | None) -> tuple[list[int], int]:
    """Mismatches against the tree oracle, excluding queries inside the precision band."""
    bad, banded = [], 0
    for i in workloads.collision_oracle_check(wl, collides, limit):
        if oracle.in_margin_band(wl.obbs[i], wl.octree):
            banded += 1
        else:
            bad.append(i)
    return bad, banded


def cmd_collide(cfg: ExperimentConfig) -> int:
    wl = _collision_workload(cfg)
    sim_cfg = cfg.sim_config()
    rows, doc = [], {"scene": wl.kind, "seed": wl.seed, "queries": len(wl.obbs), "variants": {}}
    status = EXIT_OK
    for name in cfg.variants:
        program = isa.assemble_sact(name, spheres_enabled=cfg.spheres)
        res = simcore.run(program, wl.octree, wl.obbs, sim_cfg, seed=wl.seed)
        bad, banded = _oracle_mismatches(wl, res.results, cfg.oracle_limit)
        if bad:
            status = EXIT_MISMATCH
            print(f"{name}: {len(bad)} oracle mismatches (first: {bad[:5]})", file=sys.stderr)
        rows.append(
            simcore.stats_row(
                res.stats,
                scene=wl.kind,
                variant=name,
                extra={"collisions": int(np.sum(res.results)), "oracle_mismatches": len(bad)},
            )
        )
        doc["variants"][name] = {
            "stats": res.stats.to_json(),
            "collisions": int(np.sum(res.results)),
            "oracle_mismatches": bad,
            "band_excluded": banded,
        }
    _emit(cfg, rows, doc)
    return status


def cmd_sweep(cfg: ExperimentConfig) -> int:
    wl = _collision_workload(cfg)
    base = cfg.sim_config()
    scales = cfg.scales or [0.5, 1.0, 2.0]
    rows, doc = [], {"scene": wl.kind, "seed": wl.seed, "runs": []}
    for name in cfg.variants:
        program = isa.assemble_sact(name, spheres_enabled=cfg.spheres)
        for s in scales:
            res = simcore.run(program, wl.octree, wl.obbs, base.with_overrides(collision_unit_latency_scale=s))
            rows.append(simcore.stats_row(res.stats, scene=wl.kind, variant=name, extra={"latency_scale": s}))
            doc["runs"].append({"variant": name, "latency_scale": s, "stats": res.stats.to_json()})
    _emit(cfg, rows, doc)
    return EXIT_OK


def cmd_gen_scene(cfg: ExperimentConfig, out: str) -> int:
    seed = _require_seed(cfg)
    wl = workloads.gen_env(cfg.scenario, seed, n_points=cfg.n_points, n_obbs=cfg.n_obbs, max_depth=cfg.max_depth)
    try:
        scene.save_scene(wl.to_scene(), out)
    except OSError as e:
        raise ConfigError(f"cannot write scene {out}: {e.strerror or e}") from None
    print(f"{out}: {wl.kind} seed {seed}, {len(wl.points)} points, {len(wl.obbs)} OBBs, "
          f"{wl.expected_collisions} colliding")
    return EXIT_OK


# --- ball query and MCL --------------------------------------------------------------------------


def cmd_ballquery(cfg: ExperimentConfig) -> int:
    seed = _require_seed(cfg)
    b = cfg.ball
    wl = workloads.gen_ball_query(
        seed, n=b.get("n", 65536), k=b.get("k", 512), r=b.get("radius", 0.05), K=b.get("k_max", 64)
    )
    sim_cfg = cfg.sim_config()
    scales = cfg.scales or [1.0, 2.0, 4.0]
    rows, doc, status = [], {"seed": seed, "runs": []}, EXIT_OK
    for s in scales:
        r = wl.radius * s
        for form in ("pray", "psphere"):
            res = workloads.run_ball_query(wl, form, config=sim_cfg, radius=r, leaf_size=b.get("leaf_size", 8))
            bad = workloads.ball_query_oracle_check(wl, res, radius=r, sample=b.get("oracle_sample", 1000), seed=seed)
            if bad:
                status = EXIT_MISMATCH
                print(f"{form} r={r:g}: {len(bad)} neighbor-set mismatches", file=sys.stderr)
            row = {"radius_scale": s, "radius": r, **res.row(), "oracle_mismatches": len(bad)}
            rows.append(row)
            doc["runs"].append({**row, "stats": res.stats.to_json()})
    _emit(cfg, rows, doc)
    return status


def cmd_mcl(cfg: ExperimentConfig) -> int:
    seed = _require_seed(cfg)
    m = cfg.mcl
    gen_kw = {k: m[k] for k in ("particles", "rays_per_particle", "iterations", "switch_threshold") if k in m}
    wl = workloads.gen_mcl(seed, **gen_kw)
    run_kw = {k: m[k] for k in ("host_cost_per_step", "sim_launch_cycles") if k in m}
    res = workloads.run_mcl(wl, cfg.sim_config(), **run_kw)
    _emit(cfg, res.rows, {"seed": seed, "totals": res.totals, "switches": res.switches, "iterations": res.rows})
    print(
        "totals: " + ", ".join(f"{k} {v:.0f}" for k, v in sorted(res.totals.items())) + f"; switches {res.switches}",
        file=sys.stderr,
    )
    return EXIT_OK


# --- verify ----------------------------------------------------------------------------------------


def _verify_checks(cfg: ExperimentConfig) -> list[tuple[str, bool, str]]:
    seed = cfg.seed or 0
    pairs = cfg.verify.get("pairs", 20000)
    nq = cfg.verify.get("queries", 256)
    rng = np.random.default_rng(seed)
    out: list[tuple[str, bool, str]] = []

    sizes = (len(isa.assemble_sact("tta+").uops), len(isa.assemble_sact("tta+", True).uops))
    out.append(("program sizes 47/81", sizes == (47, 81), f"{sizes}"))

    diags = [d for v in isa.VARIANTS for s in (False, True) for d in isa.validate(isa.assemble_sact(v, s))]
    out.append(("all variants validate", not diags, f"{len(diags)} diagnostics"))

    obbs, ac, ah = workloads.random_pairs(rng, pairs)
    ref = np.array([geom.sat_full(o, geom.Aabb(c, h)) for o, c, h in zip(obbs, ac, ah)])
    band = oracle.pair_in_band(obbs, ac, ah)
    bad = 0
    for name in ("tta+", "rc_cr", "rc_cr_cu"):
        got, _ = simcore.test_pairs(isa.assemble_sact(name), obbs, ac, ah)
        bad += int(np.sum((got != ref) & ~band))
    out.append((f"datapath == full test on {pairs} pairs", bad == 0, f"{bad} mismatches"))

    wl = workloads.gen_env(cfg.scenario, seed, n_points=8192, n_obbs=nq, max_depth=6)
    res = simcore.run(isa.assemble_sact("rc_cr_cu"), wl.octree, wl.obbs)
    centers, halves = wl.octree.occupied_boxes()
    mism = 0
    for i, o in enumerate(wl.obbs):
        r_tree, n_tree = oracle.collide_ref(o, wl.octree)
        r_flat = oracle.collide_flat(o, centers, halves)
        agree = bool(res.results[i]) == r_tree == r_flat and res.nodes_traversed[i] == n_tree
        if not agree and not oracle.in_margin_band(o, wl.octree):
            mism += 1
    out.append((f"simulator == tree oracle == flat oracle on {nq} queries", mism == 0, f"{mism} mismatches"))

    hist_sim = res.stats.exit_histogram
    hist_ref = oracle.count_exit_stages(wl.obbs, wl.octree)
    out.append(("exit histogram == oracle", bool(np.array_equal(hist_sim, hist_ref)), f"{int(hist_sim.sum())} tests"))

    bq = workloads.gen_ball_query(seed, n=4096, k=64, r=0.08, K=16)
    bad_bq = 0
    for form in ("pray", "psphere"):
        bad_bq += len(workloads.ball_query_oracle_check(bq, workloads.run_ball_query(bq, form)))
    out.append(("ball-query groups == radius search", bad_bq == 0, f"{bad_bq} mismatches"))

    grid_wl = workloads.gen_mcl(seed, particles=4, rays_per_particle=32, iterations=1)
    o, d = grid_wl.rays(0)
    cast = simcore.run(isa.assemble_grid_step(), grid_wl.grid, (o, d), t_max=grid_wl.t_max).results
    ref_cells, ambiguous = workloads.ray_cast_ref(grid_wl.grid, o, d, grid_wl.t_max)
    bad_rays = int(np.sum(np.any(cast.cell != ref_cells, axis=1) & ~ambiguous))
    out.append(("grid ray cast == brute-force slab cast", bad_rays == 0, f"{bad_rays} of {len(o)} rays differ"))

    a = simcore.run(isa.assemble_sact("rc_cr"), wl.octree, wl.obbs).stats.to_json()
    b = simcore.run(isa.assemble_sact("rc_cr"), wl.octree, wl.obbs).stats.to_json()
    out.append(("determinism", json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True), "two runs"))
    return out


def cmd_verify(cfg: ExperimentConfig) -> int:
    checks = _verify_checks(cfg)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    rows = [{"check": n, "passed": ok, "detail": d} for n, ok, d in checks]
    if cfg.out_csv or cfg.out_json:
        _emit(cfg, rows, {"checks": rows})
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_MISMATCH


# --- entry point -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robocore", description="Software model of a collision-detection accelerator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="workload seed")
        sp.add_argument("--variants", help="comma-separated variant names, e.g. tta+,rc_p")
        sp.add_argument("--out-csv", dest="out_csv", help="CSV output path (default: stdout)")
        sp.add_argument("--out-json", dest="out_json", help="JSON output path")
        sp.add_argument("--scale", help="comma-separated multipliers (latency for sweep, radius for ballquery)")
        return sp

    for name, helptext in (
        ("collide", "run variants on a collision scene and cross-check the oracle"),
        ("sweep", "collision-unit latency sweep"),
        ("gen-scene", "write a synthetic collision scene"),
    ):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--scenario", choices=workloads.ENV_KINDS, help="synthetic environment kind")
        if name != "gen-scene":
            sp.add_argument("--scene", help="load a .scene.json file instead of generating")
        else:
            sp.add_argument("out", help="output .scene.json path")
    common(sub.add_parser("ballquery", help="P-Ray versus P-Sphere ball query"))
    common(sub.add_parser("mcl", help="ray-casting localization with dynamic switching"))
    sp = common(sub.add_parser("verify", help="property suite against the oracles"))
    sp.add_argument("--scenario", choices=workloads.ENV_KINDS)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "collide":
            return cmd_collide(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg, args.out)
        if args.command == "ballquery":
            return cmd_ballquery(cfg)
        if args.command == "mcl":
            return cmd_mcl(cfg)
        return cmd_verify(cfg)
    except ConfigError as e:
        print(f"robocore {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
