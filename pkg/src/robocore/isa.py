"""μop instruction set, intersection-program assembly and a reference interpreter.

Every intersection program runs on a packet holding 16 Vec3 registers per
query.  Query data (OBB, ray) and node data (AABB, sphere, cell) are loaded
into fixed registers before the program starts.  Programs are straight-line
sequences; control flow lives only in the operation-destination table, which
names the next pc and destination port of each μop.  In conditional-return
variants a compare owns two table entries, one per compare outcome.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .geom import EPSILON, ExitStage

NUM_REGS = 16


class UopKind(enum.Enum):
    DOT = "DOT"
    MUL = "MUL"
    SUB3 = "SUB3"
    CMP3 = "CMP3"
    CROSS = "CROSS"
    MINMAX = "MINMAX"
    RXFORM = "RXFORM"
    PUSH = "PUSH"
    RETURN = "RETURN"
    BOXN = "BOXN"
    EXE = "EXE"


COMPARE_KINDS = (UopKind.CMP3, UopKind.BOXN, UopKind.EXE)


class NodeType(enum.Enum):
    OCTREE_INTERNAL = "OctreeInternal"
    OCTREE_LEAF = "OctreeLeaf"
    BVH_INTERNAL = "BvhInternal"
    SPHERE_LEAF = "SphereLeaf"
    GRID_CELL = "GridCell"


class EarlyExit(enum.Enum):
    TTA_PLUS = "TtaPlus"
    PREDICATION = "Predication"
    COND_RETURN = "CondReturn"


class UnitStyle(enum.Enum):
    SCALAR = "Scalar"
    CLUSTERED = "Clustered"
    COLLISION_UNITS = "CollisionUnits"


@dataclass(frozen=True)
class Variant:
    early_exit: EarlyExit
    units: UnitStyle = UnitStyle.SCALAR

    @property
    def name(self) -> str:
        for key, v in VARIANTS.items():
            if v == self:
                return key
        return f"{self.early_exit.value}+{self.units.value}"

    @property
    def cond_return(self) -> bool:
        return self.early_exit is EarlyExit.COND_RETURN

    @property
    def predication(self) -> bool:
        return self.early_exit is EarlyExit.PREDICATION


VARIANTS: dict[str, Variant] = {
    "tta+": Variant(EarlyExit.TTA_PLUS, UnitStyle.SCALAR),
    "rc_p": Variant(EarlyExit.PREDICATION, UnitStyle.SCALAR),
    "rc_cr": Variant(EarlyExit.COND_RETURN, UnitStyle.SCALAR),
    "rc_p_cl": Variant(EarlyExit.PREDICATION, UnitStyle.CLUSTERED),
    "rc_cr_cl": Variant(EarlyExit.COND_RETURN, UnitStyle.CLUSTERED),
    "rc_p_cu": Variant(EarlyExit.PREDICATION, UnitStyle.COLLISION_UNITS),
    "rc_cr_cu": Variant(EarlyExit.COND_RETURN, UnitStyle.COLLISION_UNITS),
    "tta+_cl": Variant(EarlyExit.TTA_PLUS, UnitStyle.CLUSTERED),
    "tta+_cu": Variant(EarlyExit.TTA_PLUS, UnitStyle.COLLISION_UNITS),
}

# Names used in figures and CSV output.
VARIANT_LABELS = {
    "tta+": "TTA+",
    "rc_p": "RC_P",
    "rc_cr": "RC_CR",
    "rc_p_cl": "RC_P_CL",
    "rc_cr_cl": "RC_CR_CL",
    "rc_p_cu": "RC_P_CU",
    "rc_cr_cu": "RC_CR_CU",
    "tta+_cl": "TTA+_CL",
    "tta+_cu": "TTA+_CU",
}


def variant(name: str | Variant) -> Variant:
    if isinstance(name, Variant):
        return name
    key = name.strip().lower().replace("-", "_")
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return VARIANTS[key]


# --- operands and μops ---------------------------------------------------------

CONSTANTS = {
    "e0": (1.0, 0.0, 0.0),
    "e1": (0.0, 1.0, 0.0),
    "e2": (0.0, 0.0, 1.0),
    "zero": (0.0, 0.0, 0.0),
    "neg_eps": (-EPSILON, -EPSILON, -EPSILON),
    "neg_one": (-1.0, -1.0, -1.0),
}


@dataclass(frozen=True)
class Operand:
    """Register or constant source.

    ``lane`` broadcasts one lane of the register; with ``gather`` it instead
    collects that lane from three consecutive registers (a matrix row).
    ``abs`` is applied before ``neg``.
    """

    reg: int | None = None
    const: str | None = None
    abs: bool = False
    neg: bool = False
    lane: int | None = None
    gather: bool = False

    def regs(self) -> tuple[int, ...]:
        if self.reg is None:
            return ()
        return (self.reg, self.reg + 1, self.reg + 2) if self.gather else (self.reg,)

    def __str__(self):
        s = f"r{self.reg}" if self.reg is not None else f"#{self.const}"
        if self.gather:
            s = f"{s}..r{self.reg + 2}[{self.lane}]"
        elif self.lane is not None:
            s += ".xyz"[self.lane + 1]
        if self.abs:
            s = f"|{s}|"
        if self.neg:
            s = "-" + s
        return s


def R(reg: int, *, abs: bool = False, neg: bool = False, lane: int | None = None, gather: bool = False) -> Operand:
    return Operand(reg=reg, abs=abs, neg=neg, lane=lane, gather=gather)


def C(name: str) -> Operand:
    if name not in CONSTANTS:
        raise KeyError(name)
    return Operand(const=name)


@dataclass(frozen=True)
class Uop:
    kind: UopKind
    dst: int | None = None
    src: tuple[Operand, ...] = ()
    # compares
    cmp_op: str | None = None  # "gt" | "ge" | "le"
    cmp_lanes: tuple[bool, bool, bool] = (True, True, True)
    cmp_mode: str | None = None  # "and" | "or"
    # exit behaviour of compares
    exit_when: bool | None = None
    exit_result: bool | None = None
    exit_stage: ExitStage | None = None
    on_exit: str = "return"  # "return" | "ctrl"
    on_continue: str = "next"  # "next" | "ctrl"
    terminate_query: bool = False
    sets_result: bool = False
    # misc
    minmax: str | None = None
    imm: tuple[int, ...] = ()
    group: str = ""
    predicated: bool = False

    def reads(self) -> set[int]:
        regs: set[int] = set()
        for op in self.src:
            regs.update(op.regs())
        regs.update(_IMPLICIT_READS.get(self.kind, ()))
        return regs

    def __str__(self):
        srcs = ", ".join(str(s) for s in self.src)
        dst = f"r{self.dst}" if self.dst is not None else "-"
        extra = []
        if self.cmp_op:
            lanes = "".join("xyz"[i] for i in range(3) if self.cmp_lanes[i])
            extra.append(f"{self.cmp_op}.{lanes}.{self.cmp_mode}")
        if self.minmax:
            extra.append(self.minmax)
        if self.imm:
            extra.append("imm=" + ",".join(map(str, self.imm)))
        if self.predicated:
            extra.append("pred")
        tail = (" [" + " ".join(extra) + "]") if extra else ""
        return f"{self.kind.value} {dst} <- {srcs}{tail}"


# --- register layout ------------------------------------------------------------
#
# SACT packet:
#   r0 OBB center   r1 OBB half extents   r2..r4 OBB axes u0..u2 (columns)
#   r5 AABB center  r6 AABB half extents
#   after preprocessing: r7 T = c_obb - c_aabb, r8 T in the OBB frame,
#   r9..r11 rows of |R| + eps;  r12..r15 scratch.
REG_OBB_C, REG_OBB_B, REG_OBB_U, REG_AABB_C, REG_AABB_A = 0, 1, 2, 5, 6
REG_T, REG_T_OBB, REG_E = 7, 8, 9
SACT_INPUTS = frozenset(range(0, 7))

# Ball query packet: r0 ray origin, r1 = (radius^2, K - 1, 0), r2 = (hit count, 0, 0)
#   BvhInternal: r3 lo, r4 hi.   SphereLeaf: r3 sphere center.
BQ_INPUTS = frozenset(range(0, 5))

# Grid step packet: r1 tDelta, r2 tMax, r4 = (cell occupied, 0, 0)
GRID_INPUTS = frozenset({1, 2, 4})

_IMPLICIT_READS = {
    UopKind.CROSS: (REG_OBB_B, REG_AABB_A, REG_E, REG_E + 1, REG_E + 2),
    UopKind.EXE: (REG_OBB_B, REG_AABB_A, REG_E, REG_E + 1, REG_E + 2, REG_T),
    UopKind.BOXN: (REG_OBB_B, REG_OBB_U, REG_OBB_U + 1, REG_OBB_U + 2, REG_AABB_A, REG_T, REG_T_OBB),
}

# μops charged per test, by stage.
STAGE_UOPS = {
    "bounding_sphere": {UopKind.DOT: 1, UopKind.MUL: 3, UopKind.SUB3: 8, UopKind.CMP3: 4},
    "inscribing_sphere": {UopKind.MINMAX: 2, UopKind.MUL: 4, UopKind.SUB3: 8, UopKind.CMP3: 4},
    "preprocessing": {UopKind.SUB3: 4, UopKind.RXFORM: 1},
    "box_normal": {UopKind.DOT: 2, UopKind.SUB3: 1, UopKind.CMP3: 1},
    "edge_edge": {UopKind.CROSS: 1, UopKind.CMP3: 1},
}
STAGE_TESTS = {"bounding_sphere": 1, "inscribing_sphere": 1, "preprocessing": 1, "box_normal": 6, "edge_edge": 9}


# --- destination table --------------------------------------------------------------

CTRL = "CTRL"
PORTS = ("CTRL", "SUB3", "MUL", "DOT", "CMP3", "CROSS", "MINMAX", "RXFORM", "RETURN", "BOXN", "EXE", "PUSH")
# Clusters occupy the slots of the collision units they are equivalent to.
PORT_ALIASES = {"CLUSTER_A": "BOXN", "CLUSTER_B": "EXE"}
VALID_PORTS = frozenset(PORTS) | frozenset(PORT_ALIASES)


@dataclass(frozen=True)
class Route:
    next_pc: int | None  # None: back to the controller
    port: str

    def __str__(self):
        return f"({'-' if self.next_pc is None else self.next_pc}, {self.port})"


@dataclass(frozen=True)
class DestEntry:
    route: Route  # the only route, or the compare-true route
    false_route: Route | None = None

    @property
    def dual(self) -> bool:
        return self.false_route is not None


@dataclass
class OpDestTable:
    entries: dict[tuple[NodeType, int], DestEntry] = field(default_factory=dict)

    def __getitem__(self, key: tuple[NodeType, int]) -> DestEntry:
        return self.entries[key]

    def get(self, key, default=None):
        return self.entries.get(key, default)

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()


# --- programs ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IntersectionProgram:
    name: str
    uops: tuple[Uop, ...]
    dest_table: OpDestTable
    variant: Variant
    spheres_enabled: bool
    entries: dict[NodeType, int]
    segment_end: dict[NodeType, int]
    inputs: dict[NodeType, frozenset[int]]
    default_result: dict[NodeType, bool]
    default_stage: ExitStage | None = None
    formulation: str | None = None
    k_max: int | None = None

    def __len__(self):
        return len(self.uops)

    @property
    def node_types(self) -> tuple[NodeType, ...]:
        return tuple(self.entries)

    def segment(self, node_type: NodeType) -> range:
        return range(self.entries[node_type], self.segment_end[node_type])

    def unit_of(self, pc: int) -> str:
        return unit_name(self.uops[pc], self.variant)

    def kind_counts(self, node_type: NodeType | None = None) -> Counter:
        pcs = self.segment(node_type) if node_type else range(len(self.uops))
        return Counter(self.uops[pc].kind for pc in pcs)

    @property
    def test_uop_count(self) -> int:
        """μops excluding the terminal RETURN (the per-stage accounting)."""
        return sum(1 for u in self.uops if u.kind is not UopKind.RETURN)

    def dump(self) -> str:
        return dump_program(self)


def unit_name(u: Uop, v: Variant) -> str:
    if v.units is UnitStyle.CLUSTERED:
        if u.group.startswith("boxn"):
            return "CLUSTER_A"
        if u.group.startswith("edge"):
            return "CLUSTER_B"
    return u.kind.value


def port_slot(port: str) -> str:
    return PORT_ALIASES.get(port, port)


def _cmp(op_name, a, b, *, lanes=(True, True, True), mode="and", **kw) -> Uop:
    return Uop(UopKind.CMP3, kw.pop("dst", None), (a, b), cmp_op=op_name, cmp_lanes=lanes, cmp_mode=mode, **kw)


LANE0 = (True, False, False)


def _sphere_stage(which: str) -> list[Uop]:
    """Clamp-distance sphere test, expanded to the per-stage μop mix."""
    g = "bsphere" if which == "bounding" else "isphere"
    c, b, ca, a = REG_OBB_C, REG_OBB_B, REG_AABB_C, REG_AABB_A
    out: list[Uop] = []
    if which == "inscribing":
        out += [
            Uop(UopKind.MINMAX, 15, (R(b, lane=0), R(b, lane=1)), minmax="min", group=g),
            Uop(UopKind.MINMAX, 15, (R(15), R(b, lane=2)), minmax="min", group=g),
            Uop(UopKind.MUL, 15, (R(15), R(15)), group=g),
        ]
    out += [
        Uop(UopKind.SUB3, 7, (R(ca), R(a)), group=g),  # lo
        Uop(UopKind.SUB3, 8, (R(ca), R(a, neg=True)), group=g),  # hi
        Uop(UopKind.SUB3, 9, (R(7), R(c)), group=g),  # lo - p
        Uop(UopKind.SUB3, 10, (R(c), R(8)), group=g),  # p - hi
        _cmp("gt", R(9), C("zero"), mode="or", dst=11, group=g),
        _cmp("gt", R(10), C("zero"), mode="or", dst=12, group=g),
        Uop(UopKind.MUL, 11, (R(9), R(11)), group=g),
        Uop(UopKind.MUL, 12, (R(10), R(12)), group=g),
        Uop(UopKind.SUB3, 13, (R(11), R(12, neg=True)), group=g),  # per-axis excess
    ]
    if which == "bounding":
        out += [
            Uop(UopKind.DOT, 14, (R(13), R(13)), group=g),  # squared distance
            Uop(UopKind.MUL, 15, (R(b), R(b)), group=g),
            Uop(UopKind.SUB3, 7, (R(15, lane=0), R(15, lane=1, neg=True)), group=g),
            Uop(UopKind.SUB3, 7, (R(7), R(15, lane=2, neg=True)), group=g),  # radius^2
            Uop(UopKind.SUB3, 8, (R(14), R(7)), group=g),
            _cmp("le", R(13), C("zero"), dst=9, group=g),  # center inside the box
            _cmp(
                "gt", R(8), C("zero"), lanes=LANE0, exit_when=True, exit_result=False,
                exit_stage=ExitStage.BOUNDING_SPHERE_MISS, group=g,
            ),
        ]
    else:
        out += [
            Uop(UopKind.MUL, 14, (R(13), R(13)), group=g),
            Uop(UopKind.SUB3, 7, (R(14, lane=0), R(14, lane=1, neg=True)), group=g),
            Uop(UopKind.SUB3, 7, (R(7), R(14, lane=2, neg=True)), group=g),  # squared distance
            Uop(UopKind.SUB3, 8, (R(7), R(15)), group=g),
            _cmp("le", R(13), C("zero"), dst=9, group=g),
            _cmp(
                "le", R(8), C("zero"), lanes=LANE0, exit_when=True, exit_result=True,
                exit_stage=ExitStage.INSCRIBING_SPHERE_HIT, group=g,
            ),
        ]
    return out


def _preprocessing() -> list[Uop]:
    g = "pre"
    return [
        Uop(UopKind.SUB3, REG_T, (R(REG_OBB_C), R(REG_AABB_C)), group=g),
        Uop(UopKind.RXFORM, REG_T_OBB, (R(REG_T), R(REG_OBB_U)), group=g),
    ] + [
        Uop(UopKind.SUB3, REG_E + i, (R(REG_OBB_U, lane=i, gather=True, abs=True), C("neg_eps")), group=g)
        for i in range(3)
    ]


def _box_normal(k: int, fused: bool) -> list[Uop]:
    g = f"boxn{k}"
    stage = ExitStage.box_normal(k)
    if fused:
        return [Uop(UopKind.BOXN, 14, (), imm=(k,), exit_when=True, exit_result=False, exit_stage=stage, group=g)]
    if k < 3:
        i = k
        radius = Uop(UopKind.DOT, 12, (R(REG_OBB_U, lane=i, gather=True, abs=True), R(REG_OBB_B), R(REG_AABB_A, lane=i)), group=g)
        proj = Uop(UopKind.DOT, 13, (R(REG_T), C(f"e{i}")), group=g)
    else:
        j = k - 3
        radius = Uop(UopKind.DOT, 12, (R(REG_AABB_A), R(REG_OBB_U + j, abs=True), R(REG_OBB_B, lane=j)), group=g)
        proj = Uop(UopKind.DOT, 13, (R(REG_T_OBB), C(f"e{j}")), group=g)
    return [
        radius,
        proj,
        Uop(UopKind.SUB3, 14, (R(13, abs=True), R(12)), group=g),
        _cmp("gt", R(14), C("zero"), lanes=LANE0, exit_when=True, exit_result=False, exit_stage=stage, group=g),
    ]


def _edge(k: int, fused: bool) -> list[Uop]:
    g = f"edge{k}"
    i, j = divmod(k, 3)
    stage = ExitStage.edge_edge(k)
    if fused:
        return [
            Uop(UopKind.EXE, 12, (R(REG_OBB_U + j), R(REG_T)), imm=(i, j), exit_when=True, exit_result=False,
                exit_stage=stage, group=g)
        ]
    return [
        Uop(UopKind.CROSS, 12, (R(REG_OBB_U + j), R(REG_T)), imm=(i, j), group=g),
        _cmp("gt", R(12), C("zero"), lanes=LANE0, exit_when=True, exit_result=False, exit_stage=stage, group=g),
    ]


def _mark_predicated(uops: list[Uop]) -> list[Uop]:
    out, seen_exit = [], False
    for u in uops:
        out.append(replace(u, predicated=seen_exit) if seen_exit else u)
        if u.exit_when is not None:
            seen_exit = True
    return out


def _route_table(uops: list[Uop], v: Variant, segments: dict[NodeType, tuple[int, int]]) -> OpDestTable:
    table = OpDestTable()
    for nt, (start, end) in segments.items():
        ret_pc = next((pc for pc in range(start, end) if uops[pc].kind is UopKind.RETURN), None)

        def to(pc: int | None) -> Route:
            if pc is None or pc >= end:
                return Route(None, CTRL)
            return Route(pc, unit_name(uops[pc], v))

        for pc in range(start, end):
            u = uops[pc]
            if u.kind is UopKind.RETURN:
                continue
            nxt = pc + 1 if pc + 1 < end else None
            if v.cond_return and u.kind in COMPARE_KINDS:
                if u.exit_when is not None:
                    exit_to = to(ret_pc) if u.on_exit == "return" else to(None)
                    cont_to = to(nxt) if u.on_continue == "next" else to(None)
                    t, f = (exit_to, cont_to) if u.exit_when else (cont_to, exit_to)
                else:
                    t = f = to(nxt)
                table.entries[(nt, pc)] = DestEntry(t, f)
            else:
                table.entries[(nt, pc)] = DestEntry(to(nxt))
    return table


def assemble_sact(v: Variant | str, spheres_enabled: bool = False) -> IntersectionProgram:
    """OBB-vs-AABB staged separating-axis program for one variant."""
    v = variant(v)
    fused = v.units is UnitStyle.COLLISION_UNITS
    uops: list[Uop] = []
    if spheres_enabled:
        uops += _sphere_stage("bounding") + _sphere_stage("inscribing")
    uops += _preprocessing()
    for k in range(6):
        uops += _box_normal(k, fused)
    for k in range(9):
        uops += _edge(k, fused)
    if v.predication:
        uops = _mark_predicated(uops)
    if v.cond_return:
        uops.append(Uop(UopKind.RETURN, group="ret"))
    n = len(uops)
    segments = {NodeType.OCTREE_INTERNAL: (0, n), NodeType.OCTREE_LEAF: (0, n)}
    name = f"sact[{v.name}{',spheres' if spheres_enabled else ''}]"
    return IntersectionProgram(
        name=name,
        uops=tuple(uops),
        dest_table=_route_table(uops, v, segments),
        variant=v,
        spheres_enabled=spheres_enabled,
        entries={nt: s for nt, (s, _) in segments.items()},
        segment_end={nt: e for nt, (_, e) in segments.items()},
        inputs={nt: SACT_INPUTS for nt in segments},
        default_result={nt: True for nt in segments},
        default_stage=ExitStage.FULL_OVERLAP,
    )


def assemble_ball_query(formulation: str, k_max: int, v: Variant | str = "rc_cr_cu") -> IntersectionProgram:
    """Point-in-box descent over BvhInternal nodes, point-in-sphere on SphereLeaf.

    With conditional returns, P-Sphere leaf tests carry a second compare that
    returns and ends the query once the hit count reaches ``k_max``.  P-Ray
    rays cannot stop early: the cap applies per sphere, across rays.
    """
    v = variant(v)
    formulation = formulation.strip().lower().replace("-", "").replace("_", "")
    if formulation not in ("pray", "psphere"):
        raise ValueError(f"unknown ball query formulation {formulation!r}")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    internal = [
        Uop(UopKind.SUB3, 5, (R(0), R(3)), group="box"),
        Uop(UopKind.SUB3, 6, (R(4), R(0)), group="box"),
        Uop(UopKind.MINMAX, 7, (R(5), R(6)), minmax="min", group="box"),
        _cmp("ge", R(7), C("zero"), mode="and", sets_result=True, group="box"),
    ]
    early = v.cond_return and formulation == "psphere"
    leaf = [
        Uop(UopKind.SUB3, 5, (R(0), R(3)), group="sphere"),
        Uop(UopKind.DOT, 6, (R(5), R(5)), group="sphere"),
        Uop(UopKind.SUB3, 7, (R(6), R(1, lane=0)), group="sphere"),
        _cmp(
            "le", R(7), C("zero"), lanes=LANE0, sets_result=True, group="sphere",
            **({"exit_when": False, "on_exit": "ctrl"} if early else {}),
        ),
    ]
    if early:
        leaf += [
            _cmp(
                "ge", R(2, lane=0), R(1, lane=1), lanes=LANE0, exit_when=True, terminate_query=True,
                on_exit="return", on_continue="ctrl", group="kcap",
            ),
            Uop(UopKind.RETURN, group="ret"),
        ]
    uops = internal + leaf
    if v.predication:
        uops = internal + _mark_predicated(leaf)
    segments = {
        NodeType.BVH_INTERNAL: (0, len(internal)),
        NodeType.SPHERE_LEAF: (len(internal), len(uops)),
    }
    return IntersectionProgram(
        name=f"ballquery[{formulation},K={k_max},{v.name}]",
        uops=tuple(uops),
        dest_table=_route_table(uops, v, segments),
        variant=v,
        spheres_enabled=False,
        entries={nt: s for nt, (s, _) in segments.items()},
        segment_end={nt: e for nt, (_, e) in segments.items()},
        inputs={nt: BQ_INPUTS for nt in segments},
        default_result={nt: False for nt in segments},
        formulation=formulation,
        k_max=k_max,
    )


def assemble_grid_step(v: Variant | str = "rc_cr") -> IntersectionProgram:
    """One DDA step: occupancy check, then advance tMax along the crossing axis."""
    v = variant(v)
    uops = [
        _cmp("gt", R(4), C("zero"), lanes=LANE0, exit_when=True, exit_result=True, on_exit="return", group="cell"),
        Uop(UopKind.MINMAX, 3, (R(2, lane=0), R(2, lane=1)), minmax="min", group="step"),
        Uop(UopKind.MINMAX, 3, (R(3), R(2, lane=2)), minmax="min", group="step"),
        _cmp("le", R(2), R(3), mode="or", dst=5, group="step"),
        Uop(UopKind.MUL, 6, (R(1), R(5)), group="step"),
        Uop(UopKind.SUB3, 2, (R(2), R(6, neg=True)), group="step"),
    ]
    if v.predication:
        uops = _mark_predicated(uops)
    if v.cond_return:
        uops.append(Uop(UopKind.RETURN, group="ret"))
    segments = {NodeType.GRID_CELL: (0, len(uops))}
    return IntersectionProgram(
        name=f"gridstep[{v.name}]",
        uops=tuple(uops),
        dest_table=_route_table(uops, v, segments),
        variant=v,
        spheres_enabled=False,
        entries={NodeType.GRID_CELL: 0},
        segment_end={NodeType.GRID_CELL: len(uops)},
        inputs={NodeType.GRID_CELL: GRID_INPUTS},
        default_result={NodeType.GRID_CELL: False},
    )


# --- validation ----------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    pc: int | None
    node_type: NodeType | None
    message: str

    def __str__(self):
        where = []
        if self.node_type is not None:
            where.append(self.node_type.value)
        if self.pc is not None:
            where.append(f"pc {self.pc}")
        return f"[{' '.join(where)}] {self.message}" if where else self.message


class ProgramError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


def validate(program: IntersectionProgram) -> list[Diagnostic]:
    """All structural checks; an empty list means the program is valid."""
    diags: list[Diagnostic] = []
    v = program.variant
    uops = program.uops

    for pc, u in enumerate(uops):
        if u.kind in (UopKind.BOXN, UopKind.EXE) and v.units is not UnitStyle.COLLISION_UNITS:
            diags.append(Diagnostic(pc, None, f"{u.kind.value} requires collision units"))
        if u.kind is UopKind.RETURN and not v.cond_return:
            diags.append(Diagnostic(pc, None, "RETURN requires conditional returns"))
        if u.kind is UopKind.PUSH:
            diags.append(Diagnostic(pc, None, "PUSH is controller work and not part of intersection programs"))
        regs = set(u.reads())
        if u.dst is not None:
            regs.add(u.dst)
        bad = sorted(r for r in regs if not 0 <= r < NUM_REGS)
        if bad:
            diags.append(Diagnostic(pc, None, f"register index out of range: {bad}"))
        for op in u.src:
            if op.const is not None and op.const not in CONSTANTS:
                diags.append(Diagnostic(pc, None, f"unknown constant {op.const!r}"))
            if op.lane is not None and not 0 <= op.lane < 3:
                diags.append(Diagnostic(pc, None, f"lane out of range: {op.lane}"))
        if u.kind is UopKind.CMP3 and u.cmp_mode not in ("and", "or"):
            diags.append(Diagnostic(pc, None, "CMP3 needs an AND/OR reduce mode"))

    for nt in program.node_types:
        start, end = program.entries[nt], program.segment_end[nt]
        if not 0 <= start < end <= len(uops):
            diags.append(Diagnostic(None, nt, f"bad segment [{start}, {end})"))
            continue
        # routing
        reachable = {start}
        frontier = [start]
        while frontier:
            pc = frontier.pop()
            u = uops[pc]
            if u.kind is UopKind.RETURN:
                continue
            entry = program.dest_table.get((nt, pc))
            if entry is None:
                diags.append(Diagnostic(pc, nt, "missing destination entry"))
                continue
            routes = [entry.route] + ([entry.false_route] if entry.dual else [])
            for r in routes:
                if r.port not in VALID_PORTS:
                    diags.append(Diagnostic(pc, nt, f"invalid destination port {r.port!r}"))
                if r.next_pc is None:
                    if r.port != CTRL:
                        diags.append(Diagnostic(pc, nt, f"terminal route must target {CTRL}, not {r.port}"))
                    continue
                if not start <= r.next_pc < end:
                    diags.append(Diagnostic(pc, nt, f"dangling next pc {r.next_pc} (segment is [{start}, {end}))"))
                    continue
                if r.next_pc <= pc:
                    diags.append(Diagnostic(pc, nt, f"backward route to pc {r.next_pc}"))
                    continue
                expected = program.unit_of(r.next_pc)
                if r.port != expected:
                    diags.append(Diagnostic(pc, nt, f"port {r.port} does not serve pc {r.next_pc} ({expected})"))
                if r.next_pc not in reachable:
                    reachable.add(r.next_pc)
                    frontier.append(r.next_pc)
            if v.cond_return and u.kind in COMPARE_KINDS and not entry.dual:
                diags.append(Diagnostic(pc, nt, "compare needs two destination entries"))
            if not v.cond_return and entry.dual:
                diags.append(Diagnostic(pc, nt, "dual destination entries need conditional returns"))
            if entry.dual and u.kind not in COMPARE_KINDS:
                diags.append(Diagnostic(pc, nt, "only compares may have two destination entries"))
        for pc in range(start, end):
            if pc not in reachable:
                diags.append(Diagnostic(pc, nt, "unreachable from the entry pc"))
        # def-before-use along the linear order (all routes go forward)
        defined = set(program.inputs[nt])
        for pc in range(start, end):
            u = uops[pc]
            missing = sorted(r for r in u.reads() if r not in defined and 0 <= r < NUM_REGS)
            if missing:
                diags.append(Diagnostic(pc, nt, f"reads undefined registers {missing}"))
            if u.dst is not None:
                defined.add(u.dst)
        if v.predication:
            seen_exit = False
            for pc in range(start, end):
                if seen_exit and not uops[pc].predicated:
                    diags.append(Diagnostic(pc, nt, "μop after an exit compare must be predicate-dependent"))
                if uops[pc].exit_when is not None:
                    seen_exit = True

    if program.default_stage is ExitStage.FULL_OVERLAP:
        diags += _check_sact_counts(program)
    diags.sort(key=lambda d: (-1 if d.pc is None else d.pc))
    return diags


def _check_sact_counts(program: IntersectionProgram) -> list[Diagnostic]:
    expected: Counter = Counter()
    stages = ["preprocessing"]
    if program.variant.units is not UnitStyle.COLLISION_UNITS:
        stages += ["box_normal", "edge_edge"]
    if program.spheres_enabled:
        stages += ["bounding_sphere", "inscribing_sphere"]
    for s in stages:
        for kind, n in STAGE_UOPS[s].items():
            expected[kind] += n * STAGE_TESTS[s]
    if program.variant.units is UnitStyle.COLLISION_UNITS:
        expected[UopKind.BOXN] += 6
        expected[UopKind.EXE] += 9
    if program.variant.cond_return:
        expected[UopKind.RETURN] += 1
    actual = Counter(u.kind for u in program.uops)
    if actual != expected:
        return [Diagnostic(None, None, f"μop mix {dict(actual)} differs from the expected {dict(expected)}")]
    return []


def check(program: IntersectionProgram) -> IntersectionProgram:
    diags = validate(program)
    if diags:
        raise ProgramError(diags)
    return program


# --- interpreter --------------------------------------------------------------------------


@dataclass
class ExecResult:
    """Per-lane outcome of running one node-test program on a batch of packets.

    ``exit_pc`` is the compare that left the linear path (-1 when the lane
    ran to the end of the segment) and ``decide_pc`` the compare that fixed
    the result; together with ``via_return`` they identify the μop path.
    """

    result: np.ndarray
    stage: np.ndarray
    decoded: np.ndarray
    computed: np.ndarray
    terminate: np.ndarray
    exit_pc: np.ndarray
    decide_pc: np.ndarray
    via_return: np.ndarray
    regs: np.ndarray
    visited: np.ndarray  # (L, segment length) μops decoded and routed
    computed_mask: np.ndarray  # (L, segment length) μops that did compute work

    def path_keys(self) -> np.ndarray:
        """Integer key per lane identifying the executed path."""
        return ((self.exit_pc + 1) * 512 + (self.decide_pc + 1)) * 2 + self.via_return.astype(np.int64)


def _read(op: Operand, regs: np.ndarray, dtype) -> np.ndarray:
    if op.const is not None:
        v = np.broadcast_to(np.asarray(CONSTANTS[op.const], dtype=dtype), regs.shape[:1] + (3,))
    elif op.gather:
        v = regs[:, op.reg : op.reg + 3, op.lane]
    elif op.lane is not None:
        v = np.repeat(regs[:, op.reg, op.lane : op.lane + 1], 3, axis=1)
    else:
        v = regs[:, op.reg, :]
    if op.abs:
        v = np.abs(v)
    if op.neg:
        v = -v
    return v


def _dot3(x, y):
    return (x[:, 0] * y[:, 0] + x[:, 1] * y[:, 1]) + x[:, 2] * y[:, 2]


def _bcast(s):
    return np.repeat(s[:, None], 3, axis=1)


def _edge_margin(regs, i, j):
    u = regs[:, REG_OBB_U + j]
    T = regs[:, REG_T]
    a = regs[:, REG_AABB_A]
    b = regs[:, REG_OBB_B]
    E = regs[:, REG_E : REG_E + 3]  # rows of |R| + eps
    i1, i2 = (i + 1) % 3, (i + 2) % 3
    j1, j2 = (j + 1) % 3, (j + 2) % 3
    proj = u[:, i1] * T[:, i2] - u[:, i2] * T[:, i1]
    rad = ((a[:, i1] * E[:, i2, j] + a[:, i2] * E[:, i1, j]) + b[:, j1] * E[:, i, j2]) + b[:, j2] * E[:, i, j1]
    return np.abs(proj) - rad


def _boxn_margin(regs, k):
    b = regs[:, REG_OBB_B]
    a = regs[:, REG_AABB_A]
    if k < 3:
        row = np.abs(regs[:, REG_OBB_U : REG_OBB_U + 3, k])
        rad = _dot3(row, b) + a[:, k]
        proj = regs[:, REG_T, k]
    else:
        j = k - 3
        rad = _dot3(a, np.abs(regs[:, REG_OBB_U + j])) + b[:, j]
        proj = regs[:, REG_T_OBB, j]
    return np.abs(proj) - rad


def _compare(u: Uop, x: np.ndarray, y: np.ndarray):
    if u.cmp_op == "gt":
        lanes = x > y
    elif u.cmp_op == "ge":
        lanes = x >= y
    elif u.cmp_op == "le":
        lanes = x <= y
    else:
        raise ValueError(f"unknown compare {u.cmp_op!r}")
    mask = np.asarray(u.cmp_lanes)
    if u.cmp_mode == "or":
        flag = np.any(lanes & mask, axis=1)
    else:
        flag = np.all(lanes | ~mask, axis=1)
    return lanes, flag


def execute(program: IntersectionProgram, node_type: NodeType, regs: np.ndarray) -> ExecResult:
    """Run the ``node_type`` segment for a batch of packets ``regs`` of shape (L, 16, 3).

    The register array's dtype is the datapath precision.  Control flow is
    taken from the destination table.
    """
    regs = np.array(regs, copy=True)
    dtype = regs.dtype
    L = regs.shape[0]
    v = program.variant
    start, end = program.entries[node_type], program.segment_end[node_type]
    table = program.dest_table

    next_pc = np.full(L, start, dtype=np.int64)
    pred = np.zeros(L, dtype=bool)
    decided = np.zeros(L, dtype=bool)
    result = np.full(L, program.default_result[node_type], dtype=bool)
    stage_default = -1 if program.default_stage is None else int(program.default_stage)
    stage = np.full(L, stage_default, dtype=np.int64)
    decoded = np.zeros(L, dtype=np.int64)
    computed = np.zeros(L, dtype=np.int64)
    terminate = np.zeros(L, dtype=bool)
    exit_pc = np.full(L, -1, dtype=np.int64)
    decide_pc = np.full(L, -1, dtype=np.int64)
    via_return = np.zeros(L, dtype=bool)
    visited = np.zeros((L, end - start), dtype=bool)
    computed_mask = np.zeros((L, end - start), dtype=bool)

    for pc in range(start, end):
        act = next_pc == pc
        if not act.any():
            continue
        u = program.uops[pc]
        decoded += act
        comp = act & ~pred
        computed += comp
        visited[:, pc - start] = act
        computed_mask[:, pc - start] = comp
        if u.kind is UopKind.RETURN:
            via_return |= act
            next_pc[act] = -2
            continue

        value = None
        flag = None
        k = u.kind
        if k is UopKind.SUB3:
            value = _read(u.src[0], regs, dtype) - _read(u.src[1], regs, dtype)
        elif k is UopKind.MUL:
            value = _read(u.src[0], regs, dtype) * _read(u.src[1], regs, dtype)
        elif k is UopKind.DOT:
            s = _dot3(_read(u.src[0], regs, dtype), _read(u.src[1], regs, dtype))
            if len(u.src) > 2:
                s = s + _read(u.src[2], regs, dtype)[:, 0]
            value = _bcast(s)
        elif k is UopKind.MINMAX:
            fn = np.minimum if u.minmax == "min" else np.maximum
            value = fn(_read(u.src[0], regs, dtype), _read(u.src[1], regs, dtype))
        elif k is UopKind.RXFORM:
            T = _read(u.src[0], regs, dtype)
            base = u.src[1].reg
            value = np.stack([_dot3(T, regs[:, base + j]) for j in range(3)], axis=1)
        elif k is UopKind.CROSS:
            value = _bcast(_edge_margin(regs, *u.imm))
        elif k is UopKind.CMP3:
            lanes, flag = _compare(u, _read(u.src[0], regs, dtype), _read(u.src[1], regs, dtype))
            value = lanes.astype(dtype)
        elif k is UopKind.BOXN:
            m = _boxn_margin(regs, u.imm[0])
            value = _bcast(m)
            flag = m > 0
        elif k is UopKind.EXE:
            m = _edge_margin(regs, *u.imm)
            value = _bcast(m)
            flag = m > 0
        else:
            raise ValueError(f"cannot execute {k}")

        if u.dst is not None and value is not None:
            regs[:, u.dst] = np.where(comp[:, None], value.astype(dtype, copy=False), regs[:, u.dst])

        if flag is not None:
            if u.sets_result:
                result = np.where(comp, flag, result)
            if u.exit_when is not None:
                hit = comp & (flag == u.exit_when)
                if u.exit_result is not None:
                    newly = hit & ~decided
                    result[newly] = u.exit_result
                    if u.exit_stage is not None:
                        stage[newly] = int(u.exit_stage)
                    decide_pc[newly] = pc
                    decided |= newly
                if u.terminate_query:
                    terminate |= hit
                if v.predication:
                    pred |= hit

        entry = table[(node_type, pc)]
        if entry.dual:
            f = flag if flag is not None else np.zeros(L, dtype=bool)
            t_next = -2 if entry.route.next_pc is None else entry.route.next_pc
            f_next = -2 if entry.false_route.next_pc is None else entry.false_route.next_pc
            nxt = np.where(f, t_next, f_next)
        else:
            nxt = np.full(L, -2 if entry.route.next_pc is None else entry.route.next_pc)
        left_path = act & (nxt != pc + 1) & ~((nxt == -2) & (pc + 1 == end))
        exit_pc[left_path] = pc
        next_pc = np.where(act, nxt, next_pc)

    return ExecResult(
        result, stage, decoded, computed, terminate, exit_pc, decide_pc, via_return, regs, visited, computed_mask
    )


# --- packing helpers -------------------------------------------------------------------


def pack_sact(obb_center, obb_half, obb_axes, aabb_center, aabb_half, dtype=np.float32) -> np.ndarray:
    """Build SACT packets; arguments broadcast over a leading lane dimension."""
    obb_center = np.asarray(obb_center, dtype=np.float64)
    aabb_center = np.asarray(aabb_center, dtype=np.float64)
    L = np.broadcast_shapes(obb_center.shape[:-1], aabb_center.shape[:-1], np.shape(aabb_half)[:-1])
    L = L[0] if L else 1
    regs = np.zeros((L, NUM_REGS, 3), dtype=dtype)
    regs[:, REG_OBB_C] = obb_center
    regs[:, REG_OBB_B] = obb_half
    axes = np.broadcast_to(np.asarray(obb_axes, dtype=np.float64), (L, 3, 3))
    for j in range(3):
        regs[:, REG_OBB_U + j] = axes[:, :, j]
    regs[:, REG_AABB_C] = aabb_center
    regs[:, REG_AABB_A] = aabb_half
    return regs


def pack_ball_query(origins, radius: float, k_max: int, counts, node_a, node_b=None, dtype=np.float32) -> np.ndarray:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    L = len(origins)
    regs = np.zeros((L, NUM_REGS, 3), dtype=dtype)
    regs[:, 0] = origins
    regs[:, 1, 0] = radius * radius
    regs[:, 1, 1] = k_max - 1
    regs[:, 2, 0] = counts
    regs[:, 3] = node_a
    if node_b is not None:
        regs[:, 4] = node_b
    return regs


@dataclass(frozen=True)
class NodeTestResult:
    collides: bool
    exit: ExitStage | None
    uops_executed: int
    uops_computed: int


def interpret(program: IntersectionProgram, query, node, node_type: NodeType | None = None, dtype=np.float64) -> NodeTestResult:
    """Single-query reference run.

    For SACT programs ``query`` is an :class:`~robocore.geom.Obb` and ``node``
    an :class:`~robocore.geom.Aabb`.  For ball-query programs ``query`` is a
    :class:`~robocore.geom.Ray` (degenerate) and ``node`` an Aabb (internal)
    or a :class:`~robocore.geom.Sphere` (leaf).
    """
    from .geom import Aabb, Obb, Ray, Sphere

    if isinstance(query, Obb):
        nt = node_type or NodeType.OCTREE_LEAF
        regs = pack_sact(query.center[None], query.half_extents[None], query.axes[None], node.center[None], node.half_extents[None], dtype)
    elif isinstance(query, Ray):
        if isinstance(node, Aabb):
            nt = NodeType.BVH_INTERNAL
            regs = pack_ball_query(query.origin[None], 0.0, program.k_max or 1, 0, node.lo[None], node.hi[None], dtype)
        elif isinstance(node, Sphere):
            nt = NodeType.SPHERE_LEAF
            regs = pack_ball_query(query.origin[None], node.radius, program.k_max or 1, 0, node.center[None], None, dtype)
        else:
            raise TypeError(f"unsupported node {node!r}")
    else:
        raise TypeError(f"unsupported query {query!r}")
    r = execute(program, nt, regs)
    stage = ExitStage(int(r.stage[0])) if r.stage[0] >= 0 else None
    return NodeTestResult(bool(r.result[0]), stage, int(r.decoded[0]), int(r.computed[0]))


def dump_program(program: IntersectionProgram) -> str:
    """Text listing: ``pc kind dst <- src... ; dest(node_type)->(next_pc, port)[/false:(pc,port)]``."""
    lines = [f"# {program.name}: {len(program.uops)} uops"]
    for pc, u in enumerate(program.uops):
        dests = []
        for nt in program.node_types:
            if pc not in program.segment(nt):
                continue
            e = program.dest_table.get((nt, pc))
            if e is None:
                continue
            s = f"dest({nt.value})->{e.route}"
            if e.dual:
                s += f"/false:{e.false_route}"
            dests.append(s)
        tail = (" ; " + " ; ".join(dests)) if dests else " ; return"
        lines.append(f"{pc:3d} {u}{tail}")
    return "\n".join(lines) + "\n"


def iter_programs(spheres: Iterable[bool] = (False, True)) -> Iterable[IntersectionProgram]:
    for name in VARIANTS:
        for s in spheres:
            yield assemble_sact(name, s)
