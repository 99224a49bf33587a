"""Four-legged intersection layout and the N-vehicle scenario family shared
by the lane-free and signalised regimes.

Approaches are named by the side a vehicle comes from (``"S"`` drives
north). Traffic keeps right: each road has one incoming and one outgoing
lane, and the junction box is centred at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .dynamics import Limits, PhysicalParams, stability_derivatives
from .geometry import Pose, VehicleShape, road_boundaries
from .ocp import CrossingScenario, VehicleSpec

APPROACHES = ("S", "W", "N", "E")
TURNS = ("left", "through", "right")

# Heading of travel when entering from each side.
_ENTRY_HEADING = {"S": math.pi / 2, "W": 0.0, "N": -math.pi / 2, "E": math.pi}
_TURN_ANGLE = {"left": math.pi / 2, "through": 0.0, "right": -math.pi / 2}

# Turn pattern for the round-robin family; every batch starts with a left turn.
# Its period (5) is coprime with the four approaches so turns rotate per approach.
FAMILY_TURNS = ("left", "through", "right", "through", "through")


def exit_road(approach: str, turn: str) -> str:
    """Side of the junction a movement leaves through."""
    h = _ENTRY_HEADING[approach] + _TURN_ANGLE[turn]
    c, s = round(math.cos(h)), round(math.sin(h))
    return {(1, 0): "E", (0, 1): "N", (-1, 0): "W", (0, -1): "S"}[(c, s)]


@dataclass(frozen=True)
class Intersection:
    lane_length: float = 50.0
    lane_width: float = 5.0
    lanes_per_approach: int = 2

    @property
    def road_width(self) -> float:
        return self.lane_width * self.lanes_per_approach

    @property
    def half_box(self) -> float:
        return 0.5 * self.road_width

    def roads(self):
        return road_boundaries(self.lane_length, self.lane_width, self.lanes_per_approach)

    def lane_pose(self, heading: float, along: float) -> Pose:
        """Centre of the right-hand lane for travel along ``heading``, at
        signed distance ``along`` from the junction centre."""
        c, s = math.cos(heading), math.sin(heading)
        off = 0.5 * self.lane_width
        return Pose(along * c + off * s, along * s - off * c, heading)

    def movement_path_length(self, approach: str, turn: str) -> float:
        """Centre-line length from the stop line to the far box edge."""
        w, off = self.road_width, 0.5 * self.lane_width
        if turn == "through":
            return w
        # Quarter circle from the entry stop line to the exit box edge.
        radius = self.half_box + off if turn == "left" else self.half_box - off
        return 0.5 * math.pi * radius


@dataclass(frozen=True)
class VehicleDefaults:
    shape: VehicleShape = VehicleShape()
    physical: PhysicalParams = PhysicalParams()
    limits: Limits = Limits()
    v_init: float = 10.0
    # Front-to-rear gap for vehicles queued in the same lane.
    queue_gap: float = 2.0
    # Distance from the box edge to the first vehicle's front bumper.
    entry_gap: float = 10.0
    # Distance from the box edge to the rear bumper of the first vehicle at its goal.
    exit_gap: float = 0.5


@dataclass(frozen=True)
class Movement:
    approach: str
    turn: str
    v_init: float = None

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ValueError(f"unknown approach {self.approach!r}")
        if self.turn not in TURNS:
            raise ValueError(f"unknown turn {self.turn!r}")


def family_movements(n: int) -> list:
    """Round-robin approaches with the fixed turn pattern (``FAMILY_TURNS``)."""
    return [Movement(APPROACHES[k % 4], FAMILY_TURNS[k % len(FAMILY_TURNS)]) for k in range(n)]


def queue_offsets(movements, inter: Intersection, defaults: VehicleDefaults):
    """Per vehicle: (queue index on its approach, distance from the front
    bumper to the stop line)."""
    seen = {a: 0 for a in APPROACHES}
    L, gap = defaults.shape.length, defaults.queue_gap
    out = []
    for mv in movements:
        q = seen[mv.approach]
        seen[mv.approach] += 1
        out.append((q, defaults.entry_gap + q * (L + gap)))
    return out


def build_scenario(movements, inter: Intersection = Intersection(), defaults: VehicleDefaults = VehicleDefaults(),
                   d_min: float = 0.1, d_rmin: float = 0.1) -> CrossingScenario:
    """Place each vehicle in its approach queue and its goal in the exit lane.

    Vehicles sharing an approach queue behind each other in listing order;
    vehicles sharing an exit road are stacked in the outgoing lane in the
    same order. Goals put every rear bumper past the far box edge.
    """
    L = defaults.shape.length
    exit_count = {a: 0 for a in APPROACHES}
    vehicles = []
    offsets = queue_offsets(movements, inter, defaults)
    for k, (mv, (q, front_gap)) in enumerate(zip(movements, offsets)):
        v0 = defaults.v_init if mv.v_init is None else mv.v_init
        h_in = _ENTRY_HEADING[mv.approach]
        start = inter.lane_pose(h_in, -(inter.half_box + front_gap + 0.5 * L))
        out_road = exit_road(mv.approach, mv.turn)
        slot = exit_count[out_road]
        exit_count[out_road] += 1
        h_out = h_in + _TURN_ANGLE[mv.turn]
        along = inter.half_box + defaults.exit_gap + 0.5 * L + slot * (L + defaults.queue_gap)
        goal = inter.lane_pose(h_out, along)
        params = stability_derivatives(defaults.physical, max(v0, defaults.limits.V_min))
        vehicles.append(VehicleSpec(
            shape=defaults.shape,
            params=params,
            limits=defaults.limits,
            start=start,
            v0=v0,
            goal=goal,
            exit_line=(math.cos(h_out), math.sin(h_out), inter.half_box),
            label=f"{mv.approach}-{mv.turn}-{k}",
        ))
    return CrossingScenario(vehicles=tuple(vehicles), roads=tuple(inter.roads()), d_min=d_min, d_rmin=d_rmin)


def scenario_family(inter: Intersection = Intersection(), defaults: VehicleDefaults = VehicleDefaults(),
                    d_min: float = 0.1, d_rmin: float = 0.1):
    """``N -> CrossingScenario`` for the round-robin family."""
    def make(n: int) -> CrossingScenario:
        return build_scenario(family_movements(n), inter, defaults, d_min, d_rmin)
    return make


def with_limits(defaults: VehicleDefaults, **overrides) -> VehicleDefaults:
    """Copy of ``defaults`` with limit fields (and ``v_init``) overridden."""
    v_init = overrides.pop("v_init", defaults.v_init)
    return replace(defaults, limits=replace(defaults.limits, **overrides), v_init=v_init)
