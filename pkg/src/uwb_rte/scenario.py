"""Scenario generation and range synthesis for two robots with UWB anchors/tags.

Index conventions (all 0-based):
    - Robot 1 runs a path of ``m1`` waypoints, repeated ``m2`` times; robot 2 holds
      each of its ``m2`` poses for ``m1`` consecutive steps. Step ``k = b * m1 + a``
      puts robot 1 at path pose ``a`` and robot 2 at pose ``b``.
    - Anchor index ``l1 = a * J1 + j1``; tag index ``l2 = b * J2 + j2``. Every
      (l1, l2) pair is observed at exactly one step.
    - ``MeasurementSet.ranges`` has shape ``(N1, N2, N)`` indexed ``[l1, l2, i]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import FrameTransform, matrix_rank, yaw_matrix

SCENARIO_SCHEMA = "rte-scenario/1"
MEASUREMENT_CSV_HEADER = ["l1", "l2", "i", "range_m", "sigma_m"]

# Offsets used in the two reference setups (body frame, meters).
CASE_I_ANCHORS = ((0.0, 0.0, 10.0),)
CASE_I_TAGS = ((0.0, 0.0, 10.0),)
CASE_II_ANCHORS = ((0.0, 0.0, 0.0), (10.0, 0.0, 0.0), (0.0, 10.0, 0.0), (0.0, 0.0, 10.0))
CASE_II_TAGS = ((10.0, 0.0, 0.0), (0.0, 10.0, 0.0), (0.0, 0.0, 10.0))

DEFAULT_TRUTH = FrameTransform(math.radians(60.0), np.array([20.0, 20.0, 20.0]))

# Streams derived from one scenario seed.
_SCHEDULE_STREAM = 0
_NOISE_STREAM = 1

COPLANAR_VOLUME_TOL = 1e-9
CONDITIONING_FLOOR = 0.05
MAX_RESAMPLE_ATTEMPTS = 2000


class ScenarioError(ValueError):
    """Invalid scenario parameters or a schedule that cannot satisfy the path design rules."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def design_params(j1: int, j2: int) -> tuple[int, int, int]:
    """Return ``(M1, M2, K)``: path lengths that make the design matrix full rank."""
    if not (isinstance(j1, (int, np.integer)) and 1 <= j1 <= 4):
        raise ScenarioError(f"anchor count J1 must be in 1..4, got {j1!r}")
    if not (isinstance(j2, (int, np.integer)) and 1 <= j2 <= 3):
        raise ScenarioError(f"tag count J2 must be in 1..3, got {j2!r}")
    m1 = -(-4 // int(j1))
    m2 = -(-3 // int(j2))
    return m1, m2, m1 * m2


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=float).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


def tetrahedron_volume(points) -> float:
    p = np.asarray(points, dtype=float)
    return abs(np.linalg.det(p[1:4] - p[0])) / 6.0


def default_layout(j1: int, j2: int) -> "UwbLayout":
    """Reference offsets: the single-unit setup for J=1, the four-anchor/three-tag setup otherwise."""
    design_params(j1, j2)
    if j1 == 1:
        anchors = CASE_I_ANCHORS
    elif j1 == 4:
        anchors = CASE_II_ANCHORS
    else:
        anchors = ((0.0, 0.0, 10.0), (10.0, 0.0, 0.0), (0.0, 10.0, 0.0))[:j1]
    if j2 == 1:
        tags = CASE_I_TAGS
    elif j2 == 3:
        tags = CASE_II_TAGS
    else:
        tags = ((0.0, 0.0, 10.0), (10.0, 0.0, 0.0))
    return UwbLayout(anchors, tags)


@dataclass(frozen=True)
class UwbLayout:
    """Body-frame mounting offsets of robot 1's anchors and robot 2's tags.

    With ``strict=False`` placement checks are skipped so that a degenerate layout
    can still be loaded and diagnosed by :func:`check_path_validity`.
    """

    anchors_body: np.ndarray
    tags_body: np.ndarray
    strict: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "anchors_body", _as_points(self.anchors_body))
        object.__setattr__(self, "tags_body", _as_points(self.tags_body))
        j1, j2 = self.j1, self.j2
        design_params(j1, j2)
        if not self.strict:
            return
        if j1 == 4 and tetrahedron_volume(self.anchors_body) <= COPLANAR_VOLUME_TOL:
            raise ScenarioError("four anchors must be installed non-coplanarly")
        if j2 == 3:
            with_origin = np.vstack([np.zeros(3), self.tags_body])
            if tetrahedron_volume(with_origin) <= COPLANAR_VOLUME_TOL:
                raise ScenarioError("three tags must be non-coplanar with the body origin")

    @property
    def j1(self) -> int:
        return len(self.anchors_body)

    @property
    def j2(self) -> int:
        return len(self.tags_body)


@dataclass(frozen=True)
class WaypointSchedule:
    """Per-step poses of both robots in their own odometry frames (K steps)."""

    robot1_positions: np.ndarray
    robot1_yaws: np.ndarray
    robot2_positions: np.ndarray
    robot2_yaws: np.ndarray
    m1: int
    m2: int

    def __post_init__(self):
        for name in ("robot1_positions", "robot2_positions"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1, 3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("robot1_yaws", "robot2_yaws"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        k = self.m1 * self.m2
        shapes = {len(self.robot1_positions), len(self.robot1_yaws),
                  len(self.robot2_positions), len(self.robot2_yaws)}
        if shapes != {k}:
            raise ScenarioError(f"schedule arrays must all have K = M1*M2 = {k} rows")

    @property
    def k(self) -> int:
        return self.m1 * self.m2

    def path1(self) -> tuple[np.ndarray, np.ndarray]:
        """Robot 1's repeated path block (first M1 steps)."""
        return self.robot1_positions[: self.m1], self.robot1_yaws[: self.m1]

    def poses2(self) -> tuple[np.ndarray, np.ndarray]:
        """Robot 2's M2 held poses (one per block)."""
        idx = np.arange(self.m2) * self.m1
        return self.robot2_positions[idx], self.robot2_yaws[idx]

    def structure_errors(self, r_max: float | None = None) -> list[str]:
        errs = []
        pos1, yaw1 = self.path1()
        for b in range(self.m2):
            sl = slice(b * self.m1, (b + 1) * self.m1)
            if not (np.array_equal(self.robot1_positions[sl], pos1) and np.array_equal(self.robot1_yaws[sl], yaw1)):
                errs.append(f"robot 1 block {b} does not repeat the first path block")
            if not (np.all(self.robot2_positions[sl] == self.robot2_positions[sl][0])
                    and np.all(self.robot2_yaws[sl] == self.robot2_yaws[sl][0])):
                errs.append(f"robot 2 moves inside block {b}")
        if r_max is not None:
            norms = np.linalg.norm(np.vstack([self.robot1_positions, self.robot2_positions]), axis=1)
            if np.any(norms > r_max * (1 + 1e-12)):
                errs.append(f"waypoint farther than r_max={r_max} from the origin")
        return errs

    @classmethod
    def from_paths(cls, path1_pos, path1_yaw, poses2_pos, poses2_yaw) -> "WaypointSchedule":
        """Build the full K-step schedule from robot 1's path block and robot 2's held poses."""
        path1_pos = np.asarray(path1_pos, dtype=float).reshape(-1, 3)
        poses2_pos = np.asarray(poses2_pos, dtype=float).reshape(-1, 3)
        m1, m2 = len(path1_pos), len(poses2_pos)
        return cls(
            robot1_positions=np.tile(path1_pos, (m2, 1)),
            robot1_yaws=np.tile(np.asarray(path1_yaw, dtype=float), m2),
            robot2_positions=np.repeat(poses2_pos, m1, axis=0),
            robot2_yaws=np.repeat(np.asarray(poses2_yaw, dtype=float), m1),
            m1=m1,
            m2=m2,
        )


def uwb_position_in_odom(position, yaw: float, offset_body) -> np.ndarray:
    """Odometry-frame position of a UWB unit mounted at ``offset_body``."""
    return np.asarray(position, dtype=float) + yaw_matrix(yaw) @ np.asarray(offset_body, dtype=float)


def _unit_positions(positions, yaws, offsets) -> np.ndarray:
    """Stack positions as index ``step * J + j``; shape (len(positions) * J, 3)."""
    positions = np.asarray(positions, dtype=float)
    out = [uwb_position_in_odom(p, y, off) for p, y in zip(positions, yaws) for off in offsets]
    return np.array(out, dtype=float).reshape(-1, 3)


def anchor_positions(layout: UwbLayout, schedule: WaypointSchedule) -> np.ndarray:
    return _unit_positions(*schedule.path1(), layout.anchors_body)


def tag_positions(layout: UwbLayout, schedule: WaypointSchedule) -> np.ndarray:
    return _unit_positions(*schedule.poses2(), layout.tags_body)


def _smallest_singular(a: np.ndarray) -> float:
    if min(a.shape) < 3:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[-1])


def _sample_ball(rng: np.random.Generator, radius: float, count: int) -> np.ndarray:
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / 3.0)
    return direction * r[:, None]


def _sample_path(rng, count: int, r_max: float) -> tuple[np.ndarray, np.ndarray]:
    # The odometry frame is the body frame at the first step: start at the origin, yaw 0.
    pos = np.vstack([np.zeros(3), _sample_ball(rng, r_max, count - 1)])
    yaw = np.concatenate([[0.0], rng.uniform(0.0, 2.0 * math.pi, count - 1)])
    return pos, yaw


def generate_schedule(layout: UwbLayout, r_max: float, rng: np.random.Generator,
                      max_attempts: int = MAX_RESAMPLE_ATTEMPTS) -> WaypointSchedule:
    """Random schedule satisfying the path design rules for ``layout``.

    Robot 1's path is resampled until its centered anchor positions have smallest
    singular value above ``0.05 * r_max``; robot 2's poses until its (uncentered) tag
    positions do. A robot carrying enough units (4 anchors / 3 tags) stays static at
    the origin and its placement is taken as given.
    """
    if not r_max > 0:
        raise ScenarioError(f"r_max must be positive, got {r_max}")
    m1, m2, _ = design_params(layout.j1, layout.j2)
    floor = CONDITIONING_FLOOR * r_max

    def draw(count, offsets, centered):
        if count == 1:
            return np.zeros((1, 3)), np.zeros(1)
        for _ in range(max_attempts):
            pos, yaw = _sample_path(rng, count, r_max)
            pts = _unit_positions(pos, yaw, offsets)
            if centered:
                pts = pts - pts.mean(axis=0)
            if _smallest_singular(pts.T) > floor:
                return pos, yaw
        raise ScenarioError(
            f"could not sample a non-coplanar path after {max_attempts} attempts (r_max={r_max})")

    pos1, yaw1 = draw(m1, layout.anchors_body, centered=True)
    pos2, yaw2 = draw(m2, layout.tags_body, centered=False)
    return WaypointSchedule.from_paths(pos1, yaw1, pos2, yaw2)


@dataclass(frozen=True)
class PathReport:
    valid: bool
    rank_h: int
    anchor_centered_rank: int
    tag_rank: int
    anchor_min_singular: float
    tag_min_singular: float
    structure_errors: tuple[str, ...] = ()

    def failed_conditions(self) -> list[str]:
        out = list(self.structure_errors)
        if self.anchor_centered_rank < 3:
            out.append(f"anchor positions are coplanar (centered rank {self.anchor_centered_rank} < 3)")
        if self.tag_rank < 3:
            out.append(f"tag positions are coplanar with the origin (rank {self.tag_rank} < 3)")
        if self.rank_h < 5:
            out.append(f"design matrix rank {self.rank_h} < 5")
        return out

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "rank_h": self.rank_h,
            "anchor_centered_rank": self.anchor_centered_rank,
            "tag_rank": self.tag_rank,
            "anchor_min_singular": self.anchor_min_singular,
            "tag_min_singular": self.tag_min_singular,
            "failed_conditions": self.failed_conditions(),
        }


def check_path_validity(layout: UwbLayout, schedule: WaypointSchedule, r_max: float | None = None) -> PathReport:
    from .estimator import design_matrix

    p1 = anchor_positions(layout, schedule)
    p2 = tag_positions(layout, schedule)
    centered = (p1 - p1.mean(axis=0)).T
    rank1 = matrix_rank(centered)
    rank2 = matrix_rank(p2.T)
    rank_h = matrix_rank(design_matrix(p1, p2, 1))
    structure = tuple(schedule.structure_errors(r_max))
    return PathReport(
        valid=(rank1 == 3 and rank2 == 3 and not structure),
        rank_h=rank_h,
        anchor_centered_rank=rank1,
        tag_rank=rank2,
        anchor_min_singular=_smallest_singular(centered),
        tag_min_singular=_smallest_singular(p2.T),
        structure_errors=structure,
    )


@dataclass(frozen=True)
class ScenarioConfig:
    layout: UwbLayout
    schedule: WaypointSchedule
    sigma: np.ndarray
    repetitions_N: int = 100
    ground_truth: FrameTransform = DEFAULT_TRUTH
    r_max: float = 10.0
    speed: float = 0.0
    latency_delta: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = np.full((self.layout.j1, self.layout.j2), float(sigma))
        if sigma.shape != (self.layout.j1, self.layout.j2):
            raise ScenarioError(f"sigma must be J1 x J2 = {(self.layout.j1, self.layout.j2)}, got {sigma.shape}")
        if not np.all(np.isfinite(sigma) & (sigma > 0)):
            raise ScenarioError("all noise standard deviations must be finite and > 0")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        if int(self.repetitions_N) < 1:
            raise ScenarioError("repetitions_N must be >= 1")
        if self.speed < 0 or self.latency_delta < 0:
            raise ScenarioError("speed and latency must be non-negative")
        if (self.schedule.m1, self.schedule.m2) != design_params(self.layout.j1, self.layout.j2)[:2]:
            raise ScenarioError("schedule block sizes do not match the UWB layout")

    def with_sigma(self, sigma) -> "ScenarioConfig":
        return replace(self, sigma=np.broadcast_to(np.asarray(sigma, dtype=float), self.sigma.shape).copy())

    def to_dict(self) -> dict:
        s = self.schedule
        return {
            "schema": SCENARIO_SCHEMA,
            "layout": {
                "anchors_body_m": self.layout.anchors_body.tolist(),
                "tags_body_m": self.layout.tags_body.tolist(),
            },
            "schedule": {
                "m1": s.m1,
                "m2": s.m2,
                "robot1_positions_m": s.robot1_positions.tolist(),
                "robot1_yaws_rad": s.robot1_yaws.tolist(),
                "robot2_positions_m": s.robot2_positions.tolist(),
                "robot2_yaws_rad": s.robot2_yaws.tolist(),
            },
            "sigma_m": self.sigma.tolist(),
            "repetitions_N": int(self.repetitions_N),
            "ground_truth": self.ground_truth.to_dict(),
            "r_max_m": self.r_max,
            "speed_mps": self.speed,
            "latency_delta_s": self.latency_delta,
            "rng_seed": int(self.rng_seed),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if data.get("schema") != SCENARIO_SCHEMA:
            raise ScenarioError(f"unsupported scenario schema {data.get('schema')!r}; expected {SCENARIO_SCHEMA!r}")
        try:
            sched = data["schedule"]
            return cls(
                layout=UwbLayout(data["layout"]["anchors_body_m"], data["layout"]["tags_body_m"], strict=False),
                schedule=WaypointSchedule(
                    robot1_positions=sched["robot1_positions_m"],
                    robot1_yaws=sched["robot1_yaws_rad"],
                    robot2_positions=sched["robot2_positions_m"],
                    robot2_yaws=sched["robot2_yaws_rad"],
                    m1=int(sched["m1"]),
                    m2=int(sched["m2"]),
                ),
                sigma=data["sigma_m"],
                repetitions_N=int(data["repetitions_N"]),
                ground_truth=FrameTransform.from_dict(data["ground_truth"]),
                r_max=float(data["r_max_m"]),
                speed=float(data.get("speed_mps", 0.0)),
                latency_delta=float(data.get("latency_delta_s", 0.01)),
                rng_seed=int(data.get("rng_seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario document: {exc}") from exc


def save_scenario(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_scenario(path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text()))


def random_scenario(layout: UwbLayout, seed: int, *, sigma=1.0, repetitions_N: int = 100,
                    ground_truth: FrameTransform = DEFAULT_TRUTH, r_max: float = 10.0,
                    speed: float = 0.0, latency_delta: float = 0.01,
                    schedule_seed: int | None = None) -> ScenarioConfig:
    """Random schedule for ``layout`` with noise seeded by ``seed``.

    The path is drawn from ``seed`` too, unless ``schedule_seed`` pins it so that
    many trials share one geometry and differ only in their noise.
    """
    path_seed = seed if schedule_seed is None else schedule_seed
    schedule = generate_schedule(layout, r_max, make_rng(path_seed, _SCHEDULE_STREAM))
    return ScenarioConfig(layout, schedule, sigma, repetitions_N, ground_truth, r_max, speed, latency_delta, seed)


@dataclass(frozen=True)
class MeasurementSet:
    """Range samples ``ranges[l1, l2, i]`` with the odometry positions that produced them."""

    anchor_positions: np.ndarray
    tag_positions: np.ndarray
    ranges: np.ndarray
    sigma_pair: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("anchor_positions", "tag_positions", "ranges", "sigma_pair"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n1, n2 = len(self.anchor_positions), len(self.tag_positions)
        if self.ranges.ndim != 3 or self.ranges.shape[:2] != (n1, n2):
            raise ScenarioError(f"ranges must have shape (N1={n1}, N2={n2}, N), got {self.ranges.shape}")
        if self.sigma_pair.shape != (n1, n2):
            raise ScenarioError("sigma_pair must have shape (N1, N2)")

    @property
    def n_rep(self) -> int:
        return self.ranges.shape[2]

    @property
    def n1(self) -> int:
        return self.ranges.shape[0]

    @property
    def n2(self) -> int:
        return self.ranges.shape[1]

    @property
    def n(self) -> int:
        return self.ranges.size

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.n_rep, self.n1, self.n2, self.n

    def replace_ranges(self, ranges) -> "MeasurementSet":
        return replace(self, ranges=ranges)


def pair_sigma(layout: UwbLayout, schedule: WaypointSchedule, sigma: np.ndarray) -> np.ndarray:
    """Expand the J1 x J2 sigma matrix to every (l1, l2) pair."""
    j1_idx = np.arange(schedule.m1 * layout.j1) % layout.j1
    j2_idx = np.arange(schedule.m2 * layout.j2) % layout.j2
    return np.asarray(sigma)[np.ix_(j1_idx, j2_idx)]


def true_distances(config: ScenarioConfig) -> np.ndarray:
    """Noise-free ranges between every anchor l1 and tag l2, shape (N1, N2)."""
    p1 = anchor_positions(config.layout, config.schedule)
    p2_in_1 = config.ground_truth.rotation.matrix @ tag_positions(config.layout, config.schedule).T
    p2_in_1 = p2_in_1.T + config.ground_truth.translation
    return np.linalg.norm(p1[:, None, :] - p2_in_1[None, :, :], axis=2)


def _validate_for_synthesis(config: ScenarioConfig) -> None:
    report = check_path_validity(config.layout, config.schedule, config.r_max)
    if not report.valid:
        raise ScenarioError("invalid schedule: " + "; ".join(report.failed_conditions()))


def _noisy(config: ScenarioConfig, distances: np.ndarray, sigma_pair: np.ndarray) -> np.ndarray:
    rng = make_rng(config.rng_seed, _NOISE_STREAM)
    noise = rng.standard_normal(distances.shape + (int(config.repetitions_N),))
    return distances[:, :, None] + sigma_pair[:, :, None] * noise


def synthesize_ranges(config: ScenarioConfig) -> MeasurementSet:
    """Noisy ranges ``||p1 - R p2 - t|| + r`` with ``r ~ N(0, sigma^2)``, measured at the waypoints."""
    _validate_for_synthesis(config)
    sigma_pair = pair_sigma(config.layout, config.schedule, config.sigma)
    return MeasurementSet(
        anchor_positions=anchor_positions(config.layout, config.schedule),
        tag_positions=tag_positions(config.layout, config.schedule),
        ranges=_noisy(config, true_distances(config), sigma_pair),
        sigma_pair=sigma_pair,
        seed=int(config.rng_seed),
    )


def waypoint_times(schedule: WaypointSchedule, speed: float) -> np.ndarray:
    """Arrival time at each step; both robots leave together and the step ends when the slower arrives."""
    seg1 = np.linalg.norm(np.diff(schedule.robot1_positions, axis=0), axis=1)
    seg2 = np.linalg.norm(np.diff(schedule.robot2_positions, axis=0), axis=1)
    durations = np.maximum(seg1, seg2) / speed
    return np.concatenate([[0.0], np.cumsum(durations)])


def position_at(positions: np.ndarray, times: np.ndarray, speed: float, t: float) -> np.ndarray:
    """Position along a piecewise-straight constant-speed path at time ``t``."""
    positions = np.asarray(positions, dtype=float)
    k = int(np.searchsorted(times, t, side="right") - 1)
    k = min(max(k, 0), len(positions) - 1)
    if k == len(positions) - 1:
        return positions[-1].copy()
    seg = positions[k + 1] - positions[k]
    length = np.linalg.norm(seg)
    if length == 0.0:
        return positions[k].copy()
    travelled = min(speed * (t - times[k]), length)
    return positions[k] + seg * (travelled / length)


def measurement_displacements(schedule: WaypointSchedule, speed: float, latency: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (K, 3) offsets between where each robot is measured and where odometry logs it.

    Ranges requested at a waypoint arrival time are taken ``latency`` seconds later,
    by which point a moving robot has advanced ``speed * latency`` along its segment.
    """
    k = schedule.k
    if speed == 0.0 or latency == 0.0:
        return np.zeros((k, 3)), np.zeros((k, 3))
    times = waypoint_times(schedule, speed)
    out = []
    for positions in (schedule.robot1_positions, schedule.robot2_positions):
        moved = np.array([position_at(positions, times, speed, times[s] + latency) for s in range(k)])
        out.append(moved - positions)
    return out[0], out[1]


def apply_speed_distortion(config: ScenarioConfig) -> MeasurementSet:
    """Like :func:`synthesize_ranges`, but the true range is taken after the measurement latency.

    The logged odometry positions stay at the waypoints; the ranges are evaluated at
    the positions reached ``latency_delta`` seconds later at constant ``speed``.
    Noise draws are identical to the undistorted synthesis for the same seed.
    """
    _validate_for_synthesis(config)
    if config.speed == 0.0 or config.latency_delta == 0.0:
        return synthesize_ranges(config)
    layout, sched, truth = config.layout, config.schedule, config.ground_truth
    off1, off2 = measurement_displacements(sched, config.speed, config.latency_delta)
    distances = np.empty((sched.m1 * layout.j1, sched.m2 * layout.j2))
    for step in range(sched.k):
        a, b = step % sched.m1, step // sched.m1
        for j1, anchor in enumerate(layout.anchors_body):
            pa = uwb_position_in_odom(sched.robot1_positions[step] + off1[step], sched.robot1_yaws[step], anchor)
            for j2, tag in enumerate(layout.tags_body):
                pt = uwb_position_in_odom(sched.robot2_positions[step] + off2[step], sched.robot2_yaws[step], tag)
                distances[a * layout.j1 + j1, b * layout.j2 + j2] = np.linalg.norm(
                    pa - truth.rotation.matrix @ pt - truth.translation)
    sigma_pair = pair_sigma(layout, sched, config.sigma)
    return MeasurementSet(
        anchor_positions=anchor_positions(layout, sched),
        tag_positions=tag_positions(layout, sched),
        ranges=_noisy(config, distances, sigma_pair),
        sigma_pair=sigma_pair,
        seed=int(config.rng_seed),
        meta={"speed_mps": config.speed, "latency_delta_s": config.latency_delta},
    )


def measure(config: ScenarioConfig) -> MeasurementSet:
    """Synthesize ranges, with speed distortion when both speed and latency are nonzero."""
    if config.speed > 0 and config.latency_delta > 0:
        return apply_speed_distortion(config)
    return synthesize_ranges(config)


def export_measurements(m: MeasurementSet, csv_path) -> Path:
    """Write ``l1,l2,i,range_m,sigma_m`` rows plus a ``.positions.json`` sidecar; returns the CSV path."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MEASUREMENT_CSV_HEADER)
        for l1 in range(m.n1):
            for l2 in range(m.n2):
                for i in range(m.n_rep):
                    writer.writerow([l1, l2, i, repr(float(m.ranges[l1, l2, i])), repr(float(m.sigma_pair[l1, l2]))])
    sidecar = csv_path.with_suffix(".positions.json")
    sidecar.write_text(json.dumps({
        "schema": "rte-measurements/1",
        "anchor_positions_m": m.anchor_positions.tolist(),
        "tag_positions_m": m.tag_positions.tolist(),
        "seed": m.seed,
    }, indent=2) + "\n")
    return csv_path


def load_measurements(csv_path) -> MeasurementSet:
    csv_path = Path(csv_path)
    side = json.loads(csv_path.with_suffix(".positions.json").read_text())
    p1 = np.asarray(side["anchor_positions_m"], dtype=float)
    p2 = np.asarray(side["tag_positions_m"], dtype=float)
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MEASUREMENT_CSV_HEADER:
            raise ScenarioError(f"unexpected measurement header {reader.fieldnames}")
        rows = [(int(r["l1"]), int(r["l2"]), int(r["i"]), float(r["range_m"]), float(r["sigma_m"])) for r in reader]
    n_rep = max(r[2] for r in rows) + 1
    ranges = np.full((len(p1), len(p2), n_rep), np.nan)
    sigma = np.full((len(p1), len(p2)), np.nan)
    for l1, l2, i, d, s in rows:
        ranges[l1, l2, i] = d
        sigma[l1, l2] = s
    if np.isnan(ranges).any():
        raise ScenarioError("measurement file is missing (l1, l2, i) entries")
    return MeasurementSet(p1, p2, ranges, sigma, seed=side.get("seed"))
