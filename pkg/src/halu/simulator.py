"""2.5D scene simulator producing paired laser / obstacle-distance scans.

Obstacles are vertical prisms: a 2D footprint (line segments) extruded over a
height interval.  A 2D laser at height h* only sees obstacles that are
laser-visible and span h*; the ground-truth scan instead casts against every
obstacle whose height interval intersects the collision band [eps, H].  Since
cross-sections are height-constant, the minimum over heights reduces to a
minimum over qualifying obstacles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ScanPair, fuse
from .errors import ConfigError, DomainError, FormatError, ShapeError

SCENE_FORMAT = "halu-scene"
SCENE_VERSION = 1

SCENE_KINDS = ("room", "corridor", "glass_room", "table_room", "mixed")

LEG_WIDTH = 0.04  # meters, square table-leg footprint
TABLETOP_BAND = (0.70, 0.75)  # meters above floor
WALL_HEIGHT = 2.2


@dataclass
class Obstacle:
    """A prism: 2D footprint segments spanning a vertical height interval."""

    segments: np.ndarray  # (S, 2, 2): segment -> endpoint -> (x, y), meters
    height_interval: tuple
    laser_visible: bool = True
    label: str = ""

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64)
        if self.segments.ndim != 3 or self.segments.shape[1:] != (2, 2):
            raise ShapeError(f"segments must be (S, 2, 2), got {self.segments.shape}")
        lo, hi = self.height_interval
        if not lo < hi:
            raise ConfigError(f"height interval must satisfy lo < hi, got [{lo}, {hi}]")
        self.height_interval = (float(lo), float(hi))
        lengths = np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=1)
        if np.any(lengths <= 0.0):
            raise ConfigError("obstacle contains a zero-length segment")


@dataclass
class Scene:
    """Immutable-after-construction world description."""

    obstacles: list
    robot_height: float = 1.5
    laser_height: float = 0.25
    epsilon_floor: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.laser_height < self.robot_height:
            raise ConfigError(
                f"laser height {self.laser_height} must lie inside (0, {self.robot_height})"
            )
        if self.epsilon_floor < 0.0:
            raise ConfigError("epsilon_floor must be nonnegative")


@dataclass
class LaserSpec:
    """Scanner model: ray fan geometry and range limit."""

    n_rays: int = 128
    fov: float = math.pi / 2
    max_range: float = 30.0
    pose: tuple = (0.0, 0.0, 0.0)  # x, y, heading

    def __post_init__(self):
        if self.n_rays < 2:
            raise ConfigError(f"n_rays must be >= 2, got {self.n_rays}")
        if not 0.0 < self.fov <= 2.0 * math.pi:
            raise ConfigError(f"fov must be in (0, 2*pi], got {self.fov}")
        if self.max_range <= 0.0:
            raise ConfigError("max_range must be positive")
        self.pose = tuple(float(v) for v in self.pose)


def laser_visible_at(obstacle: Obstacle, h_star):
    lo, hi = obstacle.height_interval
    return obstacle.laser_visible and lo <= h_star <= hi


def in_collision_band(obstacle: Obstacle, eps, robot_height):
    lo, hi = obstacle.height_interval
    return max(lo, eps) <= min(hi, robot_height)


def _gather_segments(scene: Scene, obstacle_filter):
    segs = [ob.segments for ob in scene.obstacles if obstacle_filter is None or obstacle_filter(ob)]
    if not segs:
        return np.empty((0, 2, 2))
    return np.concatenate(segs, axis=0)


def _ray_distances(origin, dirs, segments, max_range):
    """Min ray-segment intersection distance per ray; max_range when none.

    origin (2,), dirs (R, 2) unit vectors, segments (S, 2, 2) -> (R,).
    """
    if segments.shape[0] == 0:
        return np.full(dirs.shape[0], max_range)
    p = segments[:, 0]
    e = segments[:, 1] - segments[:, 0]
    po = p - origin  # (S, 2)
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]  # (R, S)
    t_num = po[:, 0] * e[:, 1] - po[:, 1] * e[:, 0]  # (S,), independent of ray
    u_num = po[None, :, 0] * dirs[:, None, 1] - po[None, :, 1] * dirs[:, None, 0]  # (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num[None, :] / denom
        u = u_num / denom
    valid = (np.abs(denom) > 1e-15) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def cast_ray(scene: Scene, origin, direction, obstacle_filter=None, max_range=30.0):
    """Distance along a single ray to the nearest filtered obstacle segment."""
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise DomainError("ray direction must be nonzero")
    dirs = (direction / norm)[None, :]
    segments = _gather_segments(scene, obstacle_filter)
    return float(_ray_distances(np.asarray(origin, dtype=np.float64), dirs, segments, max_range)[0])


def ray_angles(spec: LaserSpec):
    """Ray bearings, evenly spaced over the field of view (endpoints included)."""
    return spec.pose[2] + np.linspace(-spec.fov / 2.0, spec.fov / 2.0, spec.n_rays)


def _scan(scene, spec, obstacle_filter):
    angles = ray_angles(spec)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = np.asarray(spec.pose[:2], dtype=np.float64)
    segments = _gather_segments(scene, obstacle_filter)
    return _ray_distances(origin, dirs, segments, spec.max_range)


def laser_scan(scene: Scene, spec: LaserSpec):
    """What the 2D laser reports: only laser-visible obstacles spanning h*."""
    h = scene.laser_height
    return _scan(scene, spec, lambda ob: laser_visible_at(ob, h))


def ground_truth_scan(scene: Scene, spec: LaserSpec):
    """Nearest obstacle over the collision band [eps, H], visibility ignored."""
    eps, hh = scene.epsilon_floor, scene.robot_height
    return _scan(scene, spec, lambda ob: in_collision_band(ob, eps, hh))


# ---------------------------------------------------------------------------
# Scene construction


def _rect_segments(cx, cy, half_w, half_d, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    corners = np.array(
        [[-half_w, -half_d], [half_w, -half_d], [half_w, half_d], [-half_w, half_d]]
    )
    world = corners @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])
    return np.stack([world, np.roll(world, -1, axis=0)], axis=1)


def make_wall(p0, p1, visible=True, height=WALL_HEIGHT, label="wall"):
    return Obstacle(
        segments=np.array([[p0, p1]], dtype=np.float64),
        height_interval=(0.0, height),
        laser_visible=visible,
        label=label,
    )


def make_box(cx, cy, half_w, half_d, yaw, height, label="box"):
    return Obstacle(
        segments=_rect_segments(cx, cy, half_w, half_d, yaw),
        height_interval=(0.0, height),
        laser_visible=True,
        label=label,
    )


def make_table(cx, cy, half_w, half_d, yaw):
    """Four thin legs spanning the tabletop height, plus the top slab.

    The legs are laser-visible columns; the top occupies only the tabletop
    band, so a low-mounted laser cannot see it.
    """
    obstacles = []
    inset = 1.5 * LEG_WIDTH
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, s], [-s, c]])
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            local = np.array([sx * (half_w - inset), sy * (half_d - inset)])
            leg = local @ rot + np.array([cx, cy])
            obstacles.append(
                Obstacle(
                    segments=_rect_segments(leg[0], leg[1], LEG_WIDTH / 2, LEG_WIDTH / 2, yaw),
                    height_interval=(0.0, TABLETOP_BAND[1]),
                    laser_visible=True,
                    label="table-leg",
                )
            )
    obstacles.append(
        Obstacle(
            segments=_rect_segments(cx, cy, half_w, half_d, yaw),
            height_interval=TABLETOP_BAND,
            laser_visible=True,
            label="table-top",
        )
    )
    return obstacles


def _doorway(rng, p0, p1, glass=False):
    """Cut an opening into the wall p0-p1 and build a short corridor stub
    behind it, so rays through the door still hit bounded structure."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    along = p1 - p0
    length = np.linalg.norm(along)
    along /= length
    width = rng.uniform(0.7, 1.1)
    offset = rng.uniform(0.25, 0.75) * (length - width)
    a = p0 + along * offset
    b = a + along * width
    mid = (p0 + p1) / 2.0
    outward = mid / np.linalg.norm(mid)
    depth = rng.uniform(1.5, 4.0)
    parts = [
        make_wall(p0, a),
        make_wall(b, p1),
        make_wall(a, a + outward * depth, label="outer-wall"),
        make_wall(b, b + outward * depth, label="outer-wall"),
        make_wall(a + outward * depth, b + outward * depth, label="outer-wall"),
    ]
    if glass:
        parts.append(make_wall(a, b, visible=False, label="glass-door"))
    return parts


def _room_walls(rng, half_w, half_d, glass_side=None, n_doorways=0, glass_door_p=0.25):
    corners = np.array(
        [(-half_w, -half_d), (half_w, -half_d), (half_w, half_d), (-half_w, half_d)]
    )
    door_sides = [
        int(s) for s in rng.permutation(4)[:n_doorways] if glass_side is None or s != glass_side
    ]
    walls = []
    for i in range(4):
        p0, p1 = corners[i], corners[(i + 1) % 4]
        if i == glass_side:
            walls.append(make_wall(p0, p1, visible=False, label="glass-wall"))
            # glass opens onto the next room, not onto empty space: an opaque
            # wall a few meters behind bounds what the laser reads through it
            mid = (p0 + p1) / 2.0
            outward = mid / np.linalg.norm(mid)
            back = outward * rng.uniform(1.0, 3.5)
            span = (p1 - p0) * 1.6
            center = mid + back
            walls.append(make_wall(center - span / 2.0, center + span / 2.0, label="outer-wall"))
        elif i in door_sides and np.linalg.norm(p1 - p0) > 2.4:
            walls.extend(_doorway(rng, p0, p1, glass=rng.random() < glass_door_p))
        else:
            walls.append(make_wall(p0, p1))
    return walls


def _random_table(rng, half_w, half_d):
    # parallel, perpendicular, and free-standing placements all occur
    yaw = float(rng.choice([0.0, math.pi / 2, rng.uniform(0.0, math.pi)]))
    cx = rng.uniform(-half_w + 1.2, half_w - 1.2)
    cy = rng.uniform(-half_d + 1.2, half_d - 1.2)
    t_half_w = rng.uniform(0.35, 0.8)
    t_half_d = rng.uniform(0.25, 0.45)
    return make_table(cx, cy, t_half_w, t_half_d, yaw)


def _random_box(rng, half_w, half_d):
    return make_box(
        cx=rng.uniform(-half_w + 0.8, half_w - 0.8),
        cy=rng.uniform(-half_d + 0.8, half_d - 0.8),
        half_w=rng.uniform(0.15, 0.4),
        half_d=rng.uniform(0.15, 0.4),
        yaw=rng.uniform(0.0, math.pi),
        height=float(rng.uniform(0.4, 1.2)),
    )


def _glass_panel(rng, half_w, half_d):
    # free-standing glass divider crossing the room interior
    along_x = bool(rng.integers(0, 2))
    if along_x:
        y = rng.uniform(-half_d + 1.0, half_d - 1.0)
        x0 = rng.uniform(-half_w, 0.0)
        p0, p1 = (x0, y), (x0 + rng.uniform(1.5, half_w), y)
    else:
        x = rng.uniform(-half_w + 1.0, half_w - 1.0)
        y0 = rng.uniform(-half_d, 0.0)
        p0, p1 = (x, y0), (x, y0 + rng.uniform(1.5, half_d))
    return make_wall(p0, p1, visible=False, label="glass-panel")


def generate_scene(kind, rng_seed):
    """Deterministic randomized scene of the requested kind."""
    if kind not in SCENE_KINDS:
        raise ConfigError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    rng = np.random.default_rng(rng_seed)
    if kind == "corridor":
        half_w = rng.uniform(2.5, 4.0)
        half_d = rng.uniform(0.9, 1.4)
    else:
        half_w = rng.uniform(1.6, 3.4)
        half_d = rng.uniform(1.6, 3.4)

    glass_side = int(rng.integers(0, 4)) if kind == "glass_room" else None
    obstacles = _room_walls(
        rng, half_w, half_d, glass_side=glass_side, n_doorways=int(rng.integers(1, 3))
    )

    if kind == "room":
        n_tables, n_glass = int(rng.integers(0, 2)), 0
        n_boxes = int(rng.integers(0, 5))
    elif kind == "corridor":
        n_tables, n_glass = int(rng.integers(0, 2)), 0
        n_boxes = int(rng.integers(0, 3))
    elif kind == "glass_room":
        n_tables = int(rng.integers(0, 2))
        n_glass = int(rng.integers(0, 2))  # wall glass already guaranteed
        n_boxes = int(rng.integers(0, 3))
    elif kind == "table_room":
        n_tables = int(rng.integers(1, 4))
        n_glass = int(rng.integers(0, 2))
        n_boxes = int(rng.integers(0, 3))
    else:  # mixed
        n_tables = int(rng.integers(0, 4))
        n_glass = int(rng.integers(0, 3))
        n_boxes = int(rng.integers(0, 5))

    margin = min(half_w, half_d)
    for _ in range(n_tables if margin > 1.4 else 0):
        obstacles.extend(_random_table(rng, half_w, half_d))
    for _ in range(n_glass if margin > 1.2 else 0):
        obstacles.append(_glass_panel(rng, half_w, half_d))
    for _ in range(n_boxes if margin > 1.0 else 0):
        obstacles.append(_random_box(rng, half_w, half_d))
    return Scene(obstacles=obstacles)


def _point_segment_distance(point, segments):
    """Shortest distance from a point to each (S, 2, 2) segment."""
    p = segments[:, 0]
    e = segments[:, 1] - segments[:, 0]
    ee = np.einsum("sd,sd->s", e, e)
    t = np.clip(np.einsum("sd,sd->s", point - p, e) / ee, 0.0, 1.0)
    closest = p + t[:, None] * e
    return np.linalg.norm(point - closest, axis=1)


def _sample_pose(rng, scene, clearance=0.5, tries=64):
    segs = np.concatenate([ob.segments for ob in scene.obstacles], axis=0)
    # positions come from the room interior; obstacles labeled as beyond the
    # boundary (e.g. walls backing glass) only contribute to clearance
    inner = [ob.segments for ob in scene.obstacles if ob.label != "outer-wall"]
    inner_pts = np.concatenate(inner, axis=0).reshape(-1, 2) if inner else segs.reshape(-1, 2)
    lo = inner_pts.min(axis=0)
    hi = inner_pts.max(axis=0)
    for _ in range(tries):
        pos = rng.uniform(lo + clearance, hi - clearance)
        if _point_segment_distance(pos, segs).min() >= clearance:
            break
    else:
        pos = (lo + hi) / 2.0
    if rng.random() < 0.5:
        heading = rng.uniform(0.0, 2.0 * math.pi)
    else:
        # aim roughly at the room center so furniture enters the field of view
        center = (lo + hi) / 2.0
        heading = math.atan2(center[1] - pos[1], center[0] - pos[0]) + rng.normal(0.0, 0.4)
    return float(pos[0]), float(pos[1]), float(heading)


def generate_dataset(n_pairs, kinds, spec: LaserSpec, rng_seed, poses_per_scene=4,
                     sensor_noise=0.0):
    """Fused (laser, obstacle-distance) pairs from randomized scenes and poses.

    Each generated scene is observed from `poses_per_scene` random poses,
    which mirrors how robot-gathered logs revisit the same furniture from
    many viewpoints.  `sensor_noise` (meters, std) optionally perturbs the
    laser readings like a real range finder's resolution limit; the
    height-band cast stays exact and fusion happens after the perturbation,
    so the pair invariant y <= x still holds.
    """
    if n_pairs < 0:
        raise ConfigError("n_pairs must be nonnegative")
    if poses_per_scene < 1:
        raise ConfigError("poses_per_scene must be >= 1")
    if sensor_noise < 0.0:
        raise ConfigError("sensor_noise must be nonnegative")
    for kind in kinds:
        if kind not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    if not kinds:
        raise ConfigError("at least one scene kind is required")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    scene = None
    for i in range(n_pairs):
        if i % poses_per_scene == 0:
            kind = kinds[(i // poses_per_scene) % len(kinds)]
            scene = generate_scene(kind, int(rng.integers(0, 2**63 - 1)))
        pose = _sample_pose(rng, scene)
        posed = replace(spec, pose=pose)
        x = laser_scan(scene, posed)
        if sensor_noise > 0.0:
            x = np.clip(x + rng.normal(0.0, sensor_noise, x.shape), 0.0, spec.max_range)
        y = fuse(x, ground_truth_scan(scene, posed))
        pairs.append(ScanPair(x=x, y=y))
    return pairs


# ---------------------------------------------------------------------------
# Scene file I/O (versioned JSON)


def scene_to_dict(scene: Scene):
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "robot_height": scene.robot_height,
        "laser_height": scene.laser_height,
        "epsilon_floor": scene.epsilon_floor,
        "obstacles": [
            {
                "segments": ob.segments.tolist(),
                "height_interval": list(ob.height_interval),
                "laser_visible": ob.laser_visible,
                "label": ob.label,
            }
            for ob in scene.obstacles
        ],
    }


def scene_from_dict(payload):
    if payload.get("format") != SCENE_FORMAT:
        raise FormatError(f"not a scene file: format={payload.get('format')!r}")
    if payload.get("version") != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {payload.get('version')}")
    try:
        obstacles = [
            Obstacle(
                segments=np.asarray(ob["segments"], dtype=np.float64),
                height_interval=tuple(ob["height_interval"]),
                laser_visible=bool(ob["laser_visible"]),
                label=ob.get("label", ""),
            )
            for ob in payload["obstacles"]
        ]
        return Scene(
            obstacles=obstacles,
            robot_height=float(payload["robot_height"]),
            laser_height=float(payload["laser_height"]),
            epsilon_floor=float(payload["epsilon_floor"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed scene file: {exc}") from exc


def save_scene(scene: Scene, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)


def load_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(payload)
