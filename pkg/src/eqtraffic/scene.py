"""Scene data model, algebra encodings, action vocabulary, and dynamics.

A scene is a set of agents (pose histories on a shared step grid) plus static
map nodes.  Actions are local SE(2) pose increments per step, discretized
against a per-class vocabulary built with a greedy disk-packing pass over
observed transitions.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .pga import COMPONENTS, Multivector, Pose2, motor_from_pose

AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist")
BOUNDARY_TYPES = ("none", "dashed", "solid", "curb")

AGENT_FEATURE_WIDTH = 3 + len(AGENT_CLASSES)          # speed, length, width, class one-hot
MAP_FEATURE_WIDTH = 4 + 2 * len(BOUNDARY_TYPES)       # length, width, curvature, speed_limit, boundaries


class SceneParseError(ValueError):
    """Malformed scene or vocab JSON; message carries the offending path."""


@dataclass(frozen=True)
class AgentState:
    t: int
    pose: Pose2
    speed: float

    def __post_init__(self):
        if self.speed < 0.0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class Agent:
    id: int
    agent_class: str
    length: float
    width: float
    states: tuple

    def __post_init__(self):
        if self.agent_class not in AGENT_CLASSES:
            raise ValueError(f"unknown agent class '{self.agent_class}'")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("agent length and width must be positive")
        steps = [s.t for s in self.states]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"agent {self.id} states must be strictly increasing in t")
        object.__setattr__(self, "states", tuple(self.states))

    def state_at(self, t: int):
        for s in self.states:
            if s.t == t:
                return s
        return None


@dataclass(frozen=True)
class MapNode:
    pose: Pose2
    length: float
    width: float
    curvature: float
    speed_limit: float
    boundary_left: str
    boundary_right: str

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("map node length must be positive")
        if self.speed_limit < 0:
            raise ValueError("speed limit must be >= 0")
        for side in (self.boundary_left, self.boundary_right):
            if side not in BOUNDARY_TYPES:
                raise ValueError(f"unknown boundary type '{side}'")


@dataclass(frozen=True)
class Scene:
    agents: tuple
    map_nodes: tuple
    ego_id: int
    horizon: int
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "map_nodes", tuple(self.map_nodes))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.ego() is None:
            raise ValueError(f"ego id {self.ego_id} not among agents")

    def ego(self):
        for a in self.agents:
            if a.id == self.ego_id:
                return a
        return None


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def encode_token_pose(p: Pose2) -> Multivector:
    """Pose as one multivector: bivectors carry the point, vectors the heading line.

    The vector part is the unit-normal line through (x, y) along direction
    theta: -sin(theta) x + cos(theta) y + (x sin(theta) - y cos(theta)) = 0.
    """
    return Multivector(encode_pose_array(np.array([p.x, p.y, p.theta])))


def encode_pose_array(poses: np.ndarray) -> np.ndarray:
    """Vectorized token encoding: [..., 3] (x, y, theta) -> [..., 8]."""
    poses = np.asarray(poses, dtype=np.float64)
    x, y, theta = poses[..., 0], poses[..., 1], poses[..., 2]
    sin, cos = np.sin(theta), np.cos(theta)
    out = np.zeros(poses.shape[:-1] + (COMPONENTS,))
    out[..., 2] = -sin                 # e1: line normal a
    out[..., 3] = cos                  # e2: line normal b
    out[..., 1] = x * sin - y * cos    # e0: line offset c
    out[..., 5] = x                    # e20: point x
    out[..., 4] = y                    # e01: point y
    out[..., 6] = 1.0                  # e12: point weight
    return out


def encode_agent_scalars(agent: Agent, t: int) -> np.ndarray:
    state = agent.state_at(t)
    if state is None:
        raise ValueError(f"agent {agent.id} has no state at t={t}")
    out = np.zeros(AGENT_FEATURE_WIDTH)
    out[0] = state.speed
    out[1] = agent.length
    out[2] = agent.width
    out[3 + AGENT_CLASSES.index(agent.agent_class)] = 1.0
    return out


def encode_map_scalars(node: MapNode) -> np.ndarray:
    out = np.zeros(MAP_FEATURE_WIDTH)
    out[0] = node.length
    out[1] = node.width
    out[2] = node.curvature
    out[3] = node.speed_limit
    out[4 + BOUNDARY_TYPES.index(node.boundary_left)] = 1.0
    out[8 + BOUNDARY_TYPES.index(node.boundary_right)] = 1.0
    return out


# ---------------------------------------------------------------------------
# action vocabulary (greedy disk packing over observed transitions)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionVocab:
    deltas: dict          # class -> [V, 3] array of (dx, dy, dtheta)
    k_r: float
    w_theta: float
    seed: int
    source_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for cls, arr in self.deltas.items():
            if cls not in AGENT_CLASSES:
                raise ValueError(f"unknown class '{cls}' in vocab")
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] == 0:
                raise ValueError(f"vocab for '{cls}' must be a nonempty [V, 3] array")
            a = a.copy()
            a.flags.writeable = False
            self.deltas[cls] = a

    def size(self, agent_class: str) -> int:
        return self.deltas[agent_class].shape[0]

    def max_size(self) -> int:
        return max(self.size(c) for c in self.deltas)


def action_distance(a: np.ndarray, b: np.ndarray, w_theta: float) -> np.ndarray:
    """Tokenization metric: sqrt(dx^2 + dy^2 + (w_theta * wrap(dtheta))^2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dxy = a[..., :2] - b[..., :2]
    dth = np.arctan2(
        np.sin(a[..., 2] - b[..., 2]), np.cos(a[..., 2] - b[..., 2])
    )
    return np.sqrt((dxy**2).sum(-1) + (w_theta * dth) ** 2)


def build_kdisk_vocab(
    transitions: dict,
    k_r: float,
    seed: int,
    cap: int | None = None,
    w_theta: float = 1.0,
) -> ActionVocab:
    """Greedy cover: shuffle, keep a candidate iff it is > k_r from every kept entry.

    Without a cap every source transition ends up within k_r of some kept
    entry; a binding cap trades coverage for vocabulary size.
    """
    if k_r <= 0:
        raise ValueError("k_r must be positive")
    rng = np.random.default_rng(seed)
    vocab = {}
    counts = {}
    for cls in AGENT_CLASSES:
        arr = np.asarray(transitions.get(cls, np.zeros((0, 3))), dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"no transitions for class '{cls}'")
        order = rng.permutation(arr.shape[0])
        kept: list[np.ndarray] = []
        for idx in order:
            cand = arr[idx]
            if kept:
                dists = action_distance(np.stack(kept), cand, w_theta)
                if not np.all(dists > k_r):
                    continue
            kept.append(cand)
            if cap is not None and len(kept) >= cap:
                break
        vocab[cls] = np.stack(kept)
        counts[cls] = int(arr.shape[0])
    return ActionVocab(deltas=vocab, k_r=k_r, w_theta=w_theta, seed=seed, source_counts=counts)


def tokenize(delta, vocab: ActionVocab, agent_class: str) -> int:
    """Nearest vocab entry under the metric; ties resolve to the lowest index."""
    if agent_class not in vocab.deltas:
        raise KeyError(f"no vocabulary for class '{agent_class}'")
    dists = action_distance(vocab.deltas[agent_class], np.asarray(delta, dtype=np.float64), vocab.w_theta)
    return int(np.argmin(dists))


def tokenize_batch(deltas: np.ndarray, vocab: ActionVocab, agent_class: str) -> np.ndarray:
    if agent_class not in vocab.deltas:
        raise KeyError(f"no vocabulary for class '{agent_class}'")
    entries = vocab.deltas[agent_class]  # [V, 3]
    d = np.asarray(deltas, dtype=np.float64)
    dists = action_distance(entries[None, :, :], d[:, None, :], vocab.w_theta)
    return np.argmin(dists, axis=1)


def detokenize(token: int, vocab: ActionVocab, agent_class: str) -> np.ndarray:
    if agent_class not in vocab.deltas:
        raise KeyError(f"no vocabulary for class '{agent_class}'")
    return vocab.deltas[agent_class][int(token)].copy()


# ---------------------------------------------------------------------------
# dynamics and frame handling
# ---------------------------------------------------------------------------

def dynamics_step(state, action_delta, dt: float):
    """Advance (pose, speed) by a local pose increment over one step of dt seconds.

    The increment composes in the agent frame, so for any motor g,
    f(g . state, delta) = g . f(state, delta) holds by construction.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    pose, _speed = state
    dx, dy, dth = (float(v) for v in action_delta)
    new_pose = pose.compose(Pose2(dx, dy, dth))
    return new_pose, math.hypot(dx, dy) / dt


def agent_transitions(agent: Agent) -> np.ndarray:
    """Local deltas between consecutive recorded steps, [N, 3]."""
    out = []
    for a, b in zip(agent.states, agent.states[1:]):
        if b.t != a.t + 1:
            continue
        d = a.pose.delta_to(b.pose)
        out.append([d.x, d.y, d.theta])
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)


def collect_transitions(scenes) -> dict:
    """Pool local deltas from many scenes, keyed by agent class."""
    pools: dict[str, list] = {cls: [] for cls in AGENT_CLASSES}
    for scene in scenes:
        for agent in scene.agents:
            arr = agent_transitions(agent)
            if arr.size:
                pools[agent.agent_class].append(arr)
    return {
        cls: (np.concatenate(parts) if parts else np.zeros((0, 3)))
        for cls, parts in pools.items()
    }


def transform_scene(scene: Scene, g: Pose2) -> Scene:
    """Apply a rigid transform to every pose in the scene."""
    agents = tuple(
        replace(
            a,
            states=tuple(
                AgentState(s.t, g.compose(s.pose), s.speed) for s in a.states
            ),
        )
        for a in scene.agents
    )
    nodes = tuple(replace(n, pose=g.compose(n.pose)) for n in scene.map_nodes)
    return replace(scene, agents=agents, map_nodes=nodes)


def recenter_scene(scene: Scene):
    """Express all poses relative to the ego's initial pose.

    Returns the recentered scene and the motor that undoes the recentering.
    """
    ego0 = scene.ego().state_at(0)
    if ego0 is None:
        raise ValueError("ego agent has no state at t=0")
    origin = ego0.pose
    recentered = transform_scene(scene, origin.inverse())
    return recentered, motor_from_pose(origin)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    n_agents: int = 4
    n_lanes: int = 3
    horizon: int = 26
    dt: float = 0.1
    lane_length: float = 80.0
    seg_len: float = 5.0          # map node spacing along each lane
    curvature_max: float = 0.06
    straight_fraction: float = 0.35
    center_spread: float = 40.0
    speed_noise: float = 0.15     # per-step speed random walk, m/s
    lateral_spread: float = 0.4   # fixed per-agent offset from the centerline, m
    heading_noise: float = 0.01   # per-step heading jitter, rad

    def validate(self):
        if self.n_agents < 1 or self.n_lanes < 1 or self.horizon < 2:
            raise ValueError("generator needs >= 1 agent, >= 1 lane, horizon >= 2")
        if self.dt <= 0 or self.seg_len <= 0 or self.lane_length <= 0:
            raise ValueError("dt, seg_len, lane_length must be positive")


_SPEED_RANGES = {"vehicle": (3.0, 11.0), "pedestrian": (0.6, 1.8), "cyclist": (3.0, 6.5)}
_SIZES = {"vehicle": (4.6, 2.0), "pedestrian": (0.6, 0.6), "cyclist": (1.8, 0.7)}
_CLASS_MIX = (0.7, 0.15, 0.15)
_SPEED_LIMITS = (8.33, 11.11, 13.89, 16.67)


def _lane_pose(start: Pose2, curvature: float, s: float) -> Pose2:
    """Pose at arclength s along a straight or circular lane."""
    if abs(curvature) < 1e-12:
        local = Pose2(s, 0.0, 0.0)
    else:
        phi = curvature * s
        local = Pose2(math.sin(phi) / curvature, (1.0 - math.cos(phi)) / curvature, phi)
    return start.compose(local)


def generate_synthetic_scene(cfg: GeneratorConfig, seed: int) -> Scene:
    """Lane arcs plus agents that follow them with mild, bounded noise."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    lanes = []
    nodes = []
    for _ in range(cfg.n_lanes):
        start = Pose2(
            rng.uniform(-cfg.center_spread, cfg.center_spread),
            rng.uniform(-cfg.center_spread, cfg.center_spread),
            rng.uniform(-math.pi, math.pi),
        )
        if rng.uniform() < cfg.straight_fraction:
            curvature = 0.0
        else:
            curvature = rng.uniform(-cfg.curvature_max, cfg.curvature_max)
        limit = float(rng.choice(_SPEED_LIMITS))
        left, right = rng.choice(BOUNDARY_TYPES), rng.choice(BOUNDARY_TYPES)
        lanes.append((start, curvature, limit))
        n_nodes = max(1, int(cfg.lane_length / cfg.seg_len))
        for k in range(n_nodes):
            s = (k + 0.5) * cfg.seg_len
            nodes.append(
                MapNode(
                    pose=_lane_pose(start, curvature, s),
                    length=cfg.seg_len,
                    width=3.5,
                    curvature=curvature,
                    speed_limit=limit,
                    boundary_left=str(left),
                    boundary_right=str(right),
                )
            )

    agents = []
    for agent_id in range(cfg.n_agents):
        start, curvature, limit = lanes[int(rng.integers(cfg.n_lanes))]
        agent_class = AGENT_CLASSES[int(rng.choice(len(AGENT_CLASSES), p=_CLASS_MIX))]
        lo, hi = _SPEED_RANGES[agent_class]
        target = rng.uniform(lo, min(hi, limit))
        length, width = _SIZES[agent_class]
        offset = rng.uniform(-cfg.lateral_spread, cfg.lateral_spread) if cfg.lateral_spread > 0 else 0.0
        s0 = rng.uniform(0.0, cfg.lane_length * 0.3)

        s_vals = [s0]
        v = target
        speeds = [v]
        for _ in range(cfg.horizon - 1):
            if cfg.speed_noise > 0:
                v = float(np.clip(v + rng.normal(0.0, cfg.speed_noise), 0.3, hi))
            s_vals.append(s_vals[-1] + v * cfg.dt)
            speeds.append(v)

        states = []
        prev_xy = None
        for t in range(cfg.horizon):
            center = _lane_pose(start, curvature, s_vals[t])
            jitter = rng.normal(0.0, cfg.heading_noise) if cfg.heading_noise > 0 else 0.0
            pose = center.compose(Pose2(0.0, offset, jitter))
            if prev_xy is None:
                speed = speeds[0]
            else:
                speed = math.hypot(pose.x - prev_xy[0], pose.y - prev_xy[1]) / cfg.dt
            prev_xy = (pose.x, pose.y)
            states.append(AgentState(t=t, pose=pose, speed=speed))
        agents.append(
            Agent(id=agent_id, agent_class=agent_class, length=length, width=width, states=tuple(states))
        )

    return Scene(
        agents=tuple(agents),
        map_nodes=tuple(nodes),
        ego_id=0,
        horizon=cfg.horizon,
        dt=cfg.dt,
    )


# ---------------------------------------------------------------------------
# serialization (strict JSON schema)
# ---------------------------------------------------------------------------

def _require(obj: dict, keys, path: str, optional=()):
    for key in keys:
        if key not in obj:
            raise SceneParseError(f"{path}: missing field '{key}'")
    for key in obj:
        if key not in keys and key not in optional:
            raise SceneParseError(f"{path}: unknown field '{key}'")


def scene_to_json(scene: Scene) -> str:
    doc = {
        "dt": scene.dt,
        "horizon": scene.horizon,
        "ego_id": scene.ego_id,
        "agents": [
            {
                "id": a.id,
                "class": a.agent_class,
                "length": a.length,
                "width": a.width,
                "states": [
                    {"t": s.t, "x": s.pose.x, "y": s.pose.y, "theta": s.pose.theta, "speed": s.speed}
                    for s in a.states
                ],
            }
            for a in scene.agents
        ],
        "map": [
            {
                "x": n.pose.x,
                "y": n.pose.y,
                "theta": n.pose.theta,
                "length": n.length,
                "width": n.width,
                "curvature": n.curvature,
                "speed_limit": n.speed_limit,
                "boundary_left": n.boundary_left,
                "boundary_right": n.boundary_right,
            }
            for n in scene.map_nodes
        ],
    }
    return json.dumps(doc, indent=1)


def scene_from_json(text) -> Scene:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"$: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SceneParseError("$: top level must be an object")
    _require(doc, ("dt", "horizon", "ego_id", "agents", "map"), "$", optional=("meta",))

    agents = []
    for i, a in enumerate(doc["agents"]):
        path = f"$.agents[{i}]"
        _require(a, ("id", "class", "length", "width", "states"), path)
        states = []
        for j, s in enumerate(a["states"]):
            _require(s, ("t", "x", "y", "theta", "speed"), f"{path}.states[{j}]")
            states.append(
                AgentState(t=int(s["t"]), pose=Pose2(s["x"], s["y"], s["theta"]), speed=float(s["speed"]))
            )
        try:
            agents.append(
                Agent(
                    id=int(a["id"]),
                    agent_class=a["class"],
                    length=float(a["length"]),
                    width=float(a["width"]),
                    states=tuple(states),
                )
            )
        except ValueError as exc:
            raise SceneParseError(f"{path}: {exc}") from exc

    nodes = []
    for i, n in enumerate(doc["map"]):
        path = f"$.map[{i}]"
        _require(
            n,
            ("x", "y", "theta", "length", "width", "curvature", "speed_limit",
             "boundary_left", "boundary_right"),
            path,
        )
        try:
            nodes.append(
                MapNode(
                    pose=Pose2(n["x"], n["y"], n["theta"]),
                    length=float(n["length"]),
                    width=float(n["width"]),
                    curvature=float(n["curvature"]),
                    speed_limit=float(n["speed_limit"]),
                    boundary_left=n["boundary_left"],
                    boundary_right=n["boundary_right"],
                )
            )
        except ValueError as exc:
            raise SceneParseError(f"{path}: {exc}") from exc

    try:
        return Scene(
            agents=tuple(agents),
            map_nodes=tuple(nodes),
            ego_id=int(doc["ego_id"]),
            horizon=int(doc["horizon"]),
            dt=float(doc["dt"]),
        )
    except ValueError as exc:
        raise SceneParseError(f"$: {exc}") from exc


def vocab_to_json(vocab: ActionVocab) -> str:
    doc = {
        "k_r": vocab.k_r,
        "w_theta": vocab.w_theta,
        "seed": vocab.seed,
        "classes": {
            cls: {
                "deltas": [list(map(float, row)) for row in vocab.deltas[cls]],
                "source_count": int(vocab.source_counts.get(cls, 0)),
            }
            for cls in vocab.deltas
        },
    }
    return json.dumps(doc, indent=1)


def vocab_from_json(text) -> ActionVocab:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"$: invalid JSON ({exc})") from exc
    _require(doc, ("k_r", "w_theta", "seed", "classes"), "$", optional=("meta",))
    deltas = {}
    counts = {}
    for cls, entry in doc["classes"].items():
        _require(entry, ("deltas", "source_count"), f"$.classes.{cls}")
        deltas[cls] = np.asarray(entry["deltas"], dtype=np.float64)
        counts[cls] = int(entry["source_count"])
    return ActionVocab(
        deltas=deltas, k_r=float(doc["k_r"]), w_theta=float(doc["w_theta"]),
        seed=int(doc["seed"]), source_counts=counts,
    )
