"""Closed-loop rollouts, equivariance audits, displacement metrics, scaling benchmarks."""

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as md
from .batch import sandwich_array
from .layers import (
    AttentionConfig,
    EqLinearParams,
    EqMlpBlockParams,
    MlpParams,
    eq_attention,
    eq_attention_logits,
    eq_layer_norm,
    eq_linear,
    eq_mlp_block,
    gated_relu,
    geometric_bilinear,
    invariant_adapter,
    noneq_linear,
)
from .pga import Motor, Pose2, motor_from_pose
from .scene import (
    ActionVocab,
    AgentState,
    Scene,
    detokenize,
    dynamics_step,
    transform_scene,
)

REFERENCE_TRANSFORM = Pose2(100.0, 0.0, math.pi / 2)  # rotate 90 deg, translate 100 m


@dataclass
class Rollout:
    """One closed-loop unroll: poses cover context + predicted steps."""

    agent_ids: tuple
    poses: np.ndarray       # [A, T_total, 3]
    speeds: np.ndarray      # [A, T_total]
    tokens: np.ndarray      # [A, horizon]
    context_steps: int
    mode: str
    seed: int | None = None

    @property
    def predicted_positions(self) -> np.ndarray:
        return self.poses[:, self.context_steps:, :2]


def truncate_scene(scene: Scene, steps: int) -> Scene:
    """Keep only states with t < steps."""
    agents = tuple(
        replace(a, states=tuple(s for s in a.states if s.t < steps)) for a in scene.agents
    )
    return replace(scene, agents=agents)


def rollout(params, cfg: md.ModelConfig, scene: Scene, vocab: ActionVocab, horizon: int,
            mode: str = "greedy", n_rollouts: int = 1, seed: int = 0,
            context: int | None = None, temperature: float = 1.0) -> list:
    """Unroll the scene: forward, sample one action per agent, advance dynamics.

    All agents step simultaneously from each forward pass.  `context` is the
    number of observed steps used as history (default: all available).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if mode == "sampled":
        mode = "categorical"
    if mode not in ("greedy", "categorical"):
        raise ValueError(f"unknown rollout mode '{mode}'")
    t0 = scene.horizon if context is None else context
    base = truncate_scene(scene, t0)
    for agent in base.agents:
        if not agent.states:
            raise ValueError(f"agent {agent.id} has no observed states before t={t0}")

    out = []
    for r in range(n_rollouts):
        rng = np.random.default_rng(seed + r) if mode != "greedy" else None
        work = base
        tokens = np.zeros((len(base.agents), horizon), dtype=np.int64)
        for step in range(horizon):
            t_now = t0 + step
            batch = md.build_token_batch(work, vocab, cfg, t_end=t_now, with_targets=False)
            logits = np.asarray(ad.data_of(md.forward(batch, params, cfg)))
            new_agents = []
            for ai, agent in enumerate(work.agents):
                token = md.sample_action(logits[ai, -1], mode, rng, temperature)
                tokens[ai, step] = token
                delta = detokenize(token, vocab, agent.agent_class)
                last = agent.states[-1]
                pose, speed = dynamics_step((last.pose, last.speed), delta, scene.dt)
                new_agents.append(
                    replace(agent, states=agent.states + (AgentState(t_now, pose, speed),))
                )
            work = replace(work, agents=tuple(new_agents))
        poses = np.array(
            [[[s.pose.x, s.pose.y, s.pose.theta] for s in a.states] for a in work.agents]
        )
        speeds = np.array([[s.speed for s in a.states] for a in work.agents])
        out.append(
            Rollout(
                agent_ids=tuple(a.id for a in work.agents),
                poses=poses,
                speeds=speeds,
                tokens=tokens,
                context_steps=t0,
                mode=mode,
                seed=None if mode == "greedy" else seed + r,
            )
        )
    return out


def rollout_to_scene(ro: Rollout, template: Scene) -> Scene:
    """Predicted states appended onto the template scene's agents."""
    agents = []
    for ai, agent in enumerate(template.agents):
        states = tuple(
            AgentState(t, Pose2(*ro.poses[ai, t]), float(ro.speeds[ai, t]))
            for t in range(ro.poses.shape[1])
        )
        agents.append(replace(agent, states=states))
    horizon = max(template.horizon, ro.poses.shape[1])
    return replace(template, agents=tuple(agents), horizon=horizon)


def constant_velocity_positions(scene: Scene, context: int, horizon: int) -> np.ndarray:
    """Straight-line baseline: hold the last observed speed and heading."""
    preds = np.zeros((len(scene.agents), horizon, 2))
    for ai, agent in enumerate(scene.agents):
        hist = [s for s in agent.states if s.t < context]
        if not hist:
            raise ValueError(f"agent {agent.id} has no state before t={context}")
        last = hist[-1]
        pose, speed = last.pose, last.speed
        step = (speed * scene.dt, 0.0, 0.0)
        for h in range(horizon):
            pose, speed = dynamics_step((pose, speed), step, scene.dt)
            preds[ai, h] = (pose.x, pose.y)
    return preds


def ground_truth_positions(scene: Scene, context: int, horizon: int) -> np.ndarray:
    gt = np.zeros((len(scene.agents), horizon, 2))
    for ai, agent in enumerate(scene.agents):
        lookup = {s.t: s for s in agent.states}
        for h in range(horizon):
            s = lookup.get(context + h)
            if s is None:
                raise ValueError(f"agent {agent.id} missing ground truth at t={context + h}")
            gt[ai, h] = (s.pose.x, s.pose.y)
    return gt


def min_ade(predictions, ground_truth: np.ndarray) -> float:
    """Mean over agents of the best (over rollouts) time-averaged displacement."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    if not preds:
        raise ValueError("min_ade needs at least one rollout")
    for p in preds:
        if p.shape != gt.shape:
            raise ValueError(f"prediction shape {p.shape} != ground truth {gt.shape}")
    per_rollout = np.stack(
        [np.linalg.norm(p - gt, axis=-1).mean(axis=-1) for p in preds]
    )  # [R, A]
    return float(per_rollout.min(axis=0).mean())


# ---------------------------------------------------------------------------
# equivariance audit
# ---------------------------------------------------------------------------

@dataclass
class AuditEntry:
    name: str
    max_deviation: float
    trials: int
    dtype: str
    tolerance: float
    passed: bool


@dataclass
class AuditReport:
    entries: list = field(default_factory=list)

    def add(self, name, deviation, trials, dtype, tolerance):
        self.entries.append(
            AuditEntry(name, float(deviation), int(trials), dtype, float(tolerance),
                       bool(deviation <= tolerance))
        )

    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_json(self) -> str:
        return json.dumps(
            {"passed": self.passed(), "entries": [e.__dict__ for e in self.entries]},
            indent=1,
        )

    def to_csv(self) -> str:
        lines = ["name,max_deviation,trials,dtype,tolerance,passed"]
        for e in self.entries:
            lines.append(
                f"{e.name},{e.max_deviation:.6e},{e.trials},{e.dtype},{e.tolerance:.1e},{int(e.passed)}"
            )
        return "\n".join(lines) + "\n"


def _rand_motor(rng) -> Motor:
    return motor_from_pose(
        Pose2(rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(-math.pi, math.pi))
    )


def _apply(motor: Motor, mv: np.ndarray) -> np.ndarray:
    return np.asarray(sandwich_array(motor.coeffs, mv))


def _dev(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def layer_audit(n_transforms: int = 200, seed: int = 0, tolerance: float = 1e-10) -> AuditReport:
    """Primitive-by-primitive equivariance audit with random weights and inputs.

    Includes a deliberately broken linear map as a negative control; the audit
    passes only if every real layer stays under tolerance and the control
    exceeds it by at least three orders of magnitude.
    """
    rng = np.random.default_rng(seed)
    report = AuditReport()
    c, cs = 3, 6

    x = rng.normal(size=(5, c, 8))
    s = rng.normal(size=(5, cs))
    weight = rng.normal(size=(c, c, 10))
    bias = rng.normal(size=c)
    mlp_block = EqMlpBlockParams(
        expand=EqLinearParams(rng.normal(0, 0.4, (4 * c, c, 10)), rng.normal(0, 0.4, 4 * c)),
        mid=EqLinearParams(rng.normal(0, 0.4, (2 * c, 2 * c, 10)), rng.normal(0, 0.4, 2 * c)),
        out=EqLinearParams(rng.normal(0, 0.4, (c, 2 * c, 10)), rng.normal(0, 0.4, c)),
        scalar=MlpParams(rng.normal(0, 0.4, (cs, 2 * cs)), rng.normal(0, 0.4, 2 * cs),
                         rng.normal(0, 0.4, (2 * cs, cs)), rng.normal(0, 0.4, cs)),
    )
    attn_cfg = AttentionConfig(heads=1, mv_per_head=c, scalar_per_head=cs)
    poses = [Pose2(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-math.pi, math.pi))
             for _ in range(5)]
    frames = np.stack([motor_from_pose(p).inverse().coeffs for p in poses])
    adapter_mlp = MlpParams(rng.normal(0, 0.3, (8 * c, 8)), rng.normal(0, 0.3, 8),
                            rng.normal(0, 0.3, (8, cs)), rng.normal(0, 0.3, cs))
    noneq_weight = np.concatenate([weight, rng.normal(size=(c, c, 1))], axis=-1)

    devs = {key: 0.0 for key in (
        "eq_linear", "geometric_bilinear", "gated_relu", "eq_layer_norm",
        "eq_attention_logits", "eq_attention_values", "eq_mlp_block",
        "invariant_adapter", "negative_control",
    )}
    base_linear = np.asarray(eq_linear(x, weight, bias))
    base_bilinear = np.asarray(geometric_bilinear(x, x, x, x))
    base_gate = np.asarray(gated_relu(x))
    base_norm = np.asarray(eq_layer_norm(x))
    base_logits = np.asarray(eq_attention_logits(x, x, s, s, attn_cfg))
    base_attn = eq_attention(x, x, x, s, s, s, attn_cfg)
    base_attn = (np.asarray(base_attn[0]), np.asarray(base_attn[1]))
    base_block = eq_mlp_block(x, s, mlp_block)
    base_block = (np.asarray(base_block[0]), np.asarray(base_block[1]))
    base_adapter = np.asarray(invariant_adapter(x, s, frames, adapter_mlp))
    base_noneq = np.asarray(noneq_linear(x, noneq_weight))

    for _ in range(n_transforms):
        u = _rand_motor(rng)
        xt = _apply(u, x)
        g_pose = u.pose()
        frames_t = np.stack(
            [motor_from_pose(g_pose.compose(p)).inverse().coeffs for p in poses]
        )
        devs["eq_linear"] = max(devs["eq_linear"],
                                _dev(eq_linear(xt, weight, bias), _apply(u, base_linear)))
        devs["geometric_bilinear"] = max(
            devs["geometric_bilinear"],
            _dev(geometric_bilinear(xt, xt, xt, xt), _apply(u, base_bilinear)),
        )
        devs["gated_relu"] = max(devs["gated_relu"], _dev(gated_relu(xt), _apply(u, base_gate)))
        devs["eq_layer_norm"] = max(devs["eq_layer_norm"],
                                    _dev(eq_layer_norm(xt), _apply(u, base_norm)))
        devs["eq_attention_logits"] = max(
            devs["eq_attention_logits"],
            _dev(eq_attention_logits(xt, xt, s, s, attn_cfg), base_logits),
        )
        mv_o, s_o = eq_attention(xt, xt, xt, s, s, s, attn_cfg)
        devs["eq_attention_values"] = max(
            devs["eq_attention_values"],
            max(_dev(mv_o, _apply(u, base_attn[0])), _dev(s_o, base_attn[1])),
        )
        mv_b, s_b = eq_mlp_block(xt, s, mlp_block)
        devs["eq_mlp_block"] = max(
            devs["eq_mlp_block"],
            max(_dev(mv_b, _apply(u, base_block[0])), _dev(s_b, base_block[1])),
        )
        devs["invariant_adapter"] = max(
            devs["invariant_adapter"],
            _dev(invariant_adapter(xt, s, frames_t, adapter_mlp), base_adapter),
        )
        devs["negative_control"] = max(
            devs["negative_control"],
            _dev(noneq_linear(xt, noneq_weight), _apply(u, base_noneq)),
        )

    for name, dev in devs.items():
        if name == "negative_control":
            # must FAIL equivariance by a wide margin
            report.add(name, dev, n_transforms, "f64", tolerance)
            report.entries[-1].passed = dev >= tolerance * 1e3
        else:
            report.add(name, dev, n_transforms, "f64", tolerance)
    return report


def equivariance_audit(params, cfg: md.ModelConfig, vocab: ActionVocab, scenes,
                       n_transforms: int = 20, seed: int = 0, tolerance: float = 1e-8,
                       rollout_horizon: int = 0, include_layers: bool = True,
                       negative_control: bool = False) -> AuditReport:
    """End-to-end logit deviation under random motors plus the reference
    90-degree/100 m transform; optionally greedy-rollout token agreement and
    the per-layer audit.

    With `negative_control` the audited forward is the scalar baseline with
    raw global poses in its inputs, which must fail.
    """
    rng = np.random.default_rng(seed)
    report = AuditReport()
    if include_layers and not negative_control:
        layer_tol = 1e-10 if cfg.dtype == "f64" else 1e-4
        for entry in layer_audit(n_transforms=max(n_transforms, 200), seed=seed,
                                 tolerance=layer_tol).entries:
            report.entries.append(entry)

    def forward_fn(batch):
        if negative_control:
            return np.asarray(ad.data_of(md.baseline_forward(batch, params, cfg, "vanilla")))
        return np.asarray(ad.data_of(md.forward(batch, params, cfg)))

    transforms = [REFERENCE_TRANSFORM] + [
        Pose2(rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(-math.pi, math.pi))
        for _ in range(n_transforms)
    ]
    worst = 0.0
    for scene in scenes:
        batch = md.build_token_batch(scene, vocab, cfg)
        base = forward_fn(batch)
        for g in transforms:
            moved = md.build_token_batch(transform_scene(scene, g), vocab, cfg)
            worst = max(worst, float(np.max(np.abs(forward_fn(moved) - base))))
    name = "end_to_end_logits" + ("_negative_control" if negative_control else "")
    report.add(name, worst, len(transforms) * len(scenes), cfg.dtype, tolerance)

    if rollout_horizon > 0 and not negative_control:
        agree, pose_dev, total = 0, 0.0, 0
        for scene in scenes:
            base_ro = rollout(params, cfg, scene, vocab, rollout_horizon, mode="greedy")[0]
            g = transforms[1 % len(transforms)]
            moved_ro = rollout(params, cfg, transform_scene(scene, g), vocab,
                               rollout_horizon, mode="greedy")[0]
            total += 1
            if np.array_equal(base_ro.tokens, moved_ro.tokens):
                agree += 1
                back = transform_scene(
                    rollout_to_scene(moved_ro, truncate_scene(scene, base_ro.context_steps)),
                    g.inverse(),
                )
                for ai, agent in enumerate(back.agents):
                    for t in range(base_ro.context_steps, base_ro.poses.shape[1]):
                        s = agent.state_at(t)
                        pose_dev = max(
                            pose_dev,
                            math.hypot(
                                s.pose.x - base_ro.poses[ai, t, 0],
                                s.pose.y - base_ro.poses[ai, t, 1],
                            ),
                        )
        report.add("greedy_rollout_agreement", 1.0 - agree / max(total, 1), total,
                   cfg.dtype, 0.01)
        report.add("greedy_rollout_pose_dev_m", pose_dev, total, cfg.dtype, 1e-6)
    return report


# ---------------------------------------------------------------------------
# scaling benchmark
# ---------------------------------------------------------------------------

def _bench_batch(agents: int, map_tokens: int, steps: int, cfg: md.ModelConfig,
                 seed: int = 0) -> md.TokenBatch:
    """Random but valid token batch of the requested size (no scene needed)."""
    rng = np.random.default_rng(seed)
    poses = np.column_stack(
        [rng.uniform(-50, 50, agents * steps), rng.uniform(-50, 50, agents * steps),
         rng.uniform(-math.pi, math.pi, agents * steps)]
    ).reshape(agents, steps, 3)
    frames = np.zeros((agents, steps, 4))
    for a in range(agents):
        for t in range(steps):
            frames[a, t] = motor_from_pose(Pose2(*poses[a, t])).inverse().coeffs
    map_poses = np.column_stack(
        [rng.uniform(-50, 50, map_tokens), rng.uniform(-50, 50, map_tokens),
         rng.uniform(-math.pi, math.pi, map_tokens)]
    )
    vmax = cfg.max_vocab
    class_idx = rng.integers(0, len(md.AGENT_CLASSES), size=agents)
    prev = np.array(
        [[md.flat_token_index(int(class_idx[a]), int(rng.integers(0, vmax)), vmax)
          for _ in range(steps)] for a in range(agents)]
    )
    from .scene import AGENT_FEATURE_WIDTH, MAP_FEATURE_WIDTH
    from .scene import encode_pose_array

    return md.TokenBatch(
        mv=encode_pose_array(poses)[:, :, None, :],
        scalars_raw=rng.uniform(0, 1, (agents, steps, AGENT_FEATURE_WIDTH)),
        raw_poses=poses,
        prev_flat=prev,
        class_idx=class_idx,
        map_mv=encode_pose_array(map_poses)[:, None, :],
        map_scalars_raw=rng.uniform(0, 1, (map_tokens, MAP_FEATURE_WIDTH)),
        map_poses=map_poses,
        frames=frames,
        valid=np.ones((agents, steps), dtype=bool),
        targets=np.full((agents, steps), -1, dtype=np.int64),
        target_valid=np.zeros((agents, steps), dtype=bool),
    )


def bench_scaling(cfg: md.ModelConfig, agent_counts, map_tokens: int = 32, steps: int = 10,
                  seed: int = 0, time_forward: bool = True) -> list:
    """FLOP counts and (optionally) timed forward passes per variant and agent count."""
    rows = []
    param_sets = {}
    for count in agent_counts:
        if count <= 0:
            raise ValueError("agent counts must be positive")
        batch = _bench_batch(count, map_tokens, steps, cfg, seed=seed)
        for variant in md.VARIANTS:
            flops = md.flop_count(cfg, count, map_tokens, steps, variant)
            wall = float("nan")
            if time_forward:
                if variant not in param_sets:
                    param_sets[variant] = (
                        md.init_params(cfg) if variant == "geometric"
                        else md.init_baseline_params(cfg, variant)
                    )
                params = param_sets[variant]
                start = time.perf_counter()
                if variant == "geometric":
                    md.forward(batch, params, cfg)
                else:
                    md.baseline_forward(batch, params, cfg, variant)
                wall = time.perf_counter() - start
            rows.append(
                {
                    "agents": count,
                    "map_tokens": map_tokens,
                    "steps": steps,
                    "variant": variant,
                    "flops_total": flops["total"],
                    "flops_positional": flops["positional"],
                    "wall_time_s": wall,
                }
            )
    return rows


def bench_rows_to_csv(rows) -> str:
    header = "agents,map_tokens,steps,variant,flops_total,flops_positional,wall_time_s"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['agents']},{r['map_tokens']},{r['steps']},{r['variant']},"
            f"{r['flops_total']:.6e},{r['flops_positional']:.6e},{r['wall_time_s']:.6f}"
        )
    return "\n".join(lines) + "\n"
