"""Command-line entry point: scene generation, vocab building, training, audits,
rollouts, and scaling benchmarks as reproducible runs.

Exit codes: 0 success, 1 usage, 2 validation or audit failure, 3 IO error.
Every output embeds the tool version, a config hash, and the seed; outputs are
written atomically (temp file + rename).
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from . import harness as hn
from . import model as md
from . import scene as sc

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3

TOOL = f"eqtraffic {__version__}"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _meta(seed, config_obj) -> dict:
    # the hash covers content-determining config only, never output paths
    hashed = {k: v for k, v in config_obj.items() if k != "out"}
    return {"tool": TOOL, "config_hash": _config_hash(hashed), "seed": seed}


def _atomic_write(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_run_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _resolved(args, run_cfg: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    return run_cfg.get(key, default)


def _model_config(run_cfg: dict, vocab: sc.ActionVocab | None, dtype: str, seed: int) -> md.ModelConfig:
    fields = dict(run_cfg.get("model", {}))
    if vocab is not None and "vocab_sizes" not in fields:
        fields["vocab_sizes"] = {c: vocab.size(c) for c in vocab.deltas}
    fields.setdefault("dtype", dtype)
    fields.setdefault("seed", seed)
    return md.ModelConfig(**fields)


def _generator_config(run_cfg: dict) -> sc.GeneratorConfig:
    return sc.GeneratorConfig(**run_cfg.get("generator", {}))


def _load_scenes(scenes_dir) -> list:
    paths = sorted(Path(scenes_dir).glob("scene_*.json"))
    if not paths:
        raise ValueError(f"no scene_*.json files under {scenes_dir}")
    return [sc.scene_from_json(p.read_text()) for p in paths]


def _with_meta(json_text: str, meta: dict) -> str:
    doc = json.loads(json_text)
    doc["meta"] = meta
    return json.dumps(doc, indent=1)


def _print_resolved(name: str, resolved: dict) -> None:
    print(f"[{TOOL}] {name}: " + json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, run_cfg) -> int:
    out = Path(_resolved(args, run_cfg, "out", "scenes"))
    count = int(_resolved(args, run_cfg, "count", 16))
    seed = int(_resolved(args, run_cfg, "seed", 0))
    threads = int(_resolved(args, run_cfg, "threads", os.cpu_count() or 1))
    gen_cfg = _generator_config(run_cfg)
    resolved = {"count": count, "seed": seed, "out": str(out),
                "generator": dataclasses.asdict(gen_cfg)}
    _print_resolved("gen", resolved)
    meta = _meta(seed, resolved)

    def build(i):
        return sc.scene_to_json(sc.generate_synthetic_scene(gen_cfg, seed + i))

    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            texts = list(pool.map(build, range(count)))
    else:
        texts = [build(i) for i in range(count)]

    entries = []
    for i, text in enumerate(texts):
        name = f"scene_{i:05d}.json"
        _atomic_write(out / name, _with_meta(text, {**meta, "seed": seed + i}))
        entries.append({"file": name, "seed": seed + i})
    manifest = {"meta": meta, "count": count, "scenes": entries}
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1))
    print(f"wrote {count} scenes + manifest to {out}")
    return EXIT_OK


def cmd_vocab(args, run_cfg) -> int:
    scenes_dir = _resolved(args, run_cfg, "scenes")
    if scenes_dir is None:
        raise _UsageError("vocab requires --scenes")
    out = Path(_resolved(args, run_cfg, "out", "vocab.json"))
    k_r = float(_resolved(args, run_cfg, "k-r", 0.05))
    cap = _resolved(args, run_cfg, "cap", 64)
    cap = None if cap in (None, "none", 0) else int(cap)
    seed = int(_resolved(args, run_cfg, "seed", 0))
    w_theta = float(_resolved(args, run_cfg, "w-theta", 1.0))
    resolved = {"scenes": str(scenes_dir), "k_r": k_r, "cap": cap, "seed": seed,
                "w_theta": w_theta, "out": str(out)}
    _print_resolved("vocab", resolved)

    scenes = _load_scenes(scenes_dir)
    transitions = sc.collect_transitions(scenes)
    vocab = sc.build_kdisk_vocab(transitions, k_r=k_r, seed=seed, cap=cap, w_theta=w_theta)
    _atomic_write(out, _with_meta(sc.vocab_to_json(vocab), _meta(seed, resolved)))
    sizes = {c: vocab.size(c) for c in vocab.deltas}
    print(f"wrote vocab {sizes} to {out}")
    return EXIT_OK


def cmd_train(args, run_cfg) -> int:
    scenes_dir = _resolved(args, run_cfg, "scenes")
    vocab_path = _resolved(args, run_cfg, "vocab")
    if scenes_dir is None or vocab_path is None:
        raise _UsageError("train requires --scenes and --vocab")
    out = Path(_resolved(args, run_cfg, "out", "run"))
    steps = int(_resolved(args, run_cfg, "steps", 2000))
    lr = float(_resolved(args, run_cfg, "lr", 1e-3))
    seed = int(_resolved(args, run_cfg, "seed", 0))
    dtype = _resolved(args, run_cfg, "dtype", "f32")

    vocab = sc.vocab_from_json(Path(vocab_path).read_text())
    cfg = _model_config(run_cfg, vocab, dtype, seed)
    resolved = {"scenes": str(scenes_dir), "vocab": str(vocab_path), "steps": steps,
                "lr": lr, "seed": seed, "model": cfg.to_dict(), "out": str(out)}
    _print_resolved("train", resolved)
    meta = _meta(seed, resolved)

    scenes = _load_scenes(scenes_dir)
    params, curve = md.train(scenes, vocab, cfg, steps=steps, lr=lr, seed=seed)

    lines = [f"# {TOOL} config_hash={meta['config_hash']} seed={seed}", "step,lr,loss"]
    lines += [f"{s},{l:.8e},{v:.8e}" for s, l, v in curve]
    _atomic_write(out / "loss.csv", "\n".join(lines) + "\n")

    ckpt = out / "checkpoint.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=ckpt.parent, prefix=ckpt.name + ".tmp")
    os.close(fd)
    try:
        md.save_checkpoint(tmp, params, cfg, vocab, meta=meta)
        os.replace(tmp, ckpt)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    print(f"final loss {curve[-1][2]:.4f} after {steps} steps; wrote {ckpt}")
    return EXIT_OK


def cmd_check(args, run_cfg) -> int:
    scenes_dir = _resolved(args, run_cfg, "scenes")
    if scenes_dir is None:
        raise _UsageError("check requires --scenes")
    out = Path(_resolved(args, run_cfg, "out", "audit"))
    trials = int(_resolved(args, run_cfg, "trials", 20))
    seed = int(_resolved(args, run_cfg, "seed", 0))
    dtype = _resolved(args, run_cfg, "dtype", "f64")
    negative = bool(getattr(args, "negative_control", False))
    random_params = bool(getattr(args, "random_params", False))
    horizon = int(_resolved(args, run_cfg, "rollout-horizon", 0))
    ckpt_path = _resolved(args, run_cfg, "checkpoint")
    vocab_path = _resolved(args, run_cfg, "vocab")
    if ckpt_path is None and not (random_params or negative):
        raise _UsageError("check requires --checkpoint or --random-params")

    if ckpt_path is not None:
        params, cfg, manifest = md.load_checkpoint(ckpt_path)
        if dtype != cfg.dtype:
            cfg = dataclasses.replace(cfg, dtype=dtype)
            params = params.astype(cfg.np_dtype)
        if vocab_path is None:
            raise _UsageError("check with --checkpoint also requires --vocab")
        vocab = sc.vocab_from_json(Path(vocab_path).read_text())
        if md.vocab_hash(vocab) != manifest["vocab_hash"]:
            raise ValueError("vocab file does not match the checkpoint's vocab hash")
    else:
        if vocab_path is None:
            raise _UsageError("check requires --vocab (with --checkpoint or --random-params)")
        vocab = sc.vocab_from_json(Path(vocab_path).read_text())
        cfg = _model_config(run_cfg, vocab, dtype, seed)
        params = (md.init_baseline_params(cfg, "vanilla") if negative
                  else md.init_params(cfg))

    tolerance = 1e-8 if cfg.dtype == "f64" else 1e-3
    resolved = {"scenes": str(scenes_dir), "trials": trials, "seed": seed,
                "dtype": cfg.dtype, "negative_control": negative,
                "tolerance": tolerance, "model": cfg.to_dict()}
    _print_resolved("check", resolved)
    meta = _meta(seed, resolved)

    scenes = _load_scenes(scenes_dir)
    report = hn.equivariance_audit(
        params, cfg, vocab, scenes, n_transforms=trials, seed=seed,
        tolerance=tolerance, rollout_horizon=horizon,
        include_layers=not negative, negative_control=negative,
    )
    doc = json.loads(report.to_json())
    doc["meta"] = meta
    _atomic_write(out / "audit.json", json.dumps(doc, indent=1))
    header = f"# {TOOL} config_hash={meta['config_hash']} seed={seed}\n"
    _atomic_write(out / "audit.csv", header + report.to_csv())
    for entry in report.entries:
        state = "PASS" if entry.passed else "FAIL"
        print(f"  {state}  {entry.name}: max deviation {entry.max_deviation:.3e} "
              f"(tol {entry.tolerance:.1e}, {entry.trials} trials)")
    if not report.passed():
        print("audit FAILED", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"audit passed; wrote {out}/audit.json")
    return EXIT_OK


def cmd_rollout(args, run_cfg) -> int:
    ckpt_path = _resolved(args, run_cfg, "checkpoint")
    scene_path = _resolved(args, run_cfg, "scene")
    vocab_path = _resolved(args, run_cfg, "vocab")
    if ckpt_path is None or scene_path is None or vocab_path is None:
        raise _UsageError("rollout requires --checkpoint, --scene, and --vocab")
    out = Path(_resolved(args, run_cfg, "out", "rollouts"))
    horizon = int(_resolved(args, run_cfg, "horizon", 20))
    mode = _resolved(args, run_cfg, "mode", "greedy")
    count = int(_resolved(args, run_cfg, "n", 1))
    seed = int(_resolved(args, run_cfg, "seed", 0))
    context = _resolved(args, run_cfg, "context")
    context = None if context is None else int(context)
    temperature = float(_resolved(args, run_cfg, "temperature", 1.0))

    params, cfg, _manifest = md.load_checkpoint(ckpt_path)
    vocab = sc.vocab_from_json(Path(vocab_path).read_text())
    scene = sc.scene_from_json(Path(scene_path).read_text())
    resolved = {"checkpoint": str(ckpt_path), "scene": str(scene_path), "horizon": horizon,
                "mode": mode, "n": count, "seed": seed, "context": context,
                "temperature": temperature}
    _print_resolved("rollout", resolved)
    meta = _meta(seed, resolved)

    rollouts = hn.rollout(params, cfg, scene, vocab, horizon, mode=mode,
                          n_rollouts=count, seed=seed, context=context,
                          temperature=temperature)
    t0 = rollouts[0].context_steps
    template = hn.truncate_scene(scene, t0)
    for i, ro in enumerate(rollouts):
        merged = hn.rollout_to_scene(ro, template)
        _atomic_write(out / f"rollout_{i:03d}.json",
                      _with_meta(sc.scene_to_json(merged), {**meta, "rollout": i}))

    summary = {
        "meta": meta,
        "tokens": [ro.tokens.tolist() for ro in rollouts],
        "context_steps": t0,
        "mode": mode,
    }

    lines = [f"# {TOOL} config_hash={meta['config_hash']} seed={seed}",
             "metric,value"]
    if scene.horizon >= t0 + horizon:
        gt = hn.ground_truth_positions(scene, t0, horizon)
        preds = [ro.predicted_positions for ro in rollouts]
        model_ade = hn.min_ade(preds, gt)
        cv_ade = hn.min_ade([hn.constant_velocity_positions(scene, t0, horizon)], gt)
        summary["min_ade"] = model_ade
        summary["constant_velocity_ade"] = cv_ade
        lines.append(f"min_ade,{model_ade:.6f}")
        lines.append(f"constant_velocity_ade,{cv_ade:.6f}")
        print(f"minADE {model_ade:.3f} m vs constant-velocity {cv_ade:.3f} m")
    else:
        print("scene has no ground truth beyond the context; skipping minADE")
    _atomic_write(out / "minade.csv", "\n".join(lines) + "\n")
    _atomic_write(out / "summary.json", json.dumps(summary, indent=1))
    print(f"wrote {count} rollouts to {out}")
    return EXIT_OK


def cmd_bench(args, run_cfg) -> int:
    out = Path(_resolved(args, run_cfg, "out", "bench"))
    agents_arg = _resolved(args, run_cfg, "agents", "8,16,32,64")
    counts = [int(x) for x in str(agents_arg).split(",") if x]
    map_tokens = int(_resolved(args, run_cfg, "map-tokens", 32))
    steps = int(_resolved(args, run_cfg, "steps", 10))
    seed = int(_resolved(args, run_cfg, "seed", 0))
    dtype = _resolved(args, run_cfg, "dtype", "f32")
    cfg = _model_config(run_cfg, None, dtype, seed)
    resolved = {"agents": counts, "map_tokens": map_tokens, "steps": steps,
                "seed": seed, "model": cfg.to_dict()}
    _print_resolved("bench", resolved)
    meta = _meta(seed, resolved)

    rows = hn.bench_scaling(cfg, counts, map_tokens=map_tokens, steps=steps, seed=seed)
    header = f"# {TOOL} config_hash={meta['config_hash']} seed={seed}\n"
    _atomic_write(out / "bench.csv", header + hn.bench_rows_to_csv(rows))
    _atomic_write(out / "bench.json", json.dumps({"meta": meta, "rows": rows}, indent=1))
    by = {(r["agents"], r["variant"]): r for r in rows}
    for a in counts:
        ratio = by[(a, "rpe")]["flops_total"] / by[(a, "vanilla")]["flops_total"]
        print(f"  A={a}: rpe/vanilla FLOP ratio {ratio:.3f}")
    print(f"wrote {out}/bench.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="eqtraffic", description=__doc__)
    parser.add_argument("--version", action="version", version=TOOL)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--dtype", choices=("f32", "f64"))
        p.add_argument("--config", help="JSON run-config file; flags override its values")
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--threads", type=int, help="parallel workers (training stays single-threaded)")

    p = sub.add_parser("gen", help="generate synthetic scenes")
    common(p)
    p.add_argument("--count", type=int)

    p = sub.add_parser("vocab", help="build the action vocabulary from scenes")
    common(p)
    p.add_argument("--scenes")
    p.add_argument("--k-r", type=float, dest="k_r")
    p.add_argument("--cap", type=int, help="max vocab entries per class; 0 disables the cap")
    p.add_argument("--w-theta", type=float, dest="w_theta")

    p = sub.add_parser("train", help="train the model")
    common(p)
    p.add_argument("--scenes")
    p.add_argument("--vocab")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("check", help="equivariance audit")
    common(p)
    p.add_argument("--scenes")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--random-params", action="store_true", dest="random_params")
    p.add_argument("--negative-control", action="store_true", dest="negative_control")
    p.add_argument("--trials", type=int)
    p.add_argument("--rollout-horizon", type=int, dest="rollout_horizon")

    p = sub.add_parser("rollout", help="closed-loop rollouts from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scene")
    p.add_argument("--vocab")
    p.add_argument("--horizon", type=int)
    p.add_argument("--mode", choices=("greedy", "sampled", "categorical"))
    p.add_argument("--n", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--temperature", type=float)

    p = sub.add_parser("bench", help="FLOP and wall-time scaling across agent counts")
    common(p)
    p.add_argument("--agents", help="comma-separated agent counts")
    p.add_argument("--map-tokens", type=int, dest="map_tokens")
    p.add_argument("--steps", type=int, help="temporal length of the benchmark batch")

    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "vocab": cmd_vocab,
    "train": cmd_train,
    "check": cmd_check,
    "rollout": cmd_rollout,
    "bench": cmd_bench,
}

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    try:
        run_cfg = _load_run_config(args.config)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return _COMMANDS[args.command](args, run_cfg)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (sc.SceneParseError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
