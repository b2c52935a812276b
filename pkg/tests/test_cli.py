"""CLI pipeline: gen -> vocab -> train -> check -> rollout -> bench, exit codes, reruns."""

import json
from pathlib import Path

import numpy as np
import pytest

from eqtraffic import cli, scene as sc
from eqtraffic.model import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared pipeline run: scenes, vocab, and a short training run."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_file = root / "run.json"
    cfg_file.write_text(json.dumps({
        "generator": {"n_agents": 3, "horizon": 10, "n_lanes": 2},
        "model": {"mv_channels": 2, "scalar_channels": 8, "heads": 1, "blocks": 1,
                  "input_hidden": 8, "adapter_hidden": 8, "decoder_hidden": 16},
    }))
    scenes = root / "scenes"
    assert cli.main(["gen", "--count", "6", "--seed", "3", "--out", str(scenes),
                     "--config", str(cfg_file)]) == 0
    vocab = root / "vocab.json"
    assert cli.main(["vocab", "--scenes", str(scenes), "--k-r", "0.02", "--cap", "16",
                     "--seed", "0", "--out", str(vocab)]) == 0
    run = root / "run"
    assert cli.main(["train", "--scenes", str(scenes), "--vocab", str(vocab),
                     "--steps", "30", "--seed", "1", "--out", str(run),
                     "--config", str(cfg_file), "--dtype", "f32"]) == 0
    return {"root": root, "scenes": scenes, "vocab": vocab, "run": run, "cfg": cfg_file}


def test_gen_outputs_and_determinism(workspace, tmp_path):
    scenes = workspace["scenes"]
    files = sorted(p.name for p in scenes.glob("scene_*.json"))
    assert len(files) == 6
    manifest = json.loads((scenes / "manifest.json").read_text())
    assert manifest["count"] == 6
    assert manifest["meta"]["tool"].startswith("eqtraffic")
    assert [e["seed"] for e in manifest["scenes"]] == [3, 4, 5, 6, 7, 8]
    # scene files parse under the strict schema (meta key allowed)
    parsed = sc.scene_from_json((scenes / files[0]).read_text())
    assert len(parsed.agents) == 3

    rerun = tmp_path / "again"
    assert cli.main(["gen", "--count", "6", "--seed", "3", "--out", str(rerun),
                     "--config", str(workspace["cfg"])]) == 0
    for name in files:
        assert (rerun / name).read_bytes() == (scenes / name).read_bytes()


def test_gen_count_zero_writes_manifest_only(tmp_path):
    out = tmp_path / "empty"
    assert cli.main(["gen", "--count", "0", "--seed", "0", "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    assert list(out.glob("scene_*.json")) == []


def test_vocab_file_properties(workspace):
    vocab = sc.vocab_from_json(Path(workspace["vocab"]).read_text())
    for cls in sc.AGENT_CLASSES:
        assert 1 <= vocab.size(cls) <= 16
    doc = json.loads(Path(workspace["vocab"]).read_text())
    assert doc["meta"]["seed"] == 0 and "config_hash" in doc["meta"]


def test_train_outputs(workspace):
    run = workspace["run"]
    ckpt, cfg, manifest = load_checkpoint(run / "checkpoint.ckpt")
    assert manifest["meta"]["seed"] == 1
    assert manifest["meta"]["tool"].startswith("eqtraffic")
    lines = (run / "loss.csv").read_text().strip().splitlines()
    assert lines[0].startswith("# eqtraffic")
    assert lines[1] == "step,lr,loss"
    assert len(lines) == 2 + 30
    losses = [float(l.split(",")[2]) for l in lines[2:]]
    assert all(np.isfinite(losses))


def test_check_random_params_passes(workspace, tmp_path):
    out = tmp_path / "audit"
    code = cli.main(["check", "--random-params", "--scenes", str(workspace["scenes"]),
                     "--vocab", str(workspace["vocab"]), "--trials", "3",
                     "--out", str(out), "--config", str(workspace["cfg"]),
                     "--dtype", "f64", "--seed", "0"])
    assert code == 0
    doc = json.loads((out / "audit.json").read_text())
    assert doc["passed"] is True
    names = {e["name"] for e in doc["entries"]}
    assert "end_to_end_logits" in names and "eq_linear" in names
    assert (out / "audit.csv").read_text().startswith("# eqtraffic")


def test_check_negative_control_exits_nonzero(workspace, tmp_path):
    out = tmp_path / "audit_neg"
    code = cli.main(["check", "--negative-control", "--scenes", str(workspace["scenes"]),
                     "--vocab", str(workspace["vocab"]), "--trials", "3",
                     "--out", str(out), "--config", str(workspace["cfg"]),
                     "--dtype", "f64", "--seed", "0"])
    assert code == cli.EXIT_VALIDATION
    doc = json.loads((out / "audit.json").read_text())
    assert doc["passed"] is False


def test_check_trained_checkpoint(workspace, tmp_path):
    out = tmp_path / "audit_ckpt"
    code = cli.main(["check", "--checkpoint", str(workspace["run"] / "checkpoint.ckpt"),
                     "--vocab", str(workspace["vocab"]),
                     "--scenes", str(workspace["scenes"]), "--trials", "2",
                     "--out", str(out), "--dtype", "f64"])
    assert code == 0


def test_rollout_outputs_and_determinism(workspace, tmp_path):
    scene_file = sorted(workspace["scenes"].glob("scene_*.json"))[0]
    out1, out2 = tmp_path / "ro1", tmp_path / "ro2"
    argv = ["rollout", "--checkpoint", str(workspace["run"] / "checkpoint.ckpt"),
            "--scene", str(scene_file), "--vocab", str(workspace["vocab"]),
            "--horizon", "4", "--mode", "greedy", "--n", "2", "--context", "5",
            "--seed", "0"]
    assert cli.main(argv + ["--out", str(out1)]) == 0
    assert cli.main(argv + ["--out", str(out2)]) == 0
    assert (out1 / "rollout_000.json").read_bytes() == (out2 / "rollout_000.json").read_bytes()
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    merged = sc.scene_from_json((out1 / "rollout_000.json").read_text())
    assert merged.agents[0].state_at(8) is not None  # context 5 + horizon 4 - 1
    csv_lines = (out1 / "minade.csv").read_text().strip().splitlines()
    assert csv_lines[1] == "metric,value"
    assert any(l.startswith("min_ade,") for l in csv_lines)
    assert any(l.startswith("constant_velocity_ade,") for l in csv_lines)


def test_bench_csv(workspace, tmp_path):
    out = tmp_path / "bench"
    code = cli.main(["bench", "--agents", "2,4", "--map-tokens", "6", "--steps", "4",
                     "--out", str(out), "--config", str(workspace["cfg"]), "--seed", "0"])
    assert code == 0
    lines = (out / "bench.csv").read_text().strip().splitlines()
    assert lines[0].startswith("# eqtraffic")
    assert lines[1].startswith("agents,")
    assert len(lines) == 2 + 2 * 3  # two agent counts x three variants


def test_usage_errors_exit_1():
    assert cli.main(["vocab"]) == cli.EXIT_USAGE           # missing --scenes
    assert cli.main(["train"]) == cli.EXIT_USAGE           # missing inputs
    assert cli.main(["check", "--scenes", "x"]) == cli.EXIT_USAGE  # no checkpoint/random


def test_validation_errors_exit_2(tmp_path):
    bad_dir = tmp_path / "bad_scenes"
    bad_dir.mkdir()
    (bad_dir / "scene_00000.json").write_text("{\"not\": \"a scene\"}")
    code = cli.main(["vocab", "--scenes", str(bad_dir), "--out", str(tmp_path / "v.json")])
    assert code == cli.EXIT_VALIDATION


def test_io_errors_exit_3(tmp_path):
    code = cli.main(["rollout", "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--scene", "nope.json", "--vocab", "nope.json"])
    assert code == cli.EXIT_IO


def test_gen_threaded_matches_sequential(tmp_path):
    seq, par = tmp_path / "seq", tmp_path / "par"
    base = ["gen", "--count", "5", "--seed", "11"]
    assert cli.main(base + ["--threads", "1", "--out", str(seq)]) == 0
    assert cli.main(base + ["--threads", "4", "--out", str(par)]) == 0
    for p in sorted(seq.glob("scene_*.json")):
        assert (par / p.name).read_bytes() == p.read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"count": 2, "seed": 9,
                                    "generator": {"n_agents": 2, "horizon": 6}}))
    out = tmp_path / "s"
    assert cli.main(["gen", "--config", str(cfg_file), "--count", "1", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["count"] == 1            # flag wins
    assert manifest["scenes"][0]["seed"] == 9  # config-file seed used
