import hashlib
import json
import os

import pytest

from codecrl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

FAST = {
    "world": {"pretrain_per_language": 20, "train_prompts_per_language": 10, "val_prompts_per_language": 4,
              "test_prompts_per_language": 6, "anchor_prompts_per_language": 4, "sft_val_per_language": 4},
    "sft": {"pretrain_steps": 6, "finetune_steps": 4, "val_interval": 2, "sizes": [4, 8], "batch_size": 4},
    "grpo": {"max_iters": 4, "val_interval": 2, "prompts_per_batch": 2, "group_size": 3},
    "eval": {"n_runs": 2},
    "table1": {"iters": 3, "seeds": [0, 1]},
}


@pytest.fixture
def fast(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(FAST))
    return ["--config", str(path), "--run-dir", str(tmp_path / "run")], tmp_path / "run"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_world_gen_reproducible(tmp_path):
    assert main(["world", "gen", "--run-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(["world", "gen", "--run-dir", str(tmp_path / "b")]) == EXIT_OK
    assert sha(tmp_path / "a" / "world.json") == sha(tmp_path / "b" / "world.json")
    snap = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert snap["profile"] == "desk" and snap["run_dir"] == str(tmp_path / "a")


def test_grpo_needs_anchors(fast, capsys):
    args, run = fast
    assert main(["world", "gen", *args]) == EXIT_OK
    assert main(["pretrain", *args]) == EXIT_OK
    assert main(["grpo", *args]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "anchors_l4-5.json" in err and "c.json" in err


def test_unknown_key_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grpo": {"kl_coef": 0.1}}))
    assert main(["world", "gen", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "grpo.kl_coef" in capsys.readouterr().err


def test_locked_run_dir_is_runtime_error(tmp_path, capsys):
    run = tmp_path / "r"
    run.mkdir()
    (run / ".lock").write_text(str(os.getppid()))
    assert main(["world", "gen", "--run-dir", str(run)]) == EXIT_RUNTIME
    assert "locked" in capsys.readouterr().err


def test_stale_lock_is_taken_over(tmp_path):
    run = tmp_path / "r"
    run.mkdir()
    (run / ".lock").write_text("999999999")
    assert main(["world", "gen", "--run-dir", str(run)]) == EXIT_OK
    assert not (run / ".lock").exists()


def test_stage_rerun_is_noop(fast, capsys):
    args, run = fast
    for cmd in (["world", "gen"], ["pretrain"]):
        assert main([*cmd, *args]) == EXIT_OK
    ck = run / "stages" / "pretrain" / "checkpoint.npz"
    before, mtime = sha(ck), ck.stat().st_mtime_ns
    capsys.readouterr()
    assert main(["pretrain", *args]) == EXIT_OK
    assert "up to date" in capsys.readouterr().out
    assert sha(ck) == before and ck.stat().st_mtime_ns == mtime
    # a different seed invalidates the stage
    assert main(["pretrain", *args, "--seed", "5"]) == EXIT_OK
    assert "done in" in capsys.readouterr().out


def test_full_stage_chain(fast):
    args, run = fast
    for cmd in (["world", "gen"], ["pretrain"], ["finetune", "--size", "4"],
                ["anchors", "--start", "sft4"], ["grpo", "--start", "sft4"], ["dpo", "--start", "sft4"],
                ["eval", "--stage", "sft4+grpo"], ["report", "--stage", "sft4+grpo"]):
        assert main([*cmd, *args]) == EXIT_OK, cmd
    d = run / "stages" / "sft4+grpo"
    log = [json.loads(l) for l in (d / "log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in log if "val_r_cer" in r] == [0, 2, 4]
    assert all({"loss", "mean_reward", "r_cer", "r_ssim", "r_pesq"} <= set(r) for r in log if "loss" in r)
    assert {p.name for p in (d / "eval_l4-5").iterdir()} >= {"report.json", "report.csv", "curves.svg"}


def test_repro_fig3_table_shape(fast):
    args, run = fast
    assert main(["repro", "fig3", *args]) == EXIT_OK
    summary = json.loads((run / "fig3" / "summary.json").read_text())
    for lang in (4, 5):
        models = [r["model"] for r in summary["rows"] if r["language"] == lang]
        assert models == ["baseline", "baseline+GRPO", "SFT-4", "SFT-4+GRPO", "SFT-8", "SFT-8+GRPO"]
    assert set(summary["checks"]) == {"4", "5"}
    assert (run / "fig3" / "table.md").exists() and (run / "fig3" / "table.csv").exists()


def test_repro_table1_shape(fast):
    args, run = fast
    assert main(["repro", "table1", *args]) == EXIT_OK
    summary = json.loads((run / "table1" / "summary.json").read_text())
    assert [(r["model"], r["cfg"]) for r in summary["rows"]] == [
        (m, c) for c in (False, True) for m in ("Base", "Base+DPO", "Base+GRPO")]
    assert len(summary["per_seed"]) == 4
