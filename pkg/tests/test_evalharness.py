import csv
import hashlib
import io
import json
import logging

import numpy as np
import pytest

from codecrl.errors import InvalidInput
from codecrl.evalharness import (CSV_COLUMNS, MetricsReport, aggregate_scores, emit_report, evaluate,
                                 report_csv, summarize_runs)
from codecrl.policy import save_checkpoint
from codecrl.synthworld import Oracles, Prompt, RawScores, gen_world, make_paired_dataset


def test_single_run_has_no_interval():
    assert summarize_runs([0.25]) == (0.25, None)


def test_interval_formula():
    x = [0.1, 0.2, 0.4, 0.3, 0.5]
    mean, ci = summarize_runs(x)
    assert mean == pytest.approx(0.3)
    assert ci == pytest.approx(1.96 * np.std(x, ddof=1) / np.sqrt(5))


def test_references_score_perfectly():
    world = gen_world(7, 3, 4, 8)
    ex = [e for l in range(3) for e in make_paired_dataset(world, l, 10, 0)]
    prompts = [e.prompt for e in ex]
    orc = Oracles(world)
    scores = [[orc.score(p, e.target_audio) for p, e in zip(prompts, ex)]]
    rows = aggregate_scores(prompts, scores, cfg=False)
    assert [r.language for r in rows] == ["0", "1", "2", "all"]
    for r in rows:
        assert r.cer_mean == 0.0 and r.quality_mean == pytest.approx(4.5) and r.cer_ci is None
        assert 0 < r.ssim_mean <= 1


def test_cer_clipped_in_aggregation():
    p = [Prompt(np.array([97]), np.array([[10, 40]]), 0)]
    rows = aggregate_scores(p, [[RawScores(4.0, 0.5, 1.0)]], False)
    assert rows[0].cer_mean == 1.0


def _eval_setup(tiny_world, tiny_data):
    prompts, _ = tiny_data
    return prompts, Oracles(tiny_world)


def test_evaluate_deterministic_and_cfg_rows(tiny_params, tiny_world, tiny_data):
    prompts, orc = _eval_setup(tiny_world, tiny_data)
    a = evaluate(tiny_params, prompts, orc, n_runs=3, cfg_modes=(False, True), seed=2)
    b = evaluate(tiny_params, prompts, orc, n_runs=3, cfg_modes=(False, True), seed=2)
    assert a.to_json() == b.to_json()
    assert {(r.language, r.cfg) for r in a.rows} == {(l, c) for l in ("0", "1", "all") for c in (False, True)}
    assert all(r.cer_ci >= 0 and r.ssim_ci >= 0 and r.quality_ci >= 0 for r in a.rows)


def test_evaluate_permutation_invariant(tiny_params, tiny_world, tiny_data):
    prompts, orc = _eval_setup(tiny_world, tiny_data)
    a = evaluate(tiny_params, prompts, orc, n_runs=2, seed=1, batch_size=2)
    b = evaluate(tiny_params, prompts[::-1], orc, n_runs=2, seed=1, batch_size=2)
    for ra, rb in zip(a.rows, b.rows):
        assert ra == rb


def test_evaluate_leaves_checkpoint_untouched(tmp_path, tiny_params, tiny_world, tiny_data):
    prompts, orc = _eval_setup(tiny_world, tiny_data)
    ck = tmp_path / "ck.npz"
    save_checkpoint(ck, tiny_params, "pretrain")
    before = hashlib.sha256(ck.read_bytes()).hexdigest()
    rep = evaluate(ck, prompts, orc, n_runs=1)
    assert hashlib.sha256(ck.read_bytes()).hexdigest() == before
    assert rep.checkpoint["sha256"] == before
    assert rep.row("all").cer_ci is None


def test_evaluate_rejects_empty(tiny_params, tiny_world):
    with pytest.raises(InvalidInput):
        evaluate(tiny_params, [], Oracles(tiny_world))


LOG = [{"iter": 0, "val_r_cer": 0.5}, {"iter": 0, "mean_reward": 0.55, "loss": 0.1},
       {"iter": 1, "mean_reward": 0.6, "loss": 0.0}, {"iter": 2, "val_r_cer": 0.7}]


def _report(tiny_params, tiny_world, tiny_data):
    prompts, orc = _eval_setup(tiny_world, tiny_data)
    return evaluate(tiny_params, prompts, orc, n_runs=2, cfg_modes=(False, True), seed=0)


def test_emit_roundtrip(tmp_path, tiny_params, tiny_world, tiny_data):
    rep = _report(tiny_params, tiny_world, tiny_data)
    written = emit_report(rep, tmp_path, LOG)
    assert {p.name for p in written} == {"report.json", "report.csv", "curves.svg"}
    doc = json.loads((tmp_path / "report.json").read_text())
    rows = list(csv.DictReader(io.StringIO((tmp_path / "report.csv").read_text())))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == len(doc["rows"])
    for j, c in zip(doc["rows"], rows):
        for k in ("cer_mean", "ssim_mean", "quality_mean", "cer_ci"):
            assert float(c[k]) == pytest.approx(j[k], abs=1e-6)
    assert MetricsReport.load(tmp_path / "report.json").rows == rep.rows


def test_emit_is_byte_identical(tmp_path, tiny_params, tiny_world, tiny_data):
    rep = _report(tiny_params, tiny_world, tiny_data)
    emit_report(rep, tmp_path / "a", LOG)
    emit_report(rep, tmp_path / "b", LOG)
    for name in ("report.json", "report.csv", "curves.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_log_skips_curves(tmp_path, tiny_params, tiny_world, tiny_data, caplog):
    rep = _report(tiny_params, tiny_world, tiny_data)
    with caplog.at_level(logging.INFO):
        written = emit_report(rep, tmp_path, [])
    assert not (tmp_path / "curves.svg").exists()
    assert len(written) == 2 and "curves.svg not written" in caplog.text


def test_single_run_csv_blank_interval(tmp_path, tiny_params, tiny_world, tiny_data):
    prompts, orc = _eval_setup(tiny_world, tiny_data)
    rep = evaluate(tiny_params, prompts, orc, n_runs=1)
    first = next(csv.DictReader(io.StringIO(report_csv(rep))))
    assert first["cer_ci"] == "" and first["n_runs"] == "1"


def test_emit_io_error_names_path(tmp_path, tiny_params, tiny_world, tiny_data):
    rep = _report(tiny_params, tiny_world, tiny_data)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_report(rep, blocker / "sub", LOG)
