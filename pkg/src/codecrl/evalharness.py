"""Checkpoint evaluation with run-to-run confidence intervals, and report files.

Each inference run draws one response per prompt. A prompt's random stream
is keyed on its content rather than its position, so permuting the prompt
set leaves every response, and therefore every mean, unchanged.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .policy import PolicyParams, load_checkpoint, sample_responses

log = logging.getLogger(__name__)

REPORT_VERSION = 1
Z_95 = 1.96
CSV_COLUMNS = ("language", "cfg", "cer_mean", "cer_ci", "ssim_mean", "ssim_ci", "quality_mean",
               "quality_ci", "n_runs")
OVERALL = "all"


@dataclass(frozen=True)
class MetricRow:
    language: str
    cfg: bool
    cer_mean: float
    cer_ci: float | None
    ssim_mean: float
    ssim_ci: float | None
    quality_mean: float
    quality_ci: float | None
    n_runs: int


@dataclass
class MetricsReport:
    rows: list
    settings: dict
    checkpoint: dict = field(default_factory=dict)

    def row(self, language="all", cfg=False) -> MetricRow:
        for r in self.rows:
            if r.language == str(language) and r.cfg == cfg:
                return r
        raise KeyError((language, cfg))

    def to_dict(self) -> dict:
        return {"format_version": REPORT_VERSION, "checkpoint": self.checkpoint, "settings": self.settings,
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if doc.get("format_version") != REPORT_VERSION:
            raise InvalidInput(f"unsupported report version {doc.get('format_version')!r}")
        return cls([MetricRow(**r) for r in doc["rows"]], doc["settings"], doc.get("checkpoint", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def prompt_key(prompt) -> int:
    """Stable 64-bit key of a prompt's content."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(prompt.text, np.int64).tobytes())
    h.update(b"|")
    h.update(np.asarray(prompt.context, np.int64).tobytes())
    h.update(int(prompt.language_id).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def summarize_runs(per_run) -> tuple:
    """Mean across runs and the 95% half-width ``1.96 * sd / sqrt(n)`` (``None`` for one run)."""
    x = np.asarray(per_run, dtype=np.float64)
    if x.size == 1:
        return float(x[0]), None
    return _mean(x.tolist()), float(Z_95 * x.std(ddof=1) / math.sqrt(x.size))


def aggregate_scores(prompts, scores_per_run, cfg: bool) -> list:
    """Rows (per language, then overall) from ``scores_per_run[run][prompt] -> RawScores``."""
    langs = sorted({p.language_id for p in prompts})
    groups = [(str(l), [i for i, p in enumerate(prompts) if p.language_id == l]) for l in langs]
    groups.append((OVERALL, list(range(len(prompts)))))
    rows = []
    for name, idx in groups:
        stats = {}
        for metric in ("cer", "ssim", "pesq"):
            per_run = []
            for scores in scores_per_run:
                vals = [getattr(scores[i], metric) for i in idx]
                if metric == "cer":
                    vals = [min(v, 1.0) for v in vals]
                per_run.append(_mean(vals))
            stats[metric] = summarize_runs(per_run)
        rows.append(MetricRow(name, cfg, stats["cer"][0], stats["cer"][1], stats["ssim"][0], stats["ssim"][1],
                              stats["pesq"][0], stats["pesq"][1], len(scores_per_run)))
    return rows


def _generate(pp, prompts, run, use_cfg, cfg_scale, temperature, greedy, seed, batch_size):
    out = []
    for lo in range(0, len(prompts), batch_size):
        chunk = prompts[lo:lo + batch_size]
        rngs = [np.random.default_rng([seed, run, int(use_cfg), prompt_key(p)]) for p in chunk]
        out.extend(s.response for s in
                   sample_responses(pp, chunk, temperature, use_cfg, cfg_scale, rngs, greedy=greedy))
    return out


def evaluate(checkpoint, prompts, oracles, n_runs: int = 1, cfg_modes=(False,), cfg_scale: float = 2.5,
             temperature: float = 0.7, greedy: bool = False, seed: int = 0,
             batch_size: int = 64) -> MetricsReport:
    """Generate and score ``n_runs`` responses per prompt for each CFG mode.

    ``checkpoint`` is a path (never modified) or in-memory parameters.
    """
    if len(prompts) == 0:
        raise InvalidInput("empty prompt set")
    if n_runs < 1:
        raise InvalidInput("n_runs must be >= 1")
    if isinstance(checkpoint, PolicyParams):
        pp = checkpoint
        ident = {"params_sha256": hashlib.sha256(pp.flat().tobytes()).hexdigest()}
    else:
        pp, meta = load_checkpoint(checkpoint)
        ident = {"path": str(checkpoint), "sha256": file_digest(checkpoint), "stage": meta.get("stage")}
    rows = []
    for use_cfg in cfg_modes:
        runs = []
        for run in range(n_runs):
            responses = _generate(pp, prompts, run, bool(use_cfg), cfg_scale, temperature, greedy, seed,
                                  batch_size)
            runs.append([oracles.score(p, y) for p, y in zip(prompts, responses)])
        rows.extend(aggregate_scores(prompts, runs, bool(use_cfg)))
    settings = {"cfg_scale": float(cfg_scale), "temperature": float(temperature), "greedy": bool(greedy),
                "seed": int(seed), "n_prompts": len(prompts),
                "ssim_kind": getattr(oracles, "ssim_kind", "unknown")}
    return MetricsReport(rows, settings, ident)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    return repr(x)


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_training_log(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def render_curves(records, path) -> bool:
    """Validation reward and mean training reward versus iteration; ``False`` if nothing to plot."""
    val = [(r["iter"], r["val_r_cer"]) for r in records if "val_r_cer" in r]
    train = [(r["iter"], r["mean_reward"]) for r in records if "mean_reward" in r]
    if not val and not train:
        return False
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "codecrl", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if train:
            ax.plot(*zip(*train), lw=0.8, alpha=0.6, label="mean reward (train)")
        if val:
            ax.plot(*zip(*val), "o-", label="validation R_cer")
        ax.set_xlabel("iteration")
        ax.set_ylabel("reward")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return True


def emit_report(report: MetricsReport, run_dir, training_log=None) -> list:
    """Write report.json, report.csv and (when the log has records) curves.svg.

    ``training_log`` is a list of records or the path of a JSON-lines log.
    """
    run_dir = Path(run_dir)
    written = []
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(report.to_json() + "\n")
        (run_dir / "report.csv").write_text(report_csv(report))
        written += [run_dir / "report.json", run_dir / "report.csv"]
        records = training_log if isinstance(training_log, list) else (
            read_training_log(training_log) if training_log is not None else [])
        svg = run_dir / "curves.svg"
        if render_curves(records, svg):
            written.append(svg)
        else:
            log.info("training log is empty; curves.svg not written")
    except OSError as e:
        raise OSError(f"cannot write report under {run_dir}: {e}") from e
    return written
