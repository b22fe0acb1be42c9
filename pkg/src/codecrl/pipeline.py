"""File-backed training stages and the two reproduction drivers.

Run directory layout::

    config.resolved.json
    world.json
    stages/<name>/checkpoint.npz   parameters (pretrain, sft<N>, <start>+grpo..., <start>+dpo...)
    stages/<name>/log.jsonl        append-only training log
    stages/<name>/anchors_<langs>.json
    stages/<name>/eval_<langs>/    report.json, report.csv, curves.svg
    stages/<name>/done.json        input digest and output hashes
    fig3/, table1/                 comparison tables

Stages exchange nothing in memory: each one loads its inputs from these
files, so any stage can be rerun on its own. A stage whose recorded input
digest and output hashes still match is skipped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import MissingArtifact
from .evalharness import MetricsReport, emit_report, evaluate, file_digest
from .policy import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .rewards import Anchors, RewardWeights, estimate_baseline_anchors
from .synthworld import Oracles, World, gen_world, make_paired_dataset, make_prompt_set
from .tokens import AudioVocab
from .trainers import (DpoConfig, GrpoConfig, SftConfig, build_preference_pairs, dpo_train, grpo_train,
                       mix_datasets, sft_train)
from .trainers.sft import uniform_stream

log = logging.getLogger(__name__)

# offsets that separate the data streams drawn from one world seed
_PRETRAIN, _SFT_VAL, _LOWRES, _LOWRES_VAL = 1, 2, 21, 22
_TRAIN_PROMPTS, _VAL_PROMPTS, _ANCHOR_PROMPTS, _TEST_PROMPTS = 11, 12, 13, 14


@dataclass
class Run:
    cfg: dict
    root: Path

    @classmethod
    def open(cls, cfg: dict) -> "Run":
        root = Path(cfg["run_dir"])
        root.mkdir(parents=True, exist_ok=True)
        config_mod.snapshot(cfg, root)
        return cls(cfg, root)

    @property
    def world_path(self) -> Path:
        return self.root / "world.json"

    def stage_dir(self, name: str) -> Path:
        return self.root / "stages" / name

    def checkpoint(self, name: str) -> Path:
        path = self.stage_dir(name) / "checkpoint.npz"
        if not path.exists():
            raise MissingArtifact(path, _producer(name))
        return path

    def world(self) -> World:
        if not self.world_path.exists():
            raise MissingArtifact(self.world_path, "world gen")
        return World.load(self.world_path)


def _producer(name: str) -> str:
    if name == "pretrain":
        return "pretrain"
    if name.startswith("sft"):
        return f"finetune --size {name[3:]}"
    return "grpo/dpo"


def lang_tag(languages) -> str:
    return "l" + "-".join(str(l) for l in languages)


# ---------------------------------------------------------------------------
# up-to-date bookkeeping


def _digest(parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def _is_current(d: Path, digest: str) -> bool:
    marker = d / "done.json"
    if not marker.exists():
        return False
    done = json.loads(marker.read_text())
    if done.get("digest") != digest:
        return False
    for name, h in done.get("outputs", {}).items():
        p = d / name
        if not p.exists() or file_digest(p) != h:
            return False
    return True


def _mark_done(d: Path, digest: str, outputs, seconds: float) -> None:
    done = {"digest": digest, "outputs": {o: file_digest(d / o) for o in outputs}, "seconds": round(seconds, 3)}
    (d / "done.json").write_text(json.dumps(done, indent=2, sort_keys=True) + "\n")


class _Log:
    """Append-only JSON-lines writer (truncated when a stage starts afresh)."""

    def __init__(self, path: Path, echo=None):
        self.path = path
        path.write_text("")
        self.echo = echo

    def __call__(self, rec: dict) -> None:
        rec = {k: (float(v) if isinstance(v, np.floating) else v) for k, v in rec.items()}
        with self.path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.echo:
            self.echo(rec)


def _stage(run: Run, name: str, inputs, sections, extra, body, echo=print) -> Path:
    """Run ``body(dir)`` unless the stage is already current; returns the stage directory."""
    d = run.stage_dir(name)
    digest = _digest({"sections": {k: run.cfg[k] for k in sections}, "seed": run.cfg["seed"],
                      "inputs": {str(p.relative_to(run.root)): file_digest(p) for p in inputs}, "extra": extra})
    if _is_current(d, digest):
        echo(f"[{name}] up to date")
        return d
    d.mkdir(parents=True, exist_ok=True)
    (d / "done.json").unlink(missing_ok=True)
    t0 = time.perf_counter()
    outputs = body(d)
    _mark_done(d, digest, outputs, time.perf_counter() - t0)
    echo(f"[{name}] done in {time.perf_counter() - t0:.1f}s")
    return d


# ---------------------------------------------------------------------------
# data derived from the world file


def _data_seed(cfg, offset):
    return cfg["world"]["seed"] * 1000 + offset


def pretrain_data(run: Run, world: World):
    w = run.cfg["world"]
    train = [e for l in w["seen_languages"]
             for e in make_paired_dataset(world, l, w["pretrain_per_language"], _data_seed(run.cfg, _PRETRAIN),
                                          w["noise"])]
    val = [e for l in w["seen_languages"]
           for e in make_paired_dataset(world, l, w["sft_val_per_language"], _data_seed(run.cfg, _SFT_VAL),
                                        w["noise"])]
    return train, val


def lowres_data(run: Run, world: World, size: int):
    """``size`` paired examples per held-out language; smaller sets are prefixes of larger ones."""
    w = run.cfg["world"]
    train = [e for l in w["heldout_languages"]
             for e in make_paired_dataset(world, l, size, _data_seed(run.cfg, _LOWRES), w["noise"])]
    val = [e for l in w["heldout_languages"]
           for e in make_paired_dataset(world, l, w["sft_val_per_language"], _data_seed(run.cfg, _LOWRES_VAL),
                                        w["noise"])]
    return train, val


def prompts(run: Run, world: World, languages, kind: str):
    w = run.cfg["world"]
    n, off = {
        "train": (w["train_prompts_per_language"], _TRAIN_PROMPTS),
        "val": (w["val_prompts_per_language"], _VAL_PROMPTS),
        "anchor": (w["anchor_prompts_per_language"], _ANCHOR_PROMPTS),
        "test": (w["test_prompts_per_language"], _TEST_PROMPTS),
    }[kind]
    return make_prompt_set(world, list(languages), n, _data_seed(run.cfg, off))


def _weights(d: dict) -> RewardWeights:
    return RewardWeights(**d)


def grpo_config(cfg: dict, **over) -> GrpoConfig:
    g = dict(cfg["grpo"])
    g.pop("anchor_samples")
    g["weights"] = _weights(g["weights"])
    g.update(over)
    return GrpoConfig(**g)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "audio_vocab": cfg["world"]["audio_vocab"]})


# ---------------------------------------------------------------------------
# stages


def world_gen(run: Run, echo=print) -> Path:
    w = run.cfg["world"]

    def body(d):
        world = gen_world(w["seed"], w["n_languages"], w["n_speakers"], w["alphabet_size"],
                          vocab=AudioVocab(w["audio_vocab"]), pool_size=w["pool_size"], n_core=w["n_core"])
        world.save(run.world_path)
        return ["../../world.json"]

    _stage(run, "world", [], ["world"], None, body, echo)
    return run.world_path


def pretrain(run: Run, echo=print) -> Path:
    world = run.world()
    s = run.cfg["sft"]

    def body(d):
        train, val = pretrain_data(run, world)
        pp = init_params(model_config(run.cfg), run.cfg["seed"])
        cfg = SftConfig(lr=s["lr"], max_steps=s["pretrain_steps"], batch_size=s["batch_size"],
                        val_interval=s["val_interval"], clip_norm=s["clip_norm"])
        best, _ = sft_train(pp, uniform_stream(train, run.cfg["seed"]), val, cfg, run.cfg["seed"],
                            _Log(d / "log.jsonl"))
        save_checkpoint(d / "checkpoint.npz", best, "pretrain", extra={"languages": run.cfg["world"]["seen_languages"]})
        return ["checkpoint.npz", "log.jsonl"]

    return _stage(run, "pretrain", [run.world_path], ["world", "model", "sft"], None, body, echo)


def finetune(run: Run, size: int, echo=print) -> Path:
    world = run.world()
    start = run.checkpoint("pretrain")
    s = run.cfg["sft"]

    def body(d):
        pre, _ = pretrain_data(run, world)
        low, val = lowres_data(run, world, size)
        pp, _ = load_checkpoint(start)
        cfg = SftConfig(lr=s["lr"], max_steps=s["finetune_steps"], batch_size=s["batch_size"],
                        upsample_factor=s["upsample_factor"], val_interval=s["val_interval"],
                        clip_norm=s["clip_norm"])
        stream = mix_datasets(pre, low, cfg.upsample_factor, run.cfg["seed"])
        best, _ = sft_train(pp, stream, val, cfg, run.cfg["seed"], _Log(d / "log.jsonl"))
        save_checkpoint(d / "checkpoint.npz", best, "finetune", extra={"size": size})
        return ["checkpoint.npz", "log.jsonl"]

    return _stage(run, f"sft{size}", [run.world_path, start], ["world", "model", "sft"], {"size": size}, body, echo)


def anchors(run: Run, start: str, languages, echo=print) -> Path:
    world = run.world()
    ck = run.checkpoint(start)
    name = f"anchors_{lang_tag(languages)}.json"
    d = run.stage_dir(start)
    digest = _digest({"ck": file_digest(ck), "world": file_digest(run.world_path), "langs": list(languages),
                      "n": run.cfg["grpo"]["anchor_samples"], "t": run.cfg["grpo"]["temperature"],
                      "w": run.cfg["world"], "seed": run.cfg["seed"]})
    marker = d / f"{name}.done"
    if marker.exists() and marker.read_text() == digest and (d / name).exists():
        echo(f"[{start}/{name}] up to date")
        return d / name
    pp, _ = load_checkpoint(ck)
    a = estimate_baseline_anchors(pp, prompts(run, world, languages, "anchor"), Oracles(world),
                                  run.cfg["grpo"]["anchor_samples"], run.cfg["grpo"]["temperature"],
                                  seed=run.cfg["seed"])
    (d / name).write_text(a.to_json() + "\n")
    marker.write_text(digest)
    echo(f"[{start}/{name}] CER mean {a.cer.baseline_mean:.4f}, SSIM mean {a.ssim.baseline_mean:.4f}")
    return d / name


def _load_anchors(run: Run, start: str, languages) -> Path:
    path = run.stage_dir(start) / f"anchors_{lang_tag(languages)}.json"
    if not path.exists():
        langs = " ".join(str(l) for l in languages)
        raise MissingArtifact(path, f"anchors --start {start} --languages {langs}")
    return path


def grpo(run: Run, start: str, languages, tag: str = "", iters: int | None = None, weights=None,
         echo=print) -> Path:
    world = run.world()
    ck = run.checkpoint(start)
    apath = _load_anchors(run, start, languages)
    over = {}
    if iters is not None:
        over["max_iters"] = iters
    if weights is not None:
        over["weights"] = _weights(weights)
    cfg = grpo_config(run.cfg, **over)

    def body(d):
        pp, _ = load_checkpoint(ck)
        anch = Anchors.from_json(apath.read_text())
        (d / "anchors.json").write_text(apath.read_text())
        best, records = grpo_train(pp, cfg, prompts(run, world, languages, "train"), Oracles(world), anch,
                                   prompts(run, world, languages, "val"), run.cfg["seed"], _Log(d / "log.jsonl"))
        chosen = max((r for r in records if "val_r_cer" in r), key=lambda r: r["val_r_cer"])
        save_checkpoint(d / "checkpoint.npz", best, "grpo",
                        extra={"start": start, "languages": list(languages), "selected_iter": chosen["iter"]})
        return ["checkpoint.npz", "log.jsonl", "anchors.json"]

    name = f"{start}+grpo{tag}"
    extra = {"start": start, "languages": list(languages), "iters": iters, "weights": weights}
    return _stage(run, name, [run.world_path, ck, apath], ["world", "grpo"], extra, body, echo)


def dpo(run: Run, start: str, languages, tag: str = "", iters: int | None = None, weights=None,
        echo=print) -> Path:
    """Offline baseline with the GRPO run's budget.

    It draws as many prompts and responses as GRPO samples in ``iters``
    iterations and takes as many optimizer steps, each on ``M*K/2`` pairs
    (the same number of sequences GRPO differentiates per step).
    """
    world = run.world()
    ck = run.checkpoint(start)
    apath = _load_anchors(run, start, languages)
    g = grpo_config(run.cfg, **({"max_iters": iters} if iters is not None else {}))
    w = _weights(weights) if weights is not None else g.weights
    p = run.cfg["dpo"]
    cfg = DpoConfig(beta=p["beta"], delta_min=p["delta_min"], group_size=g.group_size, temperature=g.temperature,
                    cfg_probability=g.cfg_probability, cfg_scale=g.cfg_scale, lr=p["lr"], steps=g.max_iters,
                    batch_size=max(1, g.prompts_per_batch * g.group_size // 2), weights=w)

    def body(d):
        pp, _ = load_checkpoint(ck)
        anch = Anchors.from_json(apath.read_text())
        pool = prompts(run, world, languages, "train")
        rng = np.random.default_rng([run.cfg["seed"], 0xD70])
        picks = [pool[i] for _ in range(g.max_iters)
                 for i in rng.choice(len(pool), min(g.prompts_per_batch, len(pool)), replace=False)]
        pairs = []
        oracles = Oracles(world)
        for lo in range(0, len(picks), 16):
            pairs += build_preference_pairs(pp, picks[lo:lo + 16], cfg, oracles, anch, rng)
        logger = _Log(d / "log.jsonl")
        logger({"pairs": len(pairs), "prompts": len(picks)})
        trained, _ = dpo_train(pp, pp, pairs, cfg, run.cfg["seed"], logger)
        save_checkpoint(d / "checkpoint.npz", trained, "dpo",
                        extra={"start": start, "languages": list(languages), "pairs": len(pairs)})
        return ["checkpoint.npz", "log.jsonl"]

    name = f"{start}+dpo{tag}"
    extra = {"start": start, "languages": list(languages), "iters": iters, "weights": weights}
    return _stage(run, name, [run.world_path, ck, apath], ["world", "grpo", "dpo"], extra, body, echo)


def evaluate_stage(run: Run, stage: str, languages, echo=print) -> MetricsReport:
    world = run.world()
    ck = run.checkpoint(stage)
    e = run.cfg["eval"]
    sub = f"eval_{lang_tag(languages)}"

    def body(d):
        report = evaluate(ck, prompts(run, world, languages, "test"), Oracles(world, e["ssim_kind"]),
                          n_runs=e["n_runs"], cfg_modes=tuple(e["cfg_modes"]), cfg_scale=e["cfg_scale"],
                          temperature=e["temperature"], greedy=e["greedy"], seed=run.cfg["seed"],
                          batch_size=e["batch_size"])
        report.checkpoint["path"] = str(ck.relative_to(run.root))
        written = emit_report(report, d, run.stage_dir(stage) / "log.jsonl")
        return [p.name for p in written]

    d = _stage(run, f"{stage}/{sub}", [run.world_path, ck], ["world", "eval"], {"languages": list(languages)},
               body, echo)
    return MetricsReport.load(d / "report.json")


def report_stage(run: Run, stage: str, languages) -> list:
    """Re-emit CSV and curves for an evaluated stage from its report.json and training log."""
    d = run.stage_dir(stage)
    rpath = d / f"eval_{lang_tag(languages)}" / "report.json"
    if not rpath.exists():
        raise MissingArtifact(rpath, f"eval --stage {stage}")
    return emit_report(MetricsReport.load(rpath), rpath.parent, d / "log.jsonl")


# ---------------------------------------------------------------------------
# reproduction drivers


def _fmt_ci(mean, ci, pct=False):
    scale = 100.0 if pct else 1.0
    s = f"{mean * scale:.2f}" if pct else f"{mean:.4f}"
    if ci is not None:
        s += f" ± {ci * scale:.2f}" if pct else f" ± {ci:.4f}"
    return s


def repro_fig3(run: Run, echo=print) -> dict:
    """Baseline, SFT at each size, and GRPO on top of each, evaluated per held-out language."""
    held = run.cfg["world"]["heldout_languages"]
    sizes = run.cfg["sft"]["sizes"]
    world_gen(run, echo)
    pretrain(run, echo)
    starts = ["pretrain"]
    for n in sizes:
        finetune(run, n, echo)
        starts.append(f"sft{n}")
    for s in starts:
        anchors(run, s, held, echo)
        grpo(run, s, held, echo=echo)
    reports = {}
    for s in starts:
        for name in (s, f"{s}+grpo"):
            reports[name] = evaluate_stage(run, name, held, echo)

    labels = {"pretrain": "baseline"}
    labels.update({f"sft{n}": f"SFT-{n}" for n in sizes})
    rows = []
    for lang in held:
        for s in starts:
            for name, suffix in ((s, ""), (f"{s}+grpo", "+GRPO")):
                r = reports[name].row(lang, False)
                rows.append({"language": lang, "model": labels[s] + suffix, "stage": name,
                             "cer": r.cer_mean, "cer_ci": r.cer_ci, "ssim": r.ssim_mean, "ssim_ci": r.ssim_ci,
                             "quality": r.quality_mean})

    def cer(name, lang):
        return reports[name].row(lang, False).cer_mean

    def ssim(name, lang):
        return reports[name].row(lang, False).ssim_mean

    mid = "sft256" if 256 in sizes else f"sft{sizes[len(sizes) // 2]}"
    checks = {}
    for lang in held:
        checks[str(lang)] = {
            "a_baseline_cer_above_30pct": cer("pretrain", lang) > 0.30,
            "b_sft_cer_below_15pct": cer(mid, lang) < 0.15,
            "c_grpo_on_sft_halves_cer": cer(f"{mid}+grpo", lang) <= 0.5 * cer(mid, lang),
            "d_grpo_on_baseline_cuts_cer_30pct": cer("pretrain+grpo", lang) <= 0.7 * cer("pretrain", lang),
            "e_ssim_not_lower_after_grpo": all(ssim(f"{s}+grpo", lang) >= ssim(s, lang) for s in ("pretrain", mid)),
        }
    summary = {"rows": rows, "checks": checks, "sft_reference": mid}
    _write_table(run.root / "fig3", summary, ["language", "model", "cer", "cer_ci", "ssim", "ssim_ci", "quality"])
    lines = ["| language | model | CER % | SSIM | quality |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['language']} | {r['model']} | {_fmt_ci(r['cer'], r['cer_ci'], True)} | "
                     f"{_fmt_ci(r['ssim'], r['ssim_ci'])} | {r['quality']:.3f} |")
    (run.root / "fig3" / "table.md").write_text("\n".join(lines) + "\n")
    echo("\n".join(lines))
    return summary


def repro_table1(run: Run, echo=print) -> dict:
    """Base vs Base+DPO vs Base+GRPO on one seen language, with and without CFG, over several seeds."""
    t = run.cfg["table1"]
    langs = [t["language"]]
    world_gen(run, echo)
    pretrain(run, echo)
    anchors(run, "pretrain", langs, echo)
    base = evaluate_stage(run, "pretrain", langs, echo)
    per_seed = []
    for seed in t["seeds"]:
        sub = Run({**run.cfg, "seed": seed}, run.root)
        tag = f"-t1s{seed}"
        grpo(sub, "pretrain", langs, tag, t["iters"], t["weights"], echo)
        dpo(sub, "pretrain", langs, tag, t["iters"], t["weights"], echo)
        g = evaluate_stage(sub, f"pretrain+grpo{tag}", langs, echo)
        d = evaluate_stage(sub, f"pretrain+dpo{tag}", langs, echo)
        for cfg_on in run.cfg["eval"]["cfg_modes"]:
            gr, dr = g.row(langs[0], cfg_on), d.row(langs[0], cfg_on)
            per_seed.append({"seed": seed, "cfg": cfg_on, "grpo_cer": gr.cer_mean, "dpo_cer": dr.cer_mean,
                             "grpo_ssim": gr.ssim_mean, "dpo_ssim": dr.ssim_mean,
                             "grpo_quality": gr.quality_mean, "dpo_quality": dr.quality_mean,
                             "grpo_wins": gr.cer_mean <= dr.cer_mean and gr.ssim_mean >= dr.ssim_mean})

    rows = []
    for cfg_on in run.cfg["eval"]["cfg_modes"]:
        b = base.row(langs[0], cfg_on)
        rows.append({"model": "Base", "cfg": cfg_on, "cer": b.cer_mean, "ssim": b.ssim_mean, "quality": b.quality_mean,
                     "cer_ci": b.cer_ci, "ssim_ci": b.ssim_ci})
        for method in ("dpo", "grpo"):
            sel = [r for r in per_seed if r["cfg"] == cfg_on]
            row = {"model": f"Base+{method.upper()}", "cfg": cfg_on}
            for m in ("cer", "ssim", "quality"):
                vals = np.array([r[f"{method}_{m}"] for r in sel])
                row[m] = float(vals.mean())
                if m != "quality":
                    row[f"{m}_ci"] = float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
            rows.append(row)
    wins = {str(c): sum(r["grpo_wins"] for r in per_seed if r["cfg"] == c) for c in run.cfg["eval"]["cfg_modes"]}
    summary = {"rows": rows, "per_seed": per_seed, "grpo_wins": wins, "n_seeds": len(t["seeds"])}
    _write_table(run.root / "table1", summary, ["model", "cfg", "cer", "cer_ci", "ssim", "ssim_ci", "quality"])
    lines = ["| model | CFG | CER % | SSIM | quality |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['model']} | {'yes' if r['cfg'] else 'no'} | {_fmt_ci(r['cer'], r['cer_ci'], True)} | "
                     f"{_fmt_ci(r['ssim'], r['ssim_ci'])} | {r['quality']:.3f} |")
    lines.append("")
    lines.append(f"GRPO at least as good as DPO on both CER and SSIM: {wins} of {len(t['seeds'])} seeds")
    (run.root / "table1" / "table.md").write_text("\n".join(lines) + "\n")
    echo("\n".join(lines))
    return summary


def _write_table(d: Path, summary: dict, columns) -> None:
    import csv

    d.mkdir(parents=True, exist_ok=True)
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with (d / "table.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in summary["rows"]:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
