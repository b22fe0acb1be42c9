"""Run configuration: one JSON document with a section per stage.

Loading starts from the named profile's defaults and overlays the user's
file; any key the defaults do not know is rejected. The resolved document is
what every stage reads and what gets snapshotted into the run directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

PROFILES = ("desk", "paper")

_DESK = {
    "seed": 0,
    "run_dir": "runs/default",
    "profile": "desk",
    "world": {
        "seed": 7,
        "n_languages": 6,
        "n_speakers": 8,
        "alphabet_size": 16,
        "audio_vocab": 256,
        "pool_size": 56,
        "n_core": 4,
        "seen_languages": [0, 1, 2, 3],
        "heldout_languages": [4, 5],
        "noise": 0.2,
        "pretrain_per_language": 1000,
        "sft_val_per_language": 32,
        "train_prompts_per_language": 500,
        "val_prompts_per_language": 64,
        "test_prompts_per_language": 128,
        "anchor_prompts_per_language": 64,
    },
    "model": {
        "d_model": 48,
        "n_heads": 4,
        "n_enc_layers": 2,
        "n_dec_layers": 2,
        "d_ff": 96,
        "max_text_len": 16,
        "max_context_len": 16,
        "max_frames": 40,
        "p_drop": 0.1,
        "param_budget": 1_000_000,
    },
    "sft": {
        "lr": 3e-3,
        "pretrain_steps": 1500,
        "finetune_steps": 400,
        "batch_size": 32,
        "upsample_factor": 5.0,
        "val_interval": 50,
        "clip_norm": 1.0,
        "sizes": [64, 256, 1024],
    },
    "grpo": {
        "group_size": 6,
        "prompts_per_batch": 8,
        "temperature": 0.7,
        "cfg_probability": 0.5,
        "cfg_scale": 2.5,
        "lr": 0.05,
        "max_iters": 300,
        "val_interval": 50,
        "selection": "r_cer",
        "anchor_samples": 1,
        "weights": {"w_cer": 0.45, "w_ssim": 0.45, "w_pesq": 0.1},
    },
    "dpo": {
        "beta": 0.1,
        "delta_min": 0.1,
        "lr": 1e-5,
        "batch_size": 16,
    },
    "eval": {
        "n_runs": 5,
        "temperature": 0.7,
        "cfg_scale": 2.5,
        "cfg_modes": [False, True],
        "greedy": False,
        "ssim_kind": "unigram",
        "batch_size": 64,
    },
    "table1": {
        "language": 0,
        "seeds": [0, 1, 2, 3, 4],
        "iters": 150,
        "weights": {"w_cer": 0.5, "w_ssim": 0.5, "w_pesq": 0.0},
    },
}

_PAPER_OVERRIDES = {
    "profile": "paper",
    "grpo": {"group_size": 12, "prompts_per_batch": 64, "lr": 2e-7, "max_iters": 2000},
    "table1": {"iters": 2000},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def defaults(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    return _DESK if profile == "desk" else _merge(_DESK, _PAPER_OVERRIDES)


def resolve(user: dict | None = None, profile: str | None = None, seed: int | None = None,
            run_dir: str | None = None) -> dict:
    """Defaults of the chosen profile, then the user document, then explicit overrides."""
    user = dict(user or {})
    name = profile or user.get("profile", "desk")
    cfg = _merge(defaults(name), {**user, "profile": name})
    if seed is not None:
        cfg["seed"] = int(seed)
    if run_dir is not None:
        cfg["run_dir"] = str(run_dir)
    _check(cfg)
    return cfg


def load(path, **overrides) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(doc, **overrides)


def _check(cfg: dict) -> None:
    w = cfg["world"]
    langs = w["seen_languages"] + w["heldout_languages"]
    if len(set(langs)) != len(langs) or not all(0 <= l < w["n_languages"] for l in langs):
        raise ConfigError("seen and held-out languages must be distinct ids below n_languages")
    if not 0 <= w["noise"] < 1:
        raise ConfigError("world.noise must lie in [0, 1)")
    if any(n < 1 for n in cfg["sft"]["sizes"]):
        raise ConfigError("sft.sizes must be positive")
    if cfg["eval"]["n_runs"] < 1:
        raise ConfigError("eval.n_runs must be >= 1")
    if cfg["table1"]["language"] not in w["seen_languages"]:
        raise ConfigError("table1.language must be a seen language")


def section_digest(cfg: dict, *keys) -> str:
    """Hash of the named sections (plus the global seed), for stage up-to-date checks."""
    doc = {"seed": cfg["seed"], **{k: cfg[k] for k in keys}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def snapshot(cfg: dict, run_dir) -> Path:
    path = Path(run_dir) / "config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
