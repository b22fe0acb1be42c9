"""Command-line entry point: ``codecrl <stage> [options]``.

Exit status is 0 on success, 1 for configuration problems (bad or unknown
keys, missing upstream artifacts) and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import atexit
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults of the profile if omitted)")
    common.add_argument("--profile", choices=("desk", "paper"), help="default set to start from")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--run-dir", help="run directory, overrides the config")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bit-exact reruns)")
    common.add_argument("-v", "--verbose", action="store_true")

    langs = argparse.ArgumentParser(add_help=False)
    langs.add_argument("--languages", type=int, nargs="+",
                       help="target languages (default: the held-out ones)")

    p = argparse.ArgumentParser(prog="codecrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    world = sub.add_parser("world", help="synthetic world files")
    wsub = world.add_subparsers(dest="action", required=True)
    wsub.add_parser("gen", parents=[common], help="generate world.json")

    sub.add_parser("pretrain", parents=[common], help="train the baseline on the seen languages")
    ft = sub.add_parser("finetune", parents=[common], help="fine-tune on a held-out language subset")
    ft.add_argument("--size", type=int, required=True, help="paired examples per held-out language")

    for name, what in (("anchors", "estimate reward anchors from a checkpoint"),
                       ("grpo", "GRPO from a checkpoint"), ("dpo", "DPO baseline from a checkpoint")):
        sp = sub.add_parser(name, parents=[common, langs], help=what)
        sp.add_argument("--start", default="pretrain", help="stage whose checkpoint to start from")
        if name != "anchors":
            sp.add_argument("--tag", default="", help="suffix for the output stage name")
            sp.add_argument("--iters", type=int, help="override the iteration budget")

    for name, what in (("eval", "evaluate a stage's checkpoint"), ("report", "re-render report files")):
        sp = sub.add_parser(name, parents=[common, langs], help=what)
        sp.add_argument("--stage", required=True)

    repro = sub.add_parser("repro", help="end-to-end reproductions")
    rsub = repro.add_subparsers(dest="target", required=True)
    rsub.add_parser("fig3", parents=[common], help="baseline/SFT/GRPO matrix on held-out languages")
    rsub.add_parser("table1", parents=[common], help="Base vs DPO vs GRPO on a seen language")
    return p


class RunLock:
    """Exclusive ownership of a run directory through an O_EXCL lock file."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise RuntimeError(f"run directory {self.path.parent} is locked by another process ({self.path})")
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            atexit.register(self.release)
            return
        raise RuntimeError(f"could not acquire {self.path}")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or 0)
        except (OSError, ValueError):
            return True
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def release(self) -> None:
        try:
            if self.path.read_text().strip() == str(os.getpid()):
                self.path.unlink()
        except OSError:
            pass


def _dispatch(args, cfg) -> None:
    from . import pipeline

    run = pipeline.Run.open(cfg)
    held = cfg["world"]["heldout_languages"]
    langs = getattr(args, "languages", None) or held
    cmd = args.command
    if cmd == "world":
        pipeline.world_gen(run)
    elif cmd == "pretrain":
        pipeline.pretrain(run)
    elif cmd == "finetune":
        pipeline.finetune(run, args.size)
    elif cmd == "anchors":
        pipeline.anchors(run, args.start, langs)
    elif cmd == "grpo":
        pipeline.grpo(run, args.start, langs, args.tag, args.iters)
    elif cmd == "dpo":
        pipeline.dpo(run, args.start, langs, args.tag, args.iters)
    elif cmd == "eval":
        report = pipeline.evaluate_stage(run, args.stage, langs)
        for r in report.rows:
            print(f"language={r.language} cfg={r.cfg} cer={r.cer_mean:.4f} ssim={r.ssim_mean:.4f} "
                  f"quality={r.quality_mean:.3f}")
    elif cmd == "report":
        for path in pipeline.report_stage(run, args.stage, langs):
            print(path)
    elif cmd == "repro":
        if args.target == "fig3":
            summary = pipeline.repro_fig3(run)
            print(summary["checks"])
        else:
            summary = pipeline.repro_table1(run)
            print(summary["grpo_wins"])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)

    from . import config as config_mod
    from .errors import CodecRLError, ConfigError

    where = args.config or f"<{args.profile or 'desk'} defaults>"
    try:
        over = {"profile": args.profile, "seed": args.seed, "run_dir": args.run_dir}
        cfg = config_mod.load(args.config, **over) if args.config else config_mod.resolve(None, **over)
    except ConfigError as e:
        print(f"error: {e} (config: {where})", file=sys.stderr)
        return EXIT_CONFIG

    lock = RunLock(cfg["run_dir"])
    try:
        lock.acquire()
        _dispatch(args, cfg)
    except ConfigError as e:
        print(f"error: {e} (config: {where})", file=sys.stderr)
        return EXIT_CONFIG
    except (CodecRLError, OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e} (config: {where})", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        lock.release()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
