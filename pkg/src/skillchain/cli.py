"""Command-line entry point.

Subcommands cover the whole workflow: propose and validate skill
documents, print plans, train the curriculum, evaluate saved policies,
run the ablation sweeps, run the recipe-shift study, and replay a run
directory byte for byte.  Every run directory gets a self-contained
``config.yaml`` snapshot (manifest inlined, overrides applied), which is
exactly what ``replay`` consumes.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 unsolvable goal.
"""

import argparse
import dataclasses
import json
import os
import sys
import traceback
from typing import List, Optional

import yaml

from .abstraction import AbstractState, format_key
from .config import (
    DEFAULT_VOCAB,
    SCENARIOS,
    ConfigError,
    RunConfig,
    _load_doc,
    bundled_text,
    run_config_from_doc,
)
from .operators import ManifestError, SkillLibrary, validate_library
from .planner import Goal, NoPlanError, plan
from .policy import load_params
from .refine import EndpointConfig, propose
from .trainer import (
    TrainConfig,
    clone_library,
    continue_after_shift,
    evaluate,
    run_baseline,
    run_curriculum,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_NO_PLAN = 3

RESET_SWEEP = (0.0, 0.5, 0.9, 0.99, 0.999)
GRADUATION_SWEEP = (0.1, 0.3, 0.6, 0.9)


def _load_doc_ref(ref: str) -> dict:
    """A config document from a path, ``bundled:<name>``, or ``scenario:<name>``."""
    if ref.startswith("scenario:"):
        name = ref[len("scenario:"):]
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; pick from {', '.join(SCENARIOS)}")
        return yaml.safe_load(bundled_text(f"scenario_{name}.yaml")) or {}
    if ref.startswith("bundled:"):
        return yaml.safe_load(bundled_text(ref[len("bundled:"):])) or {}
    return _load_doc(ref)


def _resolved_doc(args) -> dict:
    """The merged config document with CLI overrides folded in and the
    manifest inlined, so the result stands alone."""
    doc = _load_doc_ref(args.config)
    if args.config.startswith(("scenario:", "bundled:")):
        base_dir = "."
    else:
        base_dir = os.path.dirname(os.path.abspath(args.config))
    rc = run_config_from_doc(doc, base_dir)
    doc = dict(doc)
    doc["manifest"] = yaml.safe_load(rc.manifest_text)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "backend", None) is not None:
        doc["backend"] = args.backend
        if isinstance(doc.get("train"), dict):
            doc["train"] = {k: v for k, v in doc["train"].items() if k != "backend"}
    if getattr(args, "workers", None) is not None:
        doc.setdefault("train", {})
        doc["train"] = dict(doc["train"] or {})
        doc["train"]["n_envs"] = args.workers
    return doc


def _run_config(args) -> RunConfig:
    return run_config_from_doc(_resolved_doc(args), base_dir=".")


def _library(rc: RunConfig, quiet: bool = True):
    candidates = propose(rc.manifest_text, backend="manifest")
    accepted, rejections = validate_library(
        candidates, AbstractState(), vocab=DEFAULT_VOCAB
    )
    if not quiet:
        for op in accepted:
            print(f"ACCEPT {op.name}")
        for rej in rejections:
            print(f"REJECT {rej.op.name} ({rej.check}): {rej.reason}")
    return SkillLibrary(accepted), rejections


def _write_snapshot(out: str, doc: dict) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(yaml.safe_dump(doc, sort_keys=False))


def _fail_marker(out: Optional[str], exc: BaseException) -> None:
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "FAILED"), "w", encoding="utf-8") as fh:
                fh.write("".join(traceback.format_exception(exc)))
        except OSError:
            pass


def _state_text(state) -> str:
    pairs = sorted(state.items())
    return ", ".join(f"{format_key(k)}={v}" for k, v in pairs) or "(empty)"


# --- commands ----------------------------------------------------------------

def cmd_propose(args) -> int:
    rc = _run_config(args)
    backend = rc.train.backend if args.backend is None else args.backend
    config = EndpointConfig.from_env() if backend == "llm" else None
    candidates = propose(rc.manifest_text, backend=backend, config=config)
    accepted, rejections = validate_library(
        candidates, AbstractState(), vocab=DEFAULT_VOCAB
    )
    for op in accepted:
        print(f"ACCEPT {op.name}")
    for rej in rejections:
        print(f"REJECT {rej.op.name} ({rej.check}): {rej.reason}")
    print(f"{len(accepted)} accepted, {len(rejections)} rejected")
    return EXIT_OK


def cmd_validate(args) -> int:
    rc = _run_config(args)
    _library(rc, quiet=False)
    return EXIT_OK


def cmd_plan(args) -> int:
    rc = _run_config(args)
    library, _ = _library(rc)
    goal = Goal.of(rc.goal)
    result = plan(library.active(), AbstractState(), goal, DEFAULT_VOCAB)
    print(f"goal: {goal}")
    print(f"plan cost {result.cost}:")
    for i, (step_, after) in enumerate(zip(result.steps, result.ledger[1:]), 1):
        print(f"  {i}. {step_}  ->  {_state_text(after)}")
    if not result.steps:
        print("  (already satisfied)")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _resolved_doc(args)
    rc = run_config_from_doc(doc, base_dir=".")
    library, _ = _library(rc)
    if args.out:
        _write_snapshot(args.out, doc)
    result = run_curriculum(
        library, rc.goal, rc.train, net=rc.net, gae=rc.gae, ppo=rc.ppo,
        recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=args.out,
    )
    for event in result.events:
        print(f"[{event['frames']:>9}] {event['event']:18} {event['skill']}")
    if result.eval_report is not None:
        print(f"eval success {result.eval_report.rate:.3f} "
              f"± {result.eval_report.stderr:.3f} over {result.eval_report.n_episodes} episodes")
    if result.trained:
        print(f"goal reached; library trained in {result.frames} frames")
        return EXIT_OK
    print(f"stopped: {result.report['failure']}")
    if result.report["failure"] and result.report["failure"].startswith("unsolvable"):
        return EXIT_NO_PLAN
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _run_config(args)
    library, _ = _library(rc)
    params = load_params(args.params)
    report = evaluate(
        library, params, rc.goal, rc.train, recipe=rc.recipes,
        vocab=DEFAULT_VOCAB, seed=rc.seed, n_episodes=args.episodes,
        record_failures=True,
    )
    print(f"success {report.rate:.3f} ± {report.stderr:.3f} "
          f"over {report.n_episodes} episodes")
    for name, count in sorted(report.first_failures.items()):
        print(f"  first failure {name}: {count}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        payload = {
            "rate": report.rate, "stderr": report.stderr,
            "n_episodes": report.n_episodes,
            "first_failures": dict(report.first_failures),
        }
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK


def _sweep(args, field: str, values) -> int:
    doc = _resolved_doc(args)
    rc = run_config_from_doc(doc, base_dir=".")
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(args.out, doc)
    summary = []
    for value in values:
        label = f"{field}_{value:g}"
        library, _ = _library(rc)
        cfg = dataclasses.replace(rc.train, **{field: value})
        out = os.path.join(args.out, label)
        result = run_curriculum(
            library, rc.goal, cfg, net=rc.net, gae=rc.gae, ppo=rc.ppo,
            recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=out,
        )
        goal_rows = [r for r in result.metrics
                     if r["skill"] not in ("(final)",)]
        fraction = goal_rows[-1]["target_frame_fraction"] if goal_rows else 0.0
        rate = result.eval_report.rate if result.eval_report else 0.0
        summary.append((value, fraction, rate, result.frames))
        print(f"{field}={value:g}: target fraction {fraction:.3f}, "
              f"eval {rate:.3f}, {result.frames} frames")
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"{field},target_frame_fraction,eval_success,frames\n")
        for value, fraction, rate, frames in summary:
            fh.write(f"{value:g},{fraction:.6f},{rate:.6f},{frames}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.study == "reset":
        return _sweep(args, "alpha_reset", args.values or RESET_SWEEP)
    if args.study == "graduation":
        return _sweep(args, "alpha_grad", args.values or GRADUATION_SWEEP)
    # sharing: one run with the shared backbone, one with experts only
    doc = _resolved_doc(args)
    rc = run_config_from_doc(doc, base_dir=".")
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(args.out, doc)
    summary = []
    for n_shared in (rc.net.n_shared, 0):
        label = f"shared_{n_shared}"
        library, _ = _library(rc)
        net = dataclasses.replace(rc.net, n_shared=n_shared)
        result = run_curriculum(
            library, rc.goal, rc.train, net=net, gae=rc.gae, ppo=rc.ppo,
            recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed,
            out_dir=os.path.join(args.out, label),
        )
        rate = result.eval_report.rate if result.eval_report else 0.0
        summary.append((n_shared, rate, result.frames))
        print(f"n_shared={n_shared}: eval {rate:.3f}, {result.frames} frames")
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("n_shared,eval_success,frames\n")
        for n_shared, rate, frames in summary:
            fh.write(f"{n_shared},{rate:.6f},{frames}\n")
    return EXIT_OK


def cmd_ood(args) -> int:
    doc = _resolved_doc(args)
    rc = run_config_from_doc(doc, base_dir=".")
    if rc.shift is None:
        raise ConfigError("shift: the ood command needs a shift block")
    library, _ = _library(rc)
    if args.out:
        _write_snapshot(args.out, doc)
    pre_dir = os.path.join(args.out, "pre_shift") if args.out else None
    result = run_curriculum(
        library, rc.goal, rc.train, net=rc.net, gae=rc.gae, ppo=rc.ppo,
        recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=pre_dir,
    )
    pre_rate = result.eval_report.rate if result.eval_report else 0.0
    print(f"pre-shift success {pre_rate:.3f}")
    shift_cfg = dataclasses.replace(
        rc.train,
        total_frames=rc.shift_frames or rc.train.total_frames,
    )
    post_dir = os.path.join(args.out, "post_shift") if args.out else None
    shift = continue_after_shift(
        result.library, result.params, result.opt_state, rc.goal, shift_cfg,
        shifted_recipe=rc.shift, net=rc.net, gae=rc.gae, ppo=rc.ppo,
        vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=post_dir,
    )
    print(f"post-shift success {shift.post_shift.rate:.3f} "
          f"(retraining {shift.retrained or 'nothing'})")
    print(f"recovered success {shift.recovered_rate:.3f}")
    if args.out:
        payload = {
            "pre_shift": pre_rate,
            "post_shift": shift.post_shift.rate,
            "recovered": shift.recovered_rate,
            "retrained": shift.retrained,
        }
        with open(os.path.join(args.out, "ood.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK


def cmd_baseline(args) -> int:
    doc = _resolved_doc(args)
    rc = run_config_from_doc(doc, base_dir=".")
    if args.out:
        _write_snapshot(args.out, doc)
    result = run_baseline(
        rc.goal, rc.train, net=rc.net, gae=rc.gae, ppo=rc.ppo,
        recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=args.out,
    )
    print(f"baseline eval success {result.eval_report.rate:.3f} "
          f"over {result.eval_report.n_episodes} episodes "
          f"({result.frames} frames)")
    return EXIT_OK


def cmd_replay(args) -> int:
    source = os.path.join(args.run, "config.yaml")
    if not os.path.exists(source):
        raise ConfigError(f"{source}: no config snapshot; was this directory "
                          "produced by `train --out`?")
    with open(source, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    rc = run_config_from_doc(doc, base_dir=args.run)
    library, _ = _library(rc)
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(args.out, doc)
    run_curriculum(
        library, rc.goal, rc.train, net=rc.net, gae=rc.gae, ppo=rc.ppo,
        recipe=rc.recipes, vocab=DEFAULT_VOCAB, seed=rc.seed, out_dir=args.out,
    )
    mismatched = []
    for name in ("metrics.csv", "report.json"):
        original = os.path.join(args.run, name)
        replayed = os.path.join(args.out, name)
        if not os.path.exists(original):
            continue
        with open(original, "rb") as fh:
            a = fh.read()
        with open(replayed, "rb") as fh:
            b = fh.read()
        if a != b:
            mismatched.append(name)
    if mismatched:
        print(f"replay diverged: {', '.join(mismatched)}")
        return EXIT_RUNTIME
    print("replay byte-identical")
    return EXIT_OK


# --- argument plumbing -------------------------------------------------------

def _add_common(sub, out_required: bool = False, out_default: Optional[str] = None):
    sub.add_argument("--config", required=True,
                     help="run config path, bundled:<file>, or scenario:<name>")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--workers", type=int, default=None,
                     help="parallel environments (overrides train.n_envs)")
    sub.add_argument("--backend", choices=("mechanical", "llm"), default=None,
                     help="trajectory-analysis backend override")
    sub.add_argument("--out", required=out_required, default=out_default,
                     help="output directory for run artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillchain",
        description="Plan-guided skill curriculum on a crafting gridworld.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("propose", help="parse and validate skill candidates")
    _add_common(p)
    p.set_defaults(func=cmd_propose)

    p = commands.add_parser("validate", help="validate a manifest against the library rules")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = commands.add_parser("plan", help="print the minimum-cost plan to the goal")
    _add_common(p)
    p.set_defaults(func=cmd_plan)

    p = commands.add_parser("train", help="run the full training curriculum")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate saved policies on fresh seeds")
    _add_common(p)
    p.add_argument("--params", required=True, help="params.npz from a training run")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("ablate", help="run one of the ablation sweeps")
    p.add_argument("study", choices=("reset", "graduation", "sharing"))
    _add_common(p, out_required=True)
    p.add_argument("--values", type=float, nargs="*", default=None,
                   help="sweep values (reset and graduation studies)")
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("ood", help="train, shift the recipes, and continue")
    _add_common(p)
    p.set_defaults(func=cmd_ood)

    p = commands.add_parser("baseline", help="train the monolithic no-planner baseline")
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = commands.add_parser("replay", help="re-run a run directory and compare bytes")
    p.add_argument("--run", required=True, help="existing run directory")
    p.add_argument("--out", required=True, help="directory for the replayed run")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoPlanError as exc:
        print(f"no plan: {exc}", file=sys.stderr)
        return EXIT_NO_PLAN
    except Exception as exc:   # pragma: no cover - defensive
        _fail_marker(getattr(args, "out", None), exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
