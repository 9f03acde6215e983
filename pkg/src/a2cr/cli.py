"""Command-line entry point: ``a2cr <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(including a failed theorem check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .collector import PURPOSE_NAMES, Purpose, label_proportions
from .env import generate_world, write_pgm
from .errors import ContractError, NumericalError, ShapeError

log = logging.getLogger("a2cr")

OUTPUT_ROOT_ENV = "A2CR_OUTPUT_ROOT"

CSV_HELP = """\
CSV outputs (all with a header row):
  train        train_report.csv  a2c_frames,reasoner_frames,episodes,mean_return,mean_length,goal_rate,
                                 actor_loss,critic_loss,entropy,reasoner_loss,p_breakout,
                                 p_self_improvement,p_hovering,p_prospect
               episodes.csv      episode,a2c_frames,return,length,goal,dead
               label_history.csv reasoner_frames,a2c_frames,p_breakout,p_self_improvement,p_hovering,p_prospect,
                                 pool_breakout,pool_self_improvement,pool_hovering,pool_prospect
                                 (p_*: share of all labels produced so far; pool_*: current pool contents)
               pool.csv          insert_index,g,se,g_bit,se_bit,category
  explain      steps.csv         episode,step,action,reward,G,S_e,category,instability
               episodes.csv      episode,length,return,goal,dead,pre_failure,max_instability,
                                 p_breakout,p_self_improvement,p_hovering,p_prospect
  saliency     index.csv         episode,step,category,method,file,predicted
  sweep        sweep.csv         k,category,mean,std
  convergence  convergence.csv   label,converged,spread,final
  sim-theorem  theorem.csv       n,label,empirical,analytic,abs_error
"""


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _run_dir(args, default_name: str) -> Path:
    d = Path(args.out) if args.out else _output_root() / default_name
    if d.exists():
        if not args.force:
            raise UsageError(f"run directory {d} already exists (use --force to overwrite)")
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _write_invocation(d: Path, args) -> None:
    snap = {k: v for k, v in vars(args).items() if k != "func"}
    (d / "invocation.json").write_text(json.dumps(snap, indent=2, sort_keys=True, default=str))


def _load(checkpoint):
    from .training import load_checkpoint

    try:
        return load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"checkpoint {checkpoint} is corrupt: {exc}") from None


def _parse_sets(pairs) -> dict:
    from .training import parse_config_text

    return parse_config_text("\n".join(pairs or []))


def _steps_arg(text: str) -> list:
    try:
        steps = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError:
        raise UsageError(f"--steps expects comma-separated integers, got {text!r}") from None
    if not steps or steps[0] < 0:
        raise UsageError("--steps needs non-negative step indices")
    return steps


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    p.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV} or ./runs, plus a per-command name)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import HyperParams, load_config, train

    overrides = _parse_sets(args.set)
    if args.total_frames is not None:
        overrides["total_a2c_frames"] = args.total_frames
    if args.reasoner_frames is not None:
        overrides["total_reasoner_frames"] = args.reasoner_frames
    if args.workers is not None:
        overrides["a2c_workers"] = args.workers
    overrides["seed"] = args.seed
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        hp = load_config(args.config, overrides)
    else:
        hp = HyperParams(**overrides)
    d = _run_dir(args, f"train-seed{hp.seed}-{hp.config_hash()}")
    _write_invocation(d, args)
    _, report = train(hp, d)
    last = report.rows[-1] if report.rows else {}
    print(f"trained {hp.total_a2c_frames} frames; {len(report.episodes)} episodes; run directory {d}")
    if last:
        print(f"final interval: goal_rate={last['goal_rate']:.3f} mean_return={last['mean_return']:.1f}")
    return 0


def cmd_explain(args) -> int:
    from .explain import instability, rollout, write_rows

    policy, reasoner, hp, manifest = _load(args.checkpoint)
    world = generate_world(hp.world_seed, hp.world_length, hp.time_limit)
    d = _run_dir(args, f"explain-seed{args.seed}")
    _write_invocation(d, args)
    steps, summaries = [], []
    for ep in range(args.episodes):
        rng = np.random.default_rng([args.seed, ep])
        tr = rollout(policy, reasoner, world, rng, features=True, hp=hp)
        scores = np.full(len(tr), np.nan)
        if len(tr) >= args.window:
            scores[args.window - 1:] = instability(tr.categories, args.window)
        for t in range(len(tr)):
            steps.append({"episode": ep, "step": t, "action": tr.actions[t], "reward": float(tr.rewards[t]),
                          "G": float(tr.gains[t]), "S_e": float(tr.explorations[t]),
                          "category": PURPOSE_NAMES[tr.categories[t]],
                          "instability": float(scores[t]) if np.isfinite(scores[t]) else ""})
        props = label_proportions(tr.categories)
        finite = scores[np.isfinite(scores)]
        summaries.append({"episode": ep, "length": len(tr), "return": float(np.sum(tr.rewards)),
                          "goal": int(tr.goal), "dead": int(tr.dead),
                          "pre_failure": int(bool(finite.size) and bool((finite > args.threshold).any())),
                          "max_instability": float(finite.max()) if finite.size else "",
                          "p_breakout": float(props[0]), "p_self_improvement": float(props[1]),
                          "p_hovering": float(props[2]), "p_prospect": float(props[3])})
    write_rows(d / "steps.csv", ["episode", "step", "action", "reward", "G", "S_e", "category", "instability"], steps)
    write_rows(d / "episodes.csv", ["episode", "length", "return", "goal", "dead", "pre_failure", "max_instability",
                                    "p_breakout", "p_self_improvement", "p_hovering", "p_prospect"], summaries)
    goals = sum(s["goal"] for s in summaries)
    print(f"{args.episodes} episodes, {len(steps)} steps, {goals} reached the goal; outputs in {d}")
    return 0


def cmd_saliency(args) -> int:
    from .env import ScrollRunner
    from .explain import classify, gradcam_all, jacobian_saliency, write_rows
    from .training import sample_action

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in ("gradcam", "jacobian")]
    if bad or not methods:
        raise UsageError(f"--methods accepts gradcam and/or jacobian, got {args.methods!r}")
    wanted = _steps_arg(args.steps)
    policy, reasoner, hp, _ = _load(args.checkpoint)
    world = generate_world(hp.world_seed, hp.world_length, hp.time_limit)
    env = ScrollRunner(world, hp.frame_stack)
    env.reset()
    rng = np.random.default_rng(args.seed)
    s = env.observation()
    captured = {}
    t = 0
    while t <= wanted[-1]:
        probs, _ = policy.forward(s)
        a = sample_action(rng, probs)
        res = env.step(a)
        s_next = env.observation()
        if t in wanted:
            captured[t] = (s, a, (s_next - s).astype(np.float32))
        s = s_next
        t += 1
        if res.done:
            break
    missing = [w for w in wanted if w not in captured]
    if missing:
        raise UsageError(f"episode ended after {t} steps; cannot export steps {missing}")
    d = _run_dir(args, f"saliency-seed{args.seed}")
    _write_invocation(d, args)
    rows = []
    for step in wanted:
        state, action, delta = captured[step]
        pred, _ = classify(reasoner, delta)
        if "gradcam" in methods:
            for m in gradcam_all(reasoner, delta):
                name = f"step{step:05d}_gradcam_{m.category.name.lower()}.pgm"
                write_pgm(d / name, m.grid)
                rows.append({"episode": 0, "step": step, "category": m.category.label, "method": "gradcam",
                             "file": name, "predicted": int(m.category == pred)})
        if "jacobian" in methods:
            m = jacobian_saliency(policy, state, action)
            name = f"step{step:05d}_jacobian.pgm"
            write_pgm(d / name, m.grid)
            rows.append({"episode": 0, "step": step, "category": pred.label, "method": "jacobian",
                         "file": name, "predicted": 0})
    write_rows(d / "index.csv", ["episode", "step", "category", "method", "file", "predicted"], rows)
    print(f"wrote {len(rows)} maps for {len(wanted)} steps to {d}")
    return 0


def cmd_sweep(args) -> int:
    from .explain import SWEEP_HEADER, entropy_sweep, write_rows

    if args.k_max < 1 or args.episodes_per_k < 1:
        raise UsageError("--k-max and --episodes-per-k must be at least 1")
    policy, reasoner, hp, _ = _load(args.checkpoint)
    seeds = [int(s) for s in args.world_seeds.split(",")] if args.world_seeds else [hp.world_seed]
    worlds = [generate_world(s, hp.world_length, hp.time_limit) for s in seeds]
    d = _run_dir(args, f"sweep-seed{args.seed}")
    _write_invocation(d, args)
    res = entropy_sweep(policy, reasoner, worlds, args.k_max, args.episodes_per_k, args.seed)
    write_rows(d / "sweep.csv", SWEEP_HEADER, res.rows())
    print(f"spearman(k, Breakout)={res.spearman(Purpose.BREAKOUT):+.3f} "
          f"spearman(k, Hovering)={res.spearman(Purpose.HOVERING):+.3f}; outputs in {d}")
    return 0


def _read_history(path) -> np.ndarray:
    import csv

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"history file not found: {path}")
    cols = ["p_breakout", "p_self_improvement", "p_hovering", "p_prospect"]
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(cols) <= set(reader.fieldnames):
            raise UsageError(f"{path} must have columns {','.join(cols)}")
        try:
            return np.array([[float(r[c]) for c in cols] for r in reader], dtype=np.float64).reshape(-1, 4)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None


def cmd_convergence(args) -> int:
    from .explain import convergence, write_rows

    hist = _read_history(args.history)
    window = args.window if args.window else max(1, int(len(hist) * args.window_fraction))
    res = convergence(hist, window, args.epsilon)
    d = _run_dir(args, "convergence")
    _write_invocation(d, args)
    rows = [{"label": PURPOSE_NAMES[i], "converged": int(res.converged[i]), "spread": float(res.spreads[i]),
             "final": float(res.final[i])} for i in range(4)]
    write_rows(d / "convergence.csv", ["label", "converged", "spread", "final"], rows)
    for r in rows:
        print(f"{r['label']:<17} converged={r['converged']} spread={r['spread']:.4f} final={r['final']:.4f}")
    print("training complete" if res.complete else "not converged")
    return 0


def cmd_simtheorem(args) -> int:
    from .explain import THEOREM_HEADER, Distribution, TheoremSimSpec, simulate_theorem, write_rows

    dists = args.dist or ["normal:5,2"]
    try:
        spec = TheoremSimSpec(tuple(Distribution.parse(s) for s in dists), args.capacity, args.n, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = _run_dir(args, f"sim-theorem-seed{args.seed}")
    _write_invocation(d, args)
    res = simulate_theorem(spec)
    write_rows(d / "theorem.csv", THEOREM_HEADER, res.rows(spec.n))
    for lab, e, a in zip(res.labels, res.empirical, res.analytic):
        print(f"{lab:<17} empirical={e:.4f} analytic={a:.4f} abs_error={abs(e - a):.4f}")
    worst = float(res.abs_error.max())
    if worst > args.tolerance:
        print(f"deviation {worst:.4f} exceeds tolerance {args.tolerance}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a2cr", description="Actor-critic agent with a purpose-classifying reasoner.",
        epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=CSV_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train the policy and the reasoner")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--total-frames", type=int, help="A2C frame budget")
    p.add_argument("--reasoner-frames", type=int, help="reasoner frame budget")
    p.add_argument("--workers", type=int, help="number of A2C environments")

    p = add("explain", cmd_explain, "roll out episodes and classify every step")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--window", type=int, default=16, help="instability window")
    p.add_argument("--threshold", type=float, default=0.5, help="pre-failure switch-rate threshold")

    p = add("saliency", cmd_saliency, "export GradCAM and Jacobian maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", default="0", help="comma-separated step indices of the episode")
    p.add_argument("--methods", default="gradcam,jacobian")

    p = add("sweep", cmd_sweep, "entropy-increment sweep of label proportions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-max", type=int, default=19)
    p.add_argument("--episodes-per-k", type=int, default=30)
    p.add_argument("--world-seeds", help="comma-separated world seeds (default: the training world)")

    p = add("convergence", cmd_convergence, "check label-proportion convergence")
    p.add_argument("--history", required=True, help="label_history.csv from a training run")
    p.add_argument("--window", type=int, default=0, help="trailing window length in rows")
    p.add_argument("--window-fraction", type=float, default=0.2, help="window as a fraction of rows when --window is 0")
    p.add_argument("--epsilon", type=float, default=0.05)

    p = add("sim-theorem", cmd_simtheorem, "Monte-Carlo check of pool labelling proportions")
    p.add_argument("--dist", action="append",
                   help="feature distribution, e.g. normal:5,2 exponential:1 uniform:0,1 (give twice for two features)")
    p.add_argument("--capacity", type=int, default=1000)
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--tolerance", type=float, default=0.02)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, KeyError, ValueError, FileNotFoundError, ContractError, ShapeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
