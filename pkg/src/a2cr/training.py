"""Synchronous A2C training with a Reasoner collector running alongside.

A2C workers are environment instances stepped in lock-step with one batched
forward pass per tick; every ``batch_size`` transitions trigger one update of
the shared policy/value parameters.  Once ``reasoner_start_fraction`` of the
A2C frame budget has elapsed, collector agents (their own environments, a
read-only snapshot of the policy taken at each episode start) label every
step they take and the reasoner is trained on minibatches drawn from the
Exploring Pool.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .collector import ExploringPool, PoolEntry, PurposeLabel, bce_with_logits
from .env import NUM_ACTIONS, ScrollRunner, WorldSpec, generate_world
from .errors import ContractError, NumericalError
from .networks import Architecture, PolicyValueNet, ReasonerNet
from .phase_corr import estimate_shift
from .state_explore import GainInput, gain, state_exploration

log = logging.getLogger(__name__)


@dataclass
class HyperParams:
    gamma: float = 0.9
    rho1: float = 0.5
    rho2: float = 0.5
    w1: float = 0.5
    reward_scale: float = 1.0
    reward_clip: float = 15.0
    max_grad_norm: float = 0.0
    lr_a2c: float = 2.5e-4
    lr_reasoner: float = 2.5e-4
    batch_size: int = 16
    pool_capacity: int = 1000
    a2c_workers: int = 4
    reasoner_workers: int = 2
    total_a2c_frames: int = 2_000_000
    total_reasoner_frames: int = 400_000
    reasoner_start_fraction: float = 0.8
    time_limit: int = 500
    world_length: int = 80
    world_seed: int = 0
    frame_stack: int = 3
    num_actions: int = NUM_ACTIONS
    optimizer: str = "adam"
    loss_mode: str = "full"
    pool_warmup: int = 10
    report_interval: int = 20_000
    checkpoint_interval: int = 200_000
    history_interval: int = 1_000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.reward_clip < 0:
            raise ValueError("reward_clip must be non-negative (0 disables clipping)")
        if self.max_grad_norm < 0:
            raise ValueError("max_grad_norm must be non-negative (0 disables clipping)")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("rho1 and rho2 must be non-negative")
        if not 0.0 <= self.w1 <= 1.0:
            raise ValueError(f"w1 must be in [0, 1], got {self.w1}")
        if not 0.0 <= self.reasoner_start_fraction <= 1.0:
            raise ValueError("reasoner_start_fraction must be in [0, 1]")
        for name in ("batch_size", "pool_capacity", "a2c_workers", "reasoner_workers",
                     "time_limit", "frame_stack", "report_interval", "checkpoint_interval",
                     "history_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.total_a2c_frames < 0 or self.total_reasoner_frames < 0:
            raise ValueError("frame budgets must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.loss_mode not in ("full", "literal"):
            raise ValueError(f"loss_mode must be 'full' or 'literal', got {self.loss_mode!r}")

    def learner_reward(self, reward: float) -> float:
        """Reward as seen by the learner: scaled, then clipped to ±reward_clip."""
        r = reward * self.reward_scale
        if self.reward_clip > 0:
            r = min(max(r, -self.reward_clip), self.reward_clip)
        return r

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "HyperParams":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is int or kind == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    types = {f.name: f.type for f in dataclasses.fields(HyperParams)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise KeyError(f"unknown config key {key!r} (line {lineno})")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path, overrides: Optional[dict] = None) -> HyperParams:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update(overrides or {})
    return HyperParams(**values)


@dataclass
class Transition:
    s_t: np.ndarray
    a_t: int
    r_t: float
    s_next: Optional[np.ndarray]
    done: bool
    v_t: float
    v_next: Optional[float]
    log_prob: float
    entropy: float


def td_targets(rewards, v_next, dones, gamma: float) -> np.ndarray:
    """y = r + γ·v(s')·(1 - done)."""
    r = np.asarray(rewards, dtype=np.float64)
    vn = np.asarray(v_next, dtype=np.float64)
    mask = 1.0 - np.asarray(dones, dtype=np.float64)
    return r + gamma * vn * mask


def a2c_losses(net: PolicyValueNet, states, actions, targets, rho1: float, rho2: float) -> tuple:
    """Build the A2C loss graph; returns (total, report dict, advantages)."""
    logits, values = net.forward_logits(np.asarray(states, dtype=np.float32))
    logp = T.log_softmax(logits)
    probs = T.softmax(logits)
    n = len(actions)
    onehot = np.zeros((n, net.arch.num_actions), dtype=np.float32)
    onehot[np.arange(n), actions] = 1.0
    y = np.asarray(targets, dtype=np.float32)
    # advantage enters the actor term as a constant
    delta = (y - values.data).astype(np.float32)
    chosen = T.mul(logp, onehot).sum(axis=1)
    actor = T.mul(chosen, -delta).mean()
    critic = T.square(T.add(T.neg(values), y)).mean()
    entropy = T.neg(T.mul(probs, logp).sum(axis=1)).mean()
    total = actor + critic * rho1 - entropy * rho2
    report = {"actor": actor.item(), "critic": critic.item(), "entropy": entropy.item(), "total": total.item()}
    return total, report, delta


def a2c_update(batch, net: PolicyValueNet, optimizer, hp: HyperParams) -> dict:
    """One joint optimizer step on the policy/value parameters."""
    if not batch:
        raise ContractError("a2c_update needs a non-empty batch")
    if any(t.v_next is None for t in batch):
        raise ContractError("every transition needs v_next before updating")
    states = np.stack([t.s_t for t in batch])
    actions = np.array([t.a_t for t in batch])
    y = td_targets([hp.learner_reward(t.r_t) for t in batch], [t.v_next for t in batch], [t.done for t in batch], hp.gamma)
    net.params.zero_grad()
    total, report, _ = a2c_losses(net, states, actions, y, hp.rho1, hp.rho2)
    if not np.isfinite(total.data).all():
        raise NumericalError(f"non-finite A2C loss {report}")
    total.backward()
    sq = 0.0
    for name, p in net.params.items():
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient for {name}")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(sq)
    if hp.max_grad_norm > 0 and norm > hp.max_grad_norm:
        for _, p in net.params.items():
            p.grad *= hp.max_grad_norm / norm
    report["grad_norm"] = norm
    optimizer.step()
    return report


def reasoner_update(samples, net: ReasonerNet, optimizer, hp: HyperParams) -> float:
    """One optimizer step on the reasoner from (Δs, one-hot label) pairs."""
    if not samples:
        raise ContractError("reasoner_update needs a non-empty batch")
    x = np.stack([s[0] for s in samples]).astype(np.float32)
    y = np.stack([s[1].one_hot() if isinstance(s[1], PurposeLabel) else s[1] for s in samples]).astype(np.float32)
    net.params.zero_grad()
    loss = bce_with_logits(net.forward_logits(x), y, hp.loss_mode)
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite reasoner loss")
    loss.backward()
    optimizer.step()
    return loss.item()


def sample_action(rng: np.random.Generator, probs: np.ndarray) -> int:
    c = np.cumsum(probs, dtype=np.float64)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


class Collector:
    """One reasoner agent: its own environment and a policy snapshot."""

    def __init__(self, world: WorldSpec, source: PolicyValueNet, hp: HyperParams, rng: np.random.Generator):
        self.env = ScrollRunner(world, hp.frame_stack)
        self.source = source
        self.snapshot = PolicyValueNet(source.arch)
        self.hp = hp
        self.rng = rng
        self.obs = None
        self.probs = None
        self.value = None
        self.episode_return = 0.0

    def _start_episode(self) -> None:
        self.env.reset()
        self.snapshot.params.load_arrays(self.source.params.arrays())
        self.obs = self.env.observation()
        self.probs, self.value = self.snapshot.forward(self.obs)
        self.episode_return = 0.0

    def step(self, pool: ExploringPool) -> tuple:
        """Act once, label the transition and push it; returns (entry, (Δs, label), done)."""
        if self.obs is None:
            self._start_episode()
        s_t, v_t = self.obs, self.value
        a = sample_action(self.rng, self.probs)
        res = self.env.step(a)
        s_next = self.env.observation()
        if res.done:
            v_next, probs_next = 0.0, None
        else:
            probs_next, v_next = self.snapshot.forward(s_next)
        delta = (s_next - s_t).astype(np.float32)
        # values are learned on scaled rewards, so G mixes like with like
        g = gain(GainInput(v_next=v_next, v_prev=v_t, reward=self.hp.learner_reward(res.reward), w1=self.hp.w1))
        prev_frame, next_frame = s_t[-1], s_next[-1]
        se = state_exploration(prev_frame, next_frame, estimate_shift(prev_frame, next_frame)).total
        entry = pool.label_and_push(g, se, payload=delta)
        self.episode_return += res.reward
        if res.done:
            self.obs = None
        else:
            self.obs, self.probs, self.value = s_next, probs_next, v_next
        return entry, (delta, entry.label), res.done


def reasoner_collect_step(collector: Collector, pool: ExploringPool) -> tuple:
    entry, sample, _ = collector.step(pool)
    return entry, sample


REPORT_HEADER = [
    "a2c_frames", "reasoner_frames", "episodes", "mean_return", "mean_length", "goal_rate",
    "actor_loss", "critic_loss", "entropy", "reasoner_loss",
    "p_breakout", "p_self_improvement", "p_hovering", "p_prospect",
]
EPISODE_HEADER = ["episode", "a2c_frames", "return", "length", "goal", "dead"]
# p_*: share of every label produced so far; pool_*: current Exploring Pool contents
HISTORY_HEADER = ["reasoner_frames", "a2c_frames", "p_breakout", "p_self_improvement", "p_hovering", "p_prospect",
                  "pool_breakout", "pool_self_improvement", "pool_hovering", "pool_prospect"]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    label_history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def add_row(self, row: dict) -> None:
        if self.rows and row["a2c_frames"] < self.rows[-1]["a2c_frames"]:
            raise ContractError("report rows must have non-decreasing frame counts")
        self.rows.append(row)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        _write_csv(out / "train_report.csv", REPORT_HEADER, self.rows)
        _write_csv(out / "episodes.csv", EPISODE_HEADER, self.episodes)
        _write_csv(out / "label_history.csv", HISTORY_HEADER, self.label_history)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(r.get(h, "")) for h in header])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_checkpoint(ckpt_dir, policy: PolicyValueNet, reasoner: ReasonerNet, hp: HyperParams,
                    a2c_frames: int, reasoner_frames: int, extra: Optional[dict] = None) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    T.save_params(policy.params, d / "policy_value.a2cr")
    T.save_params(reasoner.params, d / "reasoner.a2cr")
    manifest = {
        "a2c_frames": a2c_frames,
        "reasoner_frames": reasoner_frames,
        "seed": hp.seed,
        "world_seed": hp.world_seed,
        "world_length": hp.world_length,
        "time_limit": hp.time_limit,
        "frame_stack": hp.frame_stack,
        "config_hash": hp.config_hash(),
        "config": dataclasses.asdict(hp),
    }
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_checkpoint(ckpt_dir) -> tuple:
    """Return (policy net, reasoner net, hyperparameters, manifest)."""
    d = Path(ckpt_dir)
    for name in ("manifest.json", "policy_value.a2cr", "reasoner.a2cr"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"checkpoint {d} is missing {name}")
    manifest = json.loads((d / "manifest.json").read_text())
    hp = HyperParams(**manifest["config"])
    arch = Architecture(in_channels=hp.frame_stack, num_actions=hp.num_actions)
    policy, reasoner = PolicyValueNet(arch), ReasonerNet(arch)
    policy.params.load_arrays(T.load_params(d / "policy_value.a2cr"))
    reasoner.params.load_arrays(T.load_params(d / "reasoner.a2cr"))
    return policy, reasoner, hp, manifest


class Trainer:
    """Owns the networks, optimizers, environments and bookkeeping of one run."""

    def __init__(self, hp: HyperParams, out_dir=None):
        self.hp = hp
        self.out_dir = Path(out_dir) if out_dir is not None else None
        arch = Architecture(in_channels=hp.frame_stack, num_actions=hp.num_actions)
        self.world = generate_world(hp.world_seed, hp.world_length, hp.time_limit)
        self.policy = PolicyValueNet(arch, seed=hp.seed)
        self.reasoner = ReasonerNet(arch, seed=hp.seed + 1)
        self.opt_a2c = T.make_optimizer(hp.optimizer, self.policy.params, hp.lr_a2c)
        self.opt_reasoner = T.make_optimizer(hp.optimizer, self.reasoner.params, hp.lr_reasoner)
        ss = np.random.SeedSequence(hp.seed)
        act_seed, col_seed, pool_seed, batch_seed = ss.spawn(4)
        self.rng_act = np.random.default_rng(act_seed)
        self.rng_batch = np.random.default_rng(batch_seed)
        self.pool = ExploringPool(hp.pool_capacity, seed=pool_seed, warmup=hp.pool_warmup)
        self.envs = [ScrollRunner(self.world, hp.frame_stack) for _ in range(hp.a2c_workers)]
        col_rngs = [np.random.default_rng(s) for s in col_seed.spawn(hp.reasoner_workers)]
        self.collectors = [Collector(self.world, self.policy, hp, r) for r in col_rngs]
        self.report = TrainReport()
        self.a2c_frames = 0
        self.reasoner_frames = 0
        self._since_reasoner_update = 0
        self.label_counts = np.zeros(4, dtype=np.int64)
        self._interval = _IntervalStats()
        self._t0 = time.time()

    # ------------------------------------------------------------------
    @property
    def reasoner_start_frame(self) -> int:
        return int(round(self.hp.reasoner_start_fraction * self.hp.total_a2c_frames))

    def reasoner_target(self) -> int:
        """Reasoner frames due by now, pacing the collector alongside A2C."""
        hp = self.hp
        start = self.reasoner_start_frame
        if self.a2c_frames < start:
            return 0
        span = hp.total_a2c_frames - start
        if span <= 0 or self.a2c_frames >= hp.total_a2c_frames:
            return hp.total_reasoner_frames
        return int(hp.total_reasoner_frames * (self.a2c_frames - start) / span)

    def run(self) -> TrainReport:
        hp = self.hp
        obs = np.stack([e.reset()[1].array() for e in self.envs])
        ep_return = np.zeros(len(self.envs))
        ep_len = np.zeros(len(self.envs), dtype=int)
        pending: list = []
        batch: list = []
        next_report = hp.report_interval
        next_ckpt = hp.checkpoint_interval
        self._last_good = None

        while self.a2c_frames < hp.total_a2c_frames:
            probs, values = self.policy.forward(obs)
            for i, tr in pending:
                tr.v_next = 0.0 if tr.done else float(values[i])
                batch.append(tr)
            pending = []
            if len(batch) >= hp.batch_size:
                self._a2c_update(batch[:hp.batch_size])
                batch = batch[hp.batch_size:]

            new_obs = np.empty_like(obs)
            for i, env in enumerate(self.envs):
                p = probs[i]
                a = sample_action(self.rng_act, p)
                res = env.step(a)
                ep_return[i] += res.reward
                ep_len[i] += 1
                nxt = env.observation()
                tr = Transition(obs[i], a, res.reward, nxt, res.done, float(values[i]), None,
                                float(np.log(max(p[a], 1e-30))), float(-(p * np.log(np.maximum(p, 1e-30))).sum()))
                pending.append((i, tr))
                if res.done:
                    self.report.episodes.append({
                        "episode": len(self.report.episodes), "a2c_frames": self.a2c_frames + i + 1,
                        "return": float(ep_return[i]), "length": int(ep_len[i]),
                        "goal": int(res.info["goal"]), "dead": int(res.info["dead"])})
                    self._interval.episode(ep_return[i], ep_len[i], res.info["goal"])
                    ep_return[i], ep_len[i] = 0.0, 0
                    nxt = env.reset()[1].array()
                new_obs[i] = nxt
            obs = new_obs
            self.a2c_frames += len(self.envs)

            self._advance_reasoner(self.reasoner_target())
            if self.a2c_frames >= next_report:
                self._emit_row()
                next_report += hp.report_interval
            if self.a2c_frames >= next_ckpt:
                self._checkpoint(f"frames_{self.a2c_frames:09d}")
                next_ckpt += hp.checkpoint_interval

        self._advance_reasoner(hp.total_reasoner_frames)
        self._emit_row()
        self._checkpoint("final")
        if self.out_dir is not None:
            self.report.write(self.out_dir)
            self.pool.to_csv(self.out_dir / "pool.csv")
        return self.report

    # ------------------------------------------------------------------
    def _a2c_update(self, batch) -> None:
        try:
            rep = a2c_update(batch, self.policy, self.opt_a2c, self.hp)
        except NumericalError:
            self._checkpoint("last_good", params_only_if_valid=True)
            raise
        self._interval.a2c(rep)

    def _advance_reasoner(self, target: int) -> None:
        hp = self.hp
        while self.reasoner_frames < target:
            for col in self.collectors:
                entry, _, done = col.step(self.pool)
                self.label_counts[entry.label.category] += 1
                self.reasoner_frames += 1
                self._since_reasoner_update += 1
                if self.reasoner_frames % hp.history_interval == 0:
                    self.report.label_history.append(self._history_row())
            while self._since_reasoner_update >= hp.batch_size:
                self._since_reasoner_update -= hp.batch_size
                idx = self.pool.trainable_indices()
                if len(idx) < hp.batch_size:
                    continue
                pick = self.rng_batch.choice(len(idx), size=hp.batch_size, replace=False)
                samples = [(self.pool.payloads[idx[j]], self.pool.entries[idx[j]].label) for j in pick]
                self._interval.reasoner(reasoner_update(samples, self.reasoner, self.opt_reasoner, hp))

    def _history_row(self) -> dict:
        c = self.label_counts / self.label_counts.sum()
        p = self.pool.proportions()
        return {"reasoner_frames": self.reasoner_frames, "a2c_frames": self.a2c_frames,
                "p_breakout": c[0], "p_self_improvement": c[1], "p_hovering": c[2], "p_prospect": c[3],
                "pool_breakout": p[0], "pool_self_improvement": p[1], "pool_hovering": p[2], "pool_prospect": p[3]}

    def _emit_row(self) -> None:
        row = self._interval.flush()
        props = self.pool.proportions() if len(self.pool) else np.full(4, np.nan)
        row.update({"a2c_frames": self.a2c_frames, "reasoner_frames": self.reasoner_frames,
                    "p_breakout": props[0], "p_self_improvement": props[1],
                    "p_hovering": props[2], "p_prospect": props[3]})
        self.report.add_row(row)
        log.info("[%.0fs] frames=%d eps=%s ret=%.1f goal=%.2f H=%.3f Lr=%s", time.time() - self._t0, self.a2c_frames, row["episodes"],
                 row["mean_return"], row["goal_rate"], row["entropy"], row["reasoner_loss"])

    def _checkpoint(self, name: str, params_only_if_valid: bool = False) -> None:
        if self.out_dir is None:
            return
        if params_only_if_valid and not all(np.isfinite(p.data).all() for _, p in self.policy.params.items()):
            return
        d = save_checkpoint(self.out_dir / "checkpoints" / name, self.policy, self.reasoner, self.hp,
                            self.a2c_frames, self.reasoner_frames)
        self.report.checkpoints.append(str(d))


class _IntervalStats:
    def __init__(self):
        self.reset()

    def reset(self):
        self.returns, self.lengths, self.goals = [], [], []
        self.losses = {"actor": [], "critic": [], "entropy": []}
        self.r_losses = []

    def episode(self, ret, length, goal):
        self.returns.append(float(ret))
        self.lengths.append(int(length))
        self.goals.append(bool(goal))

    def a2c(self, rep):
        for k in self.losses:
            self.losses[k].append(rep[k])

    def reasoner(self, loss):
        self.r_losses.append(loss)

    def flush(self) -> dict:
        def m(xs):
            return float(np.mean(xs)) if xs else float("nan")

        row = {"episodes": len(self.returns), "mean_return": m(self.returns), "mean_length": m(self.lengths),
               "goal_rate": m(self.goals), "actor_loss": m(self.losses["actor"]),
               "critic_loss": m(self.losses["critic"]), "entropy": m(self.losses["entropy"]),
               "reasoner_loss": m(self.r_losses)}
        self.reset()
        return row


def train(hp: HyperParams, out_dir=None) -> tuple:
    """Run the dual loop; returns (trainer, report)."""
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(hp.to_text())
    trainer = Trainer(hp, out_dir)
    report = trainer.run()
    return trainer, report
