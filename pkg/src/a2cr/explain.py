"""Interpretation and evaluation tools built on a trained policy and reasoner."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .collector import PURPOSE_NAMES, ExploringPool, Purpose, PurposeLabel, label_proportions
from .env import ScrollRunner, WorldSpec
from .errors import ContractError, ShapeError
from .networks import PolicyValueNet, ReasonerNet
from .phase_corr import estimate_shift
from .state_explore import GainInput, gain, state_exploration
from .training import HyperParams, sample_action


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def classify(net: ReasonerNet, delta) -> tuple:
    """Return (Purpose, four sigmoid scores) for one Δs."""
    logits = np.asarray(net.forward(delta), dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("classify takes a single Δs; use classify_batch for batches")
    scores = T._sigmoid_np(logits)
    return Purpose(int(np.argmax(scores))), scores


def classify_batch(net: ReasonerNet, deltas) -> tuple:
    """Vectorised classify: (category indices [N], scores [N, 4])."""
    logits = np.asarray(net.forward(np.asarray(deltas)), dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
    scores = T._sigmoid_np(logits)
    return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    grid: np.ndarray
    category: Optional[Purpose]
    method: str

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise ShapeError("saliency grid must be 2-d")
        if g.min() < 0 or g.max() > 1 + 1e-12:
            raise ContractError("saliency entries must lie in [0, 1]")
        if self.method not in ("gradcam", "jacobian"):
            raise ValueError(f"unknown saliency method {self.method!r}")
        self.grid = g


def max_normalize(grid) -> np.ndarray:
    g = np.maximum(np.asarray(grid, dtype=np.float64), 0.0)
    m = g.max()
    return g / m if m > 0 else g


def bilinear_upsample(grid, height: int, width: int) -> np.ndarray:
    """Resize with half-pixel-centred bilinear interpolation, edges clamped."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def gradcam_all(net: ReasonerNet, delta, classes: Iterable[int] = range(4), layer: str = "conv3") -> list:
    """GradCAM maps for several target classes from a single forward pass."""
    classes = list(classes)
    for c in classes:
        if not 0 <= int(c) < 4:
            raise ValueError(f"target class must be in 0..3, got {c}")
    keep: dict = {}
    logits = net.forward_logits(delta, keep=keep)
    if logits.shape[0] != 1:
        raise ShapeError("gradcam takes a single Δs")
    act = keep[layer]
    out = []
    h, w = net.arch.height, net.arch.width
    for c in classes:
        onehot = np.zeros((1, 4), dtype=logits.dtype)
        onehot[0, int(c)] = 1.0
        target = T.mul(logits, onehot).sum()
        T.backward(target, retain=[act])
        weights = act.grad[0].mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, act.data[0], axes=1), 0.0)
        out.append(SaliencyMap(max_normalize(bilinear_upsample(cam, h, w)), Purpose(int(c)), "gradcam"))
    net.params.zero_grad()
    return out


def gradcam(net: ReasonerNet, delta, target_class: int) -> SaliencyMap:
    return gradcam_all(net, delta, [target_class])[0]


def jacobian_saliency(net: PolicyValueNet, state, action: int) -> SaliencyMap:
    """|d log π(a|s) / d pixel|, maxed over the frame stack."""
    if not 0 <= int(action) < net.arch.num_actions:
        raise ValueError(f"action must be in 0..{net.arch.num_actions - 1}")
    s = np.asarray(state, dtype=T.DEFAULT_DTYPE)
    if s.shape != net.arch.input_shape:
        raise ShapeError(f"expected a single state of shape {net.arch.input_shape}, got {s.shape}")
    x = T.Tensor(s[None], requires_grad=True)
    logits, _ = net.forward_logits(x)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[0, int(action)] = 1.0
    T.mul(T.log_softmax(logits), onehot).sum().backward()
    grid = np.abs(x.grad[0]).max(axis=0)
    net.params.zero_grad()
    return SaliencyMap(max_normalize(grid), None, "jacobian")


def occlusion_effect(net: ReasonerNet, delta, target_class: int, rng: np.random.Generator,
                     fraction: float = 0.1) -> tuple:
    """Change of the target logit when zeroing the top-saliency pixels vs random ones."""
    d = np.asarray(delta, dtype=T.DEFAULT_DTYPE)
    sal = gradcam(net, d, target_class).grid
    k = max(1, int(round(fraction * sal.size)))
    top = np.argsort(sal.ravel())[::-1][:k]
    rand = rng.choice(sal.size, size=k, replace=False)
    base = net.forward(d)[target_class]

    def masked(idx):
        m = np.ones(sal.size, dtype=d.dtype)
        m[idx] = 0.0
        return net.forward(d * m.reshape(sal.shape))[target_class]

    return abs(masked(top) - base), abs(masked(rand) - base)


# ---------------------------------------------------------------------------
# Early-failure instability
# ---------------------------------------------------------------------------

def instability(labels: Sequence, window: int = 16) -> np.ndarray:
    """Sliding fraction of adjacent pairs whose category changes.

    Output position i covers ``labels[i : i + window]``.
    """
    if window < 2:
        raise ContractError("instability window must be at least 2")
    seq = list(labels)
    if len(seq) < window:
        raise ContractError(f"series of length {len(seq)} is shorter than the window {window}")
    switch = np.array([a != b for a, b in zip(seq[:-1], seq[1:])], dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(switch)])
    span = window - 1
    return (csum[span:] - csum[:-span]) / span


def pre_failure_flag(scores, threshold: float = 0.5) -> bool:
    return bool(np.any(np.asarray(scores) > threshold))


def pre_terminal_instability(labels: Sequence, window: int = 16, horizon: int = 64) -> float:
    """Mean instability over the last ``horizon`` steps of an episode (NaN if too short)."""
    tail = list(labels)[-horizon:]
    if len(tail) < window:
        return float("nan")
    return float(instability(tail, window).mean())


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def perturb_policy(probs, k: int, increment: float = 0.001) -> np.ndarray:
    """Add ``increment`` k times to every entry, then renormalize."""
    if k < 0:
        raise ValueError("k must be non-negative")
    p = np.asarray(probs, dtype=np.float64)
    if k == 0:
        return p / p.sum()
    q = p + increment * k
    return q / q.sum()


@dataclass
class EpisodeTrace:
    world_seed: int
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    explorations: list = field(default_factory=list)
    categories: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)
    goal: bool = False
    dead: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def failed(self) -> bool:
        return not self.goal

    def proportions(self) -> np.ndarray:
        return label_proportions(self.categories)


def rollout(policy: PolicyValueNet, reasoner: ReasonerNet, world: WorldSpec, rng: np.random.Generator,
            k: int = 0, features: bool = False, pool: Optional[ExploringPool] = None,
            hp: Optional[HyperParams] = None) -> EpisodeTrace:
    """Play one episode, classifying every step with the reasoner.

    With ``features`` the trace also records G and S_e; with a ``pool`` each
    step is pseudo-labelled as well (label, warm-up flag).  ``hp`` supplies
    w1 and the learner reward transform used for G.
    """
    hp = hp or HyperParams()
    env = ScrollRunner(world, policy.arch.in_channels)
    env.reset()
    s = env.observation()
    probs, v = policy.forward(s)
    trace = EpisodeTrace(world.seed)
    while True:
        a = sample_action(rng, perturb_policy(probs, k))
        res = env.step(a)
        s_next = env.observation()
        if res.done:
            v_next = 0.0
        else:
            probs, v_next = policy.forward(s_next)
        delta = (s_next - s).astype(np.float32)
        cat, scores = classify(reasoner, delta)
        trace.actions.append(a)
        trace.rewards.append(res.reward)
        trace.categories.append(int(cat))
        trace.scores.append(scores)
        if features or pool is not None:
            g = gain(GainInput(v_next, v, hp.learner_reward(res.reward), hp.w1))
            se = state_exploration(s[-1], s_next[-1], estimate_shift(s[-1], s_next[-1])).total
            trace.gains.append(g)
            trace.explorations.append(se)
            if pool is not None:
                entry = pool.label_and_push(g, se)
                trace.pseudo.append((int(entry.label.category), entry.warmup))
        s, v = s_next, v_next
        if res.done:
            trace.goal = bool(res.info["goal"])
            trace.dead = bool(res.info["dead"])
            return trace


def labelled_stream(policy, reasoner, world, n_steps: int, seed: int = 0,
                    hp: Optional[HyperParams] = None) -> tuple:
    """Predicted vs fresh pseudo-labels for ``n_steps`` steps after a full pool warm-up.

    Returns (predicted, pseudo) integer arrays.
    """
    hp = hp or HyperParams()
    capacity = hp.pool_capacity
    rng = np.random.default_rng(seed)
    pool = ExploringPool(capacity, seed=seed + 1)
    pred, truth = [], []
    seen = 0
    while len(pred) < n_steps:
        tr = rollout(policy, reasoner, world, rng, pool=pool, hp=hp)
        for c, (p, _) in zip(tr.categories, tr.pseudo):
            seen += 1
            if seen > capacity:
                pred.append(c)
                truth.append(p)
    return np.array(pred[:n_steps]), np.array(truth[:n_steps])


# ---------------------------------------------------------------------------
# Entropy sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ["k", "category", "mean", "std"]


@dataclass
class SweepResult:
    k_values: np.ndarray
    means: np.ndarray   # [K, 4]
    stds: np.ndarray    # [K, 4]
    per_episode: list   # per k: [E, 4]

    def rows(self) -> list:
        out = []
        for i, k in enumerate(self.k_values):
            for c in Purpose:
                out.append({"k": int(k), "category": c.label, "mean": float(self.means[i, c]),
                            "std": float(self.stds[i, c])})
        return out

    def spearman(self, category: int) -> float:
        return spearman(self.k_values, self.means[:, category])


def entropy_sweep(policy: PolicyValueNet, reasoner: ReasonerNet, worlds: Sequence[WorldSpec], k_max: int = 19,
                  episodes_per_k: int = 30, seed: int = 0) -> SweepResult:
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if episodes_per_k < 1 or not worlds:
        raise ValueError("need at least one episode and one world")
    ks = np.arange(k_max + 1)
    means, stds, per = [], [], []
    for k in ks:
        props = []
        for e in range(episodes_per_k):
            rng = np.random.default_rng([seed, int(k), e])
            tr = rollout(policy, reasoner, worlds[e % len(worlds)], rng, k=int(k))
            props.append(tr.proportions())
        props = np.array(props)
        per.append(props)
        means.append(props.mean(axis=0))
        stds.append(props.std(axis=0))
    return SweepResult(ks, np.array(means), np.array(stds), per)


# ---------------------------------------------------------------------------
# Label-proportion convergence
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceResult:
    converged: np.ndarray   # [4] bool
    spreads: np.ndarray     # [4]
    final: np.ndarray       # [4]

    @property
    def complete(self) -> bool:
        return bool(self.converged.all())


def convergence(history, window: int, epsilon: float = 0.05) -> ConvergenceResult:
    """Per-label check that the max-min spread over the trailing window is below epsilon."""
    h = np.asarray(history, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != 4:
        raise ShapeError(f"history must be [T, 4], got {h.shape}")
    if window < 1 or len(h) < 2 * window:
        raise ContractError(f"history of length {len(h)} is too short for window {window}")
    tail = h[-window:]
    spread = tail.max(axis=0) - tail.min(axis=0)
    return ConvergenceResult(spread < epsilon, spread, h[-1].copy())


def convergence_trace(history, window: int, epsilon: float = 0.05) -> np.ndarray:
    """All-labels-converged flag at every prefix end t ≥ window - 1 (False before)."""
    h = np.asarray(history, dtype=np.float64)
    flags = np.zeros(len(h), dtype=bool)
    for t in range(window - 1, len(h)):
        tail = h[t - window + 1:t + 1]
        flags[t] = bool(((tail.max(axis=0) - tail.min(axis=0)) < epsilon).all())
    return flags


# ---------------------------------------------------------------------------
# Pool labelling simulation
# ---------------------------------------------------------------------------

_FAMILIES = {
    "normal": lambda a: stats.norm(loc=a[0], scale=a[1]),
    "exponential": lambda a: stats.expon(scale=1.0 / a[0]),
    "uniform": lambda a: stats.uniform(loc=a[0], scale=a[1] - a[0]),
}


@dataclass(frozen=True)
class Distribution:
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown distribution {self.family!r}; choose from {sorted(_FAMILIES)}")
        want = {"normal": 2, "exponential": 1, "uniform": 2}[self.family]
        if len(self.params) != want:
            raise ValueError(f"{self.family} takes {want} parameter(s), got {len(self.params)}")
        if self.family == "normal" and self.params[1] <= 0:
            raise ValueError("normal scale must be positive")
        if self.family == "exponential" and self.params[0] <= 0:
            raise ValueError("exponential rate must be positive")
        if self.family == "uniform" and self.params[1] <= self.params[0]:
            raise ValueError("uniform needs low < high")

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        """'normal:5,2', 'exponential:1' or 'uniform:0,1'."""
        try:
            fam, _, rest = text.partition(":")
            params = tuple(float(v) for v in rest.split(",")) if rest else ()
        except ValueError:
            raise ValueError(f"cannot parse distribution {text!r}") from None
        return cls(fam.strip().lower(), params)

    @property
    def frozen(self):
        return _FAMILIES[self.family](self.params)

    def cdf_at_mean(self) -> float:
        d = self.frozen
        return float(d.cdf(d.mean()))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.frozen.rvs(size=n, random_state=rng)


@dataclass(frozen=True)
class TheoremSimSpec:
    features: tuple
    capacity: int = 1000
    n: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if len(self.features) not in (1, 2):
            raise ValueError("simulate_theorem supports one or two features")
        if self.n < 1 or self.capacity < 2:
            raise ValueError("need n >= 1 and capacity >= 2")


@dataclass
class TheoremResult:
    labels: tuple       # names of the reported proportions
    empirical: np.ndarray
    analytic: np.ndarray

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.empirical - self.analytic)

    def rows(self, n: int) -> list:
        return [{"n": n, "label": lab, "empirical": float(e), "analytic": float(a), "abs_error": float(abs(e - a))}
                for lab, e, a in zip(self.labels, self.empirical, self.analytic)]


THEOREM_HEADER = ["n", "label", "empirical", "analytic", "abs_error"]


def simulate_theorem(spec: TheoremSimSpec) -> TheoremResult:
    """Label i.i.d. feature draws through a real Exploring Pool and compare with the limits.

    A bit is 1 when the draw reaches the half-sample mean, so its frequency
    tends to 1 - F(μ) and the frequency of 0 tends to F(μ).  With one feature
    both frequencies are reported (``label_0`` then ``label_1``); with two, the
    four joint categories are compared with the product of the marginals.
    """
    rng = np.random.default_rng(spec.seed)
    draws = [d.sample(rng, spec.n) for d in spec.features]
    pool = ExploringPool(spec.capacity, seed=int(rng.integers(2**32)), warmup=0)
    second = draws[1] if len(draws) == 2 else np.zeros(spec.n)
    counts = np.zeros(4)
    ones = 0
    for g, se in zip(draws[0], second):
        lab = pool.label_and_push(g, se).label
        counts[lab.category] += 1
        ones += lab.g_bit
    f = [d.cdf_at_mean() for d in spec.features]
    if len(f) == 1:
        p1 = ones / spec.n
        return TheoremResult(("label_0", "label_1"), np.array([1.0 - p1, p1]), np.array([f[0], 1.0 - f[0]]))
    analytic = np.empty(4)
    for c in Purpose:
        bits = PurposeLabel.from_category(c)
        analytic[c] = ((1 - f[0] if bits.g_bit else f[0]) * (1 - f[1] if bits.se_bit else f[1]))
    return TheoremResult(PURPOSE_NAMES, counts / spec.n, analytic)


# ---------------------------------------------------------------------------
# Statistics helpers
# ---------------------------------------------------------------------------

def spearman(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(stats.spearmanr(x, y)[0])


def mann_whitney_greater(a, b) -> tuple:
    """One-sided test that ``a`` tends to exceed ``b``; returns (U, p)."""
    res = stats.mannwhitneyu(np.asarray(a, float), np.asarray(b, float), alternative="greater")
    return float(res.statistic), float(res.pvalue)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=header)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
