"""ScrollRunner: a deterministic pixel side-scroller.

The camera only ever moves right and never moves vertically, so two
consecutive frames differ by a pure horizontal translation of the world
plus whatever sprites moved.  Positions and velocities are integers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

TILE = 8
AGENT_W = 6
AGENT_H = 8
DUCK_H = 5
WALK_SPEED = 2
RUN_SPEED = 3
JUMP_IMPULSE = 6
GRAVITY = 1
MAX_FALL = 6

PROGRESS_SCALE = 0.5
PROGRESS_CLIP = 2
COIN_BONUS = 50.0
GOAL_BONUS = 500.0
DEATH_PENALTY = 100.0
TIME_COST = 0.1

BACKGROUND, GROUND, COIN, ENEMY, AGENT, GOAL = 0.1, 0.6, 0.9, 0.8, 1.0, 0.4

# column kinds
K_GROUND, K_GAP, K_COIN, K_ENEMY, K_GOAL = "#", "_", "o", "E", "G"

ACTIONS = (
    "noop", "left", "right", "jump", "left+jump", "right+jump",
    "run-left", "run-right", "run-left+jump", "run-right+jump", "duck", "duck+jump",
)
NUM_ACTIONS = len(ACTIONS)

# action index -> (direction, run, jump, duck)
_ACTION_TABLE = (
    (0, False, False, False), (-1, False, False, False), (1, False, False, False),
    (0, False, True, False), (-1, False, True, False), (1, False, True, False),
    (-1, True, False, False), (1, True, False, False), (-1, True, True, False),
    (1, True, True, False), (0, False, False, True), (0, False, True, True),
)


def _is_pow2(n: int) -> bool:
    return n >= 2 and n & (n - 1) == 0


@dataclass
class WorldSpec:
    """Column layout of one level plus rendering and physics constants."""

    columns: str
    seed: int = 0
    width: int = 64
    height: int = 64
    tile: int = TILE
    ground_rows: int = 2
    coin_row: int = 4
    time_limit: int = 500

    def __post_init__(self):
        if not (_is_pow2(self.width) and _is_pow2(self.height)):
            raise ValueError("frame width and height must be powers of two")
        if len(self.columns) < 6:
            raise ValueError("a world needs at least 6 columns")
        if self.columns.count(K_GOAL) != 1 or self.columns[-1] != K_GOAL:
            raise ValueError("exactly one goal column is required, at the last tile")
        if any(c != K_GROUND for c in self.columns[:5]):
            raise ValueError("the first 5 columns must be plain ground")

    @property
    def length(self) -> int:
        return len(self.columns)

    @property
    def pixel_width(self) -> int:
        return self.length * self.tile

    @property
    def tile_rows(self) -> int:
        return self.height // self.tile

    @property
    def ground_top(self) -> int:
        return self.height - self.ground_rows * self.tile

    def has_ground(self, col: int) -> bool:
        return self.columns[col] != K_GAP

    def to_text(self) -> str:
        """Plain-text tile map: one character per tile, one line per tile row."""
        rows = [["."] * self.length for _ in range(self.tile_rows)]
        ground_start = self.tile_rows - self.ground_rows
        for x, kind in enumerate(self.columns):
            if kind != K_GAP:
                for r in range(ground_start, self.tile_rows):
                    rows[r][x] = "#"
            if kind == K_COIN:
                rows[self.coin_row][x] = "o"
            elif kind == K_ENEMY:
                rows[ground_start - 1][x] = "E"
            elif kind == K_GOAL:
                for r in range(ground_start - 4, ground_start):
                    rows[r][x] = "G"
        header = f"# scrollrunner seed={self.seed} width={self.width} height={self.height} time_limit={self.time_limit}"
        return "\n".join([header] + ["".join(r) for r in rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WorldSpec":
        lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
        meta = {}
        if lines and lines[0].startswith("#"):
            for tok in lines[0][1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = int(v)
            lines = lines[1:]
        if not lines or len({len(ln) for ln in lines}) != 1:
            raise ValueError("tile map rows must be non-empty and equal length")
        kinds = []
        for x in range(len(lines[0])):
            col = "".join(ln[x] for ln in lines)
            if "G" in col:
                kinds.append(K_GOAL)
            elif "E" in col:
                kinds.append(K_ENEMY)
            elif "o" in col:
                kinds.append(K_COIN)
            elif "#" in col:
                kinds.append(K_GROUND)
            else:
                kinds.append(K_GAP)
        height = meta.get("height", len(lines) * TILE)
        return cls(columns="".join(kinds), seed=meta.get("seed", 0), width=meta.get("width", 64),
                   height=height, time_limit=meta.get("time_limit", 500))


def generate_world(seed: int, length: int = 80, time_limit: int = 500, max_gap: int = 3) -> WorldSpec:
    """Procedural level: deterministic in ``seed``, always completable.

    Gaps are at most ``max_gap`` tiles wide (a walking jump clears 3) and
    every hazard is followed by at least five tiles of plain ground.  Hazards
    are dense enough that a right-biased random policy almost never finishes.
    """
    if not 1 <= max_gap <= 3:
        raise ValueError("max_gap must be between 1 and 3 tiles")
    if length < 20:
        raise ValueError("world length must be at least 20 tiles")
    rng = np.random.default_rng(seed)
    cols = [K_GROUND] * length
    cols[-1] = K_GOAL
    last = length - 4  # keep a landing strip before the goal
    i = 7
    while i < last:
        r = rng.random()
        if r < 0.25:
            w = int(rng.integers(1, max_gap + 1))
            if i + w + 5 > last:
                break
            for j in range(w):
                cols[i + j] = K_GAP
            i += w + 5 + int(rng.integers(0, 4))
        elif r < 0.40:
            cols[i] = K_ENEMY
            i += 6 + int(rng.integers(0, 4))
        elif r < 0.54:
            cols[i] = K_COIN
            i += 1
        else:
            i += 1
    plain = [j for j in range(7, last - 5)
             if all(cols[k] in (K_GROUND, K_COIN) for k in range(j - 5, j + 6)) and cols[j] == K_GROUND]
    if K_GAP not in cols and plain:
        j = plain[int(rng.integers(len(plain)))]
        cols[j] = K_GAP
    while cols.count(K_COIN) < 3:
        free = [j for j in range(6, last) if cols[j] == K_GROUND and cols[j - 1] != K_GAP]
        if not free:
            break
        cols[free[int(rng.integers(len(free)))]] = K_COIN
    return WorldSpec(columns="".join(cols), seed=seed, time_limit=time_limit)


@dataclass
class EnvState:
    x: int
    y: int
    vy: int = 0
    scroll: int = 0
    coins: set = field(default_factory=set)
    steps: int = 0
    alive: bool = True
    on_ground: bool = True
    ducking: bool = False
    done: bool = False
    reached_goal: bool = False


@dataclass
class StepResult:
    frame: np.ndarray
    reward: float
    done: bool
    info: dict


class FrameStack:
    """The k most recent frames, oldest first."""

    def __init__(self, k: int, first: np.ndarray):
        self.k = k
        self.frames = deque([first] * k, maxlen=k)

    def push(self, frame: np.ndarray) -> None:
        if frame.shape != self.frames[-1].shape:
            raise ValueError(f"frame shape {frame.shape} != {self.frames[-1].shape}")
        self.frames.append(frame)

    def array(self) -> np.ndarray:
        return np.stack(self.frames)

    @property
    def latest(self) -> np.ndarray:
        return self.frames[-1]


def _world_image(world: WorldSpec) -> np.ndarray:
    """Static layer: textured background, ground, enemies and goal pole."""
    rng = np.random.default_rng(10_007 + world.seed)
    h, w, t = world.height, world.pixel_width, world.tile
    img = np.full((h, w), BACKGROUND, dtype=np.float32)
    # aperiodic speckle gives phase correlation something to lock onto
    specks = rng.random((h, w)) < 0.3
    img[specks] = rng.uniform(0.12, 0.3, size=int(specks.sum())).astype(np.float32)
    gt = world.ground_top
    ground_tex = GROUND + rng.uniform(-0.08, 0.08, size=(h - gt, w)).astype(np.float32)
    for c, kind in enumerate(world.columns):
        x0 = c * t
        if kind != K_GAP:
            img[gt:, x0:x0 + t] = ground_tex[:, x0:x0 + t]
        if kind == K_ENEMY:
            img[gt - 7:gt, x0 + 1:x0 + t - 1] = ENEMY
        elif kind == K_GOAL:
            img[gt - 4 * t:gt, x0 + 3:x0 + 5] = GOAL
    return img


class ScrollRunner:
    """One environment instance: owns its world, physics state and frames."""

    def __init__(self, world: WorldSpec, frame_stack: int = 3):
        self.world = world
        self.k = frame_stack
        self._img = _world_image(world)
        t = world.tile
        self._coin_cols = [c for c, kind in enumerate(world.columns) if kind == K_COIN]
        self._enemy_boxes = [(c * t + 1, world.ground_top - 7, c * t + t - 1, world.ground_top)
                             for c, kind in enumerate(world.columns) if kind == K_ENEMY]
        self.scroll_margin = int(0.4 * world.width)
        self.state: EnvState | None = None
        self.stack: FrameStack | None = None

    # ------------------------------------------------------------------
    def reset(self, seed: int = 0) -> tuple:
        """Spawn at the start of the level.

        The dynamics are deterministic, so ``seed`` does not change the
        result; it is accepted so all episode entry points share one shape.
        """
        self.state = EnvState(x=TILE, y=self.world.ground_top - AGENT_H)
        frame = self.render()
        self.stack = FrameStack(self.k, frame)
        return self.state, self.stack

    def observation(self) -> np.ndarray:
        return self.stack.array()

    def _supported(self, x: int) -> bool:
        t = self.world.tile
        c0, c1 = x // t, (x + AGENT_W - 1) // t
        return any(self.world.has_ground(c) for c in range(c0, min(c1, self.world.length - 1) + 1))

    def _box(self, st: EnvState) -> tuple:
        h = DUCK_H if st.ducking else AGENT_H
        return st.x, st.y + AGENT_H - h, st.x + AGENT_W, st.y + AGENT_H

    def step(self, action: int) -> StepResult:
        st = self.state
        if st is None or st.done:
            raise ContractError("step() called on a finished episode; call reset() first")
        if not 0 <= action < NUM_ACTIONS:
            raise ValueError(f"action must be in [0, {NUM_ACTIONS}), got {action}")
        world = self.world
        gt = world.ground_top
        direction, run, jump, duck = _ACTION_TABLE[action]
        x_before = st.x

        feet = st.y + AGENT_H
        trapped = feet > gt
        st.ducking = duck and st.on_ground
        vx = 0 if (trapped or st.ducking) else direction * (RUN_SPEED if run else WALK_SPEED)
        st.x = int(np.clip(st.x + vx, st.scroll, world.pixel_width - AGENT_W))

        if st.on_ground and not self._supported(st.x):
            st.on_ground = False
        if st.on_ground and jump:
            st.vy = -JUMP_IMPULSE
            st.on_ground = False
        if not st.on_ground:
            new_y = st.y + st.vy
            st.vy = min(st.vy + GRAVITY, MAX_FALL)
            if feet <= gt <= new_y + AGENT_H and st.vy > 0 and self._supported(st.x):
                st.y, st.vy, st.on_ground = gt - AGENT_H, 0, True
            else:
                st.y = new_y

        reward = -TIME_COST
        if st.y > gt:
            st.alive = False
        else:
            x0, y0, x1, y1 = self._box(st)
            for ex0, ey0, ex1, ey1 in self._enemy_boxes:
                if x0 < ex1 and ex0 < x1 and y0 < ey1 and ey0 < y1:
                    st.alive = False
                    break
        if st.alive:
            reward += PROGRESS_SCALE * float(np.clip(st.x - x_before, -PROGRESS_CLIP, PROGRESS_CLIP))
            reward += COIN_BONUS * self._collect_coins(st)
            if st.x + AGENT_W > (world.length - 1) * world.tile:
                st.reached_goal = True
                reward += GOAL_BONUS
        else:
            reward -= DEATH_PENALTY

        st.scroll = max(st.scroll, min(st.x - self.scroll_margin, world.pixel_width - world.width))
        st.steps += 1
        st.done = (not st.alive) or st.reached_goal or st.steps >= world.time_limit
        frame = self.render()
        self.stack.push(frame)
        info = {"x": st.x, "scroll": st.scroll, "dead": not st.alive,
                "goal": st.reached_goal, "timeout": st.done and st.alive and not st.reached_goal}
        return StepResult(frame=frame, reward=reward, done=st.done, info=info)

    def _collect_coins(self, st: EnvState) -> int:
        t = self.world.tile
        x0, y0, x1, y1 = self._box(st)
        cy0 = self.world.coin_row * t
        got = 0
        for c in self._coin_cols:
            if c in st.coins:
                continue
            cx0 = c * t + 2
            if x0 < cx0 + 4 and cx0 < x1 and y0 < cy0 + 6 and cy0 + 1 < y1:
                st.coins.add(c)
                got += 1
        return got

    def render(self, state: EnvState | None = None) -> np.ndarray:
        st = state or self.state
        world = self.world
        w, h, t = world.width, world.height, world.tile
        s = st.scroll
        frame = self._img[:, s:s + w].copy()
        cy0 = world.coin_row * t
        for c in self._coin_cols:
            if c in st.coins:
                continue
            cx0 = c * t + 2 - s
            if cx0 + 4 <= 0 or cx0 >= w:
                continue
            frame[cy0 + 1:cy0 + 6, max(cx0, 0):min(cx0 + 4, w)] = COIN
        x0, y0, x1, y1 = self._box(st)
        x0, x1 = x0 - s, x1 - s
        y0, y1 = max(y0, 0), min(y1, h)
        if y1 > y0:
            frame[y0:y1, max(x0, 0):min(x1, w)] = AGENT
        return frame


# Thin functional aliases matching the operation names used elsewhere.
def reset(env: ScrollRunner, seed: int = 0) -> tuple:
    return env.reset(seed)


def step(env: ScrollRunner, action: int) -> StepResult:
    return env.step(action)


def render(env: ScrollRunner, state: EnvState | None = None) -> np.ndarray:
    return env.render(state)


def write_pgm(path, frame: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255); values are clipped to [0, 1] first."""
    arr = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def scripted_runner(env: ScrollRunner, lookahead: int = 6) -> int:
    """Run right, jumping when a gap or enemy is just ahead."""
    st = env.state
    world = env.world
    t = world.tile
    front = st.x + AGENT_W
    for px in range(front, front + lookahead + 1):
        c = px // t
        if c < world.length and world.columns[c] in (K_GAP, K_ENEMY):
            return ACTIONS.index("run-right+jump")
    return ACTIONS.index("run-right")
