"""Visual navigation on a frozen-lake grid, planned in latent space.

The environment is a G x G grid with one start, one goal, and holes; the
four experts are identified with the four movement actions. Training
teacher-forces the recursion's per-step expert choice to the demonstrated
action, supervises the gate with cross-entropy against that action, and
trains a transformer decoder so the latent state after step t reconstructs
the frame at step t. Inference encodes only the start frame, lets the
trained gate pick one expert per latent step, reads the selections back as
actions, and decodes each latent state to a frame.

Demonstrations come from a breadth-first-search planner with occasional
random safe detours so off-path states are covered.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapters import ExpertBank, init_expert_bank
from .mmdit import (
    MmditBlockParams,
    block_forward,
    empty_context,
    init_block_params,
)
from .diffusion import patchify, unpatchify, _position_codes
from .optim import AdamW
from .recursion import (
    RecursionConfig,
    RecursionRecord,
    recursive_attention,
)
from .routing import GateNetwork, init_gate
from .rng import Rng
from .tensor import (
    ConfigError,
    Tensor,
    backward,
    concat,
    index_select,
    layernorm,
    logsumexp,
    matmul,
    no_grad,
    reshape,
    tmean,
)

ACTIONS = ("up", "down", "left", "right")
_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

# Reference palette for rendered frames.
ICE, HOLE, GOAL, START, AGENT = 0.0, -1.0, 1.0, -0.5, 0.5


class UnsolvableMapError(RuntimeError):
    """No hole-avoiding path from start to goal exists."""


@dataclass(frozen=True)
class LakeMap:
    grid: int
    start: tuple[int, int]
    goal: tuple[int, int]
    holes: frozenset

    def validate(self) -> None:
        cells = {self.start, self.goal} | set(self.holes)
        for r, c in cells:
            if not (0 <= r < self.grid and 0 <= c < self.grid):
                raise ConfigError(f"cell {(r, c)} outside {self.grid}x{self.grid} grid")
        if self.start in self.holes or self.goal in self.holes:
            raise ConfigError("start/goal cannot be holes")

    def to_text(self) -> str:
        rows = []
        for r in range(self.grid):
            row = []
            for c in range(self.grid):
                if (r, c) == self.start:
                    row.append("S")
                elif (r, c) == self.goal:
                    row.append("G")
                elif (r, c) in self.holes:
                    row.append("H")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LakeMap":
        lines = [ln for ln in text.strip().splitlines() if ln]
        grid = len(lines)
        start = goal = None
        holes = set()
        for r, line in enumerate(lines):
            if len(line) != grid:
                raise ConfigError(f"map row {r} has length {len(line)}, expected {grid}")
            for c, ch in enumerate(line):
                if ch == "S":
                    start = (r, c)
                elif ch == "G":
                    goal = (r, c)
                elif ch == "H":
                    holes.add((r, c))
                elif ch != ".":
                    raise ConfigError(f"unknown map character {ch!r}")
        if start is None or goal is None:
            raise ConfigError("map needs exactly one S and one G")
        m = cls(grid=grid, start=start, goal=goal, holes=frozenset(holes))
        m.validate()
        return m


def env_step(lake: LakeMap, pos: tuple[int, int], action: int) -> tuple[int, int]:
    """Deterministic move, clamped at walls (never teleports)."""
    dr, dc = _DELTAS[action]
    r, c = pos[0] + dr, pos[1] + dc
    if not (0 <= r < lake.grid and 0 <= c < lake.grid):
        return pos
    return (r, c)


def render_frame(lake: LakeMap, pos: tuple[int, int], cell_px: int = 4) -> np.ndarray:
    """[1, G*cell_px, G*cell_px] frame; the agent cell is drawn at +0.5."""
    g = lake.grid
    cells = np.full((g, g), ICE)
    for hole in lake.holes:
        cells[hole] = HOLE
    cells[lake.start] = START
    cells[lake.goal] = GOAL
    cells[pos] = AGENT
    return np.kron(cells, np.ones((cell_px, cell_px)))[None]


def bfs_plan_from(lake: LakeMap, source: tuple[int, int]) -> list[int]:
    """Shortest hole-avoiding action sequence from ``source`` to the goal.

    Neighbors expand in fixed action order (up, down, left, right), which
    breaks ties deterministically.
    """
    if source == lake.goal:
        return []
    parent: dict = {source: None}
    queue = deque([source])
    while queue:
        pos = queue.popleft()
        for action in range(4):
            nxt = env_step(lake, pos, action)
            if nxt == pos or nxt in lake.holes or nxt in parent:
                continue
            parent[nxt] = (pos, action)
            if nxt == lake.goal:
                actions = []
                cur = nxt
                while parent[cur] is not None:
                    prev, act = parent[cur]
                    actions.append(act)
                    cur = prev
                return actions[::-1]
            queue.append(nxt)
    raise UnsolvableMapError(f"no path from {source} to {lake.goal}")


def bfs_plan(lake: LakeMap) -> list[int]:
    return bfs_plan_from(lake, lake.start)


def is_solvable(lake: LakeMap) -> bool:
    try:
        bfs_plan(lake)
        return True
    except UnsolvableMapError:
        return False


def generate_maps(
    grid: int, count: int, hole_density: float, seed: int
) -> list[LakeMap]:
    """Random solvable maps; unsolvable draws are resampled."""
    if not 0.0 <= hole_density <= 0.4:
        raise ConfigError(f"hole_density must be in [0, 0.4], got {hole_density}")
    root = Rng(seed)
    n_holes = int(round(hole_density * grid * grid))
    maps = []
    for i in range(count):
        attempt = 0
        while True:
            rng = root.spawn(i * 1000 + attempt)
            perm = rng.permutation(grid * grid)
            cells = [(int(p) // grid, int(p) % grid) for p in perm]
            lake = LakeMap(
                grid=grid,
                start=cells[0],
                goal=cells[1],
                holes=frozenset(cells[2 : 2 + n_holes]),
            )
            if is_solvable(lake):
                maps.append(lake)
                break
            attempt += 1
    return maps


# -- demonstrations ------------------------------------------------------------


@dataclass
class Rollout:
    lake: LakeMap
    positions: list
    actions: list[int]  # actions taken (drive the frames and the dynamics)
    labels: list[int]  # shortest-path action from each visited state (gate target)
    frames: np.ndarray  # [len(positions), 1, H, W]
    detours: np.ndarray  # [len(actions)] bool, True where the action was random


def make_rollout(
    lake: LakeMap, rng: Rng, detour_eps: float, cell_px: int, max_len: int
) -> Rollout | None:
    """One demonstration: BFS toward the goal with random safe detours.

    Detours cover off-path states; the gate label at every step is always
    the shortest-path action from the current position, not the detour.
    """
    pos = lake.start
    positions = [pos]
    actions: list[int] = []
    labels: list[int] = []
    detours: list[bool] = []
    while pos != lake.goal and len(actions) < max_len:
        best = bfs_plan_from(lake, pos)[0]
        if rng.random() < detour_eps:
            safe = [a for a in range(4) if env_step(lake, pos, a) not in lake.holes]
            action = safe[int(rng.integers(len(safe)))]
            detours.append(action != best)
        else:
            action = best
            detours.append(False)
        pos = env_step(lake, pos, action)
        positions.append(pos)
        actions.append(action)
        labels.append(best)
    if pos != lake.goal:
        return None
    frames = np.stack([render_frame(lake, p, cell_px) for p in positions])
    return Rollout(
        lake, positions, actions, labels, frames, np.asarray(detours, dtype=bool)
    )


def make_rollouts(
    maps: list[LakeMap],
    per_map: int,
    detour_eps: float,
    seed: int,
    cell_px: int = 4,
) -> list[Rollout]:
    root = Rng(seed)
    rollouts = []
    for i, lake in enumerate(maps):
        max_len = 4 * lake.grid * lake.grid
        for j in range(per_map):
            attempt = 0
            while True:
                rng = root.spawn(i * 10007 + j * 101 + attempt)
                rollout = make_rollout(lake, rng, detour_eps, cell_px, max_len)
                if rollout is not None:
                    rollouts.append(rollout)
                    break
                attempt += 1
    return rollouts


# -- models --------------------------------------------------------------------


@dataclass
class PlannerConfig:
    grid: int = 4
    cell_px: int = 4
    patch: int = 4
    dim: int = 64
    heads: int = 4
    rank: int = 8
    tau: float = 5.0

    @property
    def frame_hw(self) -> int:
        return self.grid * self.cell_px

    def validate(self) -> None:
        if self.frame_hw % self.patch != 0:
            raise ConfigError(
                f"frame size {self.frame_hw} not divisible by patch {self.patch}"
            )
        if self.dim % self.heads != 0 or self.dim % 4 != 0:
            raise ConfigError(f"dim {self.dim} must divide heads and be a multiple of 4")


class FrozenLakePlanner:
    """Start-frame encoder plus one recursive block with action experts.

    The encoder runs one plain attention block over the patch tokens so the
    state entering the recursion already carries relational (agent vs goal
    vs hole) information rather than isolated patch contents.
    """

    def __init__(self, cfg: PlannerConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        pv = cfg.patch * cfg.patch
        self.patch_w = Tensor(
            rng.spawn(1).normal((pv, d), std=1.0 / math.sqrt(pv)), requires_grad=True
        )
        self.patch_b = Tensor(np.zeros(d), requires_grad=True)
        self.pos = Tensor(_position_codes(cfg.frame_hw // cfg.patch, d))
        self.encoder_block = init_block_params(d, cfg.heads, rng.spawn(5))
        self.block = init_block_params(d, cfg.heads, rng.spawn(2))
        self.bank: ExpertBank = init_expert_bank(len(ACTIONS), cfg.rank, d, rng.spawn(3))
        self.gate: GateNetwork = init_gate(d, len(ACTIONS), rng.spawn(4))
        self.rcfg = RecursionConfig(
            experts=len(ACTIONS), latent_steps=1, tau=cfg.tau, route_per="step"
        )
        self.y = Tensor(np.zeros(d))

    def encode(self, frames: np.ndarray) -> Tensor:
        """[B, 1, H, W] frames -> [B, N, D] tokens."""
        tokens = matmul(patchify(Tensor(frames), self.cfg.patch), self.patch_w)
        tokens = tokens + self.patch_b + self.pos
        tokens, _ = block_forward(
            tokens, empty_context(self.cfg.dim, batch=tokens.shape[0]), self.y,
            self.encoder_block,
        )
        return tokens

    def parameters(self) -> dict[str, Tensor]:
        out = {"patch_w": self.patch_w, "patch_b": self.patch_b}
        out.update(self.encoder_block.parameters("encoder_block."))
        out.update(self.block.parameters("block."))
        out.update(self.bank.parameters("bank."))
        out.update(self.gate.parameters("gate."))
        return out


class FrameDecoder:
    """Small attention network from latent tokens to a pixel frame."""

    def __init__(self, cfg: PlannerConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        pv = cfg.patch * cfg.patch
        self.block = init_block_params(d, cfg.heads, rng.spawn(10))
        self.head_w = Tensor(np.zeros((d, pv)), requires_grad=True)
        self.head_b = Tensor(np.zeros(pv), requires_grad=True)
        self.y = Tensor(np.zeros(d))

    def decode_tokens(self, tokens: Tensor) -> Tensor:
        """[B, N, D] latent tokens -> [B, N, patch*patch] pixel tokens."""
        b = tokens.shape[0]
        x, _ = block_forward(tokens, empty_context(self.cfg.dim, batch=b), self.y, self.block)
        return matmul(layernorm(x), self.head_w) + self.head_b

    def decode_frame(self, tokens: np.ndarray) -> np.ndarray:
        """[B, N, D] latent snapshot -> [1, H, W] frame (no graph)."""
        with no_grad():
            px = self.decode_tokens(Tensor(tokens))
        return unpatchify(px.data, 1, self.cfg.frame_hw, self.cfg.patch)[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"head_w": self.head_w, "head_b": self.head_b}
        out.update(self.block.parameters("block."))
        return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of [T, M] logits against integer targets."""
    t, m = logits.shape
    flat = reshape(logits, (t * m,))
    picked = index_select(flat, np.arange(t) * m + np.asarray(targets, dtype=np.int64))
    return tmean(logsumexp(logits, axis=1) - picked)


# -- training ------------------------------------------------------------------


@dataclass
class PlannerTrainConfig:
    steps: int = 4000
    lr: float = 1e-3
    # Linear decay of the learning rate down to lr * lr_final_frac.
    lr_final_frac: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    gate_loss_weight: float = 1.0
    log_every: int = 100


def train_planner(
    rollouts: list[Rollout],
    model: FrozenLakePlanner,
    decoder: FrameDecoder,
    cfg: PlannerTrainConfig,
) -> list[dict]:
    """Joint training: teacher-forced latent dynamics, gate cross-entropy
    against the demonstrated action, and per-step frame reconstruction."""
    if model.bank.size != len(ACTIONS):
        raise ConfigError(
            f"planner needs {len(ACTIONS)} experts (one per action), got {model.bank.size}"
        )
    if not rollouts:
        raise ConfigError("no rollouts to train on")
    rng = Rng(cfg.seed)
    params = {**model.parameters(), **{f"decoder.{k}": v for k, v in decoder.parameters().items()}}
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    logs = []
    for step in range(1, cfg.steps + 1):
        if cfg.lr_final_frac < 1.0:
            frac = (step - 1) / max(cfg.steps - 1, 1)
            opt.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * frac)
        rollout = rollouts[int(rng.integers(len(rollouts)))]
        t_total = len(rollout.actions)
        tokens = model.encode(rollout.frames[0:1])
        rcfg = replace(model.rcfg, latent_steps=t_total)
        record = RecursionRecord()
        forced = np.asarray(rollout.actions, dtype=np.int64)[:, None]  # [T, B=1]
        recursive_attention(
            tokens,
            empty_context(model.cfg.dim, batch=1),
            model.y,
            model.block,
            model.bank,
            model.gate,
            rcfg,
            rng=None,
            training=False,
            record=record,
            forced_selection=forced,
            ste=False,
        )
        step_logits = concat(record.step_logits, axis=0)  # [T, M]
        gate_loss = cross_entropy(step_logits, np.asarray(rollout.labels))
        recon_terms = []
        for t_idx, state in enumerate(record.step_states, start=1):
            pred = decoder.decode_tokens(state)
            target = patchify(Tensor(rollout.frames[t_idx : t_idx + 1]), model.cfg.patch)
            diff = pred - target
            recon_terms.append(tmean(diff * diff))
        recon = recon_terms[0]
        for term in recon_terms[1:]:
            recon = recon + term
        recon = recon * (1.0 / len(recon_terms))
        loss = recon + cfg.gate_loss_weight * gate_loss
        opt.zero_grad()
        backward(loss)
        opt.step()
        logs.append(
            {
                "step": step,
                "loss": loss.item(),
                "recon_mse": recon.item(),
                "gate_ce": gate_loss.item(),
            }
        )
    return logs


# -- evaluation ----------------------------------------------------------------


def gate_accuracy(
    maps: list[LakeMap], model: FrozenLakePlanner, cell_px: int | None = None
) -> float:
    """Teacher-forced accuracy of the gate against BFS actions."""
    cell_px = cell_px if cell_px is not None else model.cfg.cell_px
    hits = total = 0
    with no_grad():
        for lake in maps:
            actions = bfs_plan(lake)
            if not actions:
                continue
            tokens = model.encode(render_frame(lake, lake.start, cell_px)[None])
            rcfg = replace(model.rcfg, latent_steps=len(actions))
            record = RecursionRecord()
            recursive_attention(
                tokens,
                empty_context(model.cfg.dim, batch=1),
                model.y,
                model.block,
                model.bank,
                model.gate,
                rcfg,
                rng=None,
                training=False,
                record=record,
                forced_selection=np.asarray(actions, dtype=np.int64)[:, None],
                ste=False,
            )
            for logit_t, action in zip(record.step_logits, actions):
                hits += int(np.argmax(logit_t.data[0]) == action)
                total += 1
    return hits / max(total, 1)


@dataclass
class PlanResult:
    lake: LakeMap
    actions: list[int]
    positions: list
    frames: list[np.ndarray]
    outcome: str  # "goal", "hole", or "no_plan"

    def manifest(self) -> dict:
        return {
            "map": self.lake.to_text(),
            "actions": [ACTIONS[a] for a in self.actions],
            "outcome": self.outcome,
        }


def plan_and_decode(
    lake: LakeMap,
    model: FrozenLakePlanner,
    decoder: FrameDecoder,
    step_cap: int | None = None,
) -> PlanResult:
    """Plan from the start frame alone; selections become the actions.

    Runs the recursion up to the step cap, reads one action per latent step
    from the gate's choice, simulates it on the true map, decodes each
    latent state to a frame, and stops at goal, hole, or the cap. Hitting
    the cap yields outcome "no_plan" rather than an exception.
    """
    cap = step_cap if step_cap is not None else 4 * lake.grid * lake.grid
    tokens = model.encode(render_frame(lake, lake.start, model.cfg.cell_px)[None])
    rcfg = replace(model.rcfg, latent_steps=cap)
    record = RecursionRecord()
    with no_grad():
        recursive_attention(
            tokens,
            empty_context(model.cfg.dim, batch=1),
            model.y,
            model.block,
            model.bank,
            model.gate,
            rcfg,
            rng=None,
            training=False,
            record=record,
            ste=False,
        )
    pos = lake.start
    positions = [pos]
    actions: list[int] = []
    frames: list[np.ndarray] = []
    outcome = "no_plan"
    for state, selected in zip(record.step_states, record.step_selected):
        action = int(selected[0])
        actions.append(action)
        pos = env_step(lake, pos, action)
        positions.append(pos)
        frames.append(decoder.decode_frame(state.data))
        if pos == lake.goal:
            outcome = "goal"
            break
        if pos in lake.holes:
            outcome = "hole"
            break
    return PlanResult(lake, actions, positions, frames, outcome)


def evaluate_planner(
    maps: list[LakeMap], model: FrozenLakePlanner, decoder: FrameDecoder
) -> dict:
    """Goal-reach rate with per-map outcomes (failures are reported, not raised)."""
    outcomes = []
    for lake in maps:
        result = plan_and_decode(lake, model, decoder)
        outcomes.append(result.outcome)
    n = len(outcomes)
    return {
        "maps": n,
        "goal_rate": outcomes.count("goal") / max(n, 1),
        "hole_rate": outcomes.count("hole") / max(n, 1),
        "no_plan_rate": outcomes.count("no_plan") / max(n, 1),
        "outcomes": outcomes,
    }


def save_plan(result: PlanResult, out_dir) -> None:
    """Frames as PGM files plus a JSON manifest."""
    from .images import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(result.frames):
        write_pgm(out / f"frame_{i:03d}.pgm", frame)
    (out / "plan.json").write_text(
        json.dumps(result.manifest(), indent=2, sort_keys=True), encoding="utf-8"
    )


__all__ = [
    "ACTIONS",
    "ICE",
    "HOLE",
    "GOAL",
    "START",
    "AGENT",
    "UnsolvableMapError",
    "LakeMap",
    "env_step",
    "render_frame",
    "bfs_plan",
    "bfs_plan_from",
    "is_solvable",
    "generate_maps",
    "Rollout",
    "make_rollout",
    "make_rollouts",
    "PlannerConfig",
    "FrozenLakePlanner",
    "FrameDecoder",
    "cross_entropy",
    "PlannerTrainConfig",
    "train_planner",
    "gate_accuracy",
    "PlanResult",
    "plan_and_decode",
    "evaluate_planner",
    "save_plan",
]
