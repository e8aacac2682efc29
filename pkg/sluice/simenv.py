"""Planar pick-and-place arena with a noisy contact phase near the goal."""
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache, partial
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from structlog import get_logger

from .config import EnvConfig
from .constants import (
    ACTION_DIM,
    ARENA_HIGH,
    ARENA_LOW,
    CONTACT_RADIUS,
    GRASP_RADIUS,
    LATENT_DIM,
    MAX_DELTA,
    PROJECTION_SEED,
    RAW_FEATURE_DIM,
    TASK_IDS,
    Phases,
    Settings,
    TaskIds,
)
from .exceptions import ConfigurationError
from .utils import derive_seed, map_episodes, read_jsonl, rng_stream, write_jsonl

logger = get_logger()

# (x_low, x_high, y_low, y_high) spawn boxes per setting
SPAWN_REGIONS = {
    Settings.CLEAN: {
        "agent": (0.05, 0.20, 0.10, 0.90),
        "object": (0.30, 0.45, 0.20, 0.80),
        "goal": (0.70, 0.90, 0.20, 0.80),
    },
    Settings.RANDOM: {
        "agent": (0.02, 0.30, 0.05, 0.95),
        "object": (0.25, 0.55, 0.10, 0.90),
        "goal": (0.65, 0.95, 0.10, 0.90),
    },
}

Vec = tuple[float, float]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    seed: int
    noise_sigma: float = 0.0
    success_radius: float = 0.04
    setting: str = Settings.CLEAN
    T_max: int = 120

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ConfigurationError(f"unknown task_id {self.task_id!r}")
        if self.task_id == TaskIds.TRANSPORT_EASY and self.noise_sigma != 0:
            raise ConfigurationError("transport-easy has no contact noise")
        if self.task_id == TaskIds.INSERT_HARD and self.noise_sigma <= 0:
            raise ConfigurationError("insert-hard needs noise_sigma > 0")
        if self.setting not in SPAWN_REGIONS:
            raise ConfigurationError(f"unknown setting {self.setting!r}")

    @classmethod
    def make(cls, task_id: str, seed: int, conf: EnvConfig) -> "TaskSpec":
        sigma = conf.noise_sigma if task_id == TaskIds.INSERT_HARD else 0.0
        return cls(task_id, seed, sigma, conf.success_radius, conf.setting, conf.T_max)

    @property
    def jams(self) -> bool:
        return self.task_id == TaskIds.INSERT_HARD


@dataclass(frozen=True)
class EnvState:
    agent_xy: Vec
    object_xy: Vec
    goal_xy: Vec
    gripper: float = -1.0
    holding: bool = False
    phase: str = Phases.TRANSPORT
    step_index: int = 0
    success: bool = False
    jammed: bool = False

    def raw_features(self) -> np.ndarray:
        pos = np.array([*self.agent_xy, *self.object_xy, *self.goal_xy]) * 2 - 1
        flags = [self.gripper, 1.0 if self.holding else -1.0]
        flags.append(1.0 if self.phase == Phases.CONTACT else -1.0)
        return np.concatenate([pos, flags])

    @property
    def stage(self) -> int:
        return 2 if self.success else int(self.holding)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvState":
        xy = {k: tuple(d[k]) for k in ["agent_xy", "object_xy", "goal_xy"]}
        return cls(**{**d, **xy})


@lru_cache(maxsize=None)
def projection_matrix(latent_dim: int = LATENT_DIM) -> np.ndarray:
    proj = np.random.default_rng(PROJECTION_SEED).normal(
        0.0, 0.5, size=(latent_dim, RAW_FEATURE_DIM)
    )
    if np.linalg.matrix_rank(proj[:, :2]) < 2:
        raise ConfigurationError("projection loses agent position information")
    proj.setflags(write=False)
    return proj


def encode_latent(state: EnvState, latent_dim: int = LATENT_DIM) -> np.ndarray:
    return np.tanh(projection_matrix(latent_dim) @ state.raw_features())


class ManipulationEnv:
    """one episode's simulator; owns its spawn and contact-noise streams"""

    def __init__(self, spec: TaskSpec, latent_dim: int = LATENT_DIM, nominal=False):
        self.spec = spec
        self.latent_dim = latent_dim
        self.nominal = nominal
        self._noise_rng = rng_stream(spec.seed, spec.task_id, "contact-noise")

    def reset(self) -> tuple[EnvState, np.ndarray]:
        rng = rng_stream(self.spec.seed, self.spec.task_id, "spawn")
        regions = SPAWN_REGIONS[self.spec.setting]
        agent, obj, goal = (
            _uniform_in(rng, regions[k]) for k in ["agent", "object", "goal"]
        )
        state = EnvState(agent, obj, goal)
        return state, self.encode(state)

    def encode(self, state: EnvState) -> np.ndarray:
        return encode_latent(state, self.latent_dim)

    def step(self, state: EnvState, action) -> tuple[EnvState, np.ndarray, bool, bool]:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise ConfigurationError(f"action of shape {action.shape}, need (3,)")
        if not np.isfinite(action).all():
            raise ConfigurationError(f"non-finite action {action.tolist()}")
        if self.is_done(state):
            return state, self.encode(state), True, state.success

        agent, obj, goal = (np.array(v) for v in _positions(state))
        delta = np.clip(action[:2], -MAX_DELTA, MAX_DELTA)
        in_contact = state.holding and _dist(agent, goal) <= CONTACT_RADIUS
        if in_contact and not self.nominal and self.spec.noise_sigma > 0:
            delta = delta + self._noise_rng.normal(0.0, self.spec.noise_sigma, 2)
        agent = np.clip(agent + delta, ARENA_LOW, ARENA_HIGH)
        if state.holding:
            obj = agent.copy()

        command = float(np.clip(action[2], -1.0, 1.0))
        holding, success, jammed = state.holding, False, False
        closing = state.gripper <= 0 < command
        if not holding and closing and _dist(agent, obj) <= GRASP_RADIUS:
            holding, obj = True, agent.copy()
        elif holding and command <= 0:
            holding = False
            success = _dist(obj, goal) <= self.spec.success_radius
            # a part released off-center inside the contact zone wedges
            jammed = in_contact and not success and self.spec.jams

        near_goal = holding and _dist(agent, goal) <= CONTACT_RADIUS
        new = replace(
            state,
            agent_xy=_vec(agent),
            object_xy=_vec(obj),
            gripper=command,
            holding=holding,
            phase=Phases.CONTACT if near_goal else Phases.TRANSPORT,
            step_index=state.step_index + 1,
            success=success,
            jammed=jammed,
        )
        return new, self.encode(new), self.is_done(new), success

    def is_done(self, state: EnvState) -> bool:
        return state.success or state.jammed or state.step_index >= self.spec.T_max


def expert_action(
    state: EnvState, gain: float = 0.12, release_tol: float = 0.015
) -> np.ndarray:
    agent, obj, goal = (np.array(v) for v in _positions(state))
    if state.holding:
        target = goal
        grip = -1.0 if _dist(obj, goal) <= release_tol else 1.0
    else:
        target = obj
        near = _dist(agent, obj) <= GRASP_RADIUS * 2 / 3
        grip = 1.0 if near and state.gripper <= 0 else -1.0
    delta = np.clip(gain * (target - agent), -MAX_DELTA, MAX_DELTA)
    return np.array([*delta, grip])


@dataclass
class Episode:
    task_id: str
    seed: int
    states: list[EnvState]
    actions: np.ndarray
    latents: np.ndarray
    success: bool
    episode_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "states": [s.to_dict() for s in self.states],
            "actions": self.actions.tolist(),
            "latents": self.latents.tolist(),
            "success": self.success,
        }

    @classmethod
    def from_record(cls, rec: dict, episode_id: int = 0) -> "Episode":
        return cls(
            rec["task_id"],
            rec["seed"],
            [EnvState.from_dict(s) for s in rec["states"]],
            np.array(rec["actions"], dtype=np.float64).reshape(-1, ACTION_DIM),
            np.array(rec["latents"], dtype=np.float64),
            rec["success"],
            episode_id,
        )


def rollout_expert(
    spec: TaskSpec, conf: EnvConfig, delay: int = 0, latent_dim=LATENT_DIM
) -> Episode:
    """closed-loop expert acting on the observation from ``delay`` steps back"""
    env = ManipulationEnv(spec, latent_dim)
    state, latent = env.reset()
    states, latents, actions = [state], [latent], []
    done = False
    while not done:
        seen = states[max(len(states) - 1 - delay, 0)]
        action = expert_action(seen, conf.expert_gain, conf.release_tol)
        state, latent, done, _ = env.step(state, action)
        states.append(state)
        latents.append(latent)
        actions.append(action)
    return Episode(
        spec.task_id,
        spec.seed,
        states,
        np.array(actions),
        np.array(latents),
        state.success,
    )


def demo_specs(conf: EnvConfig, base_seed: int, per_task: int, tasks: Iterable[str]):
    for task in tasks:
        for i in range(per_task):
            yield TaskSpec.make(task, derive_seed(base_seed, f"demo:{task}", i), conf)


def generate_demos(
    conf: EnvConfig,
    base_seed: int,
    per_task: int,
    tasks: Iterable[str] = tuple(TASK_IDS),
    workers: int = 1,
    latent_dim: int = LATENT_DIM,
) -> list[Episode]:
    specs = list(demo_specs(conf, base_seed, per_task, tasks))
    job = partial(rollout_expert, conf=conf, latent_dim=latent_dim)
    episodes = map_episodes(job, specs, workers)
    for i, ep in enumerate(episodes):
        ep.episode_id = i
    rate = np.mean([ep.success for ep in episodes]) if episodes else 0.0
    lengths = [ep.length for ep in episodes if ep.success]
    logger.info(
        "generated demos",
        episodes=len(episodes),
        success_rate=float(rate),
        mean_length=float(np.mean(lengths)) if lengths else None,
    )
    return episodes


def write_demos(path: Path, episodes: Iterable[Episode]) -> Path:
    return write_jsonl(path, (ep.to_record() for ep in episodes))


def read_demos(path: Path, only_successful=False) -> list[Episode]:
    episodes = [Episode.from_record(r, i) for i, r in enumerate(read_jsonl(path))]
    return [ep for ep in episodes if ep.success or not only_successful]


def _uniform_in(rng: np.random.Generator, box) -> Vec:
    x0, x1, y0, y1 = box
    return (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))


def _positions(state: EnvState):
    return state.agent_xy, state.object_xy, state.goal_xy


def _vec(arr: np.ndarray) -> Vec:
    return (float(arr[0]), float(arr[1]))


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.hypot(*(np.asarray(a) - np.asarray(b))))


def stage_after(
    spec: TaskSpec, state: EnvState, actions: np.ndarray, latent_dim=LATENT_DIM
) -> EnvState:
    """replay actions open-loop under nominal dynamics"""
    env = ManipulationEnv(spec, latent_dim, nominal=True)
    for action in actions:
        state, _, done, _ = env.step(state, action)
        if done:
            break
    return state


def expert_continuation(
    spec: TaskSpec, conf: EnvConfig, state: EnvState, steps: int, latent_dim=LATENT_DIM
) -> EnvState:
    env = ManipulationEnv(spec, latent_dim, nominal=True)
    for _ in range(steps):
        action = expert_action(state, conf.expert_gain, conf.release_tol)
        state, _, done, _ = env.step(state, action)
        if done:
            break
    return state


def segment_oracle(
    spec: TaskSpec,
    conf: EnvConfig,
    state: EnvState,
    actions: np.ndarray,
    latent_dim: int = LATENT_DIM,
) -> bool:
    """does the segment, replayed open-loop, keep up with the expert from here"""
    replayed = stage_after(spec, state, actions, latent_dim)
    reference = expert_continuation(spec, conf, state, len(actions), latent_dim)
    if replayed.stage < reference.stage:
        return False
    if replayed.success:
        return True
    gap = _dist(np.array(replayed.agent_xy), np.array(reference.agent_xy))
    return gap <= conf.tracking_tol


def open_loop_success(
    spec: TaskSpec, actions: np.ndarray, state: Optional[EnvState] = None
) -> bool:
    env = ManipulationEnv(spec)
    if state is None:
        state, _ = env.reset()
    success = False
    for action in actions:
        state, _, done, success = env.step(state, action)
        if done:
            break
    return success
