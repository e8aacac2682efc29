"""Chunk execution policies and the benchmark harness."""
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Optional, Protocol, Sequence

import numpy as np
from structlog import get_logger

from .config import POLICY_REGEX, RunConfig
from .exceptions import ConfigurationError
from .simenv import EnvState, ManipulationEnv, TaskSpec
from .utils import derive_seed, map_episodes
from .wam import PredictedRollout

logger = get_logger()


class ChunkVerifier(Protocol):
    def prepare(self, rollout: PredictedRollout) -> Any:
        ...

    def score(self, cache: Any, o_real: np.ndarray, t_off: int) -> float:
        ...

    def check_flops(self) -> int:
        ...

    def prepare_flops(self, windows: int) -> int:
        ...


class ScriptedVerifier:
    """scores from a fixed list, cycling; no model behind it"""

    def __init__(self, scores: Sequence[float]):
        self.scores = list(scores)
        self.calls = 0

    def prepare(self, rollout: PredictedRollout):
        return rollout

    def score(self, cache, o_real: np.ndarray, t_off: int) -> float:
        e = self.scores[self.calls % len(self.scores)]
        self.calls += 1
        return e

    def check_flops(self) -> int:
        return 0

    def prepare_flops(self, windows: int) -> int:
        return 0


class ConstantVerifier(ScriptedVerifier):
    def __init__(self, value: float):
        super().__init__([value])


class CountingWAM:
    """forwards to a world-action model and counts predict calls"""

    def __init__(self, wam):
        self.wam = wam
        self.calls = 0

    @property
    def conf(self):
        return self.wam.conf

    @property
    def flops(self) -> int:
        return self.wam.flops

    def predict(self, o_t, task_id, origin_step=0) -> PredictedRollout:
        self.calls += 1
        return self.wam.predict(o_t, task_id, origin_step)


@dataclass(frozen=True)
class ExecPolicy:
    name: str
    kind: str
    H: int
    r: int
    n: Optional[int] = None
    tau: float = 0.5
    k: int = 8
    c: int = 4

    def __post_init__(self):
        if self.kind == "base" and self.n != self.H:
            raise ConfigurationError(f"{self.name}: chunk must equal horizon {self.H}")
        if self.kind == "fixed" and not (self.n and 1 <= self.n <= self.H):
            raise ConfigurationError(f"{self.name}: chunk must be in 1..{self.H}")
        if self.kind == "adaptive" and not (0 < self.tau < 1 and self.c >= 1):
            raise ConfigurationError(f"{self.name}: need 0 < tau < 1 and c >= 1")
        if self.kind not in ("fixed", "base", "adaptive"):
            raise ConfigurationError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def parse(cls, spec: str, conf: RunConfig) -> "ExecPolicy":
        match = POLICY_REGEX.match(spec)
        if match is None:
            raise ConfigurationError(f"bad policy spec {spec!r}")
        model = conf.model
        if match["n"]:
            return cls(spec, "fixed", model.H, model.r, n=int(match["n"]))
        if match["base"]:
            n = int(match["base"])
            return cls(spec, "base", n, model.r, n=n)
        tau = float(match["tau"]) if match["tau"] else conf.exec.tau
        c = conf.check_interval
        return cls(spec, "adaptive", model.H, model.r, tau=tau, k=model.k, c=c)

    @property
    def adaptive(self) -> bool:
        return self.kind == "adaptive"

    @property
    def chunk_limit(self) -> int:
        return self.H if self.adaptive else self.n

    def checks_at(self, m: int) -> bool:
        """is a check due after ``m`` executed actions of the current chunk"""
        if not self.adaptive:
            return False
        aligned = m % self.c == 0 and m % self.r == 0
        return m >= self.c and aligned and m + self.k <= self.H


@dataclass
class ExecutionTrace:
    policy: str
    task_id: str
    seed: int
    records: list[dict] = field(default_factory=list)
    success: bool = False
    steps: int = 0
    wam_calls: int = 0
    verifier_checks: int = 0
    wam_flops: int = 0
    verifier_flops: int = 0
    wall_seconds: float = 0.0
    states: list[EnvState] = field(default_factory=list, repr=False)
    latents: list[np.ndarray] = field(default_factory=list, repr=False)
    chunks: list[PredictedRollout] = field(default_factory=list, repr=False)

    @property
    def actions(self) -> np.ndarray:
        return np.array([rec["action"] for rec in self.records])

    def to_record(self, setting: str = "") -> dict:
        return {
            "policy": self.policy,
            "task_id": self.task_id,
            "setting": setting,
            "seed": self.seed,
            "success": self.success,
            "steps": self.steps,
            "wam_calls": self.wam_calls,
            "verifier_checks": self.verifier_checks,
            "wam_flops": self.wam_flops,
            "verifier_flops": self.verifier_flops,
            "wall_seconds": self.wall_seconds,
            "records": self.records,
        }


def run_episode(
    policy: ExecPolicy,
    spec: TaskSpec,
    wam,
    verifier: Optional[ChunkVerifier] = None,
    keep_history: bool = False,
) -> ExecutionTrace:
    if policy.adaptive and verifier is None:
        raise ConfigurationError(f"{policy.name} needs a verifier")
    if wam.conf.H != policy.H or wam.conf.r != policy.r:
        raise ConfigurationError(
            f"model chunk H={wam.conf.H} r={wam.conf.r} does not fit {policy}"
        )
    env = ManipulationEnv(spec, wam.conf.latent_dim)
    state, latent = env.reset()
    trace = ExecutionTrace(policy.name, spec.task_id, spec.seed)
    if keep_history:
        trace.states.append(state)
        trace.latents.append(latent)
    started = time.perf_counter()
    done = False
    while not done:
        rollout = wam.predict(latent, spec.task_id, origin_step=state.step_index)
        trace.wam_calls += 1
        trace.wam_flops += wam.flops
        if keep_history:
            trace.chunks.append(rollout)
        cache = None
        if policy.adaptive:
            cache = verifier.prepare(rollout)
            windows = (policy.H - policy.k) // policy.r + 1
            trace.verifier_flops += verifier.prepare_flops(windows)
        for m in range(1, policy.chunk_limit + 1):
            action = rollout.actions[m - 1]
            state, latent, done, _ = env.step(state, action)
            record = {"action": action.tolist(), "e": None, "replan": False}
            trace.records.append(record)
            if keep_history:
                trace.states.append(state)
                trace.latents.append(latent)
            if done:
                break
            if policy.checks_at(m):
                e = verifier.score(cache, latent, m)
                trace.verifier_checks += 1
                trace.verifier_flops += verifier.check_flops()
                record["e"] = e
                if e < policy.tau:
                    record["replan"] = True
                    break
    trace.success = state.success
    trace.steps = state.step_index
    trace.wall_seconds = time.perf_counter() - started
    return trace


def benchmark_specs(conf: RunConfig, task: str) -> list[TaskSpec]:
    return [
        TaskSpec.make(task, derive_seed(conf.seed, f"bench:{task}", i), conf.env)
        for i in range(conf.exec.episodes_per_task)
    ]


def run_benchmark(
    conf: RunConfig,
    wam,
    verifier: Optional[ChunkVerifier] = None,
    policies: Optional[Sequence[str]] = None,
    tasks: Optional[Sequence[str]] = None,
    base_wams: Optional[dict] = None,
) -> list[ExecutionTrace]:
    """every policy on every task; ``base-N`` policies run ``base_wams[N]``"""
    policies = [ExecPolicy.parse(p, conf) for p in policies or conf.exec.policies]
    if not policies or not (tasks or conf.exec.tasks):
        raise ConfigurationError("benchmark needs at least one policy and one task")
    traces, base_wams = [], base_wams or {}
    for policy in policies:
        model = wam
        if policy.kind == "base":
            if policy.H not in base_wams:
                raise ConfigurationError(f"{policy.name} has no trained model")
            model = base_wams[policy.H]
        for task in tasks or conf.exec.tasks:
            job = partial(run_episode, policy, wam=model, verifier=verifier)
            specs = benchmark_specs(conf, task)
            cell = map_episodes(job, specs, conf.exec.parallel_episodes)
            traces.extend(cell)
            logger.info(
                "benchmark cell",
                policy=policy.name,
                task=task,
                sr=float(np.mean([t.success for t in cell])),
                steps=float(np.mean([t.steps for t in cell])),
                calls=float(np.mean([t.wam_calls for t in cell])),
            )
    return traces
