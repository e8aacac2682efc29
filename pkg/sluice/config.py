import os
import re
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constants import (
    ABLATIONS,
    ACTION_DIM,
    DEFAULT_OUT_DIR,
    OUT_DIR_ENV_VAR,
    TASK_IDS,
    THREADS_ENV_VAR,
    MaskModes,
    Settings,
)
from .exceptions import ConfigurationError
from .utils import canonical_json, hash_str

POLICY_REGEX = re.compile(
    r"^(fixed-(?P<n>\d+)|base-(?P<base>\d+)|adaptive(@(?P<tau>0?\.\d+))?)$"
)


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvConfig(_Schema):
    noise_sigma: float = Field(0.015, gt=0)
    T_max: int = Field(120, ge=1)
    success_radius: float = Field(0.04, gt=0)
    setting: Literal[Settings.CLEAN, Settings.RANDOM] = Settings.CLEAN
    expert_gain: float = Field(0.12, gt=0, le=1)
    release_tol: float = Field(0.015, gt=0)
    tracking_tol: float = Field(0.05, gt=0)


class ModelConfig(_Schema):
    H: int = Field(32, ge=1)
    r: int = Field(4, ge=1)
    latent_dim: int = Field(16, ge=2)
    action_dim: int = ACTION_DIM
    n_L: int = Field(2, ge=1)
    sem_dim: int = Field(8, ge=1)
    trunk_width: int = Field(64, ge=1)
    layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    width: int = Field(64, ge=1)
    k: int = Field(8, ge=1)
    w: Optional[int] = None
    mask_mode: Literal[
        MaskModes.CACHE_COMPATIBLE, MaskModes.FULL_FIDELITY
    ] = MaskModes.CACHE_COMPATIBLE

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.H % self.r:
            raise ValueError(f"H={self.H} not divisible by r={self.r}")
        if self.k % self.r or self.k > self.H:
            raise ValueError(f"k={self.k} must be a multiple of r and at most H")
        if self.width % self.heads:
            raise ValueError(f"width={self.width} not divisible by heads={self.heads}")
        if self.window < self.r:
            raise ValueError(f"window w={self.window} smaller than r={self.r}")
        if self.action_dim != ACTION_DIM:
            raise ValueError(f"action_dim is fixed at {ACTION_DIM}")
        return self

    @property
    def window(self) -> int:
        return 2 * self.r if self.w is None else self.w


class TrainConfig(_Schema):
    wam_lr: float = Field(2e-3, gt=0)
    verifier_lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    batch: int = Field(64, ge=1)
    wam_steps: int = Field(3000, ge=0)
    verifier_steps: int = Field(1500, ge=0)
    vid_weight: float = Field(1.0, ge=0)
    log_every: int = Field(250, ge=1)


class VerdataConfig(_Schema):
    demos_per_task: int = Field(100, ge=1)
    rollouts_per_task: int = Field(40, ge=0)
    samples_per_class: int = Field(1500, ge=1)
    windows_per_episode: int = Field(6, ge=1)
    demo_rollout_ratio: tuple[int, int] = (70, 30)
    neg_rollout_corrupt_ratio: tuple[int, int] = (20, 80)
    late_noise_sigma: float = Field(0.03, ge=0)
    tail_scale_range: tuple[float, float] = (0.1, 0.6)
    heldout_fraction: float = Field(0.2, gt=0, lt=1)
    grasp_zone_rate: float = Field(0.8, ge=0, le=1)


class ExecConfig(_Schema):
    tau: float = Field(0.5, gt=0, lt=1)
    check_interval: Optional[int] = Field(None, ge=1)
    policies: tuple[str, ...] = ("fixed-16", "fixed-32", "adaptive")
    tasks: tuple[str, ...] = tuple(TASK_IDS)
    episodes_per_task: int = Field(100, ge=1)
    parallel_episodes: int = Field(1, ge=1)


class RunConfig(_Schema):
    schema_version: Literal[1] = 1
    seed: int = 0
    out_dir: str = DEFAULT_OUT_DIR.as_posix()
    env: EnvConfig = EnvConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    verdata: VerdataConfig = VerdataConfig()
    exec: ExecConfig = ExecConfig()

    @model_validator(mode="after")
    def _check_exec(self):
        for task in self.exec.tasks:
            if task not in TASK_IDS:
                raise ValueError(f"unknown task {task!r}, expected one of {TASK_IDS}")
        for pol in self.exec.policies:
            match = POLICY_REGEX.match(pol)
            if match is None:
                raise ValueError(f"bad policy spec {pol!r}")
            if match["n"] and not 1 <= int(match["n"]) <= self.model.H:
                raise ValueError(f"{pol}: fixed chunk must be in 1..H={self.model.H}")
            if match["base"] and not _multiple_of(int(match["base"]), self.model.r):
                raise ValueError(f"{pol}: base chunk must be a multiple of r")
        return self

    @property
    def check_interval(self) -> int:
        return self.exec.check_interval or self.model.r

    @property
    def base_horizons(self) -> list[int]:
        """chunk lengths of the separately trained baseline models"""
        matches = [POLICY_REGEX.match(p) for p in self.exec.policies]
        return sorted({int(m["base"]) for m in matches if m and m["base"]})

    def with_horizon(self, H: int) -> "RunConfig":
        model = self.model.model_dump()
        model.update(H=H, k=min(self.model.k, H))
        return self.model_copy(update={"model": ModelConfig.model_validate(model)})

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @classmethod
    def load(cls, path: Optional[Path] = None, **overrides) -> "RunConfig":
        try:
            raw = Path(path).read_text() if path else "{}"
            conf = cls.model_validate_json(raw)
        except ValidationError as e:
            raise ConfigurationError(f"config schema error: {e}") from e
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        return conf.resolve(**overrides)

    def resolve(self, seed: Optional[int] = None, out_dir=None, parallel=None):
        """environment overrides first, explicit flags after"""
        update = {}
        env_out, env_threads = os.environ.get(OUT_DIR_ENV_VAR), os.environ.get(
            THREADS_ENV_VAR
        )
        out = out_dir or env_out
        if out:
            update["out_dir"] = Path(out).as_posix()
        if seed is not None:
            update["seed"] = seed
        threads = parallel or (int(env_threads) if env_threads else None)
        conf = self.model_copy(update=update)
        if threads:
            exec_conf = conf.exec.model_copy(update={"parallel_episodes": threads})
            conf = conf.model_copy(update={"exec": exec_conf})
        return conf

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        dump = self.snapshot()
        dump.pop("out_dir")
        dump["exec"].pop("parallel_episodes")
        return hash_str(canonical_json(dump))


def validate_ablation(ablation: str) -> str:
    if ablation not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {ablation!r}, expected {ABLATIONS}")
    return ablation


def _multiple_of(n: int, r: int) -> bool:
    return n >= r and n % r == 0
