"""Toy world-action model: one deterministic forward pass from the current
latent and a task embedding to an action chunk plus the aligned future latents.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from structlog import get_logger

from .config import ModelConfig, RunConfig
from .constants import ACTION_DIM, TASK_IDS
from .exceptions import ConfigurationError, DatasetError, NonFiniteError, TrainingError
from .nn import Checkpoint, Dense, MLP, ParamStore, Tensor, concat, mse, step_with, tanh
from .nn.optim import AdamSettings
from .nn.tensor import take
from .simenv import Episode
from .utils import rng_stream

logger = get_logger()


def window_indices(T: int, s: int, H: int, r: int) -> tuple[list[int], list[int]]:
    """1-based action and observation indices of the training window at ``s``

    Observation targets stop at the terminal frame ``T + 1``.
    """
    if H % r:
        raise ConfigurationError(f"H={H} not divisible by r={r}")
    if not 1 <= s <= T:
        raise ConfigurationError(f"conditioning step {s} outside 1..{T}")
    actions = [min(s + i, T) for i in range(H)]
    latents = [min(s + (j + 1) * r, T + 1) for j in range(H // r)]
    return actions, latents


def slot_time(slot: int, r: int) -> int:
    """chunk-relative step reached by latent slot ``slot`` (0-based)"""
    return (slot + 1) * r


def time_slot(step: int, r: int) -> int:
    if step < r or step % r:
        raise ConfigurationError(f"step {step} is not a latent step for r={r}")
    return step // r - 1


@dataclass
class TrainWindow:
    episode_id: int
    s: int
    task_id: str
    o_s: np.ndarray
    actions: np.ndarray
    latents: np.ndarray

    @property
    def key(self):
        return (self.episode_id, self.s)


def sample_training_window(
    episode: Episode, H: int, r: int, rng: np.random.Generator, s: Optional[int] = None
) -> TrainWindow:
    T = episode.length
    if T < 1:
        raise DatasetError(f"episode {episode.episode_id} has no actions")
    s = int(rng.integers(1, T + 1)) if s is None else s
    act_idx, lat_idx = window_indices(T, s, H, r)
    return TrainWindow(
        episode.episode_id,
        s,
        episode.task_id,
        episode.latents[s - 1],
        episode.actions[np.array(act_idx) - 1],
        episode.latents[np.array(lat_idx) - 1],
    )


@dataclass
class PredictedRollout:
    actions: np.ndarray
    latents: np.ndarray
    semantic_tokens: np.ndarray
    origin_step: int = 0
    task_id: str = ""
    o_t: Optional[np.ndarray] = None
    kv_cache: Any = field(default=None, repr=False)

    def __post_init__(self):
        H, n_lat = len(self.actions), len(self.latents)
        if n_lat == 0 or H % n_lat:
            raise ConfigurationError(f"{H} actions do not align with {n_lat} latents")
        if not np.isfinite(self.actions).all():
            raise NonFiniteError("predicted actions are not finite")

    @property
    def H(self) -> int:
        return len(self.actions)

    @property
    def r(self) -> int:
        return self.H // len(self.latents)


class WorldActionModel:
    def __init__(self, conf: ModelConfig, seed: int = 0, allow_untrained=False):
        self.conf = conf
        self.allow_untrained = allow_untrained
        self.trained = False
        self.store = ParamStore(seed)
        sem_width = conf.n_L * conf.sem_dim
        self.task_table = self.store.add(
            "wam.task_embed", (len(TASK_IDS), sem_width), fan_in=sem_width
        )
        in_dim = conf.latent_dim + sem_width
        trunk_dims = [in_dim, conf.trunk_width, conf.trunk_width]
        self.trunk = MLP(self.store, "wam.trunk", trunk_dims)
        self.action_head = Dense(
            self.store, "wam.action_head", conf.trunk_width, conf.H * ACTION_DIM
        )
        self.latent_head = Dense(
            self.store,
            "wam.latent_head",
            conf.trunk_width,
            (conf.H // conf.r) * conf.latent_dim,
        )

    @property
    def flops(self) -> int:
        return self.trunk.flops + self.action_head.flops + self.latent_head.flops

    def forward(self, o_t: np.ndarray, task_idx: np.ndarray) -> tuple[Tensor, Tensor]:
        sem = take(self.task_table, np.asarray(task_idx))
        x = concat([Tensor(np.atleast_2d(o_t)), sem], axis=-1)
        h = tanh(self.trunk(x))
        return self.action_head(h), self.latent_head(h)

    def semantic_tokens(self, task_id: str) -> np.ndarray:
        row = self.task_table.data[_task_index(task_id)]
        return row.reshape(self.conf.n_L, self.conf.sem_dim).copy()

    def predict(self, o_t: np.ndarray, task_id: str, origin_step: int = 0):
        if not (self.trained or self.allow_untrained):
            raise ConfigurationError("world-action model has not been trained")
        o_t = np.asarray(o_t, dtype=np.float64)
        if o_t.shape != (self.conf.latent_dim,):
            raise ConfigurationError(
                f"observation latent {o_t.shape}, expected ({self.conf.latent_dim},)"
            )
        acts, lats = self.forward(o_t[None], np.array([_task_index(task_id)]))
        return PredictedRollout(
            acts.data.reshape(self.conf.H, ACTION_DIM),
            lats.data.reshape(self.conf.H // self.conf.r, self.conf.latent_dim),
            self.semantic_tokens(task_id),
            origin_step,
            task_id,
            o_t.copy(),
        )

    def losses(self, batch: Sequence[TrainWindow]) -> tuple[Tensor, Tensor]:
        o_s = np.stack([w.o_s for w in batch])
        idx = np.array([_task_index(w.task_id) for w in batch])
        acts, lats = self.forward(o_s, idx)
        act_target = np.stack([w.actions.reshape(-1) for w in batch])
        lat_target = np.stack([w.latents.reshape(-1) for w in batch])
        return mse(acts, act_target), mse(lats, lat_target)

    def train_step(
        self, batch: Sequence[TrainWindow], settings: AdamSettings, vid_weight=1.0
    ) -> tuple[float, float]:
        if not batch:
            raise DatasetError("empty training batch")
        try:
            loss_act, loss_vid = self.losses(batch)
            (loss_act + loss_vid * vid_weight).backward()
        except NonFiniteError as e:
            self.store.zero_grad()
            raise TrainingError(
                f"non-finite loss on windows (episode, s) {_culprits(self, batch)}"
            ) from e
        step_with(self.store, settings)
        return loss_act.item(), loss_vid.item()

    def checkpoint(self, meta: Optional[dict] = None) -> Checkpoint:
        info = {"kind": "wam", "model": self.conf.model_dump(), "seed": self.store.seed}
        return Checkpoint.from_store(self.store, {**info, **(meta or {})})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "WorldActionModel":
        if ckpt.meta.get("kind") != "wam":
            raise ConfigurationError(f"checkpoint holds {ckpt.meta.get('kind')!r}")
        model = cls(ModelConfig(**ckpt.meta["model"]), ckpt.meta["seed"])
        model.store.load_arrays(ckpt.arrays)
        model.trained = True
        return model

    @classmethod
    def load(cls, path: Path) -> "WorldActionModel":
        return cls.from_checkpoint(Checkpoint.load(path))


def train_wam(
    episodes: Sequence[Episode], conf: RunConfig, steps: Optional[int] = None
) -> tuple[WorldActionModel, list[dict]]:
    if not episodes:
        raise DatasetError("no demonstrations to train on")
    model = WorldActionModel(conf.model, conf.seed)
    train = conf.train
    settings = AdamSettings(train.wam_lr, train.beta1, train.beta2, train.eps)
    rng = rng_stream(conf.seed, "wam-train")
    history = []
    n_steps = train.wam_steps if steps is None else steps
    for step in range(1, n_steps + 1):
        picks = rng.integers(0, len(episodes), size=train.batch)
        batch = [
            sample_training_window(episodes[i], conf.model.H, conf.model.r, rng)
            for i in picks
        ]
        loss_act, loss_vid = model.train_step(batch, settings, train.vid_weight)
        history.append({"step": step, "loss_act": loss_act, "loss_vid": loss_vid})
        if step % train.log_every == 0 or step == n_steps:
            logger.info("wam step", step=step, loss_act=loss_act, loss_vid=loss_vid)
    model.trained = True
    return model, history


def _task_index(task_id: str) -> int:
    try:
        return TASK_IDS.index(task_id)
    except ValueError:
        raise ConfigurationError(f"unknown task_id {task_id!r}") from None


def _culprits(model: WorldActionModel, batch: Sequence[TrainWindow]) -> list:
    bad = []
    for window in batch:
        try:
            model.losses([window])
        except NonFiniteError:
            bad.append(window.key)
    model.store.zero_grad()
    return bad or [w.key for w in batch]
