"""The masked-attention verifier and its cached scoring path.

Prediction-side rows never look at the real observation or the CLS token in
cache-compatible mode, so their per-layer keys and values can be computed
once per chunk. A check then only runs the real-observation and CLS rows.
"""
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from structlog import get_logger

from ..config import ModelConfig
from ..constants import ACTION_DIM, Ablations, MaskModes
from ..exceptions import (
    ConfigurationError,
    DatasetError,
    NonFiniteError,
    StaleCacheError,
    TrainingError,
)
from ..nn import (
    MLP,
    Checkpoint,
    Dense,
    LayerNorm,
    ParamStore,
    Tensor,
    TransformerBlock,
    binary_cross_entropy,
    concat,
    masked_attention,
    step_with,
)
from ..nn.optim import AdamSettings
from ..nn.tensor import _sigmoid, broadcast_rows, take
from ..wam import PredictedRollout, time_slot
from .layout import CACHED_BLOCKS, FFDCMask, VerifierLayout, build_mask

logger = get_logger()


@dataclass
class VerifierTokens:
    """raw (unembedded) inputs of one check"""

    semantic: np.ndarray
    past: np.ndarray
    past_pad: np.ndarray
    real: np.ndarray
    future: np.ndarray
    actions: np.ndarray
    t_off: int
    origin_step: int = 0


def assemble_input(
    rollout: PredictedRollout, o_real: Optional[np.ndarray], t_off: int, k: int
) -> VerifierTokens:
    H, r = rollout.H, rollout.r
    if k % r:
        raise ConfigurationError(f"k={k} is not a multiple of r={r}")
    if t_off < 0 or t_off % r:
        raise ConfigurationError(f"offset {t_off} is not aligned to r={r}")
    if t_off + k > H:
        raise ConfigurationError(f"offset {t_off} + k={k} runs past the chunk H={H}")
    if rollout.o_t is None:
        raise ConfigurationError("rollout carries no conditioning latent")

    past_t = t_off + np.arange(-k + r, 1, r)
    past = [
        rollout.o_t if t <= 0 else rollout.latents[time_slot(t, r)] for t in past_t
    ]
    future_t = t_off + np.arange(1, k // r + 1) * r
    real = rollout.o_t if o_real is None else np.asarray(o_real, dtype=np.float64)
    if real.shape != rollout.o_t.shape:
        raise ConfigurationError(f"real latent {real.shape} != {rollout.o_t.shape}")
    return VerifierTokens(
        semantic=rollout.semantic_tokens,
        past=np.stack(past),
        past_pad=past_t <= 0,
        real=real,
        future=rollout.latents[[time_slot(t, r) for t in future_t]],
        actions=rollout.actions[t_off : t_off + k],
        t_off=t_off,
        origin_step=rollout.origin_step,
    )


@dataclass
class KVCache:
    origin_step: int
    t_off: int
    layout: VerifierLayout
    keys: list[np.ndarray]
    values: list[np.ndarray]

    @property
    def rows(self) -> int:
        return self.keys[0].shape[0]

    def to_bytes(self) -> bytes:
        pairs = zip(self.keys, self.values)
        return b"".join(a.tobytes() for pair in pairs for a in pair)


@dataclass
class ChunkCache:
    """everything a chunk needs for its checks, built right after prediction"""

    rollout: PredictedRollout
    windows: dict[int, KVCache] = field(default_factory=dict)

    @property
    def origin_step(self) -> int:
        return self.rollout.origin_step


class FFDCVerifier:
    def __init__(self, conf: ModelConfig, seed: int = 0, ablation=Ablations.FULL):
        self.conf = conf
        self.ablation = ablation
        self.layout = VerifierLayout(conf.n_L, conf.k, conf.r, ablation)
        store = self.store = ParamStore(seed)
        width = conf.width
        self.sem_embed = Dense(store, "ver.sem_embed", conf.sem_dim, width)
        self.sem_slots = store.add("ver.sem_slots", (conf.n_L, width), width)
        self.pred_embed = Dense(store, "ver.pred_embed", conf.latent_dim, width)
        self.real_embed = Dense(store, "ver.real_embed", conf.latent_dim, width)
        self.action_embed = Dense(store, "ver.action_embed", ACTION_DIM, width)
        self.positions = store.add("ver.positions", (2 * conf.k + 1, width), width)
        self.pad = store.add("ver.pad", (width,), width)
        self.cls = store.add("ver.cls", (width,), width)
        self.blocks = [
            TransformerBlock(store, f"ver.block{i}", width, conf.heads)
            for i in range(conf.layers)
        ]
        self.ln_out = LayerNorm(store, "ver.ln_out", width)
        self.head = MLP(store, "ver.head", [width, width, 1], zero_last=True)

    @cached_property
    def mask(self) -> FFDCMask:
        return build_mask(self.layout, self.conf.window, self.conf.mask_mode)

    @property
    def cacheable(self) -> bool:
        return self.conf.mask_mode == MaskModes.CACHE_COMPATIBLE

    def assemble(self, rollout, o_real, t_off: int) -> VerifierTokens:
        return assemble_input(rollout, o_real, t_off, self.conf.k)

    def _pos(self, offsets) -> Tensor:
        return take(self.positions, np.asarray(offsets) + self.conf.k)

    def embed_block(self, block: str, batch: Sequence[VerifierTokens]) -> Tensor:
        n_b = len(batch)
        lay = self.layout
        if block == "L":
            sem = np.stack([t.semantic for t in batch])
            return self.sem_embed(Tensor(sem)) + self.sem_slots
        if block == "past":
            past = self.pred_embed(Tensor(np.stack([t.past for t in batch])))
            flags = np.stack([t.past_pad for t in batch]).astype(float)[..., None]
            return past + self._pos(lay.past_offsets()) + flags * self.pad
        if block == "real":
            real = np.stack([t.real for t in batch])[:, None, :]
            return self.real_embed(Tensor(real)) + self._pos([0])
        if block == "future":
            fut = self.pred_embed(Tensor(np.stack([t.future for t in batch])))
            return fut + self._pos(lay.future_offsets())
        if block == "action":
            acts = self.action_embed(Tensor(np.stack([t.actions for t in batch])))
            return acts + self._pos(lay.action_offsets())
        if block == "cls":
            return broadcast_rows(self.cls.reshape(1, self.conf.width), (n_b,))
        raise ConfigurationError(f"unknown token block {block!r}")

    def embed(self, batch: Sequence[VerifierTokens], blocks=None) -> Tensor:
        names = [b for b, _ in self.layout.blocks if blocks is None or b in blocks]
        return concat([self.embed_block(b, batch) for b in names], axis=-2)

    def hidden_states(self, x: Tensor, bits: np.ndarray) -> list[Tensor]:
        states = [x]
        for block in self.blocks:
            states.append(block(states[-1], bits))
        return states

    def logits_from_hidden(self, x: Tensor, cls_row: int) -> Tensor:
        cls = x[:, cls_row, :]
        return self.head(self.ln_out(cls)).reshape(-1)

    def logits(
        self, batch: Sequence[VerifierTokens], mask: Optional[FFDCMask] = None
    ) -> Tensor:
        mask = mask or self.mask
        if mask.bits.shape != (self.layout.n, self.layout.n):
            raise ConfigurationError(
                f"mask {mask.bits.shape} does not fit {self.layout.n} tokens"
            )
        x = self.hidden_states(self.embed(batch), mask.bits)[-1]
        return self.logits_from_hidden(x, self.layout.span("cls").start)

    def score_full(self, tokens: VerifierTokens, mask: Optional[FFDCMask] = None):
        z = self.logits([tokens], mask).data[0]
        return float(_sigmoid(np.array(z)))

    def cache_build(self, rollout: PredictedRollout, t_off: int) -> KVCache:
        if not self.cacheable:
            raise ConfigurationError("full_fidelity masks cannot use a cache")
        tokens = self.assemble(rollout, None, t_off)
        rows = self.layout.rows(CACHED_BLOCKS)
        bits = self.mask.sub(rows, rows)
        x = self.embed([tokens], CACHED_BLOCKS)
        keys, values = [], []
        for block in self.blocks:
            q, k, v = block.qkv(x)
            keys.append(k.data[0].copy())
            values.append(v.data[0].copy())
            x = block.finish(x, masked_attention(q, k, v, bits, block.heads))
        return KVCache(rollout.origin_step, t_off, self.layout, keys, values)

    def score_cached(
        self,
        cache: KVCache,
        o_real: np.ndarray,
        t_off: int,
        origin_step: Optional[int] = None,
    ) -> float:
        if cache.t_off != t_off:
            raise StaleCacheError(f"cache built for offset {cache.t_off}, not {t_off}")
        if origin_step is not None and origin_step != cache.origin_step:
            raise StaleCacheError(
                f"cache from the chunk at step {cache.origin_step}, not {origin_step}"
            )
        if cache.layout != self.layout:
            raise StaleCacheError("cache was built for another token layout")
        lay = self.layout
        fresh_names = [b for b in ("real", "cls") if lay.has(b)]
        real = np.asarray(o_real, dtype=np.float64)
        if real.shape != (self.conf.latent_dim,):
            raise ConfigurationError(f"real latent {real.shape} does not fit the model")
        # only the real and cls blocks read these tokens
        tokens = VerifierTokens(None, None, None, real, None, None, t_off)
        xf = concat([self.embed_block(b, [tokens]) for b in fresh_names], axis=-2)
        fresh = lay.rows(set(fresh_names))
        cached = lay.rows(CACHED_BLOCKS)
        bits = self.mask.bits[fresh]
        for i, block in enumerate(self.blocks):
            q, k, v = block.qkv(xf)
            keys = np.empty((lay.n, self.conf.width))
            values = np.empty_like(keys)
            keys[cached], values[cached] = cache.keys[i], cache.values[i]
            keys[fresh], values[fresh] = k.data[0], v.data[0]
            att = masked_attention(
                q, Tensor(keys[None]), Tensor(values[None]), bits, block.heads
            )
            xf = block.finish(xf, att)
        z = self.logits_from_hidden(xf, len(fresh_names) - 1).data[0]
        return float(_sigmoid(np.array(z)))

    def prepare(self, rollout: PredictedRollout) -> ChunkCache:
        chunk = ChunkCache(rollout)
        if self.cacheable:
            for t_off in range(0, rollout.H - self.conf.k + 1, self.conf.r):
                chunk.windows[t_off] = self.cache_build(rollout, t_off)
        rollout.kv_cache = chunk
        return chunk

    def score(self, chunk: ChunkCache, o_real: np.ndarray, t_off: int) -> float:
        if not self.cacheable:
            return self.score_full(self.assemble(chunk.rollout, o_real, t_off))
        if t_off not in chunk.windows:
            raise StaleCacheError(f"no cached window at offset {t_off}")
        return self.score_cached(chunk.windows[t_off], o_real, t_off, chunk.origin_step)

    def check_flops(self) -> int:
        """forward cost proxy of one cached check"""
        lay, width = self.layout, self.conf.width
        fresh = int(lay.has("real")) + 1
        per_layer = sum(b.row_flops(fresh) for b in self.blocks)
        attention = self.conf.layers * 2 * fresh * lay.n * width
        return per_layer + attention + self.head.flops + self.real_embed.flops

    def prepare_flops(self, windows: int) -> int:
        rows = len(self.layout.rows(CACHED_BLOCKS))
        per_window = sum(b.row_flops(rows) for b in self.blocks)
        per_window += self.conf.layers * 2 * rows * rows * self.conf.width
        return windows * per_window

    def train_step(
        self, batch: Sequence[VerifierTokens], labels, settings: AdamSettings
    ) -> float:
        if not len(batch):
            raise DatasetError("empty verifier batch")
        try:
            loss = binary_cross_entropy(self.logits(batch), np.asarray(labels))
            loss.backward()
        except NonFiniteError as e:
            self.store.zero_grad()
            raise TrainingError(f"non-finite verifier loss: {e}") from e
        step_with(self.store, settings)
        return loss.item()

    def predict_proba(self, batch: Sequence[VerifierTokens]) -> np.ndarray:
        if not len(batch):
            return np.zeros(0)
        return _sigmoid(self.logits(batch).data)

    def checkpoint(self, meta: Optional[dict] = None) -> Checkpoint:
        info = {
            "kind": "verifier",
            "model": self.conf.model_dump(),
            "seed": self.store.seed,
            "ablation": self.ablation,
        }
        return Checkpoint.from_store(self.store, {**info, **(meta or {})})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FFDCVerifier":
        if ckpt.meta.get("kind") != "verifier":
            raise ConfigurationError(f"checkpoint holds {ckpt.meta.get('kind')!r}")
        meta = ckpt.meta
        model = cls(ModelConfig(**meta["model"]), meta["seed"], meta["ablation"])
        model.store.load_arrays(ckpt.arrays)
        return model

    @classmethod
    def load(cls, path: Path) -> "FFDCVerifier":
        return cls.from_checkpoint(Checkpoint.load(path))
