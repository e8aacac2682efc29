"""Binary verification dataset built from demos, rollouts and corruptions."""
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from structlog import get_logger

from .config import RunConfig, VerdataConfig
from .constants import (
    CORRUPT_PROVENANCE,
    GRIPPER_DIM,
    HARD_TASKS,
    POSITIVE_PROVENANCE,
    Provenance,
)
from .exceptions import DatasetError
from .execution import ExecPolicy, run_episode
from .simenv import EnvState, Episode, TaskSpec, segment_oracle
from .utils import (
    derive_seed,
    hash_str,
    map_episodes,
    read_jsonl,
    rng_stream,
    write_jsonl,
)
from .wam import PredictedRollout, window_indices

logger = get_logger()


def temporal_swap(actions: np.ndarray, rng: np.random.Generator, pairs=None):
    """exchange the actions of two disjoint index pairs"""
    out = np.array(actions, dtype=np.float64)
    if len(out) < 4:
        raise DatasetError(f"temporal swap needs at least 4 actions, got {len(out)}")
    if pairs is None:
        idx = rng.choice(len(out), size=4, replace=False)
        pairs = [(idx[0], idx[1]), (idx[2], idx[3])]
    for a, b in pairs:
        out[[a, b]] = out[[b, a]]
    return out


def gripper_flip(actions: np.ndarray, gripper_dims: Iterable[int] = (GRIPPER_DIM,)):
    out = np.array(actions, dtype=np.float64)
    dims = list(gripper_dims)
    bad = [d for d in dims if not 0 <= d < out.shape[-1]]
    if bad:
        raise DatasetError(f"invalid gripper dimensions {bad} for shape {out.shape}")
    out[:, dims] = -out[:, dims]
    return out


def late_noise(actions: np.ndarray, sigma: float, rng: np.random.Generator):
    """gaussian noise on every coordinate of the second half"""
    if sigma < 0:
        raise DatasetError(f"negative noise scale {sigma}")
    out = np.array(actions, dtype=np.float64)
    if sigma == 0:
        return out
    start = math.ceil(len(out) / 2)
    out[start:] += rng.normal(0.0, sigma, size=out[start:].shape)
    return out


def tail_scale(
    actions: np.ndarray,
    rng: np.random.Generator,
    scale_range=(0.1, 0.6),
    start: Optional[int] = None,
    scale: Optional[float] = None,
):
    """shrink the motion of a random suffix, leaving the gripper alone"""
    out = np.array(actions, dtype=np.float64)
    if len(out) < 2:
        raise DatasetError("tail scale needs at least 2 actions")
    start = int(rng.integers(1, len(out))) if start is None else start
    scale = float(rng.uniform(*scale_range)) if scale is None else scale
    out[start:, :GRIPPER_DIM] *= scale
    return out


CORRUPTIONS = CORRUPT_PROVENANCE


def apply_corruption(kind: str, segment: np.ndarray, rng, conf: VerdataConfig):
    if kind == Provenance.CORRUPT_SWAP:
        return temporal_swap(segment, rng)
    if kind == Provenance.CORRUPT_FLIP:
        return gripper_flip(segment)
    if kind == Provenance.CORRUPT_NOISE:
        return late_noise(segment, conf.late_noise_sigma, rng)
    if kind == Provenance.CORRUPT_TAIL:
        return tail_scale(segment, rng, conf.tail_scale_range)
    raise DatasetError(f"unknown corruption {kind!r}")


@dataclass
class VerifierSample:
    rollout: PredictedRollout
    o_real: np.ndarray
    t_off: int
    k: int
    label: int
    provenance: str
    task_id: str
    seed: int
    episode_id: int = 0
    heldout: bool = False
    state: Optional[EnvState] = field(default=None, repr=False)

    def __post_init__(self):
        if self.label != int(self.provenance in POSITIVE_PROVENANCE):
            raise DatasetError(f"label {self.label} contradicts {self.provenance}")

    @property
    def segment(self) -> np.ndarray:
        return self.rollout.actions[self.t_off : self.t_off + self.k]

    @property
    def key(self) -> tuple:
        return (self.task_id, self.seed, self.rollout.origin_step, self.t_off)

    def to_record(self) -> dict:
        ro = self.rollout
        return {
            "rollout": {
                "actions": ro.actions.tolist(),
                "latents": ro.latents.tolist(),
                "semantic_tokens": ro.semantic_tokens.tolist(),
                "origin_step": ro.origin_step,
                "task_id": ro.task_id,
                "o_t": ro.o_t.tolist(),
            },
            "o_real": self.o_real.tolist(),
            "t_off": self.t_off,
            "k": self.k,
            "label": self.label,
            "provenance": self.provenance,
            "task_id": self.task_id,
            "seed": self.seed,
            "episode_id": self.episode_id,
            "heldout": self.heldout,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "VerifierSample":
        ro = rec["rollout"]
        rollout = PredictedRollout(
            np.array(ro["actions"]),
            np.array(ro["latents"]),
            np.array(ro["semantic_tokens"]),
            ro["origin_step"],
            ro["task_id"],
            np.array(ro["o_t"]),
        )
        fields = {k: v for k, v in rec.items() if k not in ("rollout", "o_real")}
        return cls(rollout, np.array(rec["o_real"]), **fields)


def is_heldout(task_id: str, seed: int, fraction: float) -> bool:
    return int(hash_str(f"{task_id}:{seed}"), 16) % 1000 < fraction * 1000


def in_grasp_zone(sample: VerifierSample) -> bool:
    """the segment opens or closes the gripper"""
    grip = np.sign(sample.segment[:, GRIPPER_DIM])
    prev = np.sign(sample.state.gripper) if sample.state else grip[0]
    return bool(np.any(np.diff(np.concatenate([[prev], grip])) != 0))


@dataclass
class Candidates:
    samples: list[VerifierSample] = field(default_factory=list)
    tally: Counter = field(default_factory=Counter)
    grasp_outcomes: Counter = field(default_factory=Counter)

    @property
    def discarded(self) -> Counter:
        out = Counter()
        for (_, prov, outcome), n in self.tally.items():
            if outcome == "discarded":
                out[prov] += n
        return out

    def offer(self, sample: VerifierSample, spec: TaskSpec, conf: RunConfig) -> bool:
        """keep the sample only if the simulator oracle agrees with its label"""
        valid = segment_oracle(
            spec, conf.env, sample.state, sample.segment, conf.model.latent_dim
        )
        kept = valid == bool(sample.label)
        if kept:
            self.samples.append(sample)
        outcome = "kept" if kept else "discarded"
        self.tally[(sample.task_id, sample.provenance, outcome)] += 1
        return kept

    def corrupt(self, spec: TaskSpec, conf: RunConfig, rng: np.random.Generator):
        positives = list(self.samples)
        zone = [s for s in positives if in_grasp_zone(s)]
        kinds = list(CORRUPTIONS)
        zone_rate = conf.verdata.grasp_zone_rate
        for _ in range(len(positives)):
            pool = zone if zone and rng.random() < zone_rate else positives
            base = pool[int(rng.integers(len(pool)))]
            kind = kinds[int(rng.integers(len(kinds)))]
            seg = apply_corruption(kind, base.segment, rng, conf.verdata)
            actions = base.rollout.actions.copy()
            actions[base.t_off : base.t_off + base.k] = seg
            rollout = replace(base.rollout, actions=actions, kv_cache=None)
            corrupted = replace(base, rollout=rollout, label=0, provenance=kind)
            kept = self.offer(corrupted, spec, conf)
            if spec.task_id in HARD_TASKS and in_grasp_zone(base):
                self.grasp_outcomes["failed" if kept else "replayed"] += 1


def demo_candidates(
    episode: Episode, conf: RunConfig, semantic: dict[str, np.ndarray]
) -> Candidates:
    model, T = conf.model, episode.length
    spec = TaskSpec.make(episode.task_id, episode.seed, conf.env)
    rng = rng_stream(conf.seed, "verdata-demo", episode.task_id, episode.seed)
    heldout = is_heldout(episode.task_id, episode.seed, conf.verdata.heldout_fraction)
    cands = Candidates()
    for _ in range(conf.verdata.windows_per_episode):
        t_off = int(rng.integers(0, (model.H - model.k) // model.r + 1)) * model.r
        if T - t_off < 1:
            t_off = 0
        s = int(rng.integers(1, T - t_off + 1))
        act_idx, lat_idx = window_indices(T, s, model.H, model.r)
        rollout = PredictedRollout(
            episode.actions[np.array(act_idx) - 1],
            episode.latents[np.array(lat_idx) - 1],
            semantic[episode.task_id],
            s - 1,
            episode.task_id,
            episode.latents[s - 1],
        )
        check = s - 1 + t_off
        sample = VerifierSample(
            rollout,
            episode.latents[check],
            t_off,
            model.k,
            1,
            Provenance.DEMO_POS,
            episode.task_id,
            episode.seed,
            episode.episode_id,
            heldout,
            episode.states[check],
        )
        cands.offer(sample, spec, conf)
    cands.corrupt(spec, conf, rng)
    return cands


def rollout_candidates(spec: TaskSpec, conf: RunConfig, wam) -> Candidates:
    model = conf.model
    policy = ExecPolicy(f"fixed-{model.H}", "fixed", model.H, model.r, n=model.H)
    trace = run_episode(policy, spec, wam, keep_history=True)
    provenance = Provenance.ROLLOUT_POS if trace.success else Provenance.ROLLOUT_NEG
    heldout = is_heldout(spec.task_id, spec.seed, conf.verdata.heldout_fraction)
    rng = rng_stream(conf.seed, "verdata-rollout", spec.task_id, spec.seed)
    cands = Candidates()
    for rollout in trace.chunks:
        for t_off in range(0, model.H - model.k + 1, model.r):
            check = rollout.origin_step + t_off
            if check >= trace.steps:
                break
            sample = VerifierSample(
                rollout,
                trace.latents[check],
                t_off,
                model.k,
                int(trace.success),
                provenance,
                spec.task_id,
                spec.seed,
                0,
                heldout,
                trace.states[check],
            )
            cands.offer(sample, spec, conf)
    if trace.success:
        cands.corrupt(spec, conf, rng)
    return cands


@dataclass
class VerifierDataset:
    samples: list[VerifierSample]
    manifest: dict

    @property
    def train(self) -> list[VerifierSample]:
        return [s for s in self.samples if not s.heldout]

    @property
    def heldout(self) -> list[VerifierSample]:
        return [s for s in self.samples if s.heldout]

    def write(self, path: Path) -> Path:
        records = [{"manifest": self.manifest}] + [s.to_record() for s in self.samples]
        return write_jsonl(path, records)

    @classmethod
    def read(cls, path: Path, config_hash: Optional[str] = None) -> "VerifierDataset":
        records = read_jsonl(path)
        if not records or "manifest" not in records[0]:
            raise DatasetError(f"{path} does not start with a manifest line")
        manifest = records[0]["manifest"]
        if config_hash and manifest.get("config_hash") != config_hash:
            raise DatasetError(
                f"dataset built under config {manifest.get('config_hash')}, "
                f"not {config_hash}"
            )
        return cls([VerifierSample.from_record(r) for r in records[1:]], manifest)


def _split(n: int, ratio: Sequence[int]) -> tuple[int, int]:
    first = round(n * ratio[0] / sum(ratio))
    return first, n - first


def _take(pools: list[list], wants: list[int], rng: np.random.Generator) -> list:
    """draw ``wants[i]`` from ``pools[i]``, topping up a short pool from the other"""
    have = [min(len(p), w) for p, w in zip(pools, wants)]
    short = sum(wants) - sum(have)
    for i, pool in enumerate(pools):
        extra = min(short, len(pool) - have[i])
        have[i] += extra
        short -= extra
    out = []
    for pool, n in zip(pools, have):
        idx = np.sort(rng.choice(len(pool), size=n, replace=False)) if n else []
        out.extend(pool[i] for i in idx)
    return out


def mix_pools(
    samples: Sequence[VerifierSample], conf: RunConfig, rng: np.random.Generator
) -> tuple[list[VerifierSample], int]:
    vconf = conf.verdata
    by_prov = {p: [s for s in samples if s.provenance == p] for p in Provenance.ALL}
    corrupt = [s for s in samples if s.provenance in CORRUPT_PROVENANCE]
    target = vconf.samples_per_class
    pos = _take(
        [by_prov[Provenance.DEMO_POS], by_prov[Provenance.ROLLOUT_POS]],
        list(_split(target, vconf.demo_rollout_ratio)),
        rng,
    )
    neg = _take(
        [by_prov[Provenance.ROLLOUT_NEG], corrupt],
        list(_split(target, vconf.neg_rollout_corrupt_ratio)),
        rng,
    )
    n = min(len(pos), len(neg))
    if n < target:
        logger.warning(
            "too few samples for the requested class size",
            requested=target,
            achieved=n,
            positives=len(pos),
            negatives=len(neg),
        )
    keep = []
    for cls_samples in (pos, neg):
        idx = np.sort(rng.choice(len(cls_samples), size=n, replace=False))
        keep.extend(cls_samples[i] for i in idx)
    return keep, n


def build_dataset(
    demos: Sequence[Episode], wam, conf: RunConfig, config_hash: str = ""
) -> VerifierDataset:
    semantic = {task: wam.semantic_tokens(task) for task in conf.exec.tasks}
    workers = conf.exec.parallel_episodes
    by_task = [ep for ep in demos if ep.task_id in semantic and ep.success]
    demo_job = partial(demo_candidates, conf=conf, semantic=semantic)
    specs = [
        TaskSpec.make(task, derive_seed(conf.seed, f"rollout:{task}", i), conf.env)
        for task in conf.exec.tasks
        for i in range(conf.verdata.rollouts_per_task)
    ]
    rollout_job = partial(rollout_candidates, conf=conf, wam=wam)
    batches = map_episodes(demo_job, by_task, workers)
    batches += map_episodes(rollout_job, specs, workers)

    pooled, discarded = [], Counter()
    for cands in batches:
        pooled.extend(cands.samples)
        discarded.update(cands.discarded)
    pool_sizes = Counter(s.provenance for s in pooled)
    logger.info("verifier pools", **dict(sorted(pool_sizes.items())))

    samples, per_class = mix_pools(pooled, conf, rng_stream(conf.seed, "verdata-mix"))
    counts = Counter(s.provenance for s in samples)
    positives = sum(c for p, c in counts.items() if p in POSITIVE_PROVENANCE)
    manifest = {
        "config_hash": config_hash,
        "counts": dict(sorted(counts.items())),
        "pools": dict(sorted(pool_sizes.items())),
        "discarded": dict(sorted(discarded.items())),
        "requested_per_class": conf.verdata.samples_per_class,
        "achieved_per_class": per_class,
        "balance": positives / max(len(samples), 1),
        "heldout": sum(s.heldout for s in samples),
        "hard_corrupt_fail_rate": _hard_corrupt_fail_rate(batches),
    }
    logger.info("verifier dataset", size=len(samples), balance=manifest["balance"])
    return VerifierDataset(samples, manifest)


def _hard_corrupt_fail_rate(batches: Sequence[Candidates]) -> Optional[float]:
    """share of corrupted hard-task grasp segments that fail open-loop replay"""
    outcomes = sum((cands.grasp_outcomes for cands in batches), Counter())
    total = outcomes["failed"] + outcomes["replayed"]
    return outcomes["failed"] / total if total else None
