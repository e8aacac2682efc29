from typing import Optional, Sequence

import numpy as np
from structlog import get_logger

from ..config import RunConfig
from ..exceptions import DatasetError
from ..nn.optim import AdamSettings
from ..utils import rng_stream
from ..verdata import VerifierSample
from .model import FFDCVerifier

logger = get_logger()

EVAL_BATCH = 256


def train_verifier(
    samples: Sequence[VerifierSample],
    conf: RunConfig,
    ablation: str,
    steps: Optional[int] = None,
) -> tuple[FFDCVerifier, list[dict]]:
    if not samples:
        raise DatasetError("no training samples for the verifier")
    verifier = FFDCVerifier(conf.model, conf.seed, ablation)
    train = conf.train
    settings = AdamSettings(train.verifier_lr, train.beta1, train.beta2, train.eps)
    tokens = [verifier.assemble(s.rollout, s.o_real, s.t_off) for s in samples]
    labels = np.array([s.label for s in samples], dtype=np.float64)
    rng = rng_stream(conf.seed, "verifier-train", ablation)
    n_steps = train.verifier_steps if steps is None else steps
    history = []
    for step in range(1, n_steps + 1):
        idx = rng.choice(len(tokens), size=min(train.batch, len(tokens)), replace=False)
        loss = verifier.train_step([tokens[i] for i in idx], labels[idx], settings)
        history.append({"step": step, "loss": loss})
        if step % train.log_every == 0 or step == n_steps:
            logger.info("verifier step", step=step, loss=loss, ablation=ablation)
    return verifier, history


def score_samples(verifier: FFDCVerifier, samples: Sequence[VerifierSample]):
    scores = []
    for start in range(0, len(samples), EVAL_BATCH):
        chunk = samples[start : start + EVAL_BATCH]
        batch = [verifier.assemble(s.rollout, s.o_real, s.t_off) for s in chunk]
        scores.append(verifier.predict_proba(batch))
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(
    verifier: FFDCVerifier, samples: Sequence[VerifierSample], tau: float = 0.5
) -> dict:
    if not samples:
        raise DatasetError("no samples to evaluate on")
    scores = score_samples(verifier, samples)
    labels = np.array([s.label for s in samples])
    correct = (scores >= tau) == (labels == 1)
    mean_pos = float(scores[labels == 1].mean()) if (labels == 1).any() else None
    mean_neg = float(scores[labels == 0].mean()) if (labels == 0).any() else None
    provenances = sorted({s.provenance for s in samples})
    per_prov = {
        p: float(correct[[s.provenance == p for s in samples]].mean())
        for p in provenances
    }
    return {
        "accuracy": float(correct.mean()),
        "mean_pos": mean_pos,
        "mean_neg": mean_neg,
        "separation": None if None in (mean_pos, mean_neg) else mean_pos - mean_neg,
        "per_provenance": per_prov,
        "n": len(samples),
    }
