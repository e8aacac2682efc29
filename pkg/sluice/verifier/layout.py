"""Token layout of the verifier input and its structured visibility mask.

Token order is ``[L, past, real, future, action, cls]``. Future latent ``j``
(1-based) sits at chunk-relative time ``j * r``, action ``i`` at time ``i``.
"""
from dataclasses import dataclass

import numpy as np

from ..constants import Ablations, MaskModes
from ..exceptions import ConfigurationError, MaskError

BLOCKS = ["L", "past", "real", "future", "action", "cls"]
PREFIX_BLOCKS = {"L", "past"}
CACHED_BLOCKS = {"L", "past", "future", "action"}

_DROPPED = {
    Ablations.FULL: set(),
    Ablations.NO_UND: {"L"},
    Ablations.NO_PRED: {"past", "future"},
    Ablations.NO_REAL: {"real"},
    Ablations.NO_ACTION: {"action"},
}


@dataclass(frozen=True)
class VerifierLayout:
    n_L: int
    k: int
    r: int
    ablation: str = Ablations.FULL

    def __post_init__(self):
        if self.r < 1 or self.k < 1 or self.k % self.r:
            raise ConfigurationError(f"k={self.k} is not a multiple of r={self.r}")
        if self.ablation not in _DROPPED:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")

    @property
    def n_p(self) -> int:
        return self.k // self.r

    @property
    def n_f(self) -> int:
        return self.k // self.r

    def size_of(self, block: str) -> int:
        if block in _DROPPED[self.ablation]:
            return 0
        return {
            "L": self.n_L,
            "past": self.n_p,
            "real": 1,
            "future": self.n_f,
            "action": self.k,
            "cls": 1,
        }[block]

    @property
    def blocks(self) -> list[tuple[str, int]]:
        return [(b, self.size_of(b)) for b in BLOCKS if self.size_of(b)]

    @property
    def n(self) -> int:
        return sum(size for _, size in self.blocks)

    def span(self, block: str) -> slice:
        start = 0
        for name, size in self.blocks:
            if name == block:
                return slice(start, start + size)
            start += size
        return slice(start, start)

    def rows(self, blocks) -> np.ndarray:
        idx = [np.arange(self.n)[self.span(b)] for b in BLOCKS if b in blocks]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def has(self, block: str) -> bool:
        return self.size_of(block) > 0

    def past_offsets(self) -> np.ndarray:
        """times of the past slots relative to the check step, oldest first"""
        return np.arange(-self.k + self.r, 1, self.r)

    def future_offsets(self) -> np.ndarray:
        return np.arange(1, self.n_f + 1) * self.r

    def action_offsets(self) -> np.ndarray:
        return np.arange(1, self.k + 1)

    def header(self) -> str:
        bounds = " ".join(
            f"{name}:{self.span(name).start}-{self.span(name).stop}"
            for name, _ in self.blocks
        )
        return f"blocks {bounds}"


@dataclass
class FFDCMask:
    layout: VerifierLayout
    w: int
    mode: str
    bits: np.ndarray

    def dump(self) -> str:
        lines = [
            f"# ffdc-mask k={self.layout.k} r={self.layout.r} w={self.w}"
            f" mode={self.mode}",
            f"# {self.layout.header()}",
        ]
        lines += ["".join("1" if b else "0" for b in row) for row in self.bits]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_bits(text: str) -> np.ndarray:
        rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
        rows = [ln for ln in rows if not ln.startswith("#")]
        return np.array([[c == "1" for c in ln] for ln in rows], dtype=bool)

    def sub(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.bits[np.ix_(rows, cols)]


def build_mask(layout: VerifierLayout, w: int, mode=MaskModes.CACHE_COMPATIBLE):
    if mode not in (MaskModes.CACHE_COMPATIBLE, MaskModes.FULL_FIDELITY):
        raise ConfigurationError(f"unknown mask mode {mode!r}")
    if w < layout.r:
        raise MaskError(f"window w={w} smaller than r={layout.r}")

    n = layout.n
    bits = np.zeros((n, n), dtype=bool)
    prefix = layout.rows(PREFIX_BLOCKS)
    real, cls = layout.span("real"), layout.span("cls")
    fut, act = layout.span("future"), layout.span("action")
    fut_t = layout.future_offsets()[: fut.stop - fut.start]
    act_t = layout.action_offsets()[: act.stop - act.start]

    bits[np.ix_(prefix, prefix)] = True
    bits[real, prefix] = True
    bits[real, real] = True

    future_rows = [(fut.start + j, t) for j, t in enumerate(fut_t)]
    action_rows = [(act.start + i, t) for i, t in enumerate(act_t)]
    for row, t in future_rows + action_rows:
        bits[row, prefix] = True
        if mode == MaskModes.FULL_FIDELITY:
            bits[row, real] = True
        for col, t_col in future_rows + action_rows:
            if t_col <= t and t - t_col <= w:
                bits[row, col] = True

    bits[cls, :] = True
    return FFDCMask(layout, w, mode, bits)
