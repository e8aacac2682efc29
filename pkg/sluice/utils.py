import json
from functools import partial
from hashlib import md5
from pathlib import Path
from typing import Callable, Iterable, List

import numpy as np
from atqo import parallel_map
from structlog import get_logger

logger = get_logger()


def run_and_log_functions(function_list: List[Callable], **kwargs):
    for fun in function_list:
        fun_name = fun.func.__name__ if isinstance(fun, partial) else fun.__name__
        logger.info(f"running function {fun_name}", **kwargs)
        res = fun()
        logger.info(f"function {fun_name} returned {res}", **kwargs)


def hash_str(s: str) -> str:
    return md5(s.encode("utf-8")).hexdigest()[:20]


def hash_bytes(buf: bytes) -> str:
    return md5(buf).hexdigest()[:20]


def hash_file(path: Path) -> str:
    return hash_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """independent generator for (seed, tags...); tags may be ints or strings"""
    entropy = [seed, *[t if isinstance(t, int) else int(hash_str(t), 16) for t in tags]]
    return np.random.default_rng(entropy)


def derive_seed(base: int, purpose: str, index: int) -> int:
    return int(hash_str(f"{base}:{purpose}:{index}")[:8], 16)


def map_episodes(fun: Callable, items: Iterable, workers: int = 1) -> list:
    """run per-episode jobs, synchronously or through an atqo worker pool

    results come back in input order whatever order the workers finish in
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return list(map(fun, items))
    keyed = parallel_map(partial(_keyed, fun), enumerate(items), workers=workers)
    return [res for _, res in sorted(keyed, key=lambda pair: pair[0])]


def _keyed(fun: Callable, pair: tuple):
    index, item = pair
    return index, fun(item)


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    with Path(path).open("w", encoding="utf-8") as fp:
        for rec in records:
            fp.write(canonical_json(rec) + "\n")
    return Path(path)


def read_jsonl(path: Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
