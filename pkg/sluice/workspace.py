import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from shutil import rmtree
from subprocess import DEVNULL, CalledProcessError, check_output
from typing import Optional

import yaml
from structlog import get_logger

from .config import RunConfig
from .constants import CONTEXT_YAML, SNAPSHOT_FILE, Ablations, Stages
from .exceptions import StageError
from .utils import hash_file

logger = get_logger()

UPSTREAM_COMMAND = {
    Stages.DEMOS: "gen-demos",
    Stages.WAM: "train-wam",
    Stages.VERDATA: "build-verdata",
    Stages.VERIFIER: "train-verifier",
    Stages.BENCHMARK: "benchmark",
}


def _get_git_hash():
    try:
        out = check_output(["git", "rev-parse", "HEAD"], stderr=DEVNULL)
        return out.decode("utf-8").strip()
    except (CalledProcessError, OSError):
        return None


def _plain(obj):
    """yaml-safe copy: numpy scalars and tuples become builtins"""
    return json.loads(json.dumps(obj, default=float))


@dataclass
class StageContext:
    stage: str
    config_hash: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    commit_hash: Optional[str] = field(default_factory=_get_git_hash)
    start_timestamp: float = field(default_factory=time.time)

    @classmethod
    def read(cls, dir_path: Path) -> "StageContext":
        return cls(**yaml.safe_load((dir_path / CONTEXT_YAML).read_text()))

    def dump(self, dir_path: Path):
        (dir_path / CONTEXT_YAML).write_text(yaml.safe_dump(_plain(asdict(self))))


class Workspace:
    """one directory per pipeline stage under the run's output root"""

    def __init__(self, conf: RunConfig):
        self.conf = conf
        self.root = conf.out_path
        self.config_hash = conf.config_hash()

    def stage_dir(self, stage: str, ablation: Optional[str] = None) -> Path:
        if stage == Stages.VERIFIER:
            return self.root / f"{stage}-{ablation or Ablations.FULL}"
        return self.root / stage

    def begin(self, stage: str, force: bool = False, ablation=None) -> Path:
        path = self.stage_dir(stage, ablation)
        if path.exists() and any(path.iterdir()):
            if not force:
                raise StageError(f"{path} already holds output, rerun with --force")
            rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, stage: str, ablation: Optional[str] = None) -> StageContext:
        path = self.stage_dir(stage, ablation)
        if not (path / CONTEXT_YAML).exists():
            raise StageError(
                f"missing upstream stage {path.name}, "
                f"run `sluice {UPSTREAM_COMMAND[stage]}` first"
            )
        ctx = StageContext.read(path)
        if ctx.config_hash != self.config_hash:
            raise StageError(
                f"{path.name} was built with config {ctx.config_hash}, "
                f"the current config hashes to {self.config_hash}; "
                "rerun the upstream stages or use the original config"
            )
        for name, digest in ctx.outputs.items():
            out = path / name
            if not out.exists():
                raise StageError(f"{path.name} lost its output {name}")
            if hash_file(out) != digest:
                raise StageError(
                    f"{path.name}/{name} changed since the stage finished, "
                    f"rerun `sluice {UPSTREAM_COMMAND[stage]} --force`"
                )
        return ctx

    def finish(
        self,
        stage: str,
        path: Path,
        outputs: list[Path],
        inputs: Optional[dict] = None,
        summary: Optional[dict] = None,
        started: Optional[float] = None,
    ) -> StageContext:
        (path / SNAPSHOT_FILE).write_text(
            json.dumps(self.conf.snapshot(), indent=2, sort_keys=True)
        )
        ctx = StageContext(
            stage,
            self.config_hash,
            inputs=inputs or {},
            outputs={p.name: hash_file(p) for p in outputs},
            summary=summary or {},
        )
        if started is not None:
            ctx.start_timestamp = started
        ctx.dump(path)
        logger.info("stage finished", stage=stage, out=path.as_posix())
        return ctx
