import time
from contextlib import contextmanager
from functools import partial
from pathlib import Path
from typing import Optional

import typer
from structlog import get_logger

from .config import RunConfig, validate_ablation
from .constants import (
    BASE_WAM_FILE,
    DEMOS_FILE,
    EPISODES_FILE,
    SUMMARY_FILE,
    VERDATA_FILE,
    VERIFIER_FILE,
    WAM_FILE,
    Ablations,
    Stages,
)
from .exceptions import SluiceError, StageError
from .execution import ExecPolicy, run_benchmark
from .report import compare_report, summarize, write_summary
from .simenv import generate_demos, read_demos, write_demos
from .utils import read_jsonl, run_and_log_functions, write_jsonl
from .verdata import VerifierDataset, build_dataset
from .verifier import FFDCVerifier, evaluate, train_verifier
from .wam import WorldActionModel, train_wam
from .workspace import Workspace

logger = get_logger()

app = typer.Typer(help="future-reality verified chunk execution, end to end")

CONFIG_OPT = typer.Option(None, "--config", help="JSON run config")
SEED_OPT = typer.Option(None, "--seed")
OUT_OPT = typer.Option(None, "--out", help="output root")
FORCE_OPT = typer.Option(False, "--force", help="overwrite existing stage output")
ABLATION_OPT = typer.Option(Ablations.FULL, "--ablation")
PARALLEL_OPT = typer.Option(None, "--parallel-episodes", min=1)


@contextmanager
def _exit_on_error(command: str):
    try:
        yield
    except SluiceError as e:
        logger.error("command failed", command=command, error=str(e))
        raise typer.Exit(code=1)


def _workspace(config, seed, out, parallel) -> Workspace:
    return Workspace(RunConfig.load(config, seed=seed, out_dir=out, parallel=parallel))


def _namespaced(stage_dir: Path, ctx) -> dict:
    return {f"{stage_dir.name}/{name}": h for name, h in ctx.outputs.items()}


def demos_stage(ws: Workspace, force: bool = False) -> Path:
    conf, started = ws.conf, time.time()
    path = ws.begin(Stages.DEMOS, force)
    episodes = generate_demos(
        conf.env,
        conf.seed,
        conf.verdata.demos_per_task,
        conf.exec.tasks,
        conf.exec.parallel_episodes,
        conf.model.latent_dim,
    )
    out = path / DEMOS_FILE
    summary = {
        "episodes": len(episodes),
        "successful": sum(ep.success for ep in episodes),
    }
    run_and_log_functions(
        [
            partial(write_demos, out, episodes),
            partial(ws.finish, Stages.DEMOS, path, [out], None, summary, started),
        ],
        stage=Stages.DEMOS,
    )
    return out


def wam_stage(ws: Workspace, force: bool = False) -> Path:
    started = time.time()
    upstream = ws.require(Stages.DEMOS)
    demo_dir = ws.stage_dir(Stages.DEMOS)
    path = ws.begin(Stages.WAM, force)
    demos = read_demos(demo_dir / DEMOS_FILE, only_successful=True)
    model, history = train_wam(demos, ws.conf)
    out = path / WAM_FILE
    meta = {"config_hash": ws.config_hash}
    saves = {out: model.checkpoint(meta)}
    summary = {"steps": len(history), "final": history[-1] if history else None}
    for H in ws.conf.base_horizons:
        logger.info("training baseline model", H=H)
        base, base_history = train_wam(demos, ws.conf.with_horizon(H))
        saves[path / BASE_WAM_FILE.format(H)] = base.checkpoint(meta)
        summary[f"base-{H}"] = base_history[-1] if base_history else None
    run_and_log_functions(
        [
            *[partial(ckpt.save, p) for p, ckpt in saves.items()],
            partial(
                ws.finish,
                Stages.WAM,
                path,
                list(saves),
                _namespaced(demo_dir, upstream),
                summary,
                started,
            ),
        ],
        stage=Stages.WAM,
    )
    return out


def verdata_stage(ws: Workspace, force: bool = False) -> Path:
    started = time.time()
    inputs = {}
    for stage in (Stages.DEMOS, Stages.WAM):
        inputs.update(_namespaced(ws.stage_dir(stage), ws.require(stage)))
    path = ws.begin(Stages.VERDATA, force)
    demos = read_demos(ws.stage_dir(Stages.DEMOS) / DEMOS_FILE)
    wam = WorldActionModel.load(ws.stage_dir(Stages.WAM) / WAM_FILE)
    dataset = build_dataset(demos, wam, ws.conf, ws.config_hash)
    out = path / VERDATA_FILE
    run_and_log_functions(
        [
            partial(dataset.write, out),
            partial(
                ws.finish,
                Stages.VERDATA,
                path,
                [out],
                inputs,
                dataset.manifest,
                started,
            ),
        ],
        stage=Stages.VERDATA,
    )
    return out


def verifier_stage(ws: Workspace, ablation: str, force: bool = False) -> Path:
    started = time.time()
    validate_ablation(ablation)
    upstream = ws.require(Stages.VERDATA)
    data_dir = ws.stage_dir(Stages.VERDATA)
    path = ws.begin(Stages.VERIFIER, force, ablation)
    dataset = VerifierDataset.read(data_dir / VERDATA_FILE, ws.config_hash)
    verifier, history = train_verifier(dataset.train, ws.conf, ablation)
    heldout = dataset.heldout
    metrics = evaluate(verifier, heldout, ws.conf.exec.tau) if heldout else None
    if metrics is None:
        logger.warning("no held-out samples, skipping evaluation", ablation=ablation)
    out = path / VERIFIER_FILE
    ckpt = verifier.checkpoint({"config_hash": ws.config_hash})
    summary = {
        "ablation": ablation,
        "steps": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "heldout": metrics,
    }
    run_and_log_functions(
        [
            partial(ckpt.save, out),
            partial(
                ws.finish,
                Stages.VERIFIER,
                path,
                [out],
                _namespaced(data_dir, upstream),
                summary,
                started,
            ),
        ],
        stage=Stages.VERIFIER,
        ablation=ablation,
    )
    return out


def benchmark_stage(ws: Workspace, ablation: str, force: bool = False) -> Path:
    conf, started = ws.conf, time.time()
    validate_ablation(ablation)
    inputs = _namespaced(ws.stage_dir(Stages.WAM), ws.require(Stages.WAM))
    policies = [ExecPolicy.parse(p, conf) for p in conf.exec.policies]
    verifier = None
    if any(p.adaptive for p in policies):
        ver_dir = ws.stage_dir(Stages.VERIFIER, ablation)
        inputs.update(_namespaced(ver_dir, ws.require(Stages.VERIFIER, ablation)))
        verifier = FFDCVerifier.load(ver_dir / VERIFIER_FILE)
    path = ws.begin(Stages.BENCHMARK, force)
    wam_dir = ws.stage_dir(Stages.WAM)
    wam = WorldActionModel.load(wam_dir / WAM_FILE)
    base_wams = {
        H: WorldActionModel.load(wam_dir / BASE_WAM_FILE.format(H))
        for H in conf.base_horizons
    }
    traces = run_benchmark(conf, wam, verifier, base_wams=base_wams)
    records = [t.to_record(conf.env.setting) for t in traces]
    out, table = path / EPISODES_FILE, summarize(records)
    summary = {
        "ablation": ablation,
        "episodes": len(records),
        "sr": {
            f"{row.policy}/{row.label}": float(row.sr) for row in table.itertuples()
        },
    }
    run_and_log_functions(
        [
            partial(write_jsonl, out, records),
            partial(write_summary, table, path / SUMMARY_FILE),
            partial(
                ws.finish,
                Stages.BENCHMARK,
                path,
                [out, path / SUMMARY_FILE],
                inputs,
                summary,
                started,
            ),
        ],
        stage=Stages.BENCHMARK,
    )
    return out


def report_stage(ws: Workspace) -> dict[str, Path]:
    bench_dir = ws.stage_dir(Stages.BENCHMARK)
    episodes = bench_dir / EPISODES_FILE
    if not episodes.exists():
        raise StageError(f"no metrics at {episodes}, run `sluice benchmark` first")
    ws.require(Stages.BENCHMARK)
    return compare_report(read_jsonl(episodes), bench_dir, ws.conf.exec.tau)


@app.command("gen-demos")
def gen_demos(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
    parallel_episodes: Optional[int] = PARALLEL_OPT,
):
    """run the scripted expert and archive the demonstrations"""
    with _exit_on_error("gen-demos"):
        demos_stage(_workspace(config, seed, out, parallel_episodes), force)


@app.command("train-wam")
def train_wam_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
):
    with _exit_on_error("train-wam"):
        wam_stage(_workspace(config, seed, out, None), force)


@app.command("build-verdata")
def build_verdata(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
    parallel_episodes: Optional[int] = PARALLEL_OPT,
):
    with _exit_on_error("build-verdata"):
        verdata_stage(_workspace(config, seed, out, parallel_episodes), force)


@app.command("train-verifier")
def train_verifier_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
    ablation: str = ABLATION_OPT,
):
    """train one verifier variant and score it on the held-out split"""
    with _exit_on_error("train-verifier"):
        verifier_stage(_workspace(config, seed, out, None), ablation, force)


@app.command()
def benchmark(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
    ablation: str = ABLATION_OPT,
    parallel_episodes: Optional[int] = PARALLEL_OPT,
):
    with _exit_on_error("benchmark"):
        ws = _workspace(config, seed, out, parallel_episodes)
        benchmark_stage(ws, ablation, force)


@app.command()
def report(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
):
    """rebuild summary.csv, table.txt, frontier.svg and timeline.svg from episodes"""
    with _exit_on_error("report"):
        report_stage(_workspace(config, seed, out, None))


@app.command("run-all")
def run_all(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = OUT_OPT,
    force: bool = FORCE_OPT,
    ablation: str = ABLATION_OPT,
    parallel_episodes: Optional[int] = PARALLEL_OPT,
):
    with _exit_on_error("run-all"):
        ws = _workspace(config, seed, out, parallel_episodes)
        demos_stage(ws, force)
        wam_stage(ws, force)
        verdata_stage(ws, force)
        verifier_stage(ws, ablation, force)
        benchmark_stage(ws, ablation, force)
        report_stage(ws)
