import numpy as np
import pytest

from sluice.config import ModelConfig
from sluice.constants import TaskIds
from sluice.exceptions import ConfigurationError
from sluice.execution import (
    ConstantVerifier,
    CountingWAM,
    ExecPolicy,
    ScriptedVerifier,
    benchmark_specs,
    run_benchmark,
    run_episode,
)
from sluice.simenv import TaskSpec
from sluice.verifier import FFDCVerifier
from sluice.wam import PredictedRollout

MODEL = ModelConfig(H=8, r=2, k=4, latent_dim=8, n_L=2, sem_dim=4)
SPEC = TaskSpec(TaskIds.TRANSPORT_EASY, 0, T_max=20)


class IdleWAM:
    """predicts chunks that keep the gripper open and never move"""

    def __init__(self, conf=MODEL):
        self.conf = conf
        self.flops = 100

    def predict(self, o_t, task_id, origin_step=0):
        conf = self.conf
        actions = np.tile([0.0, 0.0, -1.0], (conf.H, 1))
        return PredictedRollout(
            actions,
            np.zeros((conf.H // conf.r, conf.latent_dim)),
            np.zeros((conf.n_L, conf.sem_dim)),
            origin_step,
            task_id,
            np.asarray(o_t),
        )


def _adaptive(tau=0.5, c=2):
    return ExecPolicy("adaptive", "adaptive", MODEL.H, MODEL.r, tau=tau, k=MODEL.k, c=c)


def _fixed(n):
    return ExecPolicy(f"fixed-{n}", "fixed", MODEL.H, MODEL.r, n=n)


@pytest.mark.parametrize(("n", "calls"), [(1, 20), (4, 5), (8, 3)])
def test_fixed_chunk_call_count(n, calls):
    trace = run_episode(_fixed(n), SPEC, IdleWAM())
    assert (trace.steps, trace.wam_calls, trace.verifier_checks) == (20, calls, 0)
    assert trace.wam_flops == 100 * calls
    assert not trace.success
    assert len(trace.records) == 20


def test_confident_verifier_never_replans():
    trace = run_episode(_adaptive(), SPEC, IdleWAM(), ConstantVerifier(1.0))
    assert trace.wam_calls == 3
    assert trace.verifier_checks == 5
    assert not any(rec["replan"] for rec in trace.records)
    assert [rec["e"] for rec in trace.records[:8]] == [
        None,
        1.0,
        None,
        1.0,
        None,
        None,
        None,
        None,
    ]


def test_doubtful_verifier_replans_at_first_check():
    trace = run_episode(_adaptive(), SPEC, IdleWAM(), ConstantVerifier(0.0))
    assert trace.wam_calls == 10
    assert trace.verifier_checks == 9
    assert sum(rec["replan"] for rec in trace.records) == 9


@pytest.mark.parametrize(("tau", "calls"), [(0.2, 3), (0.5, 3), (0.8, 10)])
def test_gate_is_inclusive_and_monotone(tau, calls):
    trace = run_episode(_adaptive(tau), SPEC, IdleWAM(), ConstantVerifier(0.5))
    assert trace.wam_calls == calls


def test_scripted_verifier_replans_where_told():
    verifier = ScriptedVerifier([0.9, 0.1])
    trace = run_episode(_adaptive(), SPEC, IdleWAM(), verifier)
    # chunk 1: pass at m=2, fail at m=4; then the pattern repeats
    assert [i for i, rec in enumerate(trace.records) if rec["replan"]][:2] == [3, 7]
    assert verifier.calls == trace.verifier_checks


def test_adaptive_without_replans_matches_fixed_h(tiny_wam):
    wam = tiny_wam
    spec = TaskSpec(TaskIds.TRANSPORT_EASY, 5)
    h = wam.conf.H
    fixed = run_episode(ExecPolicy("f", "fixed", h, wam.conf.r, n=h), spec, wam)
    adaptive = run_episode(
        ExecPolicy("a", "adaptive", h, wam.conf.r, tau=0.5, k=wam.conf.k, c=2),
        spec,
        wam,
        ConstantVerifier(0.9),
    )
    np.testing.assert_array_equal(fixed.actions, adaptive.actions)
    assert fixed.steps == adaptive.steps
    assert fixed.wam_calls == adaptive.wam_calls


def test_counting_wam_agrees_with_trace():
    counted = CountingWAM(IdleWAM())
    trace = run_episode(_adaptive(), SPEC, counted, ConstantVerifier(0.0))
    assert counted.calls == trace.wam_calls


def test_real_verifier_accounts_flops(tiny_wam):
    verifier = FFDCVerifier(tiny_wam.conf, seed=2)
    conf = tiny_wam.conf
    policy = ExecPolicy("a", "adaptive", conf.H, conf.r, tau=0.5, k=conf.k, c=conf.r)
    trace = run_episode(policy, SPEC, tiny_wam, verifier, keep_history=True)
    windows = (conf.H - conf.k) // conf.r + 1
    expected = trace.wam_calls * verifier.prepare_flops(windows)
    expected += trace.verifier_checks * verifier.check_flops()
    assert trace.verifier_flops == expected
    assert len(trace.states) == len(trace.latents) == trace.steps + 1
    assert len(trace.chunks) == trace.wam_calls
    assert all(ro.kv_cache.origin_step == ro.origin_step for ro in trace.chunks)
    assert all(rec["e"] == 0.5 for rec in trace.records if rec["e"] is not None)


def test_policy_parsing(tiny_config):
    fixed = ExecPolicy.parse("fixed-4", tiny_config)
    assert (fixed.kind, fixed.n, fixed.chunk_limit) == ("fixed", 4, 4)
    ada = ExecPolicy.parse("adaptive", tiny_config)
    assert (ada.tau, ada.c, ada.chunk_limit) == (0.5, 2, 8)
    assert ExecPolicy.parse("adaptive@0.75", tiny_config).tau == 0.75
    for bad in ["fixed-0", "fixed-9", "adaptive@1.5", "greedy"]:
        with pytest.raises(ConfigurationError):
            ExecPolicy.parse(bad, tiny_config)


def test_check_schedule():
    policy = ExecPolicy("a", "adaptive", 32, 4, tau=0.5, k=8, c=4)
    assert [m for m in range(1, 33) if policy.checks_at(m)] == [4, 8, 12, 16, 20, 24]
    wide = ExecPolicy("a", "adaptive", 32, 4, tau=0.5, k=8, c=6)
    assert [m for m in range(1, 33) if wide.checks_at(m)] == [12, 24]
    assert not any(_fixed(8).checks_at(m) for m in range(1, 9))


def test_misconfigured_runs():
    with pytest.raises(ConfigurationError, match="needs a verifier"):
        run_episode(_adaptive(), SPEC, IdleWAM())
    other = IdleWAM(MODEL.model_copy(update={"H": 16}))
    with pytest.raises(ConfigurationError):
        run_episode(_fixed(4), SPEC, other)


def test_benchmark_is_independent_of_workers(tiny_config):
    wam = IdleWAM(tiny_config.model)
    serial = run_benchmark(tiny_config, wam, ConstantVerifier(0.3))
    assert len(serial) == 3 * 2 * 2
    threaded_exec = tiny_config.exec.model_copy(update={"parallel_episodes": 3})
    threaded = tiny_config.model_copy(update={"exec": threaded_exec})
    parallel = run_benchmark(threaded, wam, ConstantVerifier(0.3))

    def strip(rec):
        return {k: v for k, v in rec.items() if k != "wall_seconds"}

    assert [strip(t.to_record()) for t in serial] == [
        strip(t.to_record()) for t in parallel
    ]
    seeds = [s.seed for s in benchmark_specs(tiny_config, TaskIds.INSERT_HARD)]
    assert seeds == [t.seed for t in serial[2:4]]


def test_base_policy_runs_its_own_model(tiny_config):
    base = ExecPolicy.parse("base-4", tiny_config)
    assert (base.kind, base.H, base.n, base.chunk_limit) == ("base", 4, 4, 4)
    assert not base.adaptive
    short = IdleWAM(tiny_config.with_horizon(4).model)
    counted = CountingWAM(short)
    long_model = IdleWAM(tiny_config.model)
    traces = run_benchmark(
        tiny_config,
        long_model,
        policies=["fixed-4", "base-4"],
        tasks=[TaskIds.TRANSPORT_EASY],
        base_wams={4: counted},
    )
    fixed, based = traces[:2], traces[2:]
    assert counted.calls == sum(t.wam_calls for t in based)
    assert [t.wam_calls for t in fixed] == [t.wam_calls for t in based]
    with pytest.raises(ConfigurationError, match="no trained model"):
        run_benchmark(tiny_config, long_model, policies=["base-4"])
    with pytest.raises(ConfigurationError):
        ExecPolicy("base-4", "base", 8, 2, n=4)
