import json

import numpy as np
import pytest

from dpd.experiments import (
    RunConfig,
    TrainingCache,
    ablation_suite,
    baselines,
    n_threads,
    prepare,
    run_pipeline,
    sweep,
)
from dpd.reports import ablation_markdown, eval_markdown, ipc_markdown, sweep_markdown

TINY = dict(
    train_per_class=12, test_per_class=8, cls_epochs=2, train_steps=15, batch=8,
    ipc=2, sampler_steps=5, eval_repeats=2, eval_steps=10, seeds=(0, 1),
)


@pytest.fixture(scope="module")
def ws():
    return prepare(RunConfig(**TINY))


def test_config_roundtrip_and_validation():
    cfg = RunConfig(**TINY)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(lam=-1)
    with pytest.raises(ValueError):
        RunConfig(sampler_steps=150, tau=0.5)  # more steps than t_start
    with pytest.raises(ValueError):
        RunConfig(sweep_param="depth")


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("DPD_THREADS", raising=False)
    assert n_threads() == 1
    monkeypatch.setenv("DPD_THREADS", "3")
    assert n_threads() == 3
    monkeypatch.setenv("DPD_THREADS", "zero")
    with pytest.raises(ValueError):
        n_threads()


def test_cache_reuses_and_persists(ws, tmp_path):
    cache = TrainingCache(tmp_path)
    tcfg = ws.cfg.train_config(0)
    a = cache.get(ws, tcfg)
    assert len(list(tmp_path.glob("theta-*.dpds"))) == 1
    fresh = TrainingCache(tmp_path)
    assert fresh.lookup(ws, tcfg).digest() == a.digest()
    assert fresh.lookup(ws, ws.cfg.train_config(0, lam=0.0)) is None


def test_pipeline_deterministic(ws):
    a = run_pipeline(ws, TrainingCache())
    b = run_pipeline(ws, TrainingCache())
    assert a.distilled.images.tobytes() == b.distilled.images.tobytes()
    assert a.report.to_dict() == b.report.to_dict()
    assert len(a.distilled) == 2 * 4


def test_ablation_and_reports(ws):
    res = ablation_suite(ws, cache=TrainingCache())
    assert list(res.reports) == ["L_D", "+L_cls", "+Vis. Prot.", "+Cap. Agg."]
    assert all(len(r) == 2 for r in res.reports.values())
    md = ablation_markdown(res)
    assert md.count("\n") >= 5 and "OA" in md
    json.dumps(res.to_dict())


def test_sweeps_and_tables(ws):
    cache = TrainingCache()
    s = sweep(ws, "ipc", [1, 2], cache=cache)
    assert s.argmax() in (1, 2)
    assert "*" in sweep_markdown(s)
    base = baselines(ws)
    assert base["full"].oa_mean >= 0 and base["noise"].ipc == 2
    noise = {v: baselines(ws, ipc=v, full=False)["noise"] for v in s.values}
    assert set(noise[1].to_dict()) == set(base["noise"].to_dict())
    table = ipc_markdown(s, ws.cfg.n_classes, len(ws.dataset.train), base["full"], noise)
    assert "Full" in table and "Noise" in table
    assert "OA" in eval_markdown([base["full"], base["noise"]])
    with pytest.raises(ValueError):
        sweep(ws, "depth", [1])


def test_lambda_sweep_trains_per_value(ws):
    cache = TrainingCache()
    sweep(ws, "lambda", [0.0, 0.3], seeds=(0,), cache=cache)
    assert len(cache._mem) == 2
    sweep(ws, "sampler_steps", [2, 5], seeds=(0,), cache=cache)
    assert len(cache._mem) == 2  # reuses the lambda=0.3 predictor
