"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers. The experiment criteria (5, 6, 7, 9) share one workspace and one
cache of trained noise predictors; set ``DPD_CACHE_DIR`` to keep the
checkpoints between sessions.
"""
import itertools
import json
import math
import os
import time

import numpy as np
import pytest

from dpd import autodiff as ad
from dpd.autodiff import ParamTree
from dpd.cli import main as cli_main
from dpd.codec import decode, encode
from dpd.diffusion import build_schedule, estimate_clean, forward_diffuse
from dpd.evaluation import pooled_std
from dpd.experiments import RunConfig, TrainingCache, ablation_suite, baselines, prepare, sweep
from dpd.models import DenoiserConfig, denoiser_forward, init_denoiser
from dpd.pipeline import DiffusionBatch, compute_total_loss
from dpd.prototype import kmeans, margins, select_prototypes, ClassLatents
from dpd.reports import ablation_markdown, ipc_markdown, sweep_markdown


def report(capsys, n, ok, msg, elapsed):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {msg} ({elapsed:.1f}s)")


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_roundtrip_identity(capsys):
    t0 = time.perf_counter()
    sched = build_schedule()
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((1000, 64))
    eps = rng.standard_normal((1000, 64))
    t = rng.integers(1, sched.T + 1, 1000)
    err = float(np.abs(estimate_clean(forward_diffuse(z0, t, eps, sched), eps, t, sched) - z0).max())
    ok = err < 1e-9
    report(capsys, 1, ok, f"max |z0_hat - z0| = {err:.2e} over 1000 triples", time.perf_counter() - t0)
    assert ok


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    cfg = RunConfig(train_per_class=8, test_per_class=1, cls_epochs=3)
    ws = prepare(cfg)
    sched = cfg.train_config().schedule()
    theta = init_denoiser(DenoiserConfig(), seed=7)
    # shrink the output layer so the decoded clean estimate stays inside [0, 1],
    # where the clamp is the identity and finite differences see the same function
    last = sorted(k for k in theta if k.endswith(".weight"))[-1].split(".")[0]
    theta = ParamTree({k: v.data * (0.05 if k.startswith(last) else 1.0) for k, v in theta.items()})
    rng = np.random.default_rng(7)
    idx = rng.integers(0, len(ws.latents), 4)
    z0 = encode(0.3 + 0.4 * ws.dataset.train.images[idx])
    batch = DiffusionBatch(z0, ws.dataset.train.labels[idx], ws.embeddings[idx], rng.integers(1, 20, 4), rng.standard_normal((4, 64)))
    zt = forward_diffuse(batch.z0, batch.t, batch.eps, sched)
    with ad.no_grad():
        eps_hat = denoiser_forward(theta, zt, batch.t, batch.emb, sched).data
    x_hat = decode(estimate_clean(zt, eps_hat, batch.t, sched), clamp=False)
    assert 0.0 < x_hat.min() and x_hat.max() < 1.0
    probes = 64
    err = ad.check_gradients(lambda p: compute_total_loss(p, ws.phi, batch, sched, 0.3)[0], theta, probes, seed=2)
    ok = err < 1e-4
    report(capsys, 2, ok, f"max relative error {err:.2e} over {probes} coordinates (lambda=0.3)", time.perf_counter() - t0)
    assert ok


# -- 3 ---------------------------------------------------------------------


def _all_assignments(n, K):
    grid = np.array(list(itertools.product(range(K), repeat=n)))
    return grid[np.array([len(set(r)) == K for r in grid])]


def _brute_inertia(X, K):
    A = _all_assignments(len(X), K)
    onehot = A[:, :, None] == np.arange(K)[None, None, :]  # (P, n, K)
    counts = onehot.sum(1)
    sums = np.einsum("pnk,nd->pkd", onehot, X)
    # within-cluster SS = sum |x|^2 - sum_k |S_k|^2 / n_k
    return float(((X**2).sum() - ((sums**2).sum(-1) / counts).sum(-1)).min())


def _brute_margin(z, k, C):
    d = [math.dist(z, c) for c in C]
    others = [d[j] for j in range(len(C)) if j != k]
    return (min(others) if others else 0.0) - d[k]


def test_criterion_3_clustering_oracles(capsys):
    t0 = time.perf_counter()
    n_inst, margin_ok, argmax_ok, optimum_hits, monotone = 200, 0, 0, 0, 0
    for i in range(n_inst):
        rng = np.random.default_rng(1000 + i)
        n = int(rng.integers(3, 11))
        K = int(rng.integers(1, min(3, n) + 1))
        X = rng.standard_normal((n, 2))
        zc = ClassLatents(0, rng.permutation(50)[:n], X)
        cl = kmeans(zc, K, seed=i)
        m = margins(X, cl.assignments, cl.centroids)
        brute = np.array([_brute_margin(X[j], cl.assignments[j], cl.centroids) for j in range(n)])
        margin_ok += bool(np.allclose(m, brute, rtol=0, atol=1e-12))
        want = []
        for k in range(K):
            rows = np.flatnonzero(cl.assignments == k)
            best = max(brute[rows])
            want.append((k, int(min(zc.indices[r] for r in rows if brute[r] >= best - 1e-12))))
        argmax_ok += select_prototypes(cl, zc) == want
        optimum_hits += cl.inertia <= _brute_inertia(X, K) + 1e-6
        monotone += all(b <= a + 1e-12 for a, b in zip(cl.inertia_history, cl.inertia_history[1:]))
    rate = optimum_hits / n_inst
    ok = margin_ok == n_inst and argmax_ok == n_inst and rate >= 0.95 and monotone == n_inst
    report(
        capsys, 3, ok,
        f"margin {margin_ok}/{n_inst}, argmax {argmax_ok}/{n_inst}, global optimum {rate:.1%}, monotone {monotone}/{n_inst}",
        time.perf_counter() - t0,
    )
    assert ok


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_codec_contracts(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    z = rng.standard_normal((200, 64))
    ident = float(np.abs(encode(decode(z, clamp=False)) - z).max())
    z2 = rng.standard_normal((200, 64))
    a, b = 1.7, -0.4
    lin = float(np.abs(decode(a * z + b * z2, clamp=False) - (a * decode(z, clamp=False) + b * decode(z2, clamp=False))).max())
    ok = ident < 1e-9 and lin < 1e-9
    report(capsys, 4, ok, f"encode(decode(z)) error {ident:.2e}, linearity error {lin:.2e}", time.perf_counter() - t0)
    assert ok


# -- shared experiment state -------------------------------------------------


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    cfg = RunConfig()
    cache_dir = os.environ.get("DPD_CACHE_DIR") or tmp_path_factory.mktemp("theta-cache")
    return prepare(cfg), TrainingCache(cache_dir), {}


def _ablation(experiment):
    ws, cache, memo = experiment
    if "ablation" not in memo:
        t0 = time.perf_counter()
        memo["ablation"] = ablation_suite(ws, cache=cache)
        memo["ablation_time"] = time.perf_counter() - t0
    return memo["ablation"]


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_ablation_trend(experiment, capsys):
    res = _ablation(experiment)
    agg = res.aggregates
    a, b, c, d = (agg[n] for n in ("L_D", "+L_cls", "+Vis. Prot.", "+Cap. Agg."))
    gap_ba, sd_ba = b.mean - a.mean, pooled_std(a.std, b.std)
    gap_cb, sd_cb = c.mean - b.mean, pooled_std(b.std, c.std)
    ok = gap_ba > sd_ba and gap_cb > sd_cb and d.mean >= 50.0
    with capsys.disabled():
        print("\n" + ablation_markdown(res))
    report(
        capsys, 5, ok,
        f"OA {a.mean:.2f} -> {b.mean:.2f} (gap {gap_ba:.2f} vs pooled sd {sd_ba:.2f}) -> {c.mean:.2f} "
        f"(gap {gap_cb:.2f} vs {sd_cb:.2f}); full DPD {d.mean:.2f}",
        experiment[2]["ablation_time"],
    )
    assert ok


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_full_data_ordering(experiment, capsys):
    ws = experiment[0]
    res = _ablation(experiment)
    t0 = time.perf_counter()
    base = baselines(ws)
    dpd = res.aggregates["+Cap. Agg."].mean
    full, noise = base["full"].oa_mean, base["noise"].oa_mean
    ok = dpd < full and dpd - noise > 10.0
    report(capsys, 6, ok, f"noise {noise:.2f} < DPD {dpd:.2f} < full data {full:.2f}", time.perf_counter() - t0)
    assert ok


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_lambda_sweep(experiment, capsys):
    ws, cache, _ = experiment
    t0 = time.perf_counter()
    res = sweep(ws, "lambda", (0.0, 0.1, 0.3, 0.5, 1.0), cache=cache)
    med = {v: res.aggregates[v].median for v in res.values}
    best = res.argmax("median")
    ok = med[0.3] > med[0.0] and best in (0.1, 0.3, 0.5)
    with capsys.disabled():
        print("\n" + sweep_markdown(res))
    report(capsys, 7, ok, f"median OA at 0.3 {med[0.3]:.2f} vs 0 {med[0.0]:.2f}; argmax lambda={best}", time.perf_counter() - t0)
    assert ok


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(RunConfig(seed=11).to_dict()))
    for d in ("a", "b"):
        assert cli_main(["pipeline", "--config", str(cfg), "--seed", "11", "--out-dir", str(tmp_path / d)]) == 0
    same_ds = (tmp_path / "a/distilled.dpds").read_bytes() == (tmp_path / "b/distilled.dpds").read_bytes()
    same_rep = json.loads((tmp_path / "a/report.json").read_text()) == json.loads((tmp_path / "b/report.json").read_text())
    ok = same_ds and same_rep
    report(capsys, 8, ok, f"distilled file identical: {same_ds}; report identical: {same_rep}", time.perf_counter() - t0)
    assert ok


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_ipc_monotonicity(experiment, capsys):
    ws, cache, _ = experiment
    t0 = time.perf_counter()
    res = sweep(ws, "ipc", (3, 5, 10), cache=cache)
    med = [res.aggregates[v].median for v in res.values]
    ok = med[0] <= med[1] <= med[2]
    base = baselines(ws)
    noise = {v: baselines(ws, ipc=v, full=False)["noise"] for v in res.values}
    with capsys.disabled():
        print("\n" + ipc_markdown(res, ws.cfg.n_classes, len(ws.dataset.train), base["full"], noise))
    report(capsys, 9, ok, "median OA over IPC 3/5/10: " + " <= ".join(f"{m:.2f}" for m in med), time.perf_counter() - t0)
    assert ok
