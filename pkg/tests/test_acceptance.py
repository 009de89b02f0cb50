"""Acceptance criteria, one test per criterion. Each test reports a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import dataclasses
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import report
from dynlora.baselines import apply_strategy, run_one
from dynlora.cli import main
from dynlora.data import gen_mixture_task
from dynlora.importance import allocation_weights
from dynlora.lora import LoraAdapter, delta, merge, resize
from dynlora.network import forward, init_model
from dynlora.rank_adapt import RankSchedule, target_rank
from dynlora.reference import LAYER_TASK, SUITE, layer_recovery, loss_curve_run, run_suite
from dynlora.trainer import STRATEGIES, TrainConfig, batch_objective, parameter_counts, total_loss, trainable_set
from oracles import central_diff, naive_matmul, numpy_total_loss, rel_err


def _randomize(model, rng):
    """Give every parameter a nonzero random value so no gradient is trivially zero."""
    for layer in model.layers + [model.head]:
        layer.bias = rng.normal(scale=0.3, size=layer.bias.shape)
    for ad in model.adapters or []:
        ad.a = rng.normal(scale=0.4, size=ad.a.shape)
        ad.b = rng.normal(scale=0.4, size=ad.b.shape)
        ad.alpha = float(rng.uniform(0.2, 1.0))
    for bn in model.bottlenecks or []:
        bn.up = rng.normal(scale=0.4, size=bn.up.shape)


def test_criterion_01_gradient_integrity():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, failures, n_configs = 0.0, [], 24
    for i in range(n_configs):
        tag = STRATEGIES[i % len(STRATEGIES)]
        n_layers = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 9, size=n_layers + 1)]
        n_classes = int(rng.integers(2, 5))
        cfg = TrainConfig(rank=int(rng.integers(1, 4)), strategy=tag,
                          schedule=RankSchedule(r_base=int(rng.integers(1, 4))) if tag == "lora_dynamic" else None)
        model = apply_strategy(init_model(dims, n_classes, i), tag, cfg)
        _randomize(model, rng)
        x = rng.normal(size=(int(rng.integers(1, 7)), dims[0]))
        y = rng.integers(0, n_classes, size=x.shape[0])
        lam1, lam2 = float(rng.uniform(0, 0.5)), float(rng.uniform(0, 0.5))
        obj = batch_objective(model, x, y, lam1, lam2)
        params = model.parameters()
        for name in trainable_set(model, tag):
            fd = central_diff(lambda: numpy_total_loss(model, x, y, lam1, lam2), params[name], step=1e-5)
            err = rel_err(obj.grad(name), fd)
            worst = max(worst, err)
            if err >= 1e-4:
                failures.append(f"{tag} {dims} {name} rel err {err:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    report(1, "gradient integrity", ok, f"{n_configs} configs, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert not failures, failures[:5]
    assert elapsed < 30


def _rank_oracle(r_base, lam, var, r_max):
    raw = Fraction(r_base) * (1 + Fraction(lam) * Fraction(var))
    return max(1, min(r_max, math.floor(raw + Fraction(1, 2))))


def _rank_table():
    cases = [
        (4, 0.5, 0.0, 8),    # var = 0 -> r_base
        (1, 1.0, 0.5, 8),    # 1.5 -> 2
        (2, 0.25, 1.0, 8),   # 2.5 -> 3
        (1, 0.5, 1.0, 8),    # 1.5 -> 2
        (4, 0.5, 1.0, 8),    # 6
        (3, 0.5, 0.5, 8),    # 3.75 -> 4
        (4, 2.0, 100.0, 8),  # clamp top
        (4, 0.5, 2.0, 8),    # exactly r_max
        (4, 0.5, 2.5, 8),    # 9 -> 8
        (6, 0.0, 50.0, 4),   # r_base above r_max
        (1, 0.0, 0.0, 1),    # floor of the range
        (2, 0.125, 1.0, 16), # 2.25 -> 2
    ]
    rng = np.random.default_rng(50)
    while len(cases) < 50:
        cases.append((int(rng.choice([1, 2, 3, 4, 6, 8])), float(rng.choice([0.0, 0.125, 0.25, 0.5, 1.0, 2.0])),
                      float(rng.integers(0, 33)) / 8, int(rng.choice([2, 4, 8, 16]))))
    return cases


def test_criterion_02_equation_conformance():
    problems = []
    rng = np.random.default_rng(7)
    a = allocation_weights([0.0, math.log(3)])
    if np.max(np.abs(a - [0.25, 0.75])) >= 1e-12:
        problems.append(f"(0, ln 3) -> {a}")
    for _ in range(100):
        g = rng.normal(scale=3, size=int(rng.integers(1, 7)))
        e = [math.exp(v) for v in g]
        closed = np.array([v / sum(e) for v in e])
        if np.max(np.abs(allocation_weights(g) - closed)) >= 1e-12:
            problems.append(f"softmax mismatch for {g}")
    table = _rank_table()
    for r_base, lam, var, r_max in table:
        sched = RankSchedule(r_base=r_base, lambda_adjust=lam, r_max_per_layer=[r_max])
        got, want = target_rank(sched, var, 0), _rank_oracle(r_base, lam, var, r_max)
        if got != want:
            problems.append(f"target_rank{(r_base, lam, var, r_max)} = {got}, want {want}")
    for _ in range(50):
        ads = [LoraAdapter(a=rng.normal(size=(5, 2)), b=rng.normal(size=(2, 3))) for _ in range(int(rng.integers(1, 4)))]
        task, l1, l2 = float(rng.uniform(0, 3)), float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
        oracle = task + sum(l1 * sum(v * v for v in ad.a.ravel()) + l2 * sum(v * v for v in ad.b.ravel()) for ad in ads)
        got = float(total_loss(np.array([[task]]), ads, l1, l2)[0, 0])
        if abs(got - oracle) >= 1e-12:
            problems.append(f"total_loss off by {abs(got - oracle):.2e}")
    report(2, "equation conformance", not problems, f"{len(table)}-case rank table; {len(problems)} mismatches")
    assert not problems, problems[:5]


def test_criterion_03_merge_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(50):
        dims = [int(d) for d in rng.integers(2, 9, size=int(rng.integers(2, 5)))]
        m = init_model(dims, int(rng.integers(2, 5)), i)
        m.strategy = "lora_static"
        m.adapters = []
        for s in m.layers:
            r = int(rng.integers(1, min(s.d_in, s.d_out) + 1))
            m.adapters.append(LoraAdapter(a=rng.normal(size=(s.d_in, r)), b=rng.normal(size=(r, s.d_out)),
                                          alpha=float(rng.uniform(0, 1))))
        merged = m.copy()
        merged.adapters, merged.strategy = None, "base"
        for l, s in enumerate(merged.layers):
            s.weight = merge(m.layers[l].weight, m.adapters[l])
        x = rng.normal(size=(int(rng.integers(1, 10)), dims[0]))
        worst = max(worst, float(np.max(np.abs(forward(m, x)[0] - forward(merged, x)[0]))))
    ok = worst < 1e-10
    report(3, "merge equivalence", ok, f"50 models, max |logit diff| {worst:.2e}")
    assert ok


def test_criterion_04_grow_resize_invariance():
    rng = np.random.default_rng(4)
    bad = 0
    for i in range(100):
        d_in, d_out = (int(v) for v in rng.integers(1, 12, size=2))
        r_max = min(d_in, d_out)
        r = int(rng.integers(1, r_max + 1))
        new_r = int(rng.integers(r, r_max + 1))
        ad = LoraAdapter(a=rng.normal(size=(d_in, r)), b=rng.normal(size=(r, d_out)), alpha=float(rng.uniform()))
        bad += not np.array_equal(delta(resize(ad, new_r, seed=i)), delta(ad))
    report(4, "grow-resize invariance", bad == 0, f"100 cases, {bad} changed")
    assert bad == 0


def _count(arrays):
    return sum(1 for a in arrays for _ in np.nditer(a))


def test_criterion_05_parameter_accounting():
    d, r = 64, 4
    base = init_model([d] * 5, 3, 0)
    cfg = TrainConfig(rank=r)
    models = {tag: apply_strategy(base, tag, dataclasses.replace(cfg, strategy=tag, schedule=None))
              for tag in ("full", "feature_extraction", "lora_static", "adapter", "bitfit")}
    counts = {tag: parameter_counts(m) for tag, m in models.items()}
    body = _count([s.weight for s in base.layers] + [s.bias for s in base.layers])
    weights = _count([s.weight for s in base.layers])
    lora = models["lora_static"]
    lora_n = _count([ad.a for ad in lora.adapters] + [ad.b for ad in lora.adapters])
    adapter = models["adapter"]
    adapter_n = _count([bn.down for bn in adapter.bottlenecks] + [bn.up for bn in adapter.bottlenecks])
    checks = {
        "feature_extraction == 0": counts["feature_extraction"]["param_ratio"] == 0.0,
        "full == 1": counts["full"]["param_ratio"] == 1.0,
        "lora == 2r/d": counts["lora_static"]["weight_ratio"] == 2 * r / d == 0.125,
        "lora < adapter": counts["lora_static"]["param_ratio"] < counts["adapter"]["param_ratio"],
        "enumeration": (counts["full"]["body_total"] == body and counts["lora_static"]["weight_total"] == weights
                        and counts["lora_static"]["body_trainable"] == lora_n
                        and counts["adapter"]["body_trainable"] == adapter_n
                        and counts["bitfit"]["body_trainable"] == 4 * d),
    }
    ok = all(checks.values())
    detail = (f"lora {100 * counts['lora_static']['weight_ratio']:.1f}% of weights, "
              f"adapter {100 * counts['adapter']['param_ratio']:.1f}% of body")
    report(5, "parameter accounting", ok, detail)
    assert ok, {k: v for k, v in checks.items() if not v}


def test_criterion_06_layer_importance_recovery():
    t0 = time.perf_counter()
    results = [layer_recovery(s) for s in LAYER_TASK.seeds]
    elapsed = time.perf_counter() - t0
    hits = sum(r.recovered for r in results)
    peaks = [int(np.argmax(r.mean_alpha)) for r in results]
    ok = hits >= 8 and elapsed < 120
    report(6, "layer-importance recovery", ok,
           f"{hits}/10 seeds; perturbed {[r.perturbed_layer for r in results]} vs argmax alpha {peaks}; {elapsed:.0f}s")
    assert elapsed < 120
    assert hits >= 8, f"alpha peaked at the perturbed layer on {hits}/10 seeds"


def test_criterion_07_strategy_ordering():
    t0 = time.perf_counter()
    table = run_suite(SUITE)
    elapsed = time.perf_counter() - t0
    acc = {r.strategy: r.acc for r in table.rows}
    order = acc["lora_dynamic"] >= acc["lora_static"] >= acc["feature_extraction"]
    near_full = acc["lora_dynamic"] >= acc["full"] - 0.02
    ok = order and near_full and elapsed < 300
    detail = ", ".join(f"{k} {100 * v:.2f}" for k, v in sorted(acc.items(), key=lambda kv: -kv[1]))
    report(7, "strategy ordering", ok, f"{detail}; {elapsed:.0f}s")
    assert order and near_full, acc
    assert elapsed < 300


def test_criterion_08_loss_curve_shape():
    rec = loss_curve_run(0)
    loss = rec.loss_task
    drop = loss[0] - loss[-1]
    tail = max(loss[-10:]) - min(loss[-10:])
    ok = loss[-1] < 0.5 * loss[0] and drop > 0 and tail < 0.05 * drop
    report(8, "loss-curve shape", ok,
           f"final/epoch0 {loss[-1] / loss[0]:.3f}, last-10 range/drop {tail / drop:.4f}")
    assert ok


def test_criterion_09_determinism(tmp_path):
    cfg = {"data": {"kind": "mixture", "n": 200, "d": 6, "n_classes": 3, "difficulty": 0.3},
           "model": {"hidden": [8, 8]}, "train": {"epochs": 8}, "strategy": "lora_dynamic", "seed": 11}
    records = []
    for run in ("a", "b"):
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps({**cfg, "output": str(tmp_path / run)}))
        assert main(["train", "--config", str(path)]) == 0
        records.append(json.loads((tmp_path / run / "run_record.json").read_text()))
    same = all(records[0][k] == records[1][k] for k in ("loss_total", "loss_task"))
    report(9, "determinism", same, f"{len(records[0]['loss_total'])} epochs compared")
    assert same


def test_criterion_10_degenerate_equivalence():
    ds = gen_mixture_task(300, 6, 3, 0.4, 2)
    base = init_model([6, 8, 8, 8], 3, 2)
    cfg = TrainConfig(epochs=12, rank=3)
    static = run_one(ds, base, "lora_static", cfg, 2).to_dict()
    sched = RankSchedule(r_base=3, lambda_adjust=0.0, refresh_every=10**9, allocate_alpha=False)
    dynamic = run_one(ds, base, "lora_dynamic", dataclasses.replace(cfg, schedule=sched), 2).to_dict()
    for rec in (static, dynamic):
        rec.pop("strategy")
        rec.pop("wall_time")
    diff = [k for k in static if static[k] != dynamic[k]]
    report(10, "degenerate-config equivalence", not diff, "identical RunRecord" if not diff else f"differs in {diff}")
    assert not diff
