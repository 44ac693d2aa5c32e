"""Acceptance criteria, one PASS/FAIL line each (collected in the terminal summary).

The training-based checks (7, 8, 10) are marked ``slow``; deselect with ``-m "not slow"``.
"""

import shutil
import statistics

import numpy as np
import pytest

from caprmil.checkpoint import decode, encode
from caprmil.cli import main as cli_main
from caprmil.data import SyntheticBags, benchmark_splits, open_split, preset, split_indices, write_dataset
from caprmil.efficiency import bench_scaling, count_flops, count_params
from caprmil.experiments import SHORT_SCHEDULE, ABLATION_GRID, ablation_grid, fit_and_test, model_variant
from caprmil.metrics import Weighting, adaptive_ece, cohen_kappa, roc_auc
from caprmil.model import CaprmilConfig, forward, init_model, mean_baseline
from caprmil.attention import AttentionParams, TAU_MIN, aggregate_tokens, soft_cluster, token_self_attention
from caprmil.numerics import Rng, Tensor, no_grad, ops, precision
from caprmil.training import OptimizerState, TrainConfig, adamw_step, lr_at, train
from conftest import ACCEPTANCE_LINES
from gradcheck import check
from test_metrics import pairwise_auc

SEEDS = (0, 1, 2)


def report(criterion: int, label: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:>2}: {label}: {detail}"
    ACCEPTANCE_LINES.setdefault(criterion, []).append(line)
    print(line)


def within(value, target, rel):
    return abs(value - target) <= rel * target


# -- 1, 2: cost claims ----------------------------------------------------------------------

PARAM_TARGETS = {"caprmil": 0.314e6, "caprmil-attn": 0.331e6, "caprmil-gattn": 0.347e6, "mean": 0.130e6}


def test_criterion_01_parameter_counts():
    counts = {name: count_params(model_variant(name)) for name in PARAM_TARGETS}
    ok = {name: within(counts[name], t, 0.01) for name, t in PARAM_TARGETS.items()}
    detail = ", ".join(f"{n}={counts[n] / 1e6:.4f}M (target {t / 1e6:.3f}M{'' if ok[n] else ' OUT'})"
                       for n, t in PARAM_TARGETS.items())
    report(1, "parameter counts within 1%", all(ok.values()), detail)
    assert all(ok[n] for n in ("caprmil", "caprmil-attn", "caprmil-gattn"))


@pytest.mark.xfail(strict=True, reason="a d_in x 128 projection alone already holds 131k weights")
def test_criterion_01_mean_baseline_count():
    assert within(count_params(model_variant("mean")), PARAM_TARGETS["mean"], 0.01)


def test_criterion_02_flop_counts():
    full = count_flops(CaprmilConfig()).total(1000)
    base = count_flops(mean_baseline(CaprmilConfig())).total(1000)
    ok = within(full, 0.628e9, 0.02) and within(base, 0.260e9, 0.02)
    report(2, "GFLOPs at N=1000 within 2%", ok,
           f"caprmil={full / 1e9:.4f}G (target 0.628), mean={base / 1e9:.4f}G (target 0.260)")
    assert ok


# -- 3: linear scaling ----------------------------------------------------------------------

def test_criterion_03_linear_scaling():
    cfg = CaprmilConfig()
    f = count_flops(cfg)
    sizes = [1000, 2000, 4000, 8000, 16000]
    affine = all(f.total(n) == f.a * n + f.b for n in sizes) and not f.includes_elementwise(1000)
    rep = bench_scaling(cfg, sizes, repeats=3, threads=1)
    ratio = rep.seconds[-1] / rep.seconds[0]
    ok = affine and rep.r2 > 0.99 and ratio < 24
    report(3, "linear scaling", ok,
           f"flops={f.a}*N+{f.b} exact={affine}, R2={rep.r2:.5f}, t(16k)/t(1k)={ratio:.2f}")
    assert ok


# -- 4: gradients ----------------------------------------------------------------------------

def test_criterion_04_gradient_check():
    tiny = CaprmilConfig(d_in=12, d_model=16, n_blocks=1, n_heads=2, n_clusters=2, dropout_p=0.0, attn_hidden=8)
    errors = []
    with precision("float64"):
        for seed in range(5):
            s = init_model(tiny, Rng(seed))
            x = np.random.default_rng(seed).standard_normal((5, 12))
            label = seed % 2
            errors.append(check(lambda: ops.cross_entropy(forward(x, s)[0], [label]), list(s.params.values()),
                                h=1e-6))
    ok = max(errors) < 1e-6
    report(4, "finite-difference gradient check", ok,
           f"max rel err {max(errors):.2e} over 5 seeds, {len(s.params)} tensors each")
    assert ok


# -- 5: invariants ---------------------------------------------------------------------------

def test_criterion_05_invariants(tmp_path):
    cfg = CaprmilConfig(d_in=32, d_model=32, n_heads=4, n_clusters=4, dropout_p=0.0)
    results = {}
    rows_err, convex_err, perm_err, ortho_err = 0.0, 0.0, 0.0, 0.0
    for seed in range(10):
        s = init_model(cfg, Rng(seed))
        x = np.random.default_rng(seed).standard_normal((50, 32)).astype(np.float32)
        p = AttentionParams.from_state(s, "blocks.0.attn.")
        with no_grad():
            _, ft, assign = soft_cluster(Tensor(x[None]), p)
            s_prime = token_self_attention(aggregate_tokens(ft, assign), p).data
            w = assign.numpy().astype(np.float64)
            mixed = np.einsum("bhnm,bhmd->bhnd", w, s_prime)
            a, _ = forward(x, s)
            b, _ = forward(x[np.random.default_rng(seed).permutation(50)], s)
        rows_err = max(rows_err, np.abs(w.sum(-1) - 1).max())
        lo, hi = s_prime.min(axis=2, keepdims=True), s_prime.max(axis=2, keepdims=True)
        convex_err = max(convex_err, np.maximum(lo - mixed, 0).max(), np.maximum(mixed - hi, 0).max())
        perm_err = max(perm_err, np.abs(a.data - b.data).max())
        wc = s["blocks.0.attn.w_cluster"].data.astype(np.float64)
        ortho_err = max(ortho_err, np.abs(wc.T @ wc - np.eye(4)).max())
    results["rows sum to 1"] = (rows_err <= 1e-6, f"{rows_err:.1e}")
    results["convex broadcast"] = (convex_err <= 1e-6 and np.all(w >= 0), f"{convex_err:.1e}")
    results["permutation invariant"] = (perm_err <= 1e-5, f"{perm_err:.1e}")
    results["orthonormal W_cluster"] = (ortho_err <= 1e-6, f"{ortho_err:.1e}")

    # drive tau down with a large lr and check the clamp after every step
    s = init_model(cfg, Rng(0))
    opt, tcfg = OptimizerState(), TrainConfig(weight_decay=0.0)
    rng = np.random.default_rng(0)
    tau_min = np.inf
    for step in range(25):
        s.zero_grad()
        logits, _ = forward(rng.standard_normal((20, 32)), s)
        ops.cross_entropy(logits, [step % 2]).backward()
        s["blocks.0.attn.tau"].grad = np.abs(s["blocks.0.attn.tau"].grad) + 1.0
        adamw_step(s, opt, 0.05, tcfg)
        tau_min = min(tau_min, float(s["blocks.0.attn.tau"].data.min()))
    results["tau clamp"] = (tau_min >= np.float32(TAU_MIN), f"min tau {tau_min:.4f}")

    back = decode(encode(s))
    exact = back.config == s.config and all(
        np.array_equal(back[n].data.view(np.uint32), s[n].data.view(np.uint32)) for n in s)
    results["checkpoint bit-exact"] = (exact, "ok" if exact else "mismatch")

    ok = all(v[0] for v in results.values())
    report(5, "invariant suite", ok, ", ".join(f"{k} {v[1]}" for k, v in results.items()))
    assert ok


# -- 6: metric oracles ------------------------------------------------------------------------

def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 2)
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)))
    ace_cases = [
        (([0.6, 0.7, 0.8, 0.9], [1, 0, 1, 1], [1, 1, 1, 1], 2), 0.15),
        # bins {0.55, 0.65}: |0.5 - 0.6|, {0.75, 0.95}: |1 - 0.85|
        (([0.55, 0.65, 0.75, 0.95], [0, 1, 1, 1], [1, 1, 1, 1], 2), 0.125),
        (([1.0] * 4, [0] * 4, [1] * 4, 2), 1.0),
    ]
    ace_ok = all(abs(adaptive_ece(*args[:3], n_bins=args[3]) - want) < 1e-12 for args, want in ace_cases)
    labels = rng.integers(0, 5, 20_000)
    perfect = cohen_kappa(labels, labels, Weighting.QUADRATIC)
    indep = cohen_kappa(rng.permutation(labels), labels, Weighting.QUADRATIC)
    ok = worst <= 1e-12 and ace_ok and perfect == 1.0 and abs(indep) <= 0.02
    report(6, "metric oracles", ok,
           f"auc max diff {worst:.1e} over 200 cases, ace hand examples {'exact' if ace_ok else 'WRONG'}, "
           f"qw kappa perfect={perfect:.3f} independent={indep:+.4f}")
    assert ok


# -- 7, 8: synthetic reproduction -------------------------------------------------------------

HARD_MODELS = ("caprmil", "mean", "caprmil-attn", "caprmil-gattn")


@pytest.fixture(scope="session")
def hard_runs(tmp_path_factory):
    """Test AUC of every model on the hard preset, per seed. Bags are written once per seed."""
    aucs = {name: [] for name in HARD_MODELS}
    root = tmp_path_factory.mktemp("hard")
    for seed in SEEDS:
        splits = benchmark_splits("hard", seed)
        out = root / f"seed{seed}"
        write_dataset(splits["train"].bags, out, {k: v.indices for k, v in splits.items()})
        sets = {k: open_split(out, k) for k in ("train", "val", "test")}
        for name in HARD_MODELS:
            res = fit_and_test(model_variant(name), sets["train"], sets["val"], sets["test"],
                               SHORT_SCHEDULE.replace(seed=seed))
            aucs[name].append(res.test.auc)
            print(f"hard seed={seed} {name} auc={res.test.auc:.4f}")
        shutil.rmtree(out)
    return aucs


def _easy_aucs(name):
    return [run.test.auc for run in (
        fit_and_test(model_variant(name), *(benchmark_splits("easy", seed)[k] for k in ("train", "val", "test")),
                     SHORT_SCHEDULE.replace(seed=seed)) for seed in SEEDS)]


def fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


@pytest.mark.slow
def test_criterion_07_mean_degrades_on_hard_preset(hard_runs):
    easy = {name: _easy_aucs(name) for name in ("caprmil", "mean")}
    hard_c, hard_m = statistics.mean(hard_runs["caprmil"]), statistics.mean(hard_runs["mean"])
    easy_c, easy_m = statistics.mean(easy["caprmil"]), statistics.mean(easy["mean"])
    ok = hard_c >= 0.95 and hard_m <= 0.80 and easy_c >= 0.95 and easy_m >= 0.95
    report(7, "synthetic Mean-collapse gap", ok,
           f"hard caprmil {hard_c:.3f} ({fmt(hard_runs['caprmil'])}), mean {hard_m:.3f} ({fmt(hard_runs['mean'])}); "
           f"easy caprmil {easy_c:.3f}, mean {easy_m:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_aggregators_comparable(hard_runs):
    ref = statistics.mean(hard_runs["caprmil"])
    gaps = {name: abs(statistics.mean(hard_runs[name]) - ref) for name in ("caprmil-attn", "caprmil-gattn")}
    ok = all(g <= 0.03 for g in gaps.values())
    report(8, "aggregator modularity", ok,
           f"mean-pool {ref:.3f}, " + ", ".join(
               f"{n.split('-')[1]} {statistics.mean(hard_runs[n]):.3f} (gap {g:.3f})" for n, g in gaps.items()))
    assert ok


# -- 9: training recipe -----------------------------------------------------------------------

def test_criterion_09_training_recipe():
    cfg = TrainConfig()
    lrs = (lr_at(0, cfg), lr_at(6, cfg), lr_at(30, cfg))
    lr_ok = lrs == (1e-5, 2e-4, 1e-7)
    tiny = CaprmilConfig(d_in=4, d_model=8, n_heads=2, n_clusters=2)
    data = SyntheticBags(preset("easy", n_bags=2, d_in=4, bag_size=(3, 5)))
    stops = {}
    for patience in (1, 3, 7):
        frozen = TrainConfig(max_epochs=30, warmup_epochs=1, early_stop_patience=patience)
        _, h = train(init_model(tiny, Rng(0)), data, data, frozen, validate=lambda s, b: (0.5, 0.5))
        # epoch 0 sets the reference loss; then exactly `patience` epochs without improvement
        stops[patience] = len(h.records) - 1
    stop_ok = all(stops[p] == p for p in stops)
    report(9, "schedule and early stopping", lr_ok and stop_ok,
           f"lr(0,6,30)={lrs[0]:g},{lrs[1]:g},{lrs[2]:g}; non-improving epochs before halt {stops}")
    assert lr_ok and stop_ok


# -- 10: ablation harness ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_ablation_harness(tmp_path, capsys):
    cells = ablation_grid(CaprmilConfig(), ABLATION_GRID)
    counted = [count_params(c) == init_model(c, Rng(0)).n_params() for c in cells]

    # a reduced hard dataset: witness rate 0.02 kept, bags and feature width shrunk
    spec = preset("hard", n_bags=8, d_in=64, bag_size=(200, 400), seed=10)
    bags = SyntheticBags(spec)
    write_dataset(bags, tmp_path / "data", split_indices(len(bags), 4, 2, bags.labels, 10))
    (tmp_path / "run.cfg").write_text("d_in = 64\nmax_epochs = 2\nwarmup_epochs = 1\n")
    argv = ["--config", str(tmp_path / "run.cfg"), "train", "--data", str(tmp_path / "data"),
            "--out", str(tmp_path / "grid"), "--ablate-sample", "4"]
    for axis, values in ABLATION_GRID.items():
        argv += ["--ablate", f"{axis}={','.join(map(str, values))}"]
    code = cli_main(argv)
    records = [dict(kv.split("=") for kv in line.split()) for line in capsys.readouterr().out.splitlines()]
    trained_ok = code == 0 and len(records) == 4 and all(r["params"] == r["count_params"] for r in records)
    ok = all(counted) and len(cells) == 48 and trained_ok
    report(10, "ablation harness", ok,
           f"{sum(counted)}/{len(cells)} grid cells match count_params; "
           f"trained subsample emitted {len(records)} records ({', '.join(r.get('cell', '?') for r in records)})")
    assert ok
