import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caprmil.efficiency import (ELEMENTWISE_THRESHOLD, FlopCount, bench_scaling, cost_report, count_flops,
                                count_params, derive_width_depth, linear_fit, params_by_submodule)
from caprmil.errors import ConfigError
from caprmil.model import CaprmilConfig, init_model, mean_baseline
from caprmil.numerics import Rng

configs = st.builds(
    CaprmilConfig,
    d_in=st.integers(1, 40),
    d_model=st.sampled_from([4, 8, 12, 16, 24]),
    n_blocks=st.integers(0, 3),
    n_heads=st.sampled_from([1, 2, 4]),
    n_clusters=st.integers(1, 8),
    mlp_ratio=st.integers(1, 4),
    aggregator=st.sampled_from(["mean", "attn", "gattn"]),
    n_classes=st.integers(2, 5),
    attn_hidden=st.integers(1, 16),
)


@given(configs)
@settings(max_examples=50)
def test_param_count_matches_instantiated_model(config):
    state = init_model(config, Rng(0))
    assert count_params(config) == sum(t.data.size for t in state.params.values())
    parts = params_by_submodule(config)
    assert sum(parts.values()) == count_params(config)
    by_prefix = {"projection": "proj.", "blocks": "blocks.", "aggregator": "agg.", "classifier": "head."}
    for part, prefix in by_prefix.items():
        assert parts[part] == sum(t.data.size for n, t in state.items() if n.startswith(prefix))


def test_reference_counts():
    assert count_params(CaprmilConfig()) == 314_366
    assert count_params(CaprmilConfig(aggregator="attn")) == 331_007
    assert count_params(CaprmilConfig(aggregator="gattn")) == 347_519
    assert count_params(mean_baseline(CaprmilConfig())) == 131_714
    f = count_flops(CaprmilConfig())
    assert (f.a, f.b) == (626_976, 59_394)
    assert round(f.total(1000) / 1e9, 3) == 0.627


@given(configs, st.integers(1, 10_000), st.integers(1, 10_000))
@settings(max_examples=50)
def test_flops_are_affine_in_bag_size(config, n1, n2):
    f = count_flops(config)
    assert f.core(n1) + f.core(n2) == f.core(n1 + n2) + f.b
    assert f.core(0) == f.b
    assert f.elementwise(n1) - f.elementwise(0) == f.elementwise_a * n1


@given(configs.filter(lambda c: c.n_blocks > 0))
@settings(max_examples=30)
def test_doubling_clusters_adds_expected_per_patch_cost(config):
    small, large = count_flops(config), count_flops(config.replace(n_clusters=2 * config.n_clusters))
    h, m, dh = config.n_heads, config.n_clusters, config.head_dim
    # logits (2*dh*M + M) plus aggregation and broadcast (2*M*dh each), per head and block
    assert large.a - small.a == config.n_blocks * h * m * (6 * dh + 1)
    assert large.b > small.b


def test_elementwise_threshold():
    f = FlopCount(a=1000, b=0, elementwise_a=5, elementwise_b=0)
    assert not f.includes_elementwise(10) and f.total(10) == f.core(10)
    g = FlopCount(a=1000, b=0, elementwise_a=20, elementwise_b=0)
    assert g.elementwise_share(10) > ELEMENTWISE_THRESHOLD
    assert g.total(10) == g.core(10) + g.elementwise(10)
    assert not count_flops(CaprmilConfig()).includes_elementwise(1000)


def test_width_depth_derivation():
    d, t, log = derive_width_depth()
    assert (d, t) == (128, 1)
    assert len(log) == 3 and "D=128" in log[1] and "T=1" in log[2]


def test_linear_fit_recovers_line():
    x = np.arange(1, 9)
    slope, intercept, r2 = linear_fit(x, 3 * x + 2)
    assert slope == pytest.approx(3) and intercept == pytest.approx(2) and r2 == pytest.approx(1)


def test_bench_scaling_contract():
    cfg = CaprmilConfig(d_in=16, d_model=16, n_heads=2)
    with pytest.raises(ConfigError):
        bench_scaling(cfg, [10, 20], repeats=2)
    with pytest.raises(ConfigError):
        bench_scaling(cfg, [20, 10])
    report = bench_scaling(cfg, [50, 100, 200], repeats=3, threads=1)
    assert report.threads == 1 and report.repeats == 3 and len(report.seconds) == 3
    rows = report.csv().splitlines()
    assert rows[0] == "N,median_seconds,analytic_flops"
    assert [int(r.split(",")[0]) for r in rows[1:]] == [50, 100, 200]
    assert [int(r.split(",")[2]) for r in rows[1:]] == [report.flops.total(n) for n in (50, 100, 200)]
    assert "threads=1" in report.table()


def test_cost_table_lines():
    text = cost_report(CaprmilConfig()).table(1000)
    assert "0.3144M" in text and "0.6270G" in text
