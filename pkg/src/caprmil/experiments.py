"""Synthetic benchmark runs and the cluster/head/ratio ablation grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TextIO

from .checkpoint import save
from .data import benchmark_splits
from .efficiency import count_params
from .errors import ConfigError
from .metrics import EvalResult, evaluate
from .model import CaprmilConfig, ModelState, init_model, mean_baseline
from .numerics.rng import Rng
from .training import History, TrainConfig, train

# Short schedule used for the synthetic benchmarks: the bags are separable
# within a couple of passes, so the full 30-epoch recipe only burns CPU.
SHORT_SCHEDULE = TrainConfig(max_epochs=4, warmup_epochs=1)

ABLATION_AXES = {"clusters": "n_clusters", "heads": "n_heads", "ratio": "mlp_ratio"}
ABLATION_GRID = {"clusters": (2, 4, 8, 16), "heads": (2, 4, 8, 12), "ratio": (1, 2, 4)}


def model_variant(name: str, base: CaprmilConfig | None = None) -> CaprmilConfig:
    """``mean`` is the block-free baseline; ``caprmil[-attn|-gattn]`` pick the pooling head."""
    base = base or CaprmilConfig()
    if name == "mean":
        return mean_baseline(base)
    head, _, agg = name.partition("-")
    if head != "caprmil":
        raise ConfigError(f"unknown model variant {name!r}")
    return base.replace(aggregator=agg or "mean")


@dataclass
class RunResult:
    config: CaprmilConfig
    state: ModelState
    history: History
    test: EvalResult


def fit_and_test(config: CaprmilConfig, train_set: Sequence, val_set: Sequence, test_set: Sequence,
                 train_cfg: TrainConfig, log: TextIO | None = None) -> RunResult:
    state = init_model(config, Rng(train_cfg.seed).spawn("init"))
    best, history = train(state, train_set, val_set, train_cfg, log=log)
    return RunResult(config, best, history, evaluate(best, test_set))


def run_synthetic(config: CaprmilConfig, preset_name: str, seed: int,
                  train_cfg: TrainConfig = SHORT_SCHEDULE, n_train: int = 200, n_val: int = 20,
                  n_test: int = 50, log: TextIO | None = None) -> RunResult:
    """Train on a freshly seeded preset dataset and score the held-out split."""
    splits = benchmark_splits(preset_name, seed, n_train, n_val, n_test, d_in=config.d_in)
    return fit_and_test(config, splits["train"], splits["val"], splits["test"],
                        train_cfg.replace(seed=seed), log)


def parse_axis(spec: str) -> tuple[str, tuple[int, ...]]:
    """``"clusters=2,4,8"`` -> ``("clusters", (2, 4, 8))``."""
    name, sep, values = spec.partition("=")
    name = name.strip()
    if not sep or name not in ABLATION_AXES:
        raise ConfigError(f"bad ablation axis {spec!r}; expected one of {sorted(ABLATION_AXES)} as name=v1,v2")
    try:
        vals = tuple(int(v) for v in values.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"ablation values must be integers: {spec!r}") from None
    if not vals:
        raise ConfigError(f"ablation axis {name!r} has no values")
    return name, vals


def ablation_grid(base: CaprmilConfig, axes: dict[str, Sequence[int]]) -> list[CaprmilConfig]:
    """Cartesian product of the requested axes applied to ``base``."""
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cells.append(base.replace(**{ABLATION_AXES[n]: v for n, v in zip(names, combo)}))
    return cells


def subsample(cells: list, k: int | None, seed: int) -> list:
    """``k`` cells picked by a seeded draw, kept in grid order."""
    if k is None or k >= len(cells):
        return list(cells)
    if k < 1:
        raise ConfigError("ablation subsample must be >= 1")
    picked = sorted(Rng(seed).spawn("ablate").permutation(len(cells))[:k])
    return [cells[i] for i in picked]


def cell_name(config: CaprmilConfig) -> str:
    return f"M{config.n_clusters}_H{config.n_heads}_r{config.mlp_ratio}"


def cell_record(config: CaprmilConfig, result: RunResult) -> str:
    return (f"cell={cell_name(config)} clusters={config.n_clusters} heads={config.n_heads} "
            f"ratio={config.mlp_ratio} params={result.state.n_params()} "
            f"count_params={count_params(config)} best_epoch={result.history.best_epoch} "
            + result.test.record())


def run_ablation(cells: Sequence[CaprmilConfig], train_set, val_set, test_set, train_cfg: TrainConfig,
                 out_dir, emit=print) -> list[str]:
    """Train every cell sequentially; write a checkpoint and epoch log per cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cfg in cells:
        name = cell_name(cfg)
        with open(out_dir / f"{name}.log", "w") as log:
            result = fit_and_test(cfg, train_set, val_set, test_set, train_cfg, log)
        save(result.state, out_dir / f"{name}.cprm")
        rec = cell_record(cfg, result)
        records.append(rec)
        emit(rec)
    return records
