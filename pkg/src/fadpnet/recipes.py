"""Desk-scale experiment recipes on synthetic faces."""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

from . import data as D
from .config import DataConfig, RunConfig, TrainConfig
from .net import ModelConfig
from .train import evaluate_model, init_state, summarize, train

TINY_SIZE = 32
TINY_SCALE = 4
TINY_IMAGES = 16
TINY_STEPS = 2000
TINY_TARGET_DB = 40.0
TINY_BUDGET_S = 15 * 60


def tiny_data(root, seed=0):
    """16 training and 16 evaluation faces, 32x32 HR with x4 degradation."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        # render at 128 so the 32px targets are antialiased rather than aliased
        D.make_synthetic_dataset(root, {"train": TINY_IMAGES, "val": 0, "test": TINY_IMAGES}, size=128, seed=seed)
    m = D.load_manifest(manifest)
    return (D.PairDataset(m, "train", TINY_SCALE, TINY_SIZE),
            D.PairDataset(m, "test", TINY_SCALE, TINY_SIZE))


def tiny_run(seed=0, **train_kw):
    kw = dict(max_steps=TINY_STEPS, seed=seed, augment=False, log_every=100)
    kw.update(train_kw)
    return RunConfig(ModelConfig.toy(), TrainConfig(**kw),
                     DataConfig(scale=TINY_SCALE, size=TINY_SIZE))


@dataclass
class OverfitResult:
    seed: int
    steps: int
    psnr: float
    seconds: float
    reached: bool
    curve: List[tuple] = field(default_factory=list)


def tiny_overfit(train_set, seed=0, target=TINY_TARGET_DB, budget_s=TINY_BUDGET_S,
                 check_every=100, logger=None, run=None):
    """Train the toy network until train-set PSNR exceeds ``target``, the step
    limit is hit, or ``budget_s`` seconds of training have elapsed."""
    run = run or tiny_run(seed)
    emit = logger or (lambda line: None)
    state = init_state(run)
    curve, spent = [], 0.0
    total = run.train.max_steps
    psnr = float("nan")
    while state.step < total:
        t0 = time.perf_counter()
        train(run, train_set, until=min(state.step + check_every, total), logger=emit, state=state)
        spent += time.perf_counter() - t0
        psnr, _ = summarize(evaluate_model(state.model, train_set))
        curve.append((state.step, psnr, spent))
        emit(f"# seed={seed} step={state.step} train_psnr={psnr:.3f} seconds={spent:.0f}")
        if psnr > target or spent > budget_s:
            break
    return state, OverfitResult(seed, state.step, psnr, spent, psnr > target and spent <= budget_s, curve)
