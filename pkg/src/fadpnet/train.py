"""Training, evaluation and inference loops."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from . import data as D
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint, use_channels_last
from .config import RunConfig, TrainConfig
from .lfeb import NumericalInstabilityError
from .metrics import l1_loss, per_image_metrics
from .net import FADPNet

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalInstabilityError):
    pass


def lr_at(cfg: TrainConfig, step, total):
    if cfg.schedule == "constant" or total <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(step, total) / total))


def param_norm_summary(model, top=5):
    norms = [(n, p.detach().norm().item()) for n, p in model.named_parameters()]
    bad = [n for n, v in norms if not math.isfinite(v)]
    norms.sort(key=lambda t: -t[1] if math.isfinite(t[1]) else -math.inf)
    lines = [f"{n}: {v:.4g}" for n, v in norms[:top]]
    if bad:
        lines.append("nonfinite: " + ", ".join(bad[:10]))
    return "; ".join(lines)


def to_input(arr, channels_last):
    x = torch.from_numpy(np.ascontiguousarray(arr))
    return x.contiguous(memory_format=torch.channels_last) if channels_last else x


def build_model(run: RunConfig):
    torch.manual_seed(run.train.seed)
    model = FADPNet(run.model)
    if run.train.channels_last:
        model = use_channels_last(model)
    return model


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


@dataclass
class TrainState:
    model: FADPNet
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    history: List[dict] = field(default_factory=list)


def init_state(run: RunConfig, checkpoint=None):
    """Fresh state from the run config, or the state stored in ``checkpoint``."""
    model = build_model(run)
    opt = make_optimizer(model, run.train)
    gen = torch.Generator().manual_seed(run.train.seed)
    step = 0
    if checkpoint is not None:
        state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
        model.load_state_dict(state["model"])
        if state.get("optimizer") is not None:
            opt.load_state_dict(state["optimizer"])
        if state.get("rng") is not None:
            gen.set_state(state["rng"])
        step = state["step"]
    model.set_generator(gen)
    return TrainState(model, opt, gen, step)


def total_steps(cfg: TrainConfig, n_train):
    per_epoch = D.num_batches(n_train, cfg.batch)
    return cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch


def batches_from(dataset, cfg: TrainConfig, step):
    """Endless batch stream positioned at global ``step``; order depends only on (seed, step)."""
    per_epoch = D.num_batches(len(dataset), cfg.batch)
    epoch, skip = divmod(step, per_epoch)
    while True:
        for bi, b in enumerate(D.iterate(dataset, cfg.batch, cfg.seed, epoch, augment_train=cfg.augment)):
            if bi >= skip:
                yield epoch, b
        epoch, skip = epoch + 1, 0


def train_step(state: TrainState, hr, lr_img, lr_value):
    for g in state.optimizer.param_groups:
        g["lr"] = lr_value
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    try:
        loss = l1_loss(state.model(lr_img), hr)
    except NumericalInstabilityError as e:
        raise TrainingDiverged(f"{e} at step {state.step}; "
                               f"parameter norms: {param_norm_summary(state.model)}") from e
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"nonfinite loss {loss.item()} at step {state.step}; "
                               f"parameter norms: {param_norm_summary(state.model)}")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return loss.item()


def train(run: RunConfig, train_set, val_set=None, out_dir=None, resume=None, until=None,
          logger: Optional[Callable[[str], None]] = None, state: Optional[TrainState] = None):
    """Run Adam on mean L1 until ``until`` (default: configured total) steps.

    Every log line is ``step,loss,lr,time_ms``. Returns the final ``TrainState``.
    """
    cfg = run.train
    if len(train_set) == 0:
        raise D.DataError("training split is empty")
    state = state or init_state(run, resume)
    total = total_steps(cfg, len(train_set))
    until = total if until is None else min(until, total)
    emit = logger or (lambda line: print(line, flush=True))
    if state.step == 0:
        emit("step,loss,lr,time_ms")
    stream = batches_from(train_set, cfg, state.step)
    while state.step < until:
        epoch, (hr, lr_img, _) = next(stream)
        t0 = time.perf_counter()
        lr_value = lr_at(cfg, state.step, total)
        loss = train_step(state, to_input(hr, cfg.channels_last), to_input(lr_img, cfg.channels_last), lr_value)
        ms = (time.perf_counter() - t0) * 1e3
        state.history.append({"step": state.step, "loss": loss})
        if cfg.log_every and state.step % cfg.log_every == 0:
            emit(f"{state.step},{loss:.6f},{lr_value:.3g},{ms:.1f}")
        if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"step_{state.step:07d}.pt"), state.model,
                            state.optimizer, run, state.generator, state.step, epoch)
        if val_set is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            rows = evaluate_model(state.model, val_set)
            p, s = summarize(rows)
            emit(f"# val step={state.step} psnr={p:.3f} ssim={s:.4f}")
        if cfg.target_psnr is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            p, _ = summarize(evaluate_model(state.model, train_set))
            emit(f"# train step={state.step} psnr={p:.3f}")
            if p > cfg.target_psnr:
                break
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "last.pt"), state.model, state.optimizer, run,
                        state.generator, state.step, state.step // D.num_batches(len(train_set), cfg.batch))
    return state


@torch.no_grad()
def predict(model, lr_img):
    model.eval()
    x = torch.as_tensor(lr_img)
    if getattr(model, "channels_last", False):
        x = x.contiguous(memory_format=torch.channels_last)
    return model(x).clamp(0, 1)


def evaluate_model(model, dataset, batch=16):
    """Per-image ``(image_id, psnr, ssim)`` rows with routing noise off."""
    if len(dataset) == 0:
        raise D.DataError(f"split {dataset.split!r} is empty")
    rows = []
    for hr, lr_img, ids in D.iterate(dataset, batch, seed=0, shuffle=False, augment_train=False):
        sr = predict(model, lr_img)
        for name, (p, s, _) in zip(ids, per_image_metrics(sr, torch.from_numpy(hr))):
            rows.append((name, p, s))
    return rows


def summarize(rows):
    ps = [r[1] for r in rows]
    if any(math.isinf(p) for p in ps):
        mean_p = math.inf
    else:
        mean_p = float(np.mean(ps))
    return mean_p, float(np.mean([r[2] for r in rows]))


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.8f}"])
        p, s = summarize(rows)
        w.writerow(["mean", "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.8f}"])


def evaluate(checkpoint, manifest, split="test", scale=8, size=128, out_csv=None):
    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    model = model_from_checkpoint(state)
    rows = evaluate_model(model, D.PairDataset(manifest, split, scale, size))
    if out_csv:
        write_metrics_csv(rows, out_csv)
    return rows


def infer(checkpoint, paths, out_dir, degrade=False, scale=8, size=128, suffix="_sr"):
    """Super-resolve each image into ``out_dir``; failures are reported per file and skipped."""
    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    model = model_from_checkpoint(state)
    os.makedirs(out_dir, exist_ok=True)
    written, failed = [], []
    for p in paths:
        try:
            img = D.read_image(p)
            if degrade:
                img = D.prepare_pair(img, scale, size, os.path.basename(p)).lr_up
            x = torch.from_numpy(img.transpose(2, 0, 1)[None].astype(np.float32))
            sr = predict(model, x)[0].permute(1, 2, 0).numpy()
            stem = os.path.splitext(os.path.basename(p))[0]
            out = os.path.join(out_dir, f"{stem}{suffix}.png")
            D.write_image(out, sr)
            written.append(out)
        except Exception as e:  # keep going on a bad file, report it
            log.error("failed on %s: %s", p, e)
            failed.append((p, str(e)))
    return written, failed
