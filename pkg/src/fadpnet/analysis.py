"""Spectrum reports on branch outputs and ablation tables."""

import copy
import logging

import numpy as np
import torch

from . import data as D
from .config import RunConfig
from .freqsep import BAND_CSV_HEADER, band_energy_ratios, format_band_row
from .net import VARIANTS, ConfigError, FADPNet, make_variant
from .profiler import count_params, estimate_flops
from .train import evaluate_model, summarize, train

log = logging.getLogger(__name__)


@torch.no_grad()
def branch_ratios(model: FADPNet, dataset, level=0, batch=16, stage="encoder"):
    """Mean (low, mid, high) ratios of the LFEB-stack and HFEB-stack outputs at ``level``."""
    if not 0 <= level < model.cfg.levels:
        raise ConfigError(f"level must be in [0, {model.cfg.levels}), got {level}")
    if stage not in ("encoder", "decoder"):
        raise ConfigError(f"unknown stage {stage!r}")
    block = getattr(model, stage)[level]
    captured = {"lfeb": [], "hfeb": []}
    hooks = [
        block.lfeb_stack.register_forward_hook(lambda m, i, o: captured["lfeb"].append(o.detach())),
        block.hfeb_stack.register_forward_hook(lambda m, i, o: captured["hfeb"].append(o.detach())),
    ]
    try:
        model.eval()
        for _, lr_img, _ in D.iterate(dataset, batch, seed=0, shuffle=False, augment_train=False):
            x = torch.from_numpy(lr_img)
            if getattr(model, "channels_last", False):
                x = x.contiguous(memory_format=torch.channels_last)
            model(x)
    finally:
        for h in hooks:
            h.remove()
    out = {}
    for name, feats in captured.items():
        per_image = [band_energy_ratios(f[i]) for f in feats for i in range(f.shape[0])]
        out[name] = tuple(float(v) for v in np.mean(per_image, axis=0))
    return out


def spectrum_report(model, dataset, level=0, path=None):
    """CSV rows ``source,band_low,band_mid,band_high`` for the two branches."""
    ratios = branch_ratios(model, dataset, level)
    lines = [BAND_CSV_HEADER] + [format_band_row(f"{k}_level{level + 1}", v) for k, v in ratios.items()]
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    return text


ABLATION_HEADER = "variant,params,flops,psnr,ssim,final_loss"


def check_flags(flags):
    unknown = [f for f in flags if f not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation flags {unknown}; known: {sorted(VARIANTS)}")


def ablate(run: RunConfig, flags, train_set, eval_set=None, size=(128, 128), logger=None):
    """Train the baseline and each variant under the same seed and budget.

    Returns rows of dicts and the CSV text. Unknown flags fail before any training.
    """
    check_flags(flags)
    eval_set = eval_set if eval_set is not None else train_set
    configs = [("baseline", run.model)] + [(f, make_variant(run.model, f)) for f in flags]
    for _, c in configs:
        c.validate()
    rows = []
    for name, mcfg in configs:
        r = copy.deepcopy(run)
        r.model = mcfg
        state = train(r, train_set, logger=logger or (lambda line: None))
        p, s = summarize(evaluate_model(state.model, eval_set))
        last = state.history[-1]["loss"] if state.history else float("nan")
        rows.append({"variant": name, "params": count_params(state.model),
                     "flops": estimate_flops(mcfg, *size), "psnr": p, "ssim": s, "final_loss": last})
        log.info("ablation %s: psnr %.3f", name, p)
    lines = [ABLATION_HEADER] + [
        f"{r['variant']},{r['params']},{r['flops']},{r['psnr']:.3f},{r['ssim']:.4f},{r['final_loss']:.6f}"
        for r in rows
    ]
    return rows, "\n".join(lines) + "\n"
