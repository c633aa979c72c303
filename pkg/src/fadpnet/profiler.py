"""Parameter counts, analytic FLOPs and forward latency."""

import gc
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn

from .hfeb import DPA
from .lfeb import SelectiveStateSpace


def count_params(model: nn.Module) -> int:
    """Number of learnable scalars; shared tensors are counted once."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def conv_flops(cin, cout, k, h_out, w_out, groups=1):
    kh, kw = (k, k) if isinstance(k, int) else k
    return 2 * cin * cout * kh * kw * h_out * w_out // groups


def scan_flops(length, channels, state_dim):
    """Recurrence h = a*h + b*x (3 ops per state), y = (c+p).h (2 per state), D*x skip (2 per channel)."""
    return length * (5 * channels * state_dim + 2 * channels)


def attention_flops(channels, heads, tokens):
    """Q K^T and A V products: 2 * (C/h)^2 * tokens each, per head."""
    return 2 * 2 * (channels // heads) ** 2 * tokens * heads


def module_flops(model: nn.Module, x: torch.Tensor) -> "OrderedDict[str, int]":
    """Run one forward pass and attribute multiply-accumulate x 2 counts to leaf layers.

    Activations, norms, elementwise gates and interpolation are not counted.
    """
    counts: "OrderedDict[str, int]" = OrderedDict()
    handles = []

    def add(name, n):
        counts[name] = counts.get(name, 0) + int(n)

    for name, m in model.named_modules():
        if isinstance(m, nn.Conv2d):
            def hook(mod, inp, out, name=name):
                add(name, conv_flops(mod.in_channels, mod.out_channels, mod.kernel_size,
                                     out.shape[-2], out.shape[-1], mod.groups) * out.shape[0])
        elif isinstance(m, nn.Linear):
            def hook(mod, inp, out, name=name):
                add(name, 2 * mod.in_features * mod.out_features * (out.numel() // mod.out_features))
        elif isinstance(m, SelectiveStateSpace):
            def hook(mod, inp, out, name=name):
                b, length, c = inp[0].shape
                add(name + ".scan", b * scan_flops(length, c, mod.state_dim))
        elif isinstance(m, DPA):
            def hook(mod, inp, out, name=name):
                b, c, h, w = inp[0].shape
                add(name + ".attention", b * attention_flops(c, mod.heads, h * w))
        else:
            continue
        handles.append(m.register_forward_hook(hook))
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model(x)
    finally:
        model.train(was_training)
        for hd in handles:
            hd.remove()
    return counts


def estimate_flops(config_or_model, h=128, w=128, breakdown=False):
    """Total FLOPs of one forward pass of a batch-1 ``h x w`` input."""
    from .net import FADPNet, ModelConfig

    if h % 4 or w % 4:
        raise ValueError("H and W must be multiples of 4")
    model = FADPNet(config_or_model) if isinstance(config_or_model, ModelConfig) else config_or_model
    in_ch = model.cfg.in_channels if hasattr(model, "cfg") else 3
    counts = module_flops(model, torch.zeros(1, in_ch, h, w))
    total = sum(counts.values())
    return (total, counts) if breakdown else total


def group_flops(counts, prefix):
    return sum(v for k, v in counts.items() if k.startswith(prefix))


@dataclass
class ProfileReport:
    param_count: int
    flops: Optional[int] = None
    input_size: str = ""
    latency_ms: Optional[float] = None
    n_runs: int = 0
    batch: int = 1
    precision: str = "fp32"
    notes: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if k == "extra":
                continue
            if isinstance(v, float):
                v = f"{v:.4f}"
            lines.append(f"{k}={'' if v is None else v}")
        lines += [f"{k}={v}" for k, v in self.extra.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        fields = {f: kv.pop(f) for f in list(kv) if f in cls.__dataclass_fields__}
        for f in ("param_count", "flops", "n_runs", "batch"):
            if fields.get(f):
                fields[f] = int(fields[f])
            elif f in fields:
                fields[f] = None
        if fields.get("latency_ms"):
            fields["latency_ms"] = float(fields["latency_ms"])
        elif "latency_ms" in fields:
            fields["latency_ms"] = None
        return cls(**fields, extra=kv)


def measure_latency(model, n_runs=1000, batch=1, size=(128, 128), in_channels=3, inputs=None):
    """Mean wall-clock time of ``model(x)`` over ``n_runs`` forward passes.

    No warm-up passes. Inputs are generated before timing starts and only the
    forward call is inside the timed region. Run with no other load on the
    machine.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if inputs is None:
        g = torch.Generator().manual_seed(0)
        inputs = [torch.rand(batch, in_channels, *size, generator=g) for _ in range(n_runs)]
    if hasattr(model, "eval"):
        model.eval()
    times = []
    gc.collect()
    with torch.no_grad():
        for x in inputs[:n_runs]:
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    params = count_params(model) if isinstance(model, nn.Module) else 0
    return ProfileReport(
        param_count=params,
        input_size=f"{size[0]}x{size[1]}",
        latency_ms=1000.0 * sum(times) / len(times),
        n_runs=len(times),
        batch=batch,
        precision=str(next(iter(model.parameters())).dtype).replace("torch.", "")
        if isinstance(model, nn.Module) and any(True for _ in model.parameters()) else "fp32",
        notes="no warmup; forward only; exclusive machine use assumed",
    )


def profile(config, size=(128, 128), n_runs=0):
    from .net import FADPNet

    model = FADPNet(config)
    flops = estimate_flops(model, *size)
    if n_runs:
        report = measure_latency(model, n_runs, 1, size)
    else:
        report = ProfileReport(param_count=count_params(model), input_size=f"{size[0]}x{size[1]}",
                               notes="latency not measured")
    report.flops = flops
    return report
