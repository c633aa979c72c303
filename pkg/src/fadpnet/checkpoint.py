"""Versioned checkpoint container: named tensors, optimizer state, configs, rng state."""

import torch

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model, optimizer=None, run_config=None, generator=None,
                    step=0, epoch=0, extra=None):
    state = {
        "format_version": FORMAT_VERSION,
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "model_config": model.cfg.to_dict(),
        "run_config": run_config.to_dict() if run_config is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": generator.get_state() if generator is not None else None,
        "step": int(step),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    torch.save(state, path)


def load_checkpoint(path):
    """Load without unpickling arbitrary objects."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if state.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {state.get('format_version')}")
    return state


def model_from_checkpoint(state):
    from .net import FADPNet, ModelConfig

    model = FADPNet(ModelConfig.from_dict(state["model_config"]))
    model.load_state_dict(state["model"])
    # same memory layout as in training, so forward outputs match bit for bit
    train_cfg = (state.get("run_config") or {}).get("train") or {}
    if train_cfg.get("channels_last"):
        model = use_channels_last(model)
    return model


def use_channels_last(model):
    model = model.to(memory_format=torch.channels_last)
    model.channels_last = True
    return model
