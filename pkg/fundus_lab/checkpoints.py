"""
Checkpoint files shared by FAG-Net and FGC-Net.

A checkpoint holds the model kind, the config that shaped the network, the
named-parameter inventory and the state dicts of every network in the run.
"""
import hashlib
import logging
import pickle
from dataclasses import dataclass, field

import torch

from .errors import CompatibilityError
from .fagnet import FagNetConfig, build_fagnet, parameter_inventory
from .fgcnet import FgcNetConfig, build_fgcnet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("fagnet", "fgcnet")


@dataclass
class Checkpoint:
    kind: str
    config: object
    models: dict
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, kind, config, models, extra=None):
    """
    Writes ``models`` (name -> nn.Module) and the config that built them.

    Args:
        path (str | Path): Destination file.
        kind (str): "fagnet" or "fgcnet".
        config: FagNetConfig or FgcNetConfig.
        models (dict): e.g. {"model": net} or {"generator": g, "discriminator": d}.
        extra (dict | None): Small picklable metadata (epoch, losses).
    """
    if kind not in KINDS:
        raise CompatibilityError(f"unknown checkpoint kind {kind!r}")
    payload = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "inventory": {name: parameter_inventory(m) for name, m in models.items()},
        "state": {name: m.state_dict() for name, m in models.items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    logger.debug(f"Saved {kind} checkpoint to {path}")


def _build(kind, config_dict):
    try:
        if kind == "fagnet":
            config = FagNetConfig(**config_dict)
            return config, {"model": build_fagnet(config)}
        config = FgcNetConfig(**config_dict)
        generator, discriminator = build_fgcnet(config)
        return config, {"generator": generator, "discriminator": discriminator}
    except TypeError as e:
        raise CompatibilityError(f"checkpoint config does not match this version: {e}") from e


def load_checkpoint(path, expected_kind=None, map_location="cpu"):
    """
    Rebuilds the networks stored in a checkpoint.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        CompatibilityError: The file is not a checkpoint, is of another kind,
            or its parameters do not fit the stored config.
    """
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError, AttributeError) as e:
        raise CompatibilityError(f"{path} is not a readable checkpoint: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_VERSION:
        raise CompatibilityError(f"{path} is not a fundus_lab checkpoint")
    kind = payload["kind"]
    if kind not in KINDS:
        raise CompatibilityError(f"{path}: unknown checkpoint kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise CompatibilityError(f"{path} holds a {kind} checkpoint, expected {expected_kind}")
    config, models = _build(kind, payload["config"])
    for name, model in models.items():
        if name not in payload["state"]:
            raise CompatibilityError(f"{path} has no state for {name}")
        try:
            model.load_state_dict(payload["state"][name], strict=True)
        except RuntimeError as e:
            raise CompatibilityError(f"{path}: {name} parameters do not match the stored config: {e}") from e
        model.eval()
    return Checkpoint(kind=kind, config=config, models=models, extra=payload.get("extra", {}))


def checkpoint_digest(path):
    """SHA-256 of the checkpoint file, for report metadata."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
