"""
Flat ``key = value`` run configuration.

Keys are namespaced ``train.*``, ``fagnet.*``, ``fgcnet.*``, ``loss.*`` and
``data.*``. Every key has a typed default in DEFAULTS; file values and
command-line overrides are parsed by the type of that default.
"""
import logging

from . import constants as C
from .errors import InvalidConfigError

logger = logging.getLogger(__name__)

DEFAULTS = {
    "train.model": "fagnet",
    "train.name": "run",
    "train.initial_lr": C.INITIAL_LR,
    "train.beta1": C.ADAM_BETA1,
    "train.beta2": C.ADAM_BETA2,
    "train.lr_decay_factor": C.LR_DECAY_FACTOR,
    "train.lr_decay_every": C.LR_DECAY_EVERY,
    "train.batch_size": C.BATCH_SIZE,
    "train.max_epochs": C.MAX_EPOCHS,
    "train.early_stop_patience": C.EARLY_STOP_PATIENCE,
    "train.weight_decay": C.WEIGHT_DECAY,
    "train.folds": C.NUM_FOLDS,
    "train.val_fraction": C.VAL_FRACTION,
    "train.checkpoint_every": C.CHECKPOINT_EVERY,
    "train.seed": C.DEFAULT_SEED,
    "train.device": "cpu",
    "fagnet.input_size": C.INPUT_SIZE,
    "fagnet.base_filters": C.FAGNET_BASE_FILTERS,
    "fagnet.attention_kernel": C.FAGNET_ATTENTION_KERNEL,
    "fagnet.head": "age",
    "fagnet.dropout_rates": C.FAGNET_DROPOUT_RATES,
    "fagnet.fc_sizes": C.FAGNET_FC_SIZES,
    "fagnet.tail_filters": C.FAGNET_TAIL_FILTERS,
    "fagnet.age_center": C.FAGNET_AGE_CENTER,
    "fagnet.age_scale": C.FAGNET_AGE_SCALE,
    "fgcnet.input_size": C.INPUT_SIZE,
    "fgcnet.stem_filters": C.FGCNET_STEM_FILTERS,
    "fgcnet.latent_dim": C.FGCNET_LATENT_DIM,
    "fgcnet.label_hidden": C.FGCNET_LABEL_HIDDEN,
    "fgcnet.eps_variant": "standard",
    "fgcnet.output_activation": "sigmoid",
    "fgcnet.use_skips": True,
    "fgcnet.disc_filters": C.FGCNET_DISC_FILTERS,
    "fgcnet.disc_fc_sizes": C.FGCNET_DISC_FC_SIZES,
    "fgcnet.disc_dropout_rates": C.FGCNET_DISC_DROPOUT_RATES,
    "loss.psi": C.LOSS_PSI,
    "loss.varphi": C.LOSS_VARPHI,
    "loss.J": C.LOSS_J,
    "loss.kl_variant": "standard",
    "data.manifest": C.MANIFEST_FILE,
    "data.cache_images": True,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            item_type = type(default[0])
            return tuple(item_type(part.strip()) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as e:
        raise InvalidConfigError(f"{key}: cannot parse {raw!r} ({e})") from e


def _split_entry(entry, where):
    if "=" not in entry:
        raise InvalidConfigError(f"{where}: expected key=value, got {entry!r}")
    key, value = entry.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise InvalidConfigError(f"{where}: unknown config key {key!r}")
    return key, value


def parse_config_text(text, source="<text>"):
    """
    Parses flat config text into a dict of the keys it sets.

    Blank lines and ``#`` comments are ignored.
    """
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = _split_entry(line, f"{source}:{line_no}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, overrides=(), seed=None):
    """
    Builds the effective run configuration.

    Args:
        path (str | None): Config file; when None only defaults apply.
        overrides (iterable[str]): ``key=value`` entries applied after the file.
        seed (int | None): Explicit seed, applied last.

    Returns:
        dict: Every key of DEFAULTS with its effective value.
    """
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read(), source=str(path)))
        logger.info(f"Loaded config {path}")
    for entry in overrides:
        key, raw = _split_entry(entry, "--override")
        cfg[key] = _parse_value(key, raw)
        logger.debug(f"Override {key}={cfg[key]!r}")
    if seed is not None:
        cfg["train.seed"] = int(seed)
    return cfg


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def format_config(cfg):
    """Renders a config dict as text that parse_config_text reads back unchanged."""
    lines = []
    current_ns = None
    for key in sorted(cfg):
        ns = key.split(".", 1)[0]
        if ns != current_ns:
            if current_ns is not None:
                lines.append("")
            lines.append(f"# {ns}")
            current_ns = ns
        lines.append(f"{key} = {_format_value(cfg[key])}")
    return "\n".join(lines) + "\n"


def section(cfg, namespace):
    """Returns the keys of one namespace with the prefix stripped."""
    prefix = namespace + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
