"""
FAG-Net: age regression / gender classification from fundus images.

Six convolutional blocks, each halving resolution; blocks 1, 2 and 6 carry
spatial attention. A 1x1 convolution + maxpool shortcut (CMP) joins block 1's
output to block 2's output by channel concatenation. A 1024-filter tail and
three dropout-regularized fully-connected layers feed the age or gender head.

Tensors are NCHW; images are in [0, 1].
"""
import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from . import constants as C
from .config import section
from .errors import InvalidConfigError, InvalidInputError

logger = logging.getLogger(__name__)

HEADS = ("age", "gender")


@dataclass(frozen=True)
class FagNetConfig:
    input_size: int = C.INPUT_SIZE
    base_filters: int = C.FAGNET_BASE_FILTERS
    attention_kernel: int = C.FAGNET_ATTENTION_KERNEL
    head: str = "age"
    dropout_rates: tuple = C.FAGNET_DROPOUT_RATES
    fc_sizes: tuple = C.FAGNET_FC_SIZES
    tail_filters: int = C.FAGNET_TAIL_FILTERS
    age_center: float = C.FAGNET_AGE_CENTER
    age_scale: float = C.FAGNET_AGE_SCALE

    def __post_init__(self):
        object.__setattr__(self, "dropout_rates", tuple(float(r) for r in self.dropout_rates))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        if self.input_size <= 0 or self.input_size % C.SIZE_DIVISOR:
            raise InvalidConfigError(f"input_size must be a positive multiple of {C.SIZE_DIVISOR}, got {self.input_size}")
        if self.attention_kernel < 1 or self.attention_kernel % 2 == 0:
            raise InvalidConfigError(f"attention_kernel must be odd, got {self.attention_kernel}")
        if self.head not in HEADS:
            raise InvalidConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.dropout_rates) != 3 or any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise InvalidConfigError(f"dropout_rates must be three values in [0, 1), got {self.dropout_rates}")
        if len(self.fc_sizes) != 3 or any(s < 1 for s in self.fc_sizes):
            raise InvalidConfigError(f"fc_sizes must be three positive counts, got {self.fc_sizes}")
        if self.base_filters < 1 or self.tail_filters < 1:
            raise InvalidConfigError("filter counts must be positive")
        if self.age_scale <= 0:
            raise InvalidConfigError("age_scale must be positive")

    @classmethod
    def from_config(cls, cfg):
        return cls(**section(cfg, "fagnet"))

    def to_dict(self):
        return asdict(self)


class SpatialAttention(nn.Module):
    """
    Spatial attention gate.

    Channel-wise mean and max maps are concatenated, convolved to a single
    map with one ``kernel_size`` filter and squashed by a sigmoid; the input
    is multiplied by that map, broadcast over channels.
    """

    def __init__(self, kernel_size=C.FAGNET_ATTENTION_KERNEL):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise InvalidConfigError(f"attention kernel must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def attention_map(self, x):
        avg = torch.mean(x, dim=1, keepdim=True)
        mx = torch.amax(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))

    def forward(self, x):
        return x * self.attention_map(x)


def conv_stack(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1),
    )


class FagBlock(nn.Module):
    """conv stack -> [attention] -> batch-norm -> ReLU -> maxpool(2)."""

    def __init__(self, in_channels, out_channels, attention_kernel=None):
        super().__init__()
        self.convs = conv_stack(in_channels, out_channels)
        self.attention = SpatialAttention(attention_kernel) if attention_kernel else nn.Identity()
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        return self.pool(self.act(self.bn(self.attention(self.convs(x)))))


class FagNet(nn.Module):

    def __init__(self, config):
        super().__init__()
        self.config = config
        b = config.base_filters
        k = config.attention_kernel
        self.block1 = FagBlock(C.IMAGE_CHANNELS, b, k)
        self.block2 = FagBlock(b, 2 * b, k)
        self.cmp = nn.Sequential(nn.Conv2d(b, 2 * b, 1), nn.MaxPool2d(2))
        self.block3 = FagBlock(4 * b, 4 * b)
        self.block4 = FagBlock(4 * b, 8 * b)
        self.block5 = FagBlock(8 * b, 16 * b)
        self.block6 = FagBlock(16 * b, 16 * b, k)
        self.tail = nn.Sequential(
            nn.Conv2d(16 * b, config.tail_filters, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        tail_side = config.input_size // C.SIZE_DIVISOR
        widths = (config.tail_filters * tail_side * tail_side,) + config.fc_sizes
        layers = []
        for i, rate in enumerate(config.dropout_rates):
            layers += [nn.Linear(widths[i], widths[i + 1]), nn.ReLU(inplace=True), nn.Dropout(rate)]
        self.fc = nn.Sequential(*layers)
        self.head = nn.Linear(config.fc_sizes[-1], 1 if config.head == "age" else len(C.GENDERS))

    def _features(self, x, record=None):
        x1 = self.block1(x)
        x2 = self.block2(x1)
        x = torch.cat([x2, self.cmp(x1)], dim=1)
        if record is not None:
            record += [x1.shape[-1], x2.shape[-1]]
        for block in (self.block3, self.block4, self.block5, self.block6):
            x = block(x)
            if record is not None:
                record.append(x.shape[-1])
        return self.tail(x)

    def forward(self, x, return_logits=False):
        raw = self.head(self.fc(torch.flatten(self._features(x), 1)))
        if self.config.head == "age":
            return self.config.age_center + self.config.age_scale * raw.squeeze(1)
        if return_logits:
            return raw
        return torch.softmax(raw, dim=1)

    @torch.no_grad()
    def stage_shapes(self, x):
        """Spatial side length at the input and after each of the six blocks."""
        record = [x.shape[-1]]
        self._features(x, record)
        return record

    @torch.no_grad()
    def predict(self, x):
        was_training = self.training
        self.eval()
        try:
            return self(x)
        finally:
            self.train(was_training)


def build_fagnet(config):
    """Constructs a freshly initialized FAG-Net for ``config``."""
    model = FagNet(config)
    logger.debug(f"Built FAG-Net ({config.head} head, {sum(p.numel() for p in model.parameters())} parameters)")
    return model


def parameter_inventory(model):
    """Returns the ``(name, shape)`` pairs of every parameter and buffer."""
    return [(name, tuple(t.shape)) for name, t in model.state_dict().items()]


def check_images(images, input_size):
    if images.dim() != 4 or images.shape[0] < 1:
        raise InvalidInputError(f"expected a nonempty NCHW batch, got shape {tuple(images.shape)}")
    expected = (C.IMAGE_CHANNELS, input_size, input_size)
    if tuple(images.shape[1:]) != expected:
        raise InvalidInputError(f"expected images of shape {expected}, got {tuple(images.shape[1:])}")


def fagnet_forward(model, images, mode="eval", seed=None):
    """
    Runs FAG-Net on a batch.

    ``eval`` is deterministic and dropout-free with batch-norm in inference
    mode. ``train`` applies dropout; passing ``seed`` makes the dropout masks
    reproducible without disturbing the global generator.

    Returns:
        torch.Tensor: (N,) ages in years, or (N, 2) gender probabilities.
    """
    check_images(images, model.config.input_size)
    if mode == "eval":
        return model.predict(images)
    if mode != "train":
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train()
    if seed is None:
        return model(images)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return model(images)
