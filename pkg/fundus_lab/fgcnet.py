"""
FGC-Net: age-conditioned fundus generation.

The generator is a conditional VAE with U-Net style skips:

    input block (stem + 1/3/5/7 kernels, summed)
    -> six stride-2 encoding blocks (EB1..EB6)
    -> image head (mu0, sigma0)  +  label head on the age (mu1, sigma1)
    -> fused moments (mu0 + mu1, sigma0 * sigma1) -> z
    -> z * R, projected to the EB6 grid, + EB6 skip
    -> DB7..DB2 transpose-conv upsampling (+ EB5..EB1 skips), DB1 at full
       resolution (+ input-block skip) -> sigmoid image

The discriminator regresses age from real and generated images and is
trained jointly with the generator rather than in a min-max game.
"""
import logging
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn

from . import constants as C
from .config import section
from .errors import InvalidConfigError, InvalidInputError, InvalidStateError
from .fagnet import check_images

logger = logging.getLogger(__name__)

NUM_SKIPS = C.DOWNSAMPLING_STEPS + 1


@dataclass(frozen=True)
class FgcNetConfig:
    input_size: int = C.INPUT_SIZE
    stem_filters: int = C.FGCNET_STEM_FILTERS
    latent_dim: int = C.FGCNET_LATENT_DIM
    eps_variant: str = "standard"
    kl_variant: str = "standard"
    output_activation: str = "sigmoid"
    use_skips: bool = True
    label_hidden: int = C.FGCNET_LABEL_HIDDEN
    disc_filters: int = C.FGCNET_DISC_FILTERS
    disc_fc_sizes: tuple = C.FGCNET_DISC_FC_SIZES
    disc_dropout_rates: tuple = C.FGCNET_DISC_DROPOUT_RATES

    def __post_init__(self):
        object.__setattr__(self, "disc_fc_sizes", tuple(int(s) for s in self.disc_fc_sizes))
        object.__setattr__(self, "disc_dropout_rates", tuple(float(r) for r in self.disc_dropout_rates))
        if self.input_size <= 0 or self.input_size % C.SIZE_DIVISOR:
            raise InvalidConfigError(f"input_size must be a positive multiple of {C.SIZE_DIVISOR}, got {self.input_size}")
        if self.latent_dim < 1:
            raise InvalidConfigError(f"latent_dim must be at least 1, got {self.latent_dim}")
        if self.eps_variant not in C.EPS_VARIANTS:
            raise InvalidConfigError(f"eps_variant must be one of {C.EPS_VARIANTS}")
        if self.kl_variant not in C.KL_VARIANTS:
            raise InvalidConfigError(f"kl_variant must be one of {C.KL_VARIANTS}")
        if self.output_activation != "sigmoid":
            raise InvalidConfigError("output_activation must be 'sigmoid'")
        if min(self.stem_filters, self.label_hidden, self.disc_filters) < 1:
            raise InvalidConfigError("filter and hidden counts must be positive")
        if len(self.disc_fc_sizes) != len(self.disc_dropout_rates) or \
                any(not 0.0 <= r < 1.0 for r in self.disc_dropout_rates):
            raise InvalidConfigError("discriminator needs one dropout rate in [0, 1) per fully-connected layer")

    @classmethod
    def from_config(cls, cfg):
        return cls(kl_variant=cfg["loss.kl_variant"], **section(cfg, "fgcnet"))

    def to_dict(self):
        return asdict(self)


# Ablations exposed as named variants: eps_variant x kl_variant x skips.
VARIANTS = {
    "fgc-standard": {"eps_variant": "standard", "kl_variant": "standard", "use_skips": True},
    "fgc-paper-eps": {"eps_variant": "paper", "kl_variant": "standard", "use_skips": True},
    "fgc-paper-kl": {"eps_variant": "standard", "kl_variant": "paper", "use_skips": True},
    "fgc-paper": {"eps_variant": "paper", "kl_variant": "paper", "use_skips": True},
}
VARIANTS.update({f"{name}-noskip": dict(v, use_skips=False) for name, v in list(VARIANTS.items())})


def variant_config(base, name):
    if name not in VARIANTS:
        raise InvalidConfigError(f"unknown FGC-Net variant {name!r}; known: {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[name])


@dataclass
class LatentState:
    """Everything the bottleneck computed for one batch; vectors are (N, latent_dim)."""
    mu0: torch.Tensor
    sigma0: torch.Tensor
    mu1: torch.Tensor
    sigma1: torch.Tensor
    mu_l: torch.Tensor
    sigma_m: torch.Tensor
    epsilon: torch.Tensor
    z: torch.Tensor
    age_condition: torch.Tensor


def _positive(raw):
    return torch.exp(torch.clamp(raw, -C.LOG_SIGMA_LIMIT, C.LOG_SIGMA_LIMIT))


class InputBlock(nn.Module):
    """Stem convolution followed by four parallel 1/3/5/7 convolutions merged by sum."""

    def __init__(self, in_channels, filters, kernels=C.FGCNET_INPUT_KERNELS):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, filters, 3, padding=1), nn.ReLU(inplace=True))
        self.branches = nn.ModuleList(nn.Conv2d(filters, filters, k, padding=k // 2) for k in kernels)

    def forward(self, x):
        stem = self.stem(x)
        out = self.branches[0](stem)
        for branch in self.branches[1:]:
            out = out + branch(stem)
        return out


class EncodingBlock(nn.Module):
    """Stride-2 convolution, normal convolution, batch-norm, ReLU."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class DecodingBlock(nn.Module):
    """Transpose convolution (stride 2 upsamples, stride 1 keeps size), batch-norm, ReLU."""

    def __init__(self, in_channels, out_channels, upsample=True):
        super().__init__()
        if upsample:
            conv = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        else:
            conv = nn.ConvTranspose2d(in_channels, out_channels, 3, stride=1, padding=1)
        self.body = nn.Sequential(conv, nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.body(x)


class LabelEncoder(nn.Module):
    """Maps a scalar age to label-head moments (mu1, sigma1)."""

    def __init__(self, hidden, latent_dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(1, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, latent_dim), nn.LeakyReLU(0.2),
        )
        self.mu = nn.Linear(latent_dim, latent_dim)
        self.log_sigma = nn.Linear(latent_dim, latent_dim)

    def forward(self, age):
        h = self.body((age / C.AGE_SCALE).reshape(-1, 1))
        return self.mu(h), _positive(self.log_sigma(h))


class FgcNet(nn.Module):
    """The FGC-Net generator."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        s = config.stem_filters
        channels = [s * 2 ** i for i in range(NUM_SKIPS)]
        self.side = config.input_size // C.SIZE_DIVISOR
        self.input_block = InputBlock(C.IMAGE_CHANNELS, s)
        self.encoder = nn.ModuleList(
            EncodingBlock(channels[i], channels[i + 1]) for i in range(C.DOWNSAMPLING_STEPS))
        flat = channels[-1] * self.side * self.side
        self.image_fc = nn.Sequential(nn.Linear(flat, config.latent_dim), nn.LeakyReLU(0.2))
        self.image_mu = nn.Linear(config.latent_dim, config.latent_dim)
        self.image_log_sigma = nn.Linear(config.latent_dim, config.latent_dim)
        self.label_encoder = LabelEncoder(config.label_hidden, config.latent_dim)
        self.latent_weights = nn.Parameter(torch.ones(config.latent_dim))
        self.project = nn.Linear(config.latent_dim, flat)
        # DB7..DB2 upsample one level each; DB1 stays at full resolution.
        self.up_blocks = nn.ModuleList(
            DecodingBlock(channels[i], channels[i - 1]) for i in range(C.DOWNSAMPLING_STEPS, 0, -1))
        self.db1 = DecodingBlock(channels[0], channels[0], upsample=False)
        self.to_image = nn.Conv2d(channels[0], C.IMAGE_CHANNELS, 1)
        self._channels = channels

    def encode_image(self, x):
        """
        Returns the EB6 features and the SkipSet (input block + EB1..EB6).
        """
        h = self.input_block(x)
        skips = [h]
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        return h, skips

    def image_moments(self, features):
        h = self.image_fc(torch.flatten(features, 1))
        return self.image_mu(h), _positive(self.image_log_sigma(h))

    def encode_label(self, age):
        age = torch.as_tensor(age, dtype=self.latent_weights.dtype, device=self.latent_weights.device).reshape(-1)
        check_ages(age)
        return self.label_encoder(age)

    def decode(self, z, skips, zero_skips=False):
        """
        Generates images from latent codes and the SkipSet of their source images.

        Raises:
            InvalidStateError: skips are enabled and the SkipSet is incomplete.
        """
        use_skips = self.config.use_skips and not zero_skips
        if use_skips and (skips is None or len(skips) != NUM_SKIPS):
            found = 0 if skips is None else len(skips)
            raise InvalidStateError(f"decoder needs {NUM_SKIPS} skip entries, got {found}")
        h = self.project(z * self.latent_weights)
        h = h.view(-1, self._channels[-1], self.side, self.side)
        if use_skips:
            h = h + skips[-1]
        for level, block in zip(range(C.DOWNSAMPLING_STEPS - 1, -1, -1), self.up_blocks):
            h = block(h)
            if use_skips and level > 0:
                h = h + skips[level]
        h = self.db1(h)
        if use_skips:
            h = h + skips[0]
        return torch.sigmoid(self.to_image(h))

    def forward(self, x, age, generator=None, epsilon=None, zero_skips=False):
        features, skips = self.encode_image(x)
        mu0, sigma0 = self.image_moments(features)
        age = torch.as_tensor(age, dtype=x.dtype, device=x.device).reshape(-1)
        mu1, sigma1 = self.encode_label(age)
        mu_l, sigma_m = fuse_condition(mu0, sigma0, mu1, sigma1)
        z, eps = sample_latent(mu_l, sigma_m, mu1, sigma1, variant=self.config.eps_variant,
                               generator=generator, epsilon=epsilon)
        generated = self.decode(z, skips, zero_skips=zero_skips)
        state = LatentState(mu0=mu0, sigma0=sigma0, mu1=mu1, sigma1=sigma1, mu_l=mu_l,
                            sigma_m=sigma_m, epsilon=eps, z=z, age_condition=age)
        return generated, state


class Discriminator(nn.Module):
    """Six stride-2 blocks and a dropout-regularized MLP regressing age in years."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        layers = []
        in_ch = C.IMAGE_CHANNELS
        for i in range(C.DOWNSAMPLING_STEPS):
            out_ch = config.disc_filters * 2 ** i
            layers += [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
                       nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]
            in_ch = out_ch
        self.blocks = nn.Sequential(*layers)
        side = config.input_size // C.SIZE_DIVISOR
        widths = (in_ch * side * side,) + config.disc_fc_sizes
        fc = []
        for i, rate in enumerate(config.disc_dropout_rates):
            fc += [nn.Linear(widths[i], widths[i + 1]), nn.ReLU(inplace=True), nn.Dropout(rate)]
        self.fc = nn.Sequential(*fc)
        self.out = nn.Linear(widths[-1], 1)

    def forward(self, x):
        raw = self.out(self.fc(torch.flatten(self.blocks(x), 1)))
        return C.AGE_SCALE * raw.squeeze(1)


def build_fgcnet(config):
    """Returns a freshly initialized (generator, discriminator) pair."""
    return FgcNet(config), Discriminator(config)


def check_ages(age):
    age = torch.as_tensor(age)
    if age.numel() == 0:
        raise InvalidInputError("no age condition given")
    if not bool(torch.all(torch.isfinite(age))) or \
            bool(torch.any(age < C.MIN_AGE)) or bool(torch.any(age > C.MAX_AGE)):
        raise InvalidInputError(f"ages must lie in [{C.MIN_AGE:g}, {C.MAX_AGE:g}] years")


def fuse_condition(mu0, sigma0, mu1, sigma1):
    """Sum of the means and product of the standard deviations of both heads."""
    if not (mu0.shape == sigma0.shape and mu1.shape == sigma1.shape):
        raise InvalidInputError("each head needs matching mu and sigma shapes")
    if mu0.shape[-1] != mu1.shape[-1]:
        raise InvalidInputError(f"latent lengths differ: {mu0.shape[-1]} != {mu1.shape[-1]}")
    if bool(torch.any(sigma0 <= 0)) or bool(torch.any(sigma1 <= 0)):
        raise InvalidInputError("sigma must be strictly positive")
    return mu0 + mu1, sigma0 * sigma1


def make_generator(seed):
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def sample_latent(mu_l, sigma_m, mu1=None, sigma1=None, variant="standard",
                  generator=None, seed=None, epsilon=None):
    """
    Draws z from the fused moments.

    ``standard``: eps ~ N(0, 1), z = mu_l + sigma_m * eps.
    ``paper``: eps = |N(mu1, sigma1)| from the label head, z = mu_l + sigma_m**2 * eps.

    Args:
        epsilon (torch.Tensor | None): Injected noise; bypasses sampling.
        generator / seed: Source of randomness; noise is drawn on the CPU so
            that a given seed yields the same z on every device.

    Returns:
        tuple: (z, epsilon)
    """
    if variant not in C.EPS_VARIANTS:
        raise InvalidInputError(f"unknown epsilon variant {variant!r}")
    if mu_l.shape != sigma_m.shape:
        raise InvalidInputError("mu_l and sigma_m shapes differ")
    if bool(torch.any(sigma_m <= 0)) or not bool(torch.all(torch.isfinite(sigma_m))):
        raise InvalidInputError("sigma_m must be finite and strictly positive")
    sigma_m = torch.clamp(sigma_m, min=C.SIGMA_FLOOR)
    if epsilon is None:
        if generator is None and seed is not None:
            generator = make_generator(seed)
        noise = torch.randn(mu_l.shape, generator=generator).to(device=mu_l.device, dtype=mu_l.dtype)
        if variant == "paper":
            if mu1 is None or sigma1 is None:
                raise InvalidInputError(f"epsilon variant {variant!r} needs the label-head moments")
            epsilon = torch.abs(mu1 + sigma1 * noise)
        else:
            epsilon = noise
    epsilon = epsilon.to(device=mu_l.device, dtype=mu_l.dtype)
    scale = sigma_m ** 2 if variant == "paper" else sigma_m
    return mu_l + scale * epsilon, epsilon


def discriminate(discriminator, images, mode="eval"):
    """Predicted age in years for each image."""
    check_images(images, discriminator.config.input_size)
    if mode == "train":
        discriminator.train()
        return discriminator(images)
    was_training = discriminator.training
    discriminator.eval()
    try:
        with torch.no_grad():
            return discriminator(images)
    finally:
        discriminator.train(was_training)


def _age_seed(seed, age):
    # Derived from the age value so a repeated age reproduces its image.
    return (int(seed) * 1_000_003 + int(round(float(age) * 1000))) % (2 ** 63)


@torch.no_grad()
def generate_progression(model, image, ages, seed):
    """
    Generates one image per requested age from a single source image.

    The image is encoded once; each age gets its own label moments, fusion,
    seeded sample and decode.

    Args:
        model (FgcNet): Trained generator.
        image (torch.Tensor): (3, H, W) source in [0, 1].
        ages (list[float]): Target ages in years.
        seed (int): Base seed.

    Returns:
        list[torch.Tensor]: (3, H, W) images, aligned with ``ages``.
    """
    ages = list(ages)
    if not ages:
        raise InvalidInputError("age list is empty")
    check_ages(torch.tensor(ages, dtype=torch.float64))
    x = image.unsqueeze(0) if image.dim() == 3 else image
    check_images(x, model.config.input_size)
    was_training = model.training
    model.eval()
    try:
        features, skips = model.encode_image(x)
        mu0, sigma0 = model.image_moments(features)
        outputs = []
        for age in ages:
            mu1, sigma1 = model.encode_label(age)
            mu_l, sigma_m = fuse_condition(mu0, sigma0, mu1, sigma1)
            z, _ = sample_latent(mu_l, sigma_m, mu1, sigma1, variant=model.config.eps_variant,
                                 seed=_age_seed(seed, age))
            outputs.append(model.decode(z, skips)[0])
        logger.debug(f"Generated {len(outputs)} images for ages {ages}")
        return outputs
    finally:
        model.train(was_training)
