"""Single generator / single critic camera-style translation.

One generator ``G(x, c)`` maps an image and a condition vector
``c = [source cams | target cams | mask]`` to an image of the same shape. The
critic returns a realness score and logits over all C_s + C_t cameras.

The adversarial term is the Wasserstein critic with gradient penalty; the
camera-classification terms keep the cross-entropy form. Both objectives are
written as quantities to *minimize*::

    total_d = adv_d + lambda_c * cls_d + lambda_gp * gp
    total_g = adv_g + lambda_c * cls_g + lambda_rec * rec
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import (
    SOURCE,
    TARGET,
    Dataset,
    DomainConfig,
    ImageRecord,
    Provenance,
    combined_camera_index,
    condition_batch,
    encode_condition,
    sample_random_target_camera,
)
from .errors import ConfigError, DataError, DivergenceError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class GanHyperParams:
    lambda_c: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 16
    critic_steps_per_gen: int = 5
    total_iters: int = 50000
    # linear lr decay to zero over the last `decay_fraction` of iterations
    decay_fraction: float = 0.5
    g_channels: int = 64
    g_downsamplings: int = 2
    g_res_blocks: int = 6
    d_channels: int = 64
    d_layers: int = 6
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_rec", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.critic_steps_per_gen < 1:
            raise ConfigError("critic_steps_per_gen must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so both domains appear in a batch")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ConfigError("decay_fraction must lie in [0, 1]")


@dataclass
class GanLossReport:
    iteration: int = 0
    adv_d: float = 0.0
    adv_g: float = 0.0
    cls_d: float = 0.0
    cls_g: float = 0.0
    rec: float = 0.0
    gp: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder / residual / decoder translator; condition values enter as broadcast channels."""

    def __init__(self, condition_dim: int, channels: int = 64, downsamplings: int = 2, res_blocks: int = 6):
        super().__init__()
        self.condition_dim = condition_dim
        layers = [
            nn.Conv2d(3 + condition_dim, channels, 7, 1, 3, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
        ]
        c = channels
        for _ in range(downsamplings):
            layers += [nn.Conv2d(c, 2 * c, 4, 2, 1, bias=False), nn.InstanceNorm2d(2 * c, affine=True), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(res_blocks)]
        for _ in range(downsamplings):
            layers += [nn.ConvTranspose2d(c, c // 2, 4, 2, 1, bias=False), nn.InstanceNorm2d(c // 2, affine=True), nn.ReLU(inplace=True)]
            c //= 2
        layers += [nn.Conv2d(c, 3, 7, 1, 3, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        maps = c.to(x.dtype).view(c.size(0), c.size(1), 1, 1).expand(-1, -1, x.size(2), x.size(3))
        return self.main(torch.cat([x, maps], dim=1))


class IdentityGenerator(nn.Module):
    """Stand-in generator returning its input; used for stub checkpoints and tests."""

    def __init__(self, condition_dim: int = 0):
        super().__init__()
        self.condition_dim = condition_dim

    def forward(self, x, c):
        return x


class Discriminator(nn.Module):
    """Strided critic. Both heads use a kernel covering the whole final map.

    At 256x128 input with six stride-2 layers the final map is 4x2, so the
    heads are 4x2 convolutions without padding giving a single output.
    """

    def __init__(self, image_size: tuple[int, int], camera_count: int, channels: int = 64, layers: int = 6):
        super().__init__()
        h, w = image_size
        if h % (2 ** layers) or w % (2 ** layers):
            raise ConfigError(f"image size {image_size} not divisible by 2**{layers}")
        blocks = [nn.Conv2d(3, channels, 4, 2, 1), nn.LeakyReLU(0.01)]
        c = channels
        for _ in range(layers - 1):
            blocks += [nn.Conv2d(c, 2 * c, 4, 2, 1), nn.LeakyReLU(0.01)]
            c *= 2
        self.main = nn.Sequential(*blocks)
        self.head_kernel = (h // 2 ** layers, w // 2 ** layers)
        self.real_head = nn.Conv2d(c, 1, self.head_kernel, 1, 0, bias=False)
        self.camera_head = nn.Conv2d(c, camera_count, self.head_kernel, 1, 0, bias=False)

    def forward(self, x):
        h = self.main(x)
        return self.real_head(h).flatten(1).mean(1), self.camera_head(h).flatten(1)


def build_networks(config: DomainConfig, hp: GanHyperParams, image_size: tuple[int, int]):
    G = Generator(config.condition_dim, hp.g_channels, hp.g_downsamplings, hp.g_res_blocks)
    D = Discriminator(image_size, config.camera_total, hp.d_channels, hp.d_layers)
    return G, D


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _realness(D, x):
    r = D(x)[0]
    return r.reshape(r.shape[0], -1).mean(1) if r.dim() > 1 else r


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"batch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_loss_d(D, real_batch, fake_batch):
    """Critic loss mean(D_r(fake)) - mean(D_r(real))."""
    _same_shape(real_batch, fake_batch)
    return _realness(D, fake_batch).mean() - _realness(D, real_batch).mean()


def adversarial_loss_g(D, fake_batch):
    return -_realness(D, fake_batch).mean()


def gradient_penalty(D, real_batch, fake_batch, rng: Optional[torch.Generator] = None):
    """Mean of (||grad D_r(x_hat)||_2 - 1)^2 on random interpolates x_hat."""
    _same_shape(real_batch, fake_batch)
    shape = (real_batch.shape[0],) + (1,) * (real_batch.dim() - 1)
    eps = torch.rand(shape, generator=rng, dtype=real_batch.dtype)
    x_hat = (eps * real_batch.detach() + (1 - eps) * fake_batch.detach()).requires_grad_(True)
    out = _realness(D, x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def _check_labels(labels, logits):
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError(f"camera label outside [0, {logits.shape[1]})")


def classification_loss_d(D, real_batch, true_labels):
    """Mean -log softmax(D_c(x))[c'] over the joint camera label space."""
    logits = D(real_batch)[1]
    _check_labels(true_labels, logits)
    return F.cross_entropy(logits, true_labels)


def condition_labels(conditions: torch.Tensor) -> torch.Tensor:
    """Joint camera index of each condition row (the active entry before the mask)."""
    return conditions[:, :-2].argmax(1)


def classification_loss_g(D, G, input_batch, target_conditions, fake=None):
    if fake is None:
        fake = G(input_batch, target_conditions)
    return classification_loss_d(D, fake, condition_labels(target_conditions))


def reconstruction_loss(G, input_batch, target_conditions, original_conditions, fake=None):
    """Mean absolute error between x and G(G(x, c), c')."""
    if fake is None:
        fake = G(input_batch, target_conditions)
    back = G(fake, original_conditions)
    _same_shape(input_batch, back)
    return (input_batch - back).abs().mean()


def discriminator_objective(report: GanLossReport, hp: GanHyperParams):
    _check_weights(hp)
    return report.adv_d + hp.lambda_c * report.cls_d + hp.lambda_gp * report.gp


def generator_objective(report: GanLossReport, hp: GanHyperParams):
    _check_weights(hp)
    return report.adv_g + hp.lambda_c * report.cls_g + hp.lambda_rec * report.rec


def _check_weights(hp):
    if min(hp.lambda_c, hp.lambda_rec, hp.lambda_gp) < 0:
        raise ConfigError("loss weights must be nonnegative")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _lr_at(hp: GanHyperParams, it: int) -> float:
    start = hp.total_iters * (1 - hp.decay_fraction)
    if hp.decay_fraction == 0 or it < start:
        return hp.lr
    return hp.lr * max(0.0, (hp.total_iters - it) / (hp.total_iters - start))


def _finite(report: GanLossReport, it: int):
    bad = [k for k, v in report.as_dict().items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite GAN loss at iteration {it}: {', '.join(bad)}")


def save_checkpoint(path, G, D, hp: GanHyperParams, config: DomainConfig, iteration: int,
                    image_size: tuple[int, int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "gan-checkpoint-v1",
        "generator_kind": "identity" if isinstance(G, IdentityGenerator) else "conv",
        "hyperparams": dataclasses.asdict(hp),
        "domain_config": dataclasses.asdict(config),
        "image_size": list(image_size),
        "iteration": iteration,
        "generator": G.state_dict(),
        "discriminator": D.state_dict() if D is not None else {},
    }, path)
    return path


def load_checkpoint(path):
    """Return (G, D, hp, config, iteration, image_size)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    hp = GanHyperParams(**blob["hyperparams"])
    dc = blob["domain_config"]
    config = DomainConfig(tuple(dc["cameras_per_domain"]), dc["identity_count_source"],
                          tuple(dc["sample_counts"]), dc["domain_count"])
    size = tuple(blob["image_size"])
    if blob["generator_kind"] == "identity":
        return IdentityGenerator(config.condition_dim), None, hp, config, blob["iteration"], size
    G, D = build_networks(config, hp, size)
    G.load_state_dict(blob["generator"])
    D.load_state_dict(blob["discriminator"])
    return G, D, hp, config, blob["iteration"], size


def train_stargan(source: Dataset, target: Dataset, hp: GanHyperParams, seed: int,
                  config: Optional[DomainConfig] = None, checkpoint_dir=None,
                  networks=None, on_report: Optional[Callable[[GanLossReport], None]] = None):
    """Alternate ``critic_steps_per_gen`` critic updates with one generator update.

    One iteration is one critic update; the generator is stepped on every
    ``critic_steps_per_gen``-th iteration and a :class:`GanLossReport` is
    logged for each generator step. Returns ``(G, log)`` with G in eval mode.
    """
    if len(source) == 0 or len(target) == 0:
        raise DataError("GAN training needs nonempty source and target datasets")
    if source.image_shape != target.image_shape:
        raise DataError(f"source/target image shapes differ: {source.image_shape} vs {target.image_shape}")
    config = config or source.config
    torch.manual_seed(seed)
    size = source.image_shape[1:]
    G, D = networks if networks is not None else build_networks(config, hp, size)
    rng = np.random.default_rng(seed)
    trng = torch.Generator().manual_seed(seed)

    pixels = torch.from_numpy(np.concatenate([source.pixel_array(), target.pixel_array()]))
    labels = np.array([combined_camera_index(r.camera_index, r.domain_index, config)
                       for r in (*source.records, *target.records)])
    n_src = len(source)
    half = hp.batch_size // 2

    opt_g = torch.optim.Adam(G.parameters(), hp.lr, betas=(hp.adam_beta1, hp.adam_beta2))
    opt_d = torch.optim.Adam(D.parameters(), hp.lr, betas=(hp.adam_beta1, hp.adam_beta2))
    log: list[GanLossReport] = []
    G.train()
    D.train()
    for it in range(hp.total_iters):
        lr = _lr_at(hp, it)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        idx = np.concatenate([rng.integers(0, n_src, half),
                              rng.integers(n_src, len(labels), hp.batch_size - half)])
        x = pixels[idx]
        org = labels[idx]
        trg = rng.integers(0, config.camera_total, hp.batch_size)
        c_org = torch.from_numpy(condition_batch(org, config))
        c_trg = torch.from_numpy(condition_batch(trg, config))
        org_t = torch.from_numpy(org)

        # critic step
        fake = G(x, c_trg).detach()
        rep = GanLossReport(iteration=it + 1)
        adv_d = adversarial_loss_d(D, x, fake)
        cls_d = classification_loss_d(D, x, org_t)
        gp = gradient_penalty(D, x, fake, trng)
        loss_d = adv_d + hp.lambda_c * cls_d + hp.lambda_gp * gp
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()
        rep.adv_d, rep.cls_d, rep.gp, rep.total_d = adv_d.item(), cls_d.item(), gp.item(), loss_d.item()

        if (it + 1) % hp.critic_steps_per_gen == 0:
            fake = G(x, c_trg)
            adv_g = adversarial_loss_g(D, fake)
            cls_g = classification_loss_g(D, G, x, c_trg, fake=fake)
            rec = reconstruction_loss(G, x, c_trg, c_org, fake=fake)
            loss_g = adv_g + hp.lambda_c * cls_g + hp.lambda_rec * rec
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            rep.adv_g, rep.cls_g, rep.rec, rep.total_g = adv_g.item(), cls_g.item(), rec.item(), loss_g.item()
            _finite(rep, it + 1)
            log.append(rep)
            if on_report is not None:
                on_report(rep)
        else:
            _finite(rep, it + 1)

        if checkpoint_dir is not None and hp.checkpoint_every and (it + 1) % hp.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"gan_{it + 1:06d}.pt", G, D, hp, config, it + 1, size)

    G.eval()
    D.eval()
    return G, log


def translate_dataset(G, source: Dataset, config: DomainConfig, seed: int, batch_size: int = 64) -> Dataset:
    """Render every source image in a uniformly drawn target camera style.

    Person ids are kept, the source camera index is dropped and replaced by
    the drawn target camera, and records are marked as translated.
    """
    if G is None:
        raise ValidationError("translation needs a generator")
    if source.provenance is Provenance.TRANSLATED or source.domain_index not in (SOURCE, None):
        raise ValidationError("translate_dataset expects an untranslated source-domain dataset")
    rng = np.random.default_rng(seed)
    cams = [sample_random_target_camera(config, rng) for _ in source.records]
    conds = np.stack([encode_condition(c, TARGET, config) for c in cams]) if cams else None
    out = []
    was_training = G.training
    G.eval()
    with torch.no_grad():
        for start in range(0, len(source), batch_size):
            chunk = source.records[start:start + batch_size]
            x = torch.from_numpy(np.stack([r.pixels for r in chunk]))
            y = G(x, torch.from_numpy(conds[start:start + len(chunk)])).clamp(-1, 1).numpy()
            for r, pix, cam in zip(chunk, y, cams[start:start + len(chunk)]):
                out.append(ImageRecord(pix.astype(np.float32), r.person_id, cam, TARGET,
                                       raw_id=r.raw_id, name=r.name))
    G.train(was_training)
    return Dataset(tuple(out), config, Provenance.TRANSLATED)
