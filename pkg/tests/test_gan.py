import math

import numpy as np
import pytest
import torch

from camstyle_reid.data import SOURCE, TARGET, Dataset, DomainConfig, ImageRecord, Provenance, condition_batch
from camstyle_reid.errors import ConfigError, DataError, DivergenceError, ValidationError
from camstyle_reid.gan import (
    Discriminator,
    GanHyperParams,
    GanLossReport,
    Generator,
    IdentityGenerator,
    adversarial_loss_d,
    adversarial_loss_g,
    build_networks,
    classification_loss_d,
    classification_loss_g,
    discriminator_objective,
    generator_objective,
    gradient_penalty,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    train_stargan,
    translate_dataset,
)
from stubs import AffineGenerator, FnCritic, ShiftGenerator, SmoothCritic

CFG = DomainConfig((6, 8), 4)
mean_critic = FnCritic(lambda x: x.flatten(1).mean(1), classes=14)


def _batch(rng, n=4, shape=(3, 4, 2)):
    return torch.from_numpy(rng.normal(size=(n, *shape)))


# ---------------------------------------------------------------------------
# adversarial terms
# ---------------------------------------------------------------------------

def test_adv_d_constant_critic_is_zero(rng):
    D = FnCritic(lambda x: torch.full((x.shape[0],), 3.7, dtype=x.dtype))
    assert adversarial_loss_d(D, _batch(rng), _batch(rng)).item() == 0.0


def test_adv_d_closed_form():
    real = torch.ones(5, 3, 4, 2)
    fake = -torch.ones(5, 3, 4, 2)
    assert adversarial_loss_d(mean_critic, real, fake).item() == -2.0


def test_adv_d_shape_mismatch(rng):
    with pytest.raises(ValidationError):
        adversarial_loss_d(mean_critic, _batch(rng, 4), _batch(rng, 3))


def test_adv_g_examples(rng):
    zero = FnCritic(lambda x: torch.zeros(x.shape[0], dtype=x.dtype))
    assert adversarial_loss_g(zero, _batch(rng)).item() == 0.0
    assert adversarial_loss_g(mean_critic, torch.ones(3, 3, 4, 2)).item() == -1.0


def test_adv_terms_match_scalar_recomputation(rng):
    D = SmoothCritic(24, 14)
    real, fake = _batch(rng), _batch(rng)
    with torch.no_grad():
        r = [D(real[i:i + 1])[0].item() for i in range(4)]
        f = [D(fake[i:i + 1])[0].item() for i in range(4)]
    assert adversarial_loss_d(D, real, fake).item() == pytest.approx(sum(f) / 4 - sum(r) / 4, abs=1e-6)
    assert adversarial_loss_g(D, fake).item() == pytest.approx(-sum(f) / 4, abs=1e-6)


def test_spatial_realness_map_is_averaged(rng):
    D = FnCritic(lambda x: x[:, 0])  # (N, h, w) map
    x = _batch(rng)
    assert adversarial_loss_g(D, x).item() == pytest.approx(-x[:, 0].mean().item())


# ---------------------------------------------------------------------------
# gradient penalty
# ---------------------------------------------------------------------------

def test_gp_unit_linear_critic_is_zero(rng):
    w = torch.from_numpy(rng.normal(size=24))
    w = w / w.norm()
    D = FnCritic(lambda x: x.flatten(1) @ w)
    gp = gradient_penalty(D, _batch(rng), _batch(rng), torch.Generator().manual_seed(0))
    assert abs(gp.item()) < 1e-6


def test_gp_constant_critic_is_one(rng):
    D = FnCritic(lambda x: 0.0 * x.flatten(1).sum(1) + 2.0)
    gp = gradient_penalty(D, _batch(rng), _batch(rng), torch.Generator().manual_seed(0))
    assert gp.item() == pytest.approx(1.0, abs=1e-12)


def _fd_penalty(D, real, fake, seed, h=1e-6):
    """Penalty with the input gradient taken by central differences."""
    eps = torch.rand((real.shape[0], 1, 1, 1), generator=torch.Generator().manual_seed(seed), dtype=real.dtype)
    x_hat = (eps * real + (1 - eps) * fake).numpy()
    terms = []
    for i in range(x_hat.shape[0]):
        flat = x_hat[i].reshape(-1).copy()
        grad = np.zeros_like(flat)
        for k in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[k] += h
            down[k] -= h
            with torch.no_grad():
                f_up = D(torch.from_numpy(up.reshape(1, *x_hat.shape[1:])))[0].item()
                f_dn = D(torch.from_numpy(down.reshape(1, *x_hat.shape[1:])))[0].item()
            grad[k] = (f_up - f_dn) / (2 * h)
        terms.append((np.linalg.norm(grad) - 1) ** 2)
    return float(np.mean(terms))


def test_gp_matches_finite_differences(rng):
    D = SmoothCritic(24, 14, hidden=6, seed=3)
    real, fake = _batch(rng, 3), _batch(rng, 3)
    analytic = gradient_penalty(D, real, fake, torch.Generator().manual_seed(42)).item()
    oracle = _fd_penalty(D, real, fake, 42)
    assert abs(analytic - oracle) / max(abs(oracle), 1e-12) < 1e-3


def test_gp_nonnegative(rng):
    for seed in range(10):
        D = SmoothCritic(24, 14, seed=seed)
        assert gradient_penalty(D, _batch(rng), _batch(rng)).item() >= 0


# ---------------------------------------------------------------------------
# camera classification
# ---------------------------------------------------------------------------

def test_cls_d_uniform_logits():
    D = FnCritic(lambda x: x.flatten(1).sum(1), classes=14)
    loss = classification_loss_d(D, torch.zeros(4, 3, 4, 2, dtype=torch.float64), torch.tensor([0, 5, 9, 13]))
    assert loss.item() == pytest.approx(math.log(14), abs=1e-12)
    assert math.log(14) == pytest.approx(2.6391, abs=1e-4)


def test_cls_d_confident_logits_tend_to_zero():
    labels = torch.tensor([1, 3])
    losses = []
    for margin in (1.0, 10.0, 100.0):
        D = FnCritic(lambda x: x.sum((1, 2, 3)), lambda x, m=margin: torch.nn.functional.one_hot(labels, 14) * m)
        losses.append(classification_loss_d(D, torch.zeros(2, 3, 4, 2), labels).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-30


def test_cls_d_rejects_bad_label():
    D = FnCritic(lambda x: x.sum((1, 2, 3)), classes=14)
    with pytest.raises(ValidationError):
        classification_loss_d(D, torch.zeros(1, 3, 4, 2), torch.tensor([14]))


def test_cls_d_shift_invariance(rng):
    D = SmoothCritic(24, 14)
    shifted = FnCritic(lambda x: D(x)[0], lambda x: D(x)[1] + 123.4)
    x, y = _batch(rng), torch.tensor([0, 3, 7, 13])
    assert classification_loss_d(D, x, y).item() == pytest.approx(classification_loss_d(shifted, x, y).item(), abs=1e-9)


def test_cls_g_uniform_critic_ignores_generator(rng):
    D = FnCritic(lambda x: x.flatten(1).sum(1), classes=14)
    G = AffineGenerator(16)
    c = torch.from_numpy(condition_batch([0, 7, 13, 2], CFG)).double()
    assert classification_loss_g(D, G, _batch(rng), c).item() == pytest.approx(math.log(14), abs=1e-12)


def test_cls_g_equals_cls_d_on_generated_images(rng):
    D, G = SmoothCritic(24, 14), AffineGenerator(16)
    x = _batch(rng)
    labels = [1, 6, 13, 9]
    c = torch.from_numpy(condition_batch(labels, CFG)).double()
    lhs = classification_loss_g(D, G, x, c).item()
    rhs = classification_loss_d(D, G(x, c), torch.tensor(labels)).item()
    assert lhs == pytest.approx(rhs, abs=1e-6)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def test_rec_identity_generator_is_zero(rng):
    c = torch.from_numpy(condition_batch([0, 1, 2, 3], CFG))
    assert reconstruction_loss(IdentityGenerator(), _batch(rng), c, c).item() == 0.0


def test_rec_constant_offset():
    x = torch.zeros(2, 3, 4, 2, dtype=torch.float64)
    c = torch.from_numpy(condition_batch([0, 9], CFG))
    assert reconstruction_loss(ShiftGenerator(0.25), x, c, c).item() == pytest.approx(0.5, abs=1e-12)


def test_rec_matches_elementwise_recomputation(rng):
    G = AffineGenerator(16, seed=5)
    x = _batch(rng)
    c_trg = torch.from_numpy(condition_batch([8, 2, 13, 0], CFG)).double()
    c_org = torch.from_numpy(condition_batch([1, 10, 3, 6], CFG)).double()
    with torch.no_grad():
        back = G(G(x, c_trg), c_org).numpy()
    oracle = float(np.mean(np.abs(x.numpy() - back)))
    assert reconstruction_loss(G, x, c_trg, c_org).item() == pytest.approx(oracle, abs=1e-6)


# ---------------------------------------------------------------------------
# combined objectives
# ---------------------------------------------------------------------------

def test_objectives_degenerate_to_adversarial_terms():
    hp = GanHyperParams(lambda_c=0, lambda_rec=0, lambda_gp=0)
    rep = GanLossReport(adv_d=1.5, adv_g=-0.5, cls_d=3, cls_g=4, rec=5, gp=6)
    assert discriminator_objective(rep, hp) == 1.5
    assert generator_objective(rep, hp) == -0.5


def test_discriminator_objective_linear_combination():
    hp = GanHyperParams(lambda_c=1, lambda_gp=10)
    rep = GanLossReport(adv_d=1.0, cls_d=2.0, gp=3.0)
    assert discriminator_objective(rep, hp) == 33.0


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        GanHyperParams(lambda_c=-1)
    hp = GanHyperParams()
    hp.lambda_rec = -2.0
    with pytest.raises(ConfigError):
        generator_objective(GanLossReport(), hp)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def test_generator_shape_and_range():
    G = Generator(CFG.condition_dim, channels=4, downsamplings=1, res_blocks=1)
    x = torch.rand(3, 3, 16, 8) * 2 - 1
    c = torch.from_numpy(condition_batch([0, 7, 13], CFG))
    y = G(x, c)
    assert y.shape == x.shape
    assert y.min() >= -1 and y.max() <= 1


def test_full_scale_critic_head_is_4x2():
    D = Discriminator((256, 128), 14, channels=2, layers=6)
    assert D.head_kernel == (4, 2)
    r, logits = D(torch.zeros(2, 3, 256, 128))
    assert r.shape == (2,) and logits.shape == (2, 14)


def test_critic_rejects_indivisible_size():
    with pytest.raises(ConfigError):
        Discriminator((30, 16), 4, layers=3)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _toy_domains(n=24, size=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    cfg = DomainConfig((2, 2), 4)

    def make(domain, shift):
        recs = []
        for i in range(n):
            cam = i % 2
            px = np.clip(rng.normal(shift + 0.3 * cam, 0.2, size=(3, *size)), -1, 1).astype(np.float32)
            recs.append(ImageRecord(px, i % 4 if domain == SOURCE else None, cam, domain))
        return Dataset(tuple(recs), cfg, Provenance.SYNTHETIC)

    return make(SOURCE, -0.3), make(TARGET, 0.3), cfg


def _tiny_hp(**kw):
    base = dict(total_iters=200, batch_size=8, lr=1e-3, g_channels=8, g_downsamplings=1, g_res_blocks=1,
                d_channels=8, d_layers=2)
    base.update(kw)
    return GanHyperParams(**base)


def test_toy_training_reduces_reconstruction():
    src, tgt, cfg = _toy_domains()
    G, log = train_stargan(src, tgt, _tiny_hp(), seed=0, config=cfg)
    assert len(log) == 200 // 5
    assert log[-1].rec < log[0].rec
    for rep in log:
        assert rep.total_g == pytest.approx(rep.adv_g + 1.0 * rep.cls_g + 10.0 * rep.rec, abs=1e-5)
        assert rep.total_d == pytest.approx(rep.adv_d + 1.0 * rep.cls_d + 10.0 * rep.gp, abs=1e-5)


def test_zero_iterations_returns_initial_generator():
    src, tgt, cfg = _toy_domains()
    torch.manual_seed(0)
    fresh, _ = build_networks(cfg, _tiny_hp(), (16, 16))
    G, log = train_stargan(src, tgt, _tiny_hp(total_iters=0), seed=0, config=cfg)
    assert log == []
    for a, b in zip(fresh.state_dict().values(), G.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_repeatable():
    src, tgt, cfg = _toy_domains()
    _, a = train_stargan(src, tgt, _tiny_hp(total_iters=30), seed=3, config=cfg)
    _, b = train_stargan(src, tgt, _tiny_hp(total_iters=30), seed=3, config=cfg)
    assert [r.as_dict() for r in a] == [r.as_dict() for r in b]


def test_empty_dataset_rejected():
    src, tgt, cfg = _toy_domains()
    with pytest.raises(DataError):
        train_stargan(Dataset((), cfg), tgt, _tiny_hp(), seed=0, config=cfg)


def test_divergence_guard():
    src, tgt, cfg = _toy_domains()
    G, D = build_networks(cfg, _tiny_hp(), (16, 16))
    with torch.no_grad():
        D.real_head.weight.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train_stargan(src, tgt, _tiny_hp(total_iters=5), seed=0, config=cfg, networks=(G, D))


def test_periodic_checkpoints(tmp_path):
    src, tgt, cfg = _toy_domains()
    train_stargan(src, tgt, _tiny_hp(total_iters=10, checkpoint_every=5), seed=0, config=cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["gan_000005.pt", "gan_000010.pt"]


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    src, tgt, cfg = _toy_domains()
    hp = _tiny_hp(total_iters=10)
    G, D = build_networks(cfg, hp, (16, 16))
    train_stargan(src, tgt, hp, seed=0, config=cfg, networks=(G, D))
    save_checkpoint(tmp_path / "g.pt", G, D, hp, cfg, 10, (16, 16))
    G2, D2, hp2, cfg2, it, size = load_checkpoint(tmp_path / "g.pt")
    assert (hp2, cfg2, it, size) == (hp, cfg, 10, (16, 16))
    for net, net2 in ((G, G2), (D, D2)):
        for (k, a), (k2, b) in zip(net.state_dict().items(), net2.state_dict().items()):
            assert k == k2 and a.numpy().tobytes() == b.numpy().tobytes()


# ---------------------------------------------------------------------------
# translation
# ---------------------------------------------------------------------------

def test_translate_with_identity_generator():
    src, _, cfg = _toy_domains(n=32)
    out = translate_dataset(IdentityGenerator(), src, cfg, seed=1)
    assert len(out) == 32 and out.provenance is Provenance.TRANSLATED
    for a, b in zip(src, out):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.person_id == b.person_id
        assert 0 <= b.camera_index < cfg.target_cameras and b.domain_index == TARGET
    assert sorted(r.person_id for r in src) == sorted(r.person_id for r in out)


def test_translate_camera_frequencies_uniform():
    cfg = DomainConfig((2, 8), 4)
    recs = tuple(ImageRecord(np.zeros((3, 2, 2), np.float32), i % 4, 0, SOURCE) for i in range(16_000))
    out = translate_dataset(IdentityGenerator(), Dataset(recs, cfg), cfg, seed=9, batch_size=4096)
    counts = np.bincount([r.camera_index for r in out], minlength=8)
    sigma = math.sqrt(16_000 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - 2000) < 5 * sigma)


def test_translate_requires_generator():
    src, _, cfg = _toy_domains()
    with pytest.raises(ValidationError):
        translate_dataset(None, src, cfg, seed=0)
