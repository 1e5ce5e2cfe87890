import unittest

import torch

from fundus_lab.errors import InvalidConfigError, InvalidInputError, InvalidStateError
from fundus_lab.fgcnet import (
    NUM_SKIPS,
    VARIANTS,
    FgcNetConfig,
    InputBlock,
    build_fgcnet,
    discriminate,
    fuse_condition,
    generate_progression,
    make_generator,
    sample_latent,
    variant_config,
)
from fundus_lab.losses import LatentMoments, discriminator_l2, kl_divergence, reconstruction_l1, tlf_fgc_loss


def small_config(**kwargs):
    values = dict(input_size=64, stem_filters=4, latent_dim=8, label_hidden=8, disc_filters=2,
                  disc_fc_sizes=(16, 8, 4), disc_dropout_rates=(0.0, 0.0, 0.0))
    values.update(kwargs)
    return FgcNetConfig(**values)


class TestConfig(unittest.TestCase):

    def test_invalid_values(self):
        with self.assertRaises(InvalidConfigError):
            small_config(input_size=96)
        with self.assertRaises(InvalidConfigError):
            small_config(latent_dim=0)
        with self.assertRaises(InvalidConfigError):
            small_config(eps_variant="gumbel")

    def test_variants(self):
        self.assertEqual(len(VARIANTS), 8)
        config = variant_config(small_config(), "fgc-paper-noskip")
        self.assertEqual((config.eps_variant, config.kl_variant, config.use_skips), ("paper", "paper", False))
        with self.assertRaises(InvalidConfigError):
            variant_config(small_config(), "fgc-7")


class TestEncoder(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.config = small_config()
        self.generator, _ = build_fgcnet(self.config)
        self.generator.eval()
        self.x = torch.rand(2, 3, 64, 64)

    def test_input_block_keeps_size(self):
        with torch.no_grad():
            out = self.generator.input_block(self.x)
        self.assertEqual(tuple(out.shape), (2, 4, 64, 64))

    def test_identity_passthrough_branch(self):
        block = InputBlock(3, 4)
        with torch.no_grad():
            for branch in block.branches:
                branch.weight.zero_()
                branch.bias.zero_()
            block.branches[0].weight[:, :, 0, 0] = torch.eye(4)
            self.assertTrue(torch.allclose(block(self.x), block.stem(self.x)))

    def test_branch_sum_is_order_invariant(self):
        block = InputBlock(3, 4)
        with torch.no_grad():
            forward = block(self.x)
            block.branches = torch.nn.ModuleList(reversed(list(block.branches)))
            self.assertTrue(torch.allclose(forward, block(self.x), atol=1e-6))

    def test_skip_set_halving_schedule(self):
        with torch.no_grad():
            h, skips = self.generator.encode_image(self.x)
        self.assertEqual(len(skips), NUM_SKIPS)
        for i, skip in enumerate(skips):
            self.assertEqual(tuple(skip.shape), (2, 4 * 2 ** i, 64 // 2 ** i, 64 // 2 ** i))
            self.assertTrue(bool(torch.all(torch.isfinite(skip))))
        self.assertEqual(h.shape[-1], 1)

    def test_label_encoder(self):
        with torch.no_grad():
            mu1, sigma1 = self.generator.encode_label(40.0)
            again, _ = self.generator.encode_label(40.0)
            other, _ = self.generator.encode_label(75.0)
        self.assertEqual(tuple(mu1.shape), (1, 8))
        self.assertTrue(bool(torch.all(sigma1 > 0)))
        self.assertTrue(torch.equal(mu1, again))
        self.assertGreater(float((mu1 - other).norm()), 0.0)

    def test_label_age_out_of_range(self):
        with self.assertRaises(InvalidInputError):
            self.generator.encode_label(130.0)
        with self.assertRaises(InvalidInputError):
            self.generator.encode_label(0.5)


class TestLatent(unittest.TestCase):

    def test_fusion_substitution(self):
        mu_l, sigma_m = fuse_condition(torch.tensor([0.5]), torch.tensor([2.0]),
                                       torch.tensor([0.25]), torch.tensor([0.5]))
        self.assertEqual(mu_l.tolist(), [0.75])
        self.assertEqual(sigma_m.tolist(), [1.0])

    def test_fusion_neutral_and_commutative(self):
        mu0, sigma0 = torch.randn(6), torch.rand(6) + 0.1
        mu1, sigma1 = torch.randn(6), torch.rand(6) + 0.1
        mu_l, sigma_m = fuse_condition(mu0, sigma0, torch.zeros(6), torch.ones(6))
        self.assertTrue(torch.equal(mu_l, mu0) and torch.equal(sigma_m, sigma0))
        a = fuse_condition(mu0, sigma0, mu1, sigma1)
        b = fuse_condition(mu1, sigma1, mu0, sigma0)
        self.assertTrue(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]))

    def test_fusion_length_mismatch(self):
        with self.assertRaises(InvalidInputError):
            fuse_condition(torch.zeros(3), torch.ones(3), torch.zeros(4), torch.ones(4))

    def test_injected_epsilon(self):
        z, eps = sample_latent(torch.tensor([0.0]), torch.tensor([1.0]), epsilon=torch.tensor([0.3]))
        self.assertAlmostEqual(float(z[0]), 0.3, places=6)
        self.assertAlmostEqual(float(eps[0]), 0.3, places=6)

    def test_degenerate_sigma(self):
        mu = torch.tensor([1.5, -2.0])
        z, _ = sample_latent(mu, torch.full((2,), 1e-12), seed=0)
        self.assertTrue(torch.allclose(z, mu, atol=1e-4))

    def test_seeded_sampling(self):
        mu, sigma = torch.zeros(16), torch.ones(16)
        a, _ = sample_latent(mu, sigma, seed=5)
        b, _ = sample_latent(mu, sigma, seed=5)
        self.assertTrue(torch.equal(a, b))

    def test_label_noise_variant(self):
        mu_l, sigma_m = torch.zeros(16), torch.full((16,), 2.0)
        mu1, sigma1 = torch.full((16,), -1.0), torch.full((16,), 0.5)
        z, eps = sample_latent(mu_l, sigma_m, mu1, sigma1, variant="paper", seed=1)
        self.assertTrue(bool(torch.all(eps >= 0)))
        self.assertTrue(torch.allclose(z, mu_l + 4.0 * eps))
        with self.assertRaises(InvalidInputError):
            sample_latent(mu_l, sigma_m, variant="paper", seed=1)

    def test_standard_path_reduces_to_plain_vae(self):
        mu0, sigma0 = torch.randn(8), torch.rand(8) + 0.5
        mu_l, sigma_m = fuse_condition(mu0, sigma0, torch.zeros(8), torch.ones(8))
        z, eps = sample_latent(mu_l, sigma_m, seed=11)
        self.assertTrue(torch.allclose(z, mu0 + sigma0 * eps))

    def test_invalid_moments(self):
        with self.assertRaises(InvalidInputError):
            sample_latent(torch.zeros(2), torch.tensor([1.0, -1.0]), seed=0)


class TestDecoder(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.generator, self.discriminator = build_fgcnet(small_config())
        self.generator.eval()
        self.discriminator.eval()
        self.x = torch.rand(2, 3, 64, 64)

    def test_round_trip_shapes(self):
        for size in (64, 128, 512):
            torch.manual_seed(0)
            generator, _ = build_fgcnet(small_config(input_size=size))
            generator.eval()
            x = torch.rand(1, 3, size, size)
            with torch.no_grad():
                out, state = generator(x, torch.tensor([40.0]), generator=make_generator(0))
            self.assertEqual(out.shape, x.shape)
            self.assertTrue(bool(torch.all((out >= 0) & (out <= 1))))
            self.assertTrue(bool(torch.all(state.sigma_m > 0)))

    def test_decode_deterministic(self):
        with torch.no_grad():
            _, skips = self.generator.encode_image(self.x)
            z = torch.randn(2, 8)
            self.assertTrue(torch.equal(self.generator.decode(z, skips), self.generator.decode(z, skips)))

    def test_missing_skip(self):
        with torch.no_grad():
            _, skips = self.generator.encode_image(self.x)
            with self.assertRaises(InvalidStateError):
                self.generator.decode(torch.randn(2, 8), skips[:-1])

    def test_noskip_variant_decodes_without_skips(self):
        generator, _ = build_fgcnet(small_config(use_skips=False))
        generator.eval()
        with torch.no_grad():
            out = generator.decode(torch.randn(1, 8), None)
        self.assertEqual(tuple(out.shape), (1, 3, 64, 64))

    def test_discriminator(self):
        a = discriminate(self.discriminator, self.x)
        b = discriminate(self.discriminator, self.x)
        self.assertEqual(tuple(a.shape), (2,))
        self.assertTrue(torch.equal(a, b))
        with self.assertRaises(InvalidInputError):
            discriminate(self.discriminator, torch.rand(2, 1, 64, 64))

    def test_discriminate_restores_mode(self):
        self.discriminator.train()
        discriminate(self.discriminator, self.x)
        self.assertTrue(self.discriminator.training)
        self.discriminator.eval()
        discriminate(self.discriminator, self.x)
        self.assertFalse(self.discriminator.training)

    def test_discriminator_gradient(self):
        self.discriminator.train()
        loss = discriminator_l2(self.discriminator(self.x), self.discriminator(self.x.flip(-1)),
                                torch.tensor([30.0, 60.0]))
        loss.backward()
        total = sum(float(p.grad.abs().sum()) for p in self.discriminator.parameters())
        self.assertGreater(total, 0.0)

    def test_finite_difference_gradient(self):
        torch.manual_seed(2)
        generator, discriminator = build_fgcnet(small_config())
        generator.double().eval()
        discriminator.double().eval()
        x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
        ages = torch.tensor([30.0, 70.0], dtype=torch.float64)
        eps = torch.randn(2, 8, dtype=torch.float64)

        def objective():
            out, state = generator(x, ages, epsilon=eps)
            kl = kl_divergence(LatentMoments(state.mu_l, state.sigma_m), "standard")
            d_l2 = discriminator_l2(discriminator(x), discriminator(out), ages)
            return tlf_fgc_loss(reconstruction_l1(out, x), d_l2, kl)

        params = [p for p in list(generator.parameters()) + list(discriminator.parameters())]
        objective().backward()
        rng = torch.Generator().manual_seed(3)
        h = 1e-6
        for _ in range(20):
            p = params[int(torch.randint(len(params), (1,), generator=rng))]
            idx = int(torch.randint(p.numel(), (1,), generator=rng))
            flat = p.data.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            with torch.no_grad():
                original = float(flat[idx])
                flat[idx] = original + h
                plus = float(objective())
                flat[idx] = original - h
                minus = float(objective())
                flat[idx] = original
            numeric = (plus - minus) / (2 * h)
            self.assertLessEqual(abs(analytic - numeric), 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7)

    def test_kl_pulls_bottleneck_towards_prior(self):
        torch.manual_seed(4)
        features = torch.randn(16, 256, 1, 1)
        target = torch.full((16, 8), 2.0)

        def train(with_kl):
            torch.manual_seed(5)
            generator, _ = build_fgcnet(small_config())
            heads = (list(generator.image_fc.parameters()) + list(generator.image_mu.parameters())
                     + list(generator.image_log_sigma.parameters()))
            optimizer = torch.optim.Adam(heads, lr=1e-2)
            for _ in range(500):
                optimizer.zero_grad()
                mu0, sigma0 = generator.image_moments(features)
                mu_l, sigma_m = fuse_condition(mu0, sigma0, torch.zeros_like(mu0), torch.ones_like(sigma0))
                loss = torch.mean((mu_l - target) ** 2)
                if with_kl:
                    loss = loss + kl_divergence(LatentMoments(mu_l, sigma_m), "standard")
                loss.backward()
                optimizer.step()
            with torch.no_grad():
                mu0, sigma0 = generator.image_moments(features)
            return float(mu0.abs().mean()), float((sigma0 - 1).abs().mean())

        mu_kl, sigma_kl = train(True)
        mu_free, sigma_free = train(False)
        self.assertLess(mu_kl, mu_free)
        self.assertLess(sigma_kl, sigma_free)


class TestProgression(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.generator, _ = build_fgcnet(small_config())
        self.image = torch.rand(3, 64, 64)

    def test_one_image_per_age(self):
        outputs = generate_progression(self.generator, self.image, list(range(10, 81, 10)), seed=42)
        self.assertEqual(len(outputs), 8)
        for out in outputs:
            self.assertEqual(tuple(out.shape), (3, 64, 64))

    def test_repeated_age_reproduces_image(self):
        a, b = generate_progression(self.generator, self.image, [35.0, 35.0], seed=9)
        self.assertTrue(torch.equal(a, b))

    def test_distinct_ages_differ(self):
        young, old = generate_progression(self.generator, self.image, [10.0, 80.0], seed=9)
        self.assertGreater(float((young - old).abs().mean()), 0.0)

    def test_rerun_identical(self):
        first = generate_progression(self.generator, self.image, [20.0, 60.0], seed=1)
        second = generate_progression(self.generator, self.image, [20.0, 60.0], seed=1)
        for a, b in zip(first, second):
            self.assertTrue(torch.equal(a, b))

    def test_empty_ages(self):
        with self.assertRaises(InvalidInputError):
            generate_progression(self.generator, self.image, [], seed=0)


if __name__ == '__main__':
    unittest.main()
