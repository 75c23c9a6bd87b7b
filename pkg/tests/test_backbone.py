import math
import unittest

import numpy as np
import torch

from engine import backbone
from engine.backbone import BackboneConfig, NonFiniteInputError, NonFiniteLossError, ShapeError
from engine.gradcheck import check_gradients
from engine.losses import cross_entropy
from engine.params import ParameterStore


def _zero_store(config):
    store = backbone.init_backbone(config, seed=0)
    for name in store:
        store.assign(name, torch.zeros_like(store[name]))
    return store


class BackboneShapeTests(unittest.TestCase):
    def test_layer_channels_follow_encoder_decoder_rule(self):
        config = BackboneConfig(n_classes=4, base_channels=16, encoder_blocks=3, decoder_blocks=3)
        self.assertEqual(config.n_layers, 7)
        self.assertEqual([config.layer_channels(l) for l in range(7)], [16, 32, 64, 32, 16, 16, 4])
        self.assertEqual(config.c_last, 16)
        self.assertEqual(config.head_weight, "conv6.weight")

    def test_first_tap_shape_for_default_config(self):
        config = BackboneConfig(n_classes=4)
        store = backbone.init_backbone(config, seed=1)
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        logits, tapped = backbone.forward(store, x, config, taps={0})
        self.assertEqual(tuple(logits.shape), (1, 4, 64, 64))
        self.assertEqual(list(tapped), [0])
        self.assertEqual(tuple(tapped[0].shape), (1, 16, 32, 32))
        self.assertEqual(config.tap_shape(0, 64), (16, 32, 32))

    def test_output_size_matches_input_for_random_configs(self):
        rng = np.random.default_rng(11)
        for case in range(25):
            blocks = int(rng.integers(1, 4))
            config = BackboneConfig(
                n_classes=int(rng.integers(2, 6)),
                base_channels=int(rng.integers(1, 9)),
                encoder_blocks=blocks,
                decoder_blocks=blocks,
            )
            side = 2**blocks * int(rng.integers(1, 5))
            with self.subTest(case=case, blocks=blocks, side=side):
                store = backbone.init_backbone(config, seed=case)
                x = torch.rand(2, 3, side, side, generator=torch.Generator().manual_seed(case))
                logits, tapped = backbone.forward(store, x, config, taps=range(config.n_layers))
                self.assertEqual(tuple(logits.shape), (2, config.n_classes, side, side))
                for layer, tensor in tapped.items():
                    self.assertEqual(tuple(tensor.shape[1:]), config.tap_shape(layer, side))

    def test_zero_params_give_uniform_softmax(self):
        config = BackboneConfig(n_classes=3, base_channels=4)
        logits, _ = backbone.forward(_zero_store(config), torch.rand(2, 3, 32, 32), config)
        self.assertTrue(torch.equal(logits, torch.zeros_like(logits)))
        probs = torch.softmax(logits, dim=1)
        self.assertTrue(torch.allclose(probs, torch.full_like(probs, 1.0 / 3.0)))

    def test_rejects_bad_inputs(self):
        config = BackboneConfig(n_classes=2, base_channels=2)
        store = backbone.init_backbone(config, seed=0)
        with self.assertRaises(ShapeError):
            backbone.forward(store, torch.zeros(1, 3, 30, 30), config)
        with self.assertRaises(ShapeError):
            backbone.forward(store, torch.zeros(1, 1, 32, 32), config)
        with self.assertRaises(ShapeError):
            backbone.forward(store, torch.zeros(1, 3, 32, 32), config, taps={config.n_layers})
        bad = torch.zeros(1, 3, 32, 32)
        bad[0, 0, 3, 3] = float("nan")
        with self.assertRaises(NonFiniteInputError):
            backbone.forward(store, bad, config)

    def test_config_rejects_unbalanced_blocks(self):
        with self.assertRaises(ValueError):
            BackboneConfig(n_classes=4, encoder_blocks=3, decoder_blocks=2)

    def test_init_is_seeded(self):
        config = BackboneConfig(n_classes=4, base_channels=4)
        a = backbone.init_backbone(config, seed=3)
        b = backbone.init_backbone(config, seed=3)
        c = backbone.init_backbone(config, seed=4)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertNotEqual(a.checksum(), c.checksum())
        self.assertTrue(all(a.is_trainable(name) for name in a))


class GradientTests(unittest.TestCase):
    def test_square_loss_gradient(self):
        store = ParameterStore({"w": torch.tensor(3.0, dtype=torch.float64)})
        loss, grads = backbone.value_and_grad(store, lambda w, _: w["w"] ** 2, None)
        self.assertEqual(float(loss), 9.0)
        self.assertEqual(float(grads["w"]), 6.0)

    def test_frozen_tensors_get_no_gradient_and_unused_get_zero(self):
        store = ParameterStore(
            {"w": torch.ones(2), "unused": torch.ones(3), "frozen": torch.ones(2)},
            trainable={"frozen": False},
        )
        _, grads = backbone.value_and_grad(store, lambda w, _: (w["w"] * w["frozen"]).sum(), None)
        self.assertEqual(sorted(grads), ["unused", "w"])
        self.assertTrue(torch.equal(grads["unused"], torch.zeros(3)))
        self.assertTrue(torch.equal(grads["w"], torch.ones(2)))

    def test_non_finite_loss_names_batch(self):
        store = ParameterStore({"w": torch.ones(1)})
        with self.assertRaises(NonFiniteLossError) as ctx:
            backbone.value_and_grad(store, lambda w, _: (w["w"] / 0.0).sum(), None, batch_id=17)
        self.assertEqual(ctx.exception.batch_id, 17)

    def test_backbone_gradients_match_finite_differences_in_float64(self):
        config = BackboneConfig(n_classes=3, base_channels=4)
        store = backbone.init_backbone(config, seed=5, dtype=torch.float64)
        generator = torch.Generator().manual_seed(9)
        x = torch.rand(2, 3, 32, 32, generator=generator, dtype=torch.float64)
        y = torch.randint(0, 3, (2, 32, 32), generator=generator)

        def loss_fn(weights, relu_masks):
            logits, _ = backbone.forward(weights, x, config, relu_masks=relu_masks)
            return cross_entropy(logits, y)

        report = check_gradients(loss_fn, dict(store), n_coords=100, seed=2)
        self.assertEqual(len(report.checks), 100)
        self.assertEqual(report.failures(1e-5), [])


def _conv_bound(weight):
    """Sum of per-tap spectral norms: an upper bound on a zero-padded conv's L2 gain."""
    taps = weight.permute(2, 3, 0, 1).reshape(-1, weight.shape[0], weight.shape[1])
    return float(torch.linalg.matrix_norm(taps, ord=2).sum())


class LipschitzTests(unittest.TestCase):
    def test_output_change_is_bounded_by_layer_norms(self):
        config = BackboneConfig(n_classes=3, base_channels=4, encoder_blocks=2, decoder_blocks=2)
        store = backbone.init_backbone(config, seed=3, dtype=torch.float64)
        # ReLU and 2x2 average pooling have gain <= 1; bilinear 2x upsampling has gain <= 2.
        bound = _conv_bound(store[config.head_weight])
        for layer in range(config.n_layers - 1):
            bound *= _conv_bound(store[backbone.weight_name(layer)])
            if config.layer_kind(layer) != "encoder":
                bound *= 2.0
        generator = torch.Generator().manual_seed(9)
        x = torch.rand(2, 3, 32, 32, generator=generator, dtype=torch.float64)
        delta = 1e-3 * torch.randn(x.shape, generator=generator, dtype=torch.float64)
        before, _ = backbone.forward(store, x, config)
        after, _ = backbone.forward(store, x + delta, config)
        change = float((after - before).norm())
        self.assertGreater(change, 0.0)
        self.assertLessEqual(change, bound * float(delta.norm()))


class ActivationStatsTests(unittest.TestCase):
    def test_zero_params_give_zero_stats(self):
        config = BackboneConfig(n_classes=2, base_channels=2)
        stats = backbone.activation_stats(_zero_store(config), torch.rand(3, 3, 16, 16), config)
        self.assertEqual(len(stats), config.n_layers)
        for entry in stats:
            self.assertEqual(entry.mean, 0.0)
            self.assertEqual(entry.variance, 0.0)

    def test_stats_are_population_moments(self):
        config = BackboneConfig(n_classes=2, base_channels=2)
        store = backbone.init_backbone(config, seed=1, dtype=torch.float64)
        batch = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        stats = backbone.activation_stats(store, batch, config)
        _, tapped = backbone.forward(store, batch, config, taps={1})
        values = tapped[1].numpy()
        self.assertTrue(math.isclose(stats[1].mean, float(values.mean()), rel_tol=1e-9))
        self.assertTrue(math.isclose(stats[1].variance, float(values.var()), rel_tol=1e-9))
        self.assertTrue(all(entry.variance >= 0 for entry in stats))

    def test_empty_batch_rejected(self):
        config = BackboneConfig(n_classes=2, base_channels=2)
        with self.assertRaises(ValueError):
            backbone.activation_stats(backbone.init_backbone(config, 0), torch.zeros(0, 3, 16, 16), config)


class ParameterStoreTests(unittest.TestCase):
    def test_freeze_and_checksum(self):
        store = ParameterStore({"a": torch.zeros(2), "b": torch.ones(3)})
        before = store.checksum()
        store.freeze(["a"])
        self.assertEqual(store.trainable_names(), ["b"])
        self.assertEqual(store.frozen_names(), ["a"])
        self.assertEqual(store.num_elements(trainable_only=True), 3)
        self.assertEqual(store.checksum(), before)
        store.assign("b", torch.full((3,), 2.0))
        self.assertNotEqual(store.checksum(), before)

    def test_assign_rejects_shape_change_and_add_rejects_duplicates(self):
        store = ParameterStore({"a": torch.zeros(2)})
        with self.assertRaises(ValueError):
            store.assign("a", torch.zeros(3))
        with self.assertRaises(KeyError):
            store.add("a", torch.zeros(2))
